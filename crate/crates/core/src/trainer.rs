//! Mask training: mini-batches of triplets, top-k forward, straight-through
//! backward, Adam on the logits, early stopping on the dev objective.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingSet, Triplet};
use crate::error::{Error, Result};
use crate::losses::{
    final_loss, overlap_grad, overlap_loss, triplet_loss_a, triplet_loss_b, Aspects, LossConfig,
    TripletLoss,
};
use crate::masker::{BinaryMask, MaskMode, MaskParams};
use crate::numerics::{AdamConfig, AdamState, LayerTensor};

const INIT_SCALE: f64 = 0.01;
const STREAM_INIT_A: u64 = 1;
const STREAM_INIT_B: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: MaskMode,
    /// Dimensions kept per layer (a multiple of the head size in head mode).
    pub k: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: MaskMode::Dim,
            k: 128,
            batch_size: 8,
            adam: AdamConfig::default(),
            max_epochs: 100,
            patience: 5,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.adam.lr)));
        }
        self.loss.validate()
    }
}

/// Uniform logits in `[-0.01, 0.01]`.
pub fn init_logits(len: usize, seed: u64) -> Vec<f64> {
    init_logits_stream(len, seed, 0)
}

fn init_logits_stream(len: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..len)
        .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
        .collect()
}

/// Tracks the best value seen so far (lower is better) and how many epochs
/// have passed without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        match self.best {
            Some((_, best)) if value >= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, value));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Which triplet loss a mask is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AspectRole {
    A,
    B,
}

fn masked(bin: &BinaryMask, x: &LayerTensor) -> Vec<f64> {
    bin.apply(x).expect("shapes checked").into_vec()
}

struct Resolved<'a> {
    ids: [u64; 3],
    x: [&'a LayerTensor; 3],
}

fn resolve<'a>(data: &'a EmbeddingSet, triplets: &[Triplet]) -> Result<Vec<Resolved<'a>>> {
    triplets
        .iter()
        .map(|t| {
            let ids = [t.x0, t.x1, t.x2];
            let x = [
                &data.lookup(t.x0)?.tensor,
                &data.lookup(t.x1)?.tensor,
                &data.lookup(t.x2)?.tensor,
            ];
            Ok(Resolved { ids, x })
        })
        .collect()
}

fn loss_for(
    role: AspectRole,
    bin: &BinaryMask,
    ids: [u64; 3],
    x: [&LayerTensor; 3],
) -> Result<(TripletLoss, [Vec<f64>; 3])> {
    let z = [masked(bin, x[0]), masked(bin, x[1]), masked(bin, x[2])];
    let f = match role {
        AspectRole::A => triplet_loss_a,
        AspectRole::B => triplet_loss_b,
    };
    match f(&z[0], &z[1], &z[2]) {
        Ok(l) => Ok((l, z)),
        Err(Error::ZeroNorm) => {
            let j = z.iter().position(|v| v.iter().all(|&e| e == 0.0)).unwrap_or(0);
            Err(Error::ZeroNormOccurrence {
                occurrence_id: ids[j],
            })
        }
        Err(e) => Err(e),
    }
}

/// Gradient on the binary mask: `Σ_j dL/dz_j ⊙ x_j`.
fn mask_gradient(loss: &TripletLoss, x: [&LayerTensor; 3]) -> Vec<f64> {
    let n = x[0].as_slice().len();
    let mut g = vec![0.0; n];
    for (gz, xj) in loss.grads.iter().zip(x) {
        for ((gi, dz), xv) in g.iter_mut().zip(gz).zip(xj.as_slice()) {
            *gi += dz * xv;
        }
    }
    g
}

/// Triplet loss of one mask on one triplet and its straight-through
/// gradient on the mask logits.
pub fn triplet_logit_gradient(
    mask: &MaskParams,
    role: AspectRole,
    x0: &LayerTensor,
    x1: &LayerTensor,
    x2: &LayerTensor,
) -> Result<(f64, Vec<f64>)> {
    let bin = mask.binarize();
    let x = [x0, x1, x2];
    for t in x {
        if t.dim() != mask.dim() || t.layers() != mask.layers() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {}x{} vs mask {}x{}",
                t.dim(),
                t.layers(),
                mask.dim(),
                mask.layers()
            )));
        }
    }
    let (loss, _) = loss_for(role, &bin, [0, 1, 2], x)?;
    let g = mask_gradient(&loss, x);
    Ok((loss.value, mask.ste_backward(&g)?))
}

struct BatchResult {
    losses_a: Vec<f64>,
    losses_b: Vec<f64>,
    grad_a: Vec<f64>,
    grad_b: Option<Vec<f64>>,
}

/// Forward (and optionally backward) over a slice of triplets. Per-triplet
/// work may run on any worker; reductions happen in index order.
fn run_batch(
    batch: &[Resolved<'_>],
    bin_a: &BinaryMask,
    bin_b: Option<&BinaryMask>,
    want_grad: bool,
) -> Result<BatchResult> {
    let per: Vec<Result<(f64, Option<f64>, Option<Vec<f64>>, Option<Vec<f64>>)>> = batch
        .par_iter()
        .map(|r| {
            let (la, _) = loss_for(AspectRole::A, bin_a, r.ids, r.x)?;
            let ga = want_grad.then(|| mask_gradient(&la, r.x));
            let (lb, gb) = match bin_b {
                Some(bin_b) => {
                    let (lb, _) = loss_for(AspectRole::B, bin_b, r.ids, r.x)?;
                    let gb = want_grad.then(|| mask_gradient(&lb, r.x));
                    (Some(lb.value), gb)
                }
                None => (None, None),
            };
            Ok((la.value, lb, ga, gb))
        })
        .collect();

    let n = bin_a.dim() * bin_a.layers();
    let mut out = BatchResult {
        losses_a: Vec::with_capacity(batch.len()),
        losses_b: Vec::new(),
        grad_a: vec![0.0; if want_grad { n } else { 0 }],
        grad_b: (want_grad && bin_b.is_some()).then(|| vec![0.0; n]),
    };
    let inv = 1.0 / batch.len().max(1) as f64;
    for item in per {
        let (la, lb, ga, gb) = item?;
        out.losses_a.push(la);
        if let Some(lb) = lb {
            out.losses_b.push(lb);
        }
        if let Some(ga) = ga {
            out.grad_a.iter_mut().zip(&ga).for_each(|(s, g)| *s += g * inv);
        }
        if let (Some(acc), Some(gb)) = (out.grad_b.as_mut(), gb) {
            acc.iter_mut().zip(&gb).for_each(|(s, g)| *s += g * inv);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Binary positions that flipped since the previous epoch, summed over
    /// masks.
    pub selected_dims_changed: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tdev_loss\tselected_dims_changed_since_last_epoch\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                r.epoch, r.train_loss, r.dev_loss, r.selected_dims_changed
            );
        }
        s
    }
}

/// Optimizer state saved beside a trained mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub adam_a: AdamState,
    pub adam_b: Option<AdamState>,
}

impl Checkpoint {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mask_a: MaskParams,
    pub mask_b: Option<MaskParams>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

struct Masks {
    a: MaskParams,
    b: Option<MaskParams>,
    adam_a: AdamState,
    adam_b: Option<AdamState>,
}

impl Masks {
    fn binarized(&self) -> (BinaryMask, Option<BinaryMask>) {
        (self.a.binarize(), self.b.as_ref().map(MaskParams::binarize))
    }
}

fn objective(
    triplets: &[Resolved<'_>],
    bins: &(BinaryMask, Option<BinaryMask>),
    loss: &LossConfig,
) -> Result<f64> {
    let r = run_batch(triplets, &bins.0, bins.1.as_ref(), false)?;
    let ovl = match &bins.1 {
        Some(b) => overlap_loss(&bins.0, b)?,
        None => 0.0,
    };
    Ok(final_loss(&r.losses_a, &r.losses_b, ovl, loss))
}

fn flipped(prev: &(BinaryMask, Option<BinaryMask>), cur: &(BinaryMask, Option<BinaryMask>)) -> usize {
    let count = |x: &BinaryMask, y: &BinaryMask| {
        (0..x.layers())
            .map(|l| x.layer(l).iter().zip(y.layer(l)).filter(|(p, q)| p != q).count())
            .sum::<usize>()
    };
    let mut n = count(&prev.0, &cur.0);
    if let (Some(p), Some(c)) = (&prev.1, &cur.1) {
        n += count(p, c);
    }
    n
}

/// Train one mask (or two, for two aspects) and return the snapshot with
/// the lowest dev objective. Epoch 0 is the initialization.
pub fn train_mask(
    train: &[Triplet],
    dev: &[Triplet],
    data: &EmbeddingSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_mask_observed(train, dev, data, cfg, |_, _, _| {})
}

/// Like [`train_mask`], calling `observe(epoch, mask_a, mask_b)` with the
/// current (not best) masks after every epoch, including epoch 0.
pub fn train_mask_observed(
    train: &[Triplet],
    dev: &[Triplet],
    data: &EmbeddingSet,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &MaskParams, Option<&MaskParams>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyData(format!(
            "need train and dev triplets, got {} and {}",
            train.len(),
            dev.len()
        )));
    }
    let two = cfg.loss.aspects == Aspects::Two;
    let (h, l) = (data.dim(), data.layers());
    let shape = MaskParams::zeros(cfg.mode, cfg.k, h, l)?;
    let n_logits = shape.logits().len();
    let make = |stream| MaskParams::new(cfg.mode, cfg.k, h, l, init_logits_stream(n_logits, cfg.seed, stream));
    let mut masks = Masks {
        a: make(STREAM_INIT_A)?,
        b: if two { Some(make(STREAM_INIT_B)?) } else { None },
        adam_a: AdamState::new(n_logits, cfg.adam),
        adam_b: two.then(|| AdamState::new(n_logits, cfg.adam)),
    };

    let train_set = resolve(data, train)?;
    let dev_set = resolve(data, dev)?;

    let (w_triplet, w_overlap) = match cfg.loss.aspects {
        Aspects::One => (1.0, 0.0),
        Aspects::Two => (0.5 * cfg.loss.lambda, 1.0 - cfg.loss.lambda),
    };

    let mut bins = masks.binarized();
    let mut log = TrainLog::default();
    let dev0 = objective(&dev_set, &bins, &cfg.loss)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: objective(&train_set, &bins, &cfg.loss)?,
        dev_loss: dev0,
        selected_dims_changed: 0,
    });
    observe(0, &masks.a, masks.b.as_ref());
    let mut stopper = EarlyStopping::new(cfg.patience);
    stopper.observe(0, dev0);
    let mut best = (masks.a.clone(), masks.b.clone(), masks.adam_a.clone(), masks.adam_b.clone());

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = bins.clone();
        order.shuffle(&mut shuffle_rng);
        let (mut all_a, mut all_b, mut overlap_sum, mut batches) = (Vec::new(), Vec::new(), 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Resolved<'_>> = chunk
                .iter()
                .map(|&i| Resolved {
                    ids: train_set[i].ids,
                    x: train_set[i].x,
                })
                .collect();
            let r = run_batch(&batch, &bins.0, bins.1.as_ref(), true)?;

            let mut grad_a: Vec<f64> = r.grad_a.iter().map(|g| g * w_triplet).collect();
            if let Some(bin_b) = &bins.1 {
                overlap_sum += overlap_loss(&bins.0, bin_b)?;
                for (g, o) in grad_a.iter_mut().zip(overlap_grad(bin_b)) {
                    *g += w_overlap * o;
                }
            }
            let logit_grad = masks.a.ste_backward(&grad_a)?;
            masks.adam_a.step(masks.a.logits_mut(), &logit_grad)?;

            if let (Some(mb), Some(adam_b), Some(gb)) = (masks.b.as_mut(), masks.adam_b.as_mut(), r.grad_b) {
                let mut grad_b: Vec<f64> = gb.iter().map(|g| g * w_triplet).collect();
                for (g, o) in grad_b.iter_mut().zip(overlap_grad(&bins.0)) {
                    *g += w_overlap * o;
                }
                let logit_grad = mb.ste_backward(&grad_b)?;
                adam_b.step(mb.logits_mut(), &logit_grad)?;
            }

            all_a.extend(r.losses_a);
            all_b.extend(r.losses_b);
            batches += 1;
            bins = masks.binarized();
        }
        let train_loss = final_loss(&all_a, &all_b, overlap_sum / batches.max(1) as f64, &cfg.loss);
        let dev_loss = objective(&dev_set, &bins, &cfg.loss)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            selected_dims_changed: flipped(&epoch_start, &bins),
        });
        observe(epoch, &masks.a, masks.b.as_ref());
        match stopper.observe(epoch, dev_loss) {
            Verdict::Improved => {
                best = (masks.a.clone(), masks.b.clone(), masks.adam_a.clone(), masks.adam_b.clone());
            }
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }

    let (best_epoch, best_dev_loss) = stopper.best().expect("epoch 0 observed");
    let (mask_a, mask_b, adam_a, adam_b) = best;
    Ok(TrainOutcome {
        mask_a,
        mask_b,
        best_epoch,
        best_dev_loss,
        log,
        checkpoint: Checkpoint {
            epoch: best_epoch,
            adam_a,
            adam_b,
        },
    })
}

/// Objective of fixed masks on a triplet list.
pub fn evaluate_masks(
    triplets: &[Triplet],
    data: &EmbeddingSet,
    mask_a: &MaskParams,
    mask_b: Option<&MaskParams>,
    loss: &LossConfig,
) -> Result<f64> {
    let set = resolve(data, triplets)?;
    let bins = (mask_a.binarize(), mask_b.map(MaskParams::binarize));
    objective(&set, &bins, loss)
}
