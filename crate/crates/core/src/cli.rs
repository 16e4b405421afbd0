//! Command-line front end. Settings come from an optional flat `key = value`
//! file, overridden by flags; the resolved settings are written next to each
//! command's outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::embedstore::{
    load_dump, read_pairs_tsv, sample_pairs, sample_triplets, save_dump, split, write_pairs_tsv,
    write_triplets_tsv, EmbeddingSet, LabeledPair, LayerwiseEmbedding, Source,
};
use crate::error::{Error, Result};
use crate::losses::{overlap_loss, Aspects, LossConfig};
use crate::masker::{mask_stats, MaskMode, MaskParams};
use crate::numerics::AdamConfig;
use crate::simcls::{accuracy, featurize, train_classifier, AccuracyReport, Classifier, ClassifierConfig, Representation};
use crate::synthgen::{generate, PlantSpec};
use crate::trainer::{train_mask, TrainConfig};

pub const THREADS_ENV: &str = "SENSEMASK_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::BadSpec(_)
        | Error::BadRatio(_)
        | Error::ShapeMismatch(_)
        | Error::LengthMismatch { .. }
        | Error::TooFewLayers(_) => EXIT_USAGE,
        Error::Io { .. }
        | Error::Json { .. }
        | Error::Format(_)
        | Error::Version(_)
        | Error::InvalidMask(_)
        | Error::NonFinite => EXIT_IO,
        Error::NoValidTriplet(_)
        | Error::NoValidPair(_)
        | Error::EmptyData(_)
        | Error::ZeroNorm
        | Error::ZeroNormLayer { .. }
        | Error::ZeroNormOccurrence { .. } => EXIT_DATA,
    }
}

/// Flat string settings. Every key read through [`RunConfig::get`] is
/// recorded with its effective value (defaults included).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if cfg.values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.clone());
        }
        v
    }

    pub fn get<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing required setting {key}")))?;
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
            None => Ok(None),
        }
    }

    /// Fails on any setting that was supplied but never read.
    pub fn reject_unknown(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !self.resolved.contains_key(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown setting(s): {}", unknown.join(", "))))
        }
    }

    /// The resolved settings, one `key = value` per line, sorted by key.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.resolved {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[derive(Debug, Parser)]
#[command(name = "sensemask", version, about = "Train and evaluate binary masks over layer-wise embeddings")]
struct Cli {
    /// Flat key = value settings file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Existing directory receiving the outputs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dump with planted sense dimensions.
    SynthGen(SynthArgs),
    /// Train a mask (or two, for two aspects) on sampled triplets.
    TrainMask(TrainMaskArgs),
    /// Train similarity classifiers and report test accuracy.
    TrainClassifier(TrainClassifierArgs),
    /// Score a saved classifier on labeled pair lists.
    Eval(EvalArgs),
    /// Layer agreement matrix of a mask and overlap with a second mask.
    MaskStats(MaskStatsArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    head_size: Option<usize>,
    /// Plant whole heads and tag the dump as attention outputs.
    #[arg(long)]
    attention: Option<bool>,
    #[arg(long)]
    k_true: Option<usize>,
    #[arg(long)]
    k_true_b: Option<usize>,
    #[arg(long)]
    n_aux: Option<usize>,
    #[arg(long)]
    n_words: Option<usize>,
    #[arg(long)]
    senses_min: Option<usize>,
    #[arg(long)]
    senses_max: Option<usize>,
    #[arg(long)]
    n_occurrences: Option<usize>,
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Embedding dump.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Comma-separated train,dev,test ratios over occurrences.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainMaskArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// dim or head.
    #[arg(long)]
    mode: Option<String>,
    /// Dimensions kept per layer.
    #[arg(long)]
    k: Option<usize>,
    /// Heads kept per layer (head mode).
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    aspects: Option<u8>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_train_triplets: Option<usize>,
    #[arg(long)]
    n_dev_triplets: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Comma-separated list of baseline, layerwise, masked.
    #[arg(long)]
    repr: Option<String>,
    /// Mask JSON for the masked representation.
    #[arg(long, value_name = "PATH")]
    mask: Option<PathBuf>,
    #[arg(long)]
    n_train_pairs: Option<usize>,
    #[arg(long)]
    n_dev_pairs: Option<usize>,
    /// Pairs per test set.
    #[arg(long)]
    n_test_pairs: Option<usize>,
    #[arg(long)]
    test_sets: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    classifier: Option<PathBuf>,
    #[arg(long)]
    repr: Option<String>,
    #[arg(long, value_name = "PATH")]
    mask: Option<PathBuf>,
    /// Comma-separated labeled pair TSV files, one test set each.
    #[arg(long, value_name = "PATHS")]
    pairs: Option<String>,
}

#[derive(Debug, Args)]
struct MaskStatsArgs {
    mask_a: Option<PathBuf>,
    mask_b: Option<PathBuf>,
}

fn put<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        cfg.set(key, v.to_string());
    }
}

fn put_path(cfg: &mut RunConfig, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        cfg.set(key, v.display().to_string());
    }
}

impl SplitArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        put_path(cfg, "data", &self.data);
        put(cfg, "split", &self.split);
    }
}

impl OptimArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        put(cfg, "batch_size", &self.batch_size);
        put(cfg, "lr", &self.lr);
        put(cfg, "max_epochs", &self.max_epochs);
        put(cfg, "patience", &self.patience);
    }
}

fn parse_ratios(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("split: cannot parse {p:?}")))
        })
        .collect()
}

/// Distinct deterministic seeds for the sampling stages of one run.
fn sub_seed(seed: u64, stage: u64) -> u64 {
    seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn out_dir(cfg: &mut RunConfig) -> Result<PathBuf> {
    let out: PathBuf = cfg.require("out")?;
    if !out.is_dir() {
        return Err(Error::io(
            &out,
            io::Error::new(io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn finish(cfg: &RunConfig, out: &Path, command: &str) -> Result<()> {
    write_text(&out.join(format!("{command}.resolved.conf")), &cfg.resolved_text())
}

fn split_records<'a>(cfg: &mut RunConfig, data: &'a EmbeddingSet, seed: u64) -> Result<Vec<Vec<&'a LayerwiseEmbedding>>> {
    let ratios = parse_ratios(&cfg.get("split", "0.6,0.2,0.2".to_string())?)?;
    if ratios.len() != 3 {
        return Err(Error::Config("split needs three ratios: train,dev,test".into()));
    }
    split(&data.refs(), &ratios, sub_seed(seed, 1))
}

fn adam(cfg: &mut RunConfig) -> Result<AdamConfig> {
    Ok(AdamConfig::with_lr(cfg.get("lr", AdamConfig::default().lr)?))
}

fn cmd_synth_gen(cfg: &mut RunConfig) -> Result<()> {
    let d = PlantSpec::default();
    let spec = PlantSpec {
        dim: cfg.get("dim", d.dim)?,
        layers: cfg.get("layers", d.layers)?,
        head_size: cfg.get("head_size", d.head_size)?,
        attention: cfg.get("attention", d.attention)?,
        k_true: cfg.get("k_true", d.k_true)?,
        k_true_b: cfg.get("k_true_b", d.k_true_b)?,
        n_aux: cfg.get("n_aux", d.n_aux)?,
        n_words: cfg.get("n_words", d.n_words)?,
        senses_min: cfg.get("senses_min", d.senses_min)?,
        senses_max: cfg.get("senses_max", d.senses_max)?,
        n_occurrences: cfg.get("n_occurrences", d.n_occurrences)?,
        signal_strength: cfg.get("signal_strength", d.signal_strength)?,
        noise_sigma: cfg.get("noise_sigma", d.noise_sigma)?,
        seed: cfg.get("seed", d.seed)?,
    };
    let out = out_dir(cfg)?;
    cfg.reject_unknown()?;
    let synth = generate(&spec)?;
    save_dump(&synth.data, out.join("embeddings.lweb"))?;
    synth.truth.save_json(out.join("truth.json"))?;
    println!(
        "generated {} occurrences ({}x{}) into {}",
        synth.data.len(),
        spec.dim,
        spec.layers,
        out.display()
    );
    finish(cfg, &out, "synth-gen")
}

fn mask_mode(cfg: &mut RunConfig, data: &EmbeddingSet) -> Result<(MaskMode, usize)> {
    let mode: String = cfg.get("mode", "dim".to_string())?;
    match mode.as_str() {
        "dim" => {
            let k = cfg.get("k", 128usize)?;
            Ok((MaskMode::Dim, k))
        }
        "head" => {
            let a = match data.source() {
                Source::Attention { head_size } => head_size,
                Source::Hidden => {
                    return Err(Error::Config("head mode needs an attention-output dump".into()))
                }
            };
            let heads: Option<usize> = cfg.optional("heads")?;
            let k: Option<usize> = cfg.optional("k")?;
            let k = match (heads, k) {
                (Some(h), Some(k)) if h * a != k => {
                    return Err(Error::Config(format!("heads={h} and k={k} disagree for head size {a}")))
                }
                (_, Some(k)) => k,
                (Some(h), None) => h * a,
                (None, None) => cfg.get("heads", 6usize)? * a,
            };
            if k % a != 0 {
                return Err(Error::Config(format!("k={k} is not a multiple of head size {a}")));
            }
            Ok((MaskMode::Head { head_size: a }, k))
        }
        other => Err(Error::Config(format!("mode must be dim or head, got {other:?}"))),
    }
}

fn cmd_train_mask(cfg: &mut RunConfig) -> Result<()> {
    let data_path: PathBuf = cfg.require("data")?;
    let seed = cfg.get("seed", 0u64)?;
    let out = out_dir(cfg)?;
    let data = load_dump(&data_path)?;
    let (mode, k) = mask_mode(cfg, &data)?;
    MaskParams::zeros(mode, k, data.dim(), data.layers()).map_err(|e| Error::Config(e.to_string()))?;
    let aspects = match cfg.get("aspects", 1u8)? {
        1 => Aspects::One,
        2 => Aspects::Two,
        n => return Err(Error::Config(format!("aspects must be 1 or 2, got {n}"))),
    };
    let d = TrainConfig::default();
    let tc = TrainConfig {
        mode,
        k,
        batch_size: cfg.get("batch_size", d.batch_size)?,
        adam: adam(cfg)?,
        max_epochs: cfg.get("max_epochs", d.max_epochs)?,
        patience: cfg.get("patience", d.patience)?,
        seed,
        loss: LossConfig {
            lambda: cfg.get("lambda", d.loss.lambda)?,
            aspects,
        },
    };
    tc.validate()?;
    let n_train = cfg.get("n_train_triplets", 20_000usize)?;
    let n_dev = cfg.get("n_dev_triplets", 2_000usize)?;
    let parts = split_records(cfg, &data, seed)?;
    cfg.reject_unknown()?;

    let use_b = aspects == Aspects::Two;
    if use_b && !data.has_aux_labels() {
        return Err(Error::NoValidTriplet(
            "two aspects need aux labels on every occurrence, the dump has none".into(),
        ));
    }
    let train = sample_triplets(&parts[0], n_train, sub_seed(seed, 2), use_b)?;
    let dev = sample_triplets(&parts[1], n_dev, sub_seed(seed, 3), use_b)?;
    write_triplets_tsv(out.join("triplets_train.tsv"), &train)?;
    write_triplets_tsv(out.join("triplets_dev.tsv"), &dev)?;

    let outcome = train_mask(&train, &dev, &data, &tc)?;
    match &outcome.mask_b {
        None => outcome.mask_a.save_json(out.join("mask.json"))?,
        Some(b) => {
            outcome.mask_a.save_json(out.join("mask_a.json"))?;
            b.save_json(out.join("mask_b.json"))?;
        }
    }
    write_text(&out.join("train_log.tsv"), &outcome.log.to_tsv())?;
    outcome.checkpoint.save_json(out.join("adam_state.json"))?;
    println!(
        "best epoch {} of {}, dev loss {:.6}",
        outcome.best_epoch,
        outcome.log.epochs.len() - 1,
        outcome.best_dev_loss
    );
    if let Some(b) = &outcome.mask_b {
        println!("mask overlap {}", overlap_loss(&outcome.mask_a.binarize(), &b.binarize())?);
    }
    finish(cfg, &out, "train-mask")
}

fn parse_reprs(cfg: &mut RunConfig, data: &EmbeddingSet, default: &str) -> Result<Vec<Representation>> {
    let list: String = cfg.get("repr", default.to_string())?;
    let names: Vec<&str> = list.split(',').map(str::trim).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for name in names {
        if !seen.insert(name.to_string()) {
            return Err(Error::Config(format!("repr {name} listed twice")));
        }
        out.push(match name {
            "baseline" => Representation::Baseline,
            "layerwise" => Representation::Layerwise,
            "masked" => {
                let path: PathBuf = cfg
                    .optional("mask")?
                    .ok_or_else(|| Error::Config("repr masked needs --mask".into()))?;
                let mask = MaskParams::load_json(&path)?;
                if mask.dim() != data.dim() || mask.layers() != data.layers() {
                    return Err(Error::ShapeMismatch(format!(
                        "mask is {}x{}, data is {}x{}",
                        mask.dim(),
                        mask.layers(),
                        data.dim(),
                        data.layers()
                    )));
                }
                Representation::Masked(mask.binarize())
            }
            other => {
                return Err(Error::Config(format!(
                    "repr must be baseline, layerwise or masked, got {other:?}"
                )))
            }
        });
    }
    Ok(out)
}

fn cmd_train_classifier(cfg: &mut RunConfig) -> Result<()> {
    let data_path: PathBuf = cfg.require("data")?;
    let seed = cfg.get("seed", 0u64)?;
    let out = out_dir(cfg)?;
    let data = load_dump(&data_path)?;
    let reprs = parse_reprs(cfg, &data, "layerwise")?;
    let d = ClassifierConfig::default();
    let cc = ClassifierConfig {
        batch_size: cfg.get("batch_size", d.batch_size)?,
        adam: adam(cfg)?,
        max_epochs: cfg.get("max_epochs", d.max_epochs)?,
        patience: cfg.get("patience", d.patience)?,
        seed,
    };
    let n_train = cfg.get("n_train_pairs", 2_000usize)?;
    let n_dev = cfg.get("n_dev_pairs", 1_000usize)?;
    let n_test = cfg.get("n_test_pairs", 600usize)?;
    let test_sets = cfg.get("test_sets", 3usize)?;
    if test_sets == 0 {
        return Err(Error::Config("test_sets must be at least 1".into()));
    }
    let parts = split_records(cfg, &data, seed)?;
    cfg.reject_unknown()?;

    let train = sample_pairs(&parts[0], n_train, sub_seed(seed, 4))?;
    let dev = sample_pairs(&parts[1], n_dev, sub_seed(seed, 5))?;
    let test_pool = sample_pairs(&parts[2], n_test * test_sets, sub_seed(seed, 6))?;
    let per = test_pool.len() / test_sets;
    if per == 0 {
        return Err(Error::NoValidPair("test split too small for the requested test sets".into()));
    }
    let tests: Vec<(String, &[LabeledPair])> = (0..test_sets)
        .map(|i| (format!("test{}", i + 1), &test_pool[i * per..(i + 1) * per]))
        .collect();
    write_pairs_tsv(out.join("pairs_train.tsv"), &train)?;
    write_pairs_tsv(out.join("pairs_dev.tsv"), &dev)?;
    for (name, pairs) in &tests {
        write_pairs_tsv(out.join(format!("pairs_{name}.tsv")), pairs)?;
    }

    let mut report = AccuracyReport::default();
    for repr in &reprs {
        let trained = train_classifier(
            &featurize(&train, &data, repr)?,
            &featurize(&dev, &data, repr)?,
            &cc,
        )?;
        trained
            .classifier
            .save_json(out.join(format!("classifier_{}.json", repr.name())))?;
        report.push(repr.name(), "dev", dev.len(), trained.dev_accuracy);
        for (name, pairs) in &tests {
            let acc = accuracy(&trained.classifier, &featurize(pairs, &data, repr)?)?;
            report.push(repr.name(), name, pairs.len(), acc);
        }
    }
    report.save_tsv(out.join("report.tsv"))?;
    print!("{}", report.to_tsv());
    finish(cfg, &out, "train-classifier")
}

fn cmd_eval(cfg: &mut RunConfig) -> Result<()> {
    let data_path: PathBuf = cfg.require("data")?;
    let cls_path: PathBuf = cfg.require("classifier")?;
    let pairs: String = cfg.require("pairs")?;
    let out = out_dir(cfg)?;
    let data = load_dump(&data_path)?;
    let reprs = parse_reprs(cfg, &data, "layerwise")?;
    if reprs.len() != 1 {
        return Err(Error::Config("eval scores one repr at a time".into()));
    }
    let repr = &reprs[0];
    let _ = cfg.get("seed", 0u64)?;
    cfg.reject_unknown()?;

    let cls = Classifier::load_json(&cls_path)?;
    let mut report = AccuracyReport::default();
    for p in pairs.split(',').map(str::trim) {
        let path = PathBuf::from(p);
        let list = read_pairs_tsv(&path)?;
        let examples = featurize(&list, &data, repr)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.to_string());
        report.push(repr.name(), &name, list.len(), accuracy(&cls, &examples)?);
    }
    report.save_tsv(out.join("eval_report.tsv"))?;
    print!("{}", report.to_tsv());
    finish(cfg, &out, "eval")
}

fn cmd_mask_stats(cfg: &mut RunConfig) -> Result<()> {
    let a_path: PathBuf = cfg.require("mask_a")?;
    let b_path: Option<PathBuf> = cfg.optional("mask_b")?;
    let out = out_dir(cfg)?;
    let _ = cfg.get("seed", 0u64)?;
    cfg.reject_unknown()?;
    let a = MaskParams::load_json(&a_path)?.binarize();
    let b = b_path.map(MaskParams::load_json).transpose()?.map(|m| m.binarize());
    let stats = mask_stats(&a, b.as_ref())?;

    let l = stats.agreement.len();
    let mut s = String::from("layer");
    for j in 0..l {
        let _ = write!(s, "\t{}", j + 1);
    }
    s.push('\n');
    for (i, row) in stats.agreement.iter().enumerate() {
        let _ = write!(s, "{}", i + 1);
        for v in row {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    write_text(&out.join("agreement.tsv"), &s)?;
    print!("{s}");
    if let (Some(total), Some(mean)) = (stats.overlap_total, stats.overlap_mean()) {
        let text = format!("overlap_total\toverlap_mean\n{total}\t{mean}\n");
        write_text(&out.join("overlap.tsv"), &text)?;
        print!("{text}");
    }
    finish(cfg, &out, "mask-stats")
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    put(&mut cfg, "seed", &cli.seed);
    put_path(&mut cfg, "out", &cli.out);
    match &cli.command {
        Command::SynthGen(a) => {
            put(&mut cfg, "dim", &a.dim);
            put(&mut cfg, "layers", &a.layers);
            put(&mut cfg, "head_size", &a.head_size);
            put(&mut cfg, "attention", &a.attention);
            put(&mut cfg, "k_true", &a.k_true);
            put(&mut cfg, "k_true_b", &a.k_true_b);
            put(&mut cfg, "n_aux", &a.n_aux);
            put(&mut cfg, "n_words", &a.n_words);
            put(&mut cfg, "senses_min", &a.senses_min);
            put(&mut cfg, "senses_max", &a.senses_max);
            put(&mut cfg, "n_occurrences", &a.n_occurrences);
            put(&mut cfg, "signal_strength", &a.signal_strength);
            put(&mut cfg, "noise_sigma", &a.noise_sigma);
            cmd_synth_gen(&mut cfg)
        }
        Command::TrainMask(a) => {
            a.split.apply(&mut cfg);
            a.optim.apply(&mut cfg);
            put(&mut cfg, "mode", &a.mode);
            put(&mut cfg, "k", &a.k);
            put(&mut cfg, "heads", &a.heads);
            put(&mut cfg, "aspects", &a.aspects);
            put(&mut cfg, "lambda", &a.lambda);
            put(&mut cfg, "n_train_triplets", &a.n_train_triplets);
            put(&mut cfg, "n_dev_triplets", &a.n_dev_triplets);
            cmd_train_mask(&mut cfg)
        }
        Command::TrainClassifier(a) => {
            a.split.apply(&mut cfg);
            a.optim.apply(&mut cfg);
            put(&mut cfg, "repr", &a.repr);
            put_path(&mut cfg, "mask", &a.mask);
            put(&mut cfg, "n_train_pairs", &a.n_train_pairs);
            put(&mut cfg, "n_dev_pairs", &a.n_dev_pairs);
            put(&mut cfg, "n_test_pairs", &a.n_test_pairs);
            put(&mut cfg, "test_sets", &a.test_sets);
            cmd_train_classifier(&mut cfg)
        }
        Command::Eval(a) => {
            put_path(&mut cfg, "data", &a.data);
            put_path(&mut cfg, "classifier", &a.classifier);
            put(&mut cfg, "repr", &a.repr);
            put_path(&mut cfg, "mask", &a.mask);
            put(&mut cfg, "pairs", &a.pairs);
            cmd_eval(&mut cfg)
        }
        Command::MaskStats(a) => {
            put_path(&mut cfg, "mask_a", &a.mask_a);
            put_path(&mut cfg, "mask_b", &a.mask_b);
            cmd_mask_stats(&mut cfg)
        }
    }
}

/// Parse arguments, run the command and return the process exit status.
/// Errors are reported on stderr as a single `error[Class]: message` line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    EXIT_USAGE
                } else {
                    EXIT_OK
                };
            }
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[UsageError]: {first}");
            return EXIT_USAGE;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let mut c = RunConfig::parse("# comment\n\nk = 8\nlr=0.5\n  mode =  head  \n").unwrap();
        assert_eq!(c.get("k", 1usize).unwrap(), 8);
        assert_eq!(c.get("lr", 0.0f64).unwrap(), 0.5);
        assert_eq!(c.get("mode", String::new()).unwrap(), "head");
        assert_eq!(c.get("patience", 5usize).unwrap(), 5);
        assert_eq!(c.resolved_text(), "k = 8\nlr = 0.5\nmode = head\npatience = 5\n");
        assert!(matches!(RunConfig::parse("k 8"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("k=1\nk=2"), Err(Error::Config(_))));
        let mut bad = RunConfig::parse("k = eight").unwrap();
        assert!(matches!(bad.get("k", 1usize), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_and_unknown_keys_are_rejected() {
        let mut c = RunConfig::parse("k = 8\ntypo = 1\n").unwrap();
        c.set("k", 16);
        assert_eq!(c.get("k", 1usize).unwrap(), 16);
        assert!(matches!(c.reject_unknown(), Err(Error::Config(m)) if m.contains("typo")));
    }

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 3);
        assert_eq!(exit_code(&Error::NoValidTriplet("x".into())), 4);
        assert_eq!(exit_code(&Error::ZeroNormOccurrence { occurrence_id: 3 }), 4);
    }
}
