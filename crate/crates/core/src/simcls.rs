//! Layer-wise cosine similarity between two occurrences, the summed
//! last-four-layers baseline, and a logistic classifier over similarity
//! vectors deciding whether two occurrences share a sense.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingSet, LabeledPair};
use crate::error::{Error, Result};
use crate::masker::BinaryMask;
use crate::numerics::{cosine, sigmoid, AdamConfig, AdamState, LayerTensor};
use crate::trainer::{EarlyStopping, Verdict};

/// Layers summed by the baseline representation.
pub const BASELINE_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    sims: Vec<f64>,
}

impl SimilarityVector {
    pub fn new(sims: Vec<f64>) -> Result<Self> {
        if sims.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { sims })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.sims
    }

    pub fn len(&self) -> usize {
        self.sims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sims.is_empty()
    }
}

fn check_shapes(t1: &LayerTensor, t2: &LayerTensor) -> Result<()> {
    if !t1.same_shape(t2) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            t1.dim(),
            t1.layers(),
            t2.dim(),
            t2.layers()
        )));
    }
    Ok(())
}

/// Cosine similarity of each layer's column.
pub fn layerwise_sim(t1: &LayerTensor, t2: &LayerTensor) -> Result<SimilarityVector> {
    check_shapes(t1, t2)?;
    let sims = (0..t1.layers())
        .map(|j| {
            cosine(t1.layer(j), t2.layer(j)).map_err(|e| match e {
                Error::ZeroNorm => Error::ZeroNormLayer { layer: j },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SimilarityVector::new(sims)
}

/// Elementwise sum of the last four layers.
pub fn baseline_repr(t: &LayerTensor) -> Result<Vec<f64>> {
    let l = t.layers();
    if l < BASELINE_LAYERS {
        return Err(Error::TooFewLayers(l));
    }
    let mut out = vec![0.0; t.dim()];
    for j in l - BASELINE_LAYERS..l {
        out.iter_mut().zip(t.layer(j)).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// How a pair of occurrences is turned into classifier features.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    /// One feature: cosine of the summed last four layers.
    Baseline,
    /// One cosine per layer.
    Layerwise,
    /// One cosine per layer over the dimensions a mask keeps.
    Masked(BinaryMask),
}

impl Representation {
    pub fn name(&self) -> &'static str {
        match self {
            Representation::Baseline => "baseline",
            Representation::Layerwise => "layerwise",
            Representation::Masked(_) => "masked",
        }
    }

    /// Feature vector for one pair.
    pub fn features(&self, t1: &LayerTensor, t2: &LayerTensor) -> Result<Vec<f64>> {
        match self {
            Representation::Baseline => {
                check_shapes(t1, t2)?;
                Ok(vec![cosine(&baseline_repr(t1)?, &baseline_repr(t2)?)?])
            }
            Representation::Layerwise => Ok(layerwise_sim(t1, t2)?.sims),
            Representation::Masked(mask) => {
                let c1 = mask.compact(t1)?;
                let c2 = mask.compact(t2)?;
                Ok(layerwise_sim(&c1, &c2)?.sims)
            }
        }
    }
}

/// A featurized pair with its gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: bool,
}

/// Featurize labeled pairs. Zero norms are reported with the offending
/// occurrence where it can be identified.
pub fn featurize(pairs: &[LabeledPair], data: &EmbeddingSet, repr: &Representation) -> Result<Vec<Example>> {
    pairs
        .par_iter()
        .map(|p| {
            let a = data.lookup(p.x1)?;
            let b = data.lookup(p.x2)?;
            let features = repr.features(&a.tensor, &b.tensor).map_err(|e| match e {
                Error::ZeroNorm => {
                    let id = match repr {
                        Representation::Baseline if baseline_repr(&a.tensor).is_ok_and(|v| v.iter().all(|x| *x == 0.0)) => p.x1,
                        Representation::Baseline => p.x2,
                        _ => p.x1,
                    };
                    Error::ZeroNormOccurrence { occurrence_id: id }
                }
                other => other,
            })?;
            Ok(Example {
                features,
                label: p.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Classifier {
    pub fn zeros(len: usize) -> Self {
        Self {
            weights: vec![0.0; len],
            bias: 0.0,
        }
    }

    pub fn logit(&self, sims: &[f64]) -> Result<f64> {
        if sims.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                expected: self.weights.len(),
                actual: sims.len(),
            });
        }
        Ok(self.weights.iter().zip(sims).map(|(w, s)| w * s).sum::<f64>() + self.bias)
    }

    /// Probability that the two occurrences share a sense.
    pub fn classify(&self, sims: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(sims)?))
    }

    pub fn decide(&self, sims: &[f64]) -> Result<bool> {
        Ok(self.classify(sims)? >= 0.5)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Classifier = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if c.weights.iter().chain([&c.bias]).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(c)
    }
}

/// Fraction of examples decided correctly.
pub fn accuracy(cls: &Classifier, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyData("no examples to score".into()));
    }
    let mut correct = 0usize;
    for e in examples {
        if cls.decide(&e.features)? == e.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            adam: AdamConfig::default(),
            max_epochs: 100,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
}

/// Logistic regression on binary cross-entropy with Adam; keeps the
/// parameters with the best dev accuracy (epoch 0 is the zero
/// initialization).
pub fn train_classifier(train: &[Example], dev: &[Example], cfg: &ClassifierConfig) -> Result<TrainedClassifier> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyData(format!(
            "need train and dev pairs, got {} and {}",
            train.len(),
            dev.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(Error::Config("batch_size and patience must be at least 1".into()));
    }
    let width = train[0].features.len();
    if let Some(bad) = train.iter().chain(dev).find(|e| e.features.len() != width) {
        return Err(Error::LengthMismatch {
            expected: width,
            actual: bad.features.len(),
        });
    }

    // weights followed by the bias
    let mut params = vec![0.0; width + 1];
    let mut adam = AdamState::new(width + 1, cfg.adam);
    let unpack = |p: &[f64]| Classifier {
        weights: p[..width].to_vec(),
        bias: p[width],
    };

    let mut best = unpack(&params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    stopper.observe(0, -accuracy(&best, dev)?);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; width + 1];
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let cls = unpack(&params);
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let e = &train[i];
                let residual = (cls.classify(&e.features)? - if e.label { 1.0 } else { 0.0 }) * inv;
                for (g, s) in grad.iter_mut().zip(&e.features) {
                    *g += residual * s;
                }
                grad[width] += residual;
            }
            adam.step(&mut params, &grad)?;
        }
        let current = unpack(&params);
        match stopper.observe(epoch, -accuracy(&current, dev)?) {
            Verdict::Improved => best = current,
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let (best_epoch, neg_acc) = stopper.best().expect("epoch 0 observed");
    Ok(TrainedClassifier {
        classifier: best,
        best_epoch,
        dev_accuracy: -neg_acc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub repr: String,
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
}

/// Accuracy rows grouped by representation, with a mean ± std summary per
/// representation when it was scored on more than one test split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyReport {
    pub rows: Vec<ReportRow>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl AccuracyReport {
    pub fn push(&mut self, repr: &str, split: &str, n: usize, accuracy: f64) {
        self.rows.push(ReportRow {
            repr: repr.to_string(),
            split: split.to_string(),
            n,
            accuracy,
        });
    }

    fn reprs(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.repr.as_str()) {
                seen.push(&r.repr);
            }
        }
        seen
    }

    /// Test-split accuracies of one representation (splits named `test*`).
    pub fn test_accuracies(&self, repr: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.repr == repr && r.split.starts_with("test"))
            .map(|r| r.accuracy)
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("repr\tsplit\tn\taccuracy\n");
        for repr in self.reprs() {
            for r in self.rows.iter().filter(|r| r.repr == repr) {
                let _ = writeln!(s, "{}\t{}\t{}\t{:.6}", r.repr, r.split, r.n, r.accuracy);
            }
            let tests = self.test_accuracies(repr);
            if tests.len() > 1 {
                let (m, sd) = mean_std(&tests);
                let _ = writeln!(s, "# {repr} mean ± std over {} test splits: {m:.6} ± {sd:.6}", tests.len());
            }
        }
        s
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const REPORTED_WEIGHTS: [f64; 12] = [
        -2.914, -0.724, 1.403, 2.640, 3.660, 2.565, -3.712, -1.123, 0.081, 1.649, 0.518, 5.169,
    ];

    fn tensor(rng: &mut ChaCha8Rng, h: usize, l: usize) -> LayerTensor {
        LayerTensor::from_fn(h, l, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn layerwise_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = tensor(&mut rng, 6, 3);
        let same = layerwise_sim(&t, &t).unwrap();
        assert!(same.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let a = LayerTensor::from_fn(2, 3, |d, _| if d == 0 { 1.0 } else { 0.0 });
        let b = LayerTensor::from_fn(2, 3, |d, _| if d == 1 { 2.0 } else { 0.0 });
        assert_eq!(layerwise_sim(&a, &b).unwrap().as_slice(), &[0.0; 3]);

        for _ in 0..20 {
            let (x, y) = (tensor(&mut rng, 5, 4), tensor(&mut rng, 5, 4));
            let s = layerwise_sim(&x, &y).unwrap();
            for j in 0..4 {
                assert_eq!(s.as_slice()[j], cosine(x.layer(j), y.layer(j)).unwrap());
            }
        }
    }

    #[test]
    fn zero_column_names_the_layer() {
        let a = LayerTensor::from_fn(3, 4, |_, l| if l == 2 { 0.0 } else { 1.0 });
        let b = LayerTensor::from_fn(3, 4, |_, _| 1.0);
        assert!(matches!(layerwise_sim(&a, &b), Err(Error::ZeroNormLayer { layer: 2 })));
        assert!(matches!(
            layerwise_sim(&a, &LayerTensor::zeros(3, 5)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn baseline_fixtures() {
        let ones = LayerTensor::from_fn(5, 12, |_, _| 1.0);
        assert_eq!(baseline_repr(&ones).unwrap(), vec![4.0; 5]);
        let early = LayerTensor::from_fn(5, 12, |d, l| if l < 8 { d as f64 + 1.0 } else { 0.0 });
        assert_eq!(baseline_repr(&early).unwrap(), vec![0.0; 5]);
        assert!(matches!(baseline_repr(&LayerTensor::zeros(5, 3)), Err(Error::TooFewLayers(3))));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = (tensor(&mut rng, 5, 6), tensor(&mut rng, 5, 6));
        let f = Representation::Baseline.features(&x, &y).unwrap();
        assert_eq!(f, vec![cosine(&baseline_repr(&x).unwrap(), &baseline_repr(&y).unwrap()).unwrap()]);
    }

    #[test]
    fn masked_features_equal_zero_padded_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (x, y) = (tensor(&mut rng, 10, 3), tensor(&mut rng, 10, 3));
            let mask = BinaryMask::from_fn(10, 3, |d, l| (d * 7 + l * 3) % 10 < 4);
            let compact = Representation::Masked(mask.clone()).features(&x, &y).unwrap();
            let padded = layerwise_sim(&mask.apply(&x).unwrap(), &mask.apply(&y).unwrap()).unwrap();
            for (c, p) in compact.iter().zip(padded.as_slice()) {
                assert!((c - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reported_weights_fixture() {
        // exact decimal sum: 2303 / 250
        let sum: f64 = REPORTED_WEIGHTS.iter().sum();
        assert!((sum - 9.212).abs() < 1e-9);
        let cls = Classifier {
            weights: REPORTED_WEIGHTS.to_vec(),
            bias: 0.0,
        };
        assert!((cls.logit(&[1.0; 12]).unwrap() - 9.212).abs() < 1e-9);
        assert_eq!(cls.classify(&[1.0; 12]).unwrap(), sigmoid(cls.logit(&[1.0; 12]).unwrap()));
        assert!(cls.decide(&[1.0; 12]).unwrap());
        assert!(!cls.decide(&[-1.0; 12]).unwrap());

        let base = [0.2; 12];
        let p0 = cls.classify(&base).unwrap();
        for (i, w) in REPORTED_WEIGHTS.iter().enumerate() {
            let mut up = base;
            up[i] += 0.1;
            let p1 = cls.classify(&up).unwrap();
            assert_eq!(p1 > p0, *w > 0.0, "coordinate {i}");
        }
        assert!(cls.classify(&[0.0; 11]).is_err());
    }

    #[test]
    fn zero_classifier_is_undecided() {
        let cls = Classifier::zeros(4);
        assert_eq!(cls.classify(&[0.3, -0.9, 1.0, 0.0]).unwrap(), 0.5);
        assert!(cls.decide(&[0.3, -0.9, 1.0, 0.0]).unwrap());
    }

    fn separable(rng: &mut ChaCha8Rng, n: usize) -> Vec<Example> {
        (0..n)
            .map(|_| {
                let label = rng.random_bool(0.5);
                let shift = if label { 0.3 } else { -0.3 };
                let features = (0..3).map(|_| shift + rng.random_range(-0.2..0.2)).collect();
                Example { features, label }
            })
            .collect()
    }

    #[test]
    fn separable_data_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (train, dev, test) = (separable(&mut rng, 400), separable(&mut rng, 100), separable(&mut rng, 200));
        let out = train_classifier(&train, &dev, &ClassifierConfig::default()).unwrap();
        assert_eq!(accuracy(&out.classifier, &test).unwrap(), 1.0);
        let again = train_classifier(&train, &dev, &ClassifierConfig::default()).unwrap();
        assert_eq!(out.classifier, again.classifier);
    }

    #[test]
    fn random_labels_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut random = |n: usize| -> Vec<Example> {
            (0..n)
                .map(|_| Example {
                    features: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    label: rng.random_bool(0.5),
                })
                .collect()
        };
        let (train, dev, held) = (random(1000), random(1000), random(1000));
        let out = train_classifier(&train, &dev, &ClassifierConfig::default()).unwrap();
        let acc = accuracy(&out.classifier, &held).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn report_layout() {
        let mut r = AccuracyReport::default();
        r.push("baseline", "dev", 10, 0.5);
        r.push("baseline", "test1", 10, 0.6);
        r.push("baseline", "test2", 10, 0.8);
        r.push("layerwise", "test1", 10, 0.9);
        assert_eq!(
            r.to_tsv(),
            "repr\tsplit\tn\taccuracy\n\
             baseline\tdev\t10\t0.500000\n\
             baseline\ttest1\t10\t0.600000\n\
             baseline\ttest2\t10\t0.800000\n\
             # baseline mean ± std over 2 test splits: 0.700000 ± 0.141421\n\
             layerwise\ttest1\t10\t0.900000\n"
        );
        assert!((mean_std(&[0.7, 0.8, 0.9]).0 - 0.8).abs() < 1e-12);
        assert!((mean_std(&[0.7, 0.8, 0.9]).1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn classifier_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = Classifier {
            weights: REPORTED_WEIGHTS.to_vec(),
            bias: -0.25,
        };
        c.save_json(&p).unwrap();
        assert_eq!(Classifier::load_json(&p).unwrap(), c);
    }
}
