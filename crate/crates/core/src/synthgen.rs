//! Synthetic layer-wise embeddings with planted aspect subspaces.
//!
//! In every layer a fixed set of `k_true` dimensions carries a per-sense
//! mean vector of norm `signal_strength`; a disjoint set of `k_true_b`
//! dimensions carries a per-aux-class mean the same way. All dimensions
//! receive isotropic Gaussian noise. The senses of one word get mutually
//! orthogonal mean directions whenever there is room for them.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingSet, LayerwiseEmbedding, Source};
use crate::error::{Error, Result};
use crate::masker::BinaryMask;
use crate::numerics::{norm, LayerTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub dim: usize,
    pub layers: usize,
    pub head_size: usize,
    /// Plant whole heads and tag the dump as attention outputs.
    pub attention: bool,
    pub k_true: usize,
    pub k_true_b: usize,
    /// Number of aux classes; 0 leaves aux labels absent.
    pub n_aux: usize,
    pub n_words: usize,
    pub senses_min: usize,
    pub senses_max: usize,
    pub n_occurrences: usize,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            head_size: 8,
            attention: false,
            k_true: 8,
            k_true_b: 0,
            n_aux: 0,
            n_words: 20,
            senses_min: 2,
            senses_max: 3,
            n_occurrences: 2000,
            signal_strength: 3.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if self.dim == 0 || self.layers == 0 {
            return bad(format!("h={} l={} must be positive", self.dim, self.layers));
        }
        if self.k_true == 0 {
            return bad("k_true must be positive".into());
        }
        if self.k_true + self.k_true_b > self.dim {
            return bad(format!(
                "k_true + k_true_b = {} exceeds h = {}",
                self.k_true + self.k_true_b,
                self.dim
            ));
        }
        if self.attention {
            let a = self.head_size;
            if a == 0 || !self.dim.is_multiple_of(a) || !self.k_true.is_multiple_of(a) || !self.k_true_b.is_multiple_of(a) {
                return bad(format!(
                    "attention planting needs head size {a} to divide h, k_true and k_true_b"
                ));
            }
        }
        if self.k_true_b > 0 && self.n_aux < 2 {
            return bad("an aux subspace needs at least two aux classes".into());
        }
        if self.n_words == 0 || self.n_occurrences == 0 {
            return bad("n_words and n_occurrences must be positive".into());
        }
        if self.senses_min == 0 || self.senses_min > self.senses_max {
            return bad(format!(
                "senses per word range {}..={} is empty",
                self.senses_min, self.senses_max
            ));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return bad("signal_strength must be finite and non-negative".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if self.n_aux > i32::MAX as usize {
            return bad("too many aux classes".into());
        }
        Ok(())
    }

    fn unit(&self) -> usize {
        if self.attention {
            self.head_size
        } else {
            1
        }
    }
}

/// Planted index sets, one ascending list per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantTruth {
    pub aspect_a_dims: Vec<Vec<usize>>,
    pub aspect_b_dims: Vec<Vec<usize>>,
}

impl PlantTruth {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })
    }

    pub fn mask_a(&self, dim: usize) -> Result<BinaryMask> {
        BinaryMask::from_selected(dim, &self.aspect_a_dims)
    }

    pub fn mask_b(&self, dim: usize) -> Result<BinaryMask> {
        BinaryMask::from_selected(dim, &self.aspect_b_dims)
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: EmbeddingSet,
    pub truth: PlantTruth,
}

/// `count` vectors in `R^width`, mutually orthogonal when `count <= width`,
/// each scaled to norm `scale`.
fn class_means(rng: &mut ChaCha8Rng, count: usize, width: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < width {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|a| *a /= n);
        }
        out.push(v);
    }
    out.into_iter()
        .map(|v| v.into_iter().map(|a| a * scale).collect())
        .collect()
}

fn planted_sets(rng: &mut ChaCha8Rng, spec: &PlantSpec) -> PlantTruth {
    let unit = spec.unit();
    let units = spec.dim / unit;
    let (ka, kb) = (spec.k_true / unit, spec.k_true_b / unit);
    let mut a_sets = Vec::with_capacity(spec.layers);
    let mut b_sets = Vec::with_capacity(spec.layers);
    let expand = |us: &[usize]| {
        let mut dims: Vec<usize> = us.iter().flat_map(|u| u * unit..(u + 1) * unit).collect();
        dims.sort_unstable();
        dims
    };
    for _ in 0..spec.layers {
        let mut order: Vec<usize> = (0..units).collect();
        order.shuffle(rng);
        a_sets.push(expand(&order[..ka]));
        b_sets.push(expand(&order[ka..ka + kb]));
    }
    PlantTruth {
        aspect_a_dims: a_sets,
        aspect_b_dims: b_sets,
    }
}

/// Generate a dataset and its ground truth. Deterministic in `spec`.
pub fn generate(spec: &PlantSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = planted_sets(&mut rng, spec);

    // word -> list of (sense label, per-layer means)
    let mut next_sense = 0u32;
    let mut words: Vec<Vec<(u32, Vec<Vec<f64>>)>> = Vec::with_capacity(spec.n_words);
    for _ in 0..spec.n_words {
        let n_senses = rng.random_range(spec.senses_min..=spec.senses_max);
        let per_layer: Vec<Vec<Vec<f64>>> = (0..spec.layers)
            .map(|_| class_means(&mut rng, n_senses, spec.k_true, spec.signal_strength))
            .collect();
        let senses = (0..n_senses)
            .map(|s| {
                let label = next_sense;
                next_sense += 1;
                (label, per_layer.iter().map(|l| l[s].clone()).collect())
            })
            .collect();
        words.push(senses);
    }
    let aux_means: Vec<Vec<Vec<f64>>> = (0..spec.layers)
        .map(|_| class_means(&mut rng, spec.n_aux, spec.k_true_b, spec.signal_strength))
        .collect();

    let labels: Vec<(usize, usize, Option<usize>)> = (0..spec.n_occurrences)
        .map(|_| {
            let w = rng.random_range(0..spec.n_words);
            let s = rng.random_range(0..words[w].len());
            let aux = (spec.n_aux > 0).then(|| rng.random_range(0..spec.n_aux));
            (w, s, aux)
        })
        .collect();

    let records: Vec<LayerwiseEmbedding> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &(w, s, aux))| {
            let mut noise = ChaCha8Rng::seed_from_u64(spec.seed);
            noise.set_stream(i as u64 + 1);
            let mut data = Vec::with_capacity(spec.dim * spec.layers);
            for layer in 0..spec.layers {
                let mut col = vec![0.0f64; spec.dim];
                for (d, m) in truth.aspect_a_dims[layer].iter().zip(&words[w][s].1[layer]) {
                    col[*d] = *m;
                }
                if let Some(b) = aux {
                    for (d, m) in truth.aspect_b_dims[layer].iter().zip(&aux_means[layer][b]) {
                        col[*d] = *m;
                    }
                }
                for v in &mut col {
                    let e: f64 = noise.sample(StandardNormal);
                    *v += spec.noise_sigma * e;
                }
                // match what the f32 dump will hold
                data.extend(col.into_iter().map(|v| f64::from(v as f32)));
            }
            LayerwiseEmbedding {
                occurrence_id: i as u64,
                word_id: w as u32,
                sense_label: words[w][s].0,
                aux_label: aux.map(|b| b as i32),
                tensor: LayerTensor::new(spec.dim, spec.layers, data).expect("finite by construction"),
            }
        })
        .collect();

    let source = if spec.attention {
        Source::Attention {
            head_size: spec.head_size,
        }
    } else {
        Source::Hidden
    };
    Ok(Synthetic {
        data: EmbeddingSet::new(source, spec.dim, spec.layers, records)?,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    /// `(precision, recall)` per layer.
    pub per_layer: Vec<(f64, f64)>,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of the selected dimensions against planted sets.
/// An empty selection has precision 0; an empty truth set has recall 1.
pub fn recovery_score(mask: &BinaryMask, truth: &[Vec<usize>]) -> Result<Recovery> {
    if truth.len() != mask.layers() {
        return Err(Error::ShapeMismatch(format!(
            "truth has {} layers, mask has {}",
            truth.len(),
            mask.layers()
        )));
    }
    let mut per_layer = Vec::with_capacity(truth.len());
    for (layer, planted) in truth.iter().enumerate() {
        if let Some(&d) = planted.iter().find(|&&d| d >= mask.dim()) {
            return Err(Error::ShapeMismatch(format!(
                "planted index {d} out of range for h={}",
                mask.dim()
            )));
        }
        let selected = mask.ones_in_layer(layer);
        let hits = planted.iter().filter(|&&d| mask.get(d, layer)).count();
        let precision = if selected == 0 {
            0.0
        } else {
            hits as f64 / selected as f64
        };
        let recall = if planted.is_empty() {
            1.0
        } else {
            hits as f64 / planted.len() as f64
        };
        per_layer.push((precision, recall));
    }
    let n = per_layer.len() as f64;
    Ok(Recovery {
        precision: per_layer.iter().map(|p| p.0).sum::<f64>() / n,
        recall: per_layer.iter().map(|p| p.1).sum::<f64>() / n,
        per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    fn small() -> PlantSpec {
        PlantSpec {
            n_occurrences: 300,
            ..PlantSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
        let c = generate(&PlantSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn planted_sets_have_expected_sizes() {
        let spec = PlantSpec {
            k_true_b: 8,
            n_aux: 3,
            ..small()
        };
        let s = generate(&spec).unwrap();
        for (a, b) in s.truth.aspect_a_dims.iter().zip(&s.truth.aspect_b_dims) {
            assert_eq!(a.len(), 8);
            assert_eq!(b.len(), 8);
            assert!(a.iter().all(|d| !b.contains(d)));
        }
        let ma = s.truth.mask_a(64).unwrap();
        let mb = s.truth.mask_b(64).unwrap();
        assert_eq!(crate::losses::overlap_loss(&ma, &mb).unwrap(), 0.0);
        assert!(s.data.has_aux_labels());
    }

    #[test]
    fn attention_planting_is_head_aligned() {
        let spec = PlantSpec {
            attention: true,
            k_true: 16,
            ..small()
        };
        let s = generate(&spec).unwrap();
        assert_eq!(s.data.source(), Source::Attention { head_size: 8 });
        for dims in &s.truth.aspect_a_dims {
            assert_eq!(dims.len(), 16);
            for chunk in dims.chunks(8) {
                assert_eq!(chunk[0] % 8, 0);
                assert_eq!(chunk[7], chunk[0] + 7);
            }
        }
    }

    #[test]
    fn noiseless_same_sense_matches_on_planted_dims() {
        let spec = PlantSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let s = generate(&spec).unwrap();
        let recs = s.data.records();
        let first = &recs[0];
        let twin = recs[1..]
            .iter()
            .find(|r| r.sense_label == first.sense_label)
            .expect("sense repeats");
        for (layer, dims) in s.truth.aspect_a_dims.iter().enumerate() {
            for &d in dims {
                assert_eq!(first.tensor.get(d, layer), twin.tensor.get(d, layer));
            }
        }
    }

    #[test]
    fn strong_signal_separates_on_planted_dims() {
        let spec = PlantSpec {
            signal_strength: 5.0,
            ..small()
        };
        let s = generate(&spec).unwrap();
        let recs = s.data.records();
        let planted = |r: &LayerwiseEmbedding, layer: usize| -> Vec<f64> {
            s.truth.aspect_a_dims[layer].iter().map(|&d| r.tensor.get(d, layer)).collect()
        };
        let (mut same, mut cross) = (Vec::new(), Vec::new());
        for (i, a) in recs.iter().enumerate() {
            for b in &recs[i + 1..] {
                if a.word_id != b.word_id {
                    continue;
                }
                let c = cosine(&planted(a, 0), &planted(b, 0)).unwrap();
                if a.sense_label == b.sense_label {
                    same.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) > mean(&cross) + 0.3, "{} vs {}", mean(&same), mean(&cross));
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            PlantSpec { k_true: 70, ..small() },
            PlantSpec { k_true_b: 4, n_aux: 1, ..small() },
            PlantSpec { attention: true, k_true: 4, ..small() },
            PlantSpec { senses_min: 3, senses_max: 2, ..small() },
            PlantSpec { noise_sigma: -1.0, ..small() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::BadSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn recovery_fixtures() {
        let truth = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
        let exact = BinaryMask::from_selected(16, &truth).unwrap();
        let r = recovery_score(&exact, &truth).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));

        let disjoint = BinaryMask::from_selected(16, &[vec![8, 9], vec![8, 9]]).unwrap();
        let r = recovery_score(&disjoint, &truth).unwrap();
        assert_eq!((r.precision, r.recall), (0.0, 0.0));

        let padded =
            BinaryMask::from_selected(16, &[vec![0, 1, 2, 3, 8, 9, 10, 11], vec![4, 5, 6, 7, 12, 13, 14, 15]])
                .unwrap();
        let r = recovery_score(&padded, &truth).unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 1.0));

        assert!(recovery_score(&exact, &truth[..1]).is_err());
    }
}
