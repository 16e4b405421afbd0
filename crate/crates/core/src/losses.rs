//! Cosine triplet losses for one or two aspects, the mask overlap penalty,
//! and their combination.

use crate::error::{Error, Result};
use crate::masker::BinaryMask;
use crate::numerics::cosine_with_grad;

/// Number of aspects being disentangled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aspects {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight between the triplet terms and the overlap term; unused for a
    /// single aspect.
    pub lambda: f64,
    pub aspects: Aspects,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            aspects: Aspects::One,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// A triplet loss value with gradients for each of the three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    /// Hinge argument before clamping at zero.
    pub inner: f64,
    pub grads: [Vec<f64>; 3],
}

/// `max(cos(anchor, negative) - cos(anchor, positive), 0)` with gradients
/// for `(anchor, positive, negative)`.
fn hinge(anchor: &[f64], positive: &[f64], negative: &[f64]) -> Result<(f64, [Vec<f64>; 3])> {
    let pos = cosine_with_grad(anchor, positive)?;
    let neg = cosine_with_grad(anchor, negative)?;
    let inner = -pos.value + neg.value;
    let grads = if inner > 0.0 {
        let da = neg.dx.iter().zip(&pos.dx).map(|(n, p)| n - p).collect();
        let dp = pos.dy.iter().map(|v| -v).collect();
        [da, dp, neg.dy]
    } else {
        let z = vec![0.0; anchor.len()];
        [z.clone(), z.clone(), z]
    };
    Ok((inner, grads))
}

/// `L(a) = max(-cos(z0, z1) + cos(z0, z2), 0)`; `x0` and `x1` share the
/// aspect.
pub fn triplet_loss_a(z0: &[f64], z1: &[f64], z2: &[f64]) -> Result<TripletLoss> {
    let (inner, [g0, g1, g2]) = hinge(z0, z1, z2)?;
    Ok(TripletLoss {
        value: inner.max(0.0),
        inner,
        grads: [g0, g1, g2],
    })
}

/// `L(b) = max(-cos(z0, z2) + cos(z0, z1), 0)`; roles of `z1` and `z2` are
/// swapped relative to `L(a)`.
pub fn triplet_loss_b(z0: &[f64], z1: &[f64], z2: &[f64]) -> Result<TripletLoss> {
    let (inner, [g0, g2, g1]) = hinge(z0, z2, z1)?;
    Ok(TripletLoss {
        value: inner.max(0.0),
        inner,
        grads: [g0, g1, g2],
    })
}

/// Mean over layers of the number of positions selected by both masks.
pub fn overlap_loss(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "masks are {}x{} and {}x{}",
            a.dim(),
            a.layers(),
            b.dim(),
            b.layers()
        )));
    }
    let both: usize = (0..a.layers())
        .map(|l| a.layer(l).iter().zip(b.layer(l)).filter(|(x, y)| **x && **y).count())
        .sum();
    Ok(both as f64 / a.layers() as f64)
}

/// Gradient of the overlap surrogate `(1/l) Σ A·B` with respect to mask
/// `A`, given the other mask `B` (layer-major `h × l`).
pub fn overlap_grad(other: &BinaryMask) -> Vec<f64> {
    let scale = 1.0 / other.layers() as f64;
    other.to_f64().into_iter().map(|v| v * scale).collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Combine per-triplet losses (reduced by their mean) and the overlap.
/// With one aspect only `losses_a` is used.
pub fn final_loss(losses_a: &[f64], losses_b: &[f64], overlap: f64, cfg: &LossConfig) -> f64 {
    match cfg.aspects {
        Aspects::One => mean(losses_a),
        Aspects::Two => {
            0.5 * cfg.lambda * (mean(losses_a) + mean(losses_b)) + (1.0 - cfg.lambda) * overlap
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn triplet_a_fixtures() {
        let z0 = [1.0, 0.0];
        assert_eq!(triplet_loss_a(&z0, &z0, &[0.0, 1.0]).unwrap().value, 0.0);
        assert_eq!(triplet_loss_a(&z0, &[0.0, 1.0], &z0).unwrap().value, 1.0);
        let l = triplet_loss_a(&z0, &[S, S], &[-S, S]).unwrap();
        assert!((l.inner + 2.0 * S).abs() < 1e-12);
        assert_eq!(l.value, 0.0);
        assert!(l.grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn triplet_b_fixtures() {
        let z0 = [1.0, 0.0];
        assert_eq!(triplet_loss_b(&z0, &[0.0, 1.0], &z0).unwrap().value, 0.0);
        assert_eq!(triplet_loss_b(&z0, &z0, &[0.0, 1.0]).unwrap().value, 1.0);
    }

    #[test]
    fn zero_norm_propagates() {
        assert!(matches!(
            triplet_loss_a(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn overlap_fixtures() {
        let h = 768;
        let ones = BinaryMask::ones(h, 12);
        assert_eq!(overlap_loss(&ones, &ones).unwrap(), 768.0);
        let a = BinaryMask::from_fn(h, 12, |d, _| d < 128);
        let b = BinaryMask::from_fn(h, 12, |d, _| (128..256).contains(&d));
        assert_eq!(overlap_loss(&a, &b).unwrap(), 0.0);
        let c = BinaryMask::from_fn(h, 12, |d, _| (118..246).contains(&d));
        assert_eq!(overlap_loss(&a, &c).unwrap(), 10.0);
        assert_eq!(overlap_loss(&a, &a).unwrap(), 128.0);
        assert!(overlap_loss(&a, &BinaryMask::ones(h, 11)).is_err());
    }

    #[test]
    fn final_loss_fixtures() {
        let one = LossConfig {
            lambda: 0.3,
            aspects: Aspects::One,
        };
        assert!((final_loss(&[0.2, 0.4], &[9.0], 100.0, &one) - 0.3).abs() < 1e-12);
        let endpoint = LossConfig {
            lambda: 1.0,
            aspects: Aspects::Two,
        };
        assert_eq!(
            final_loss(&[0.4], &[0.2], 10.0, &endpoint),
            final_loss(&[0.4], &[0.2], 0.0, &endpoint)
        );
        assert!((final_loss(&[0.4], &[0.2], 3.0, &endpoint) - 0.3).abs() < 1e-12);
        let half = LossConfig {
            lambda: 0.5,
            aspects: Aspects::Two,
        };
        assert!((final_loss(&[0.4], &[0.2], 10.0, &half) - 5.15).abs() < 1e-12);
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 100 {
            let n = rng.random_range(2..10);
            let z: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            if z.iter().any(|v| norm(v) < 0.1) {
                continue;
            }
            for (which, f) in [
                (0, triplet_loss_a as fn(&[f64], &[f64], &[f64]) -> Result<TripletLoss>),
                (1, triplet_loss_b),
            ] {
                let base = f(&z[0], &z[1], &z[2]).unwrap();
                if base.inner.abs() <= 1e-3 {
                    continue;
                }
                let value = |zz: &[Vec<f64>]| {
                    let (p, n) = if which == 0 { (1, 2) } else { (2, 1) };
                    let inner =
                        -cosine(&zz[0], &zz[p]).unwrap() + cosine(&zz[0], &zz[n]).unwrap();
                    inner.max(0.0)
                };
                for arg in 0..3 {
                    for i in 0..n {
                        let mut up = z.clone();
                        up[arg][i] += 1e-6;
                        let mut down = z.clone();
                        down[arg][i] -= 1e-6;
                        let fd = (value(&up) - value(&down)) / 2e-6;
                        assert!((fd - base.grads[arg][i]).abs() < 1e-5);
                    }
                }
            }
            checked += 1;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn triple() -> impl Strategy<Value = [Vec<f64>; 3]> {
            (1usize..10).prop_flat_map(|n| {
                [
                    prop::collection::vec(-1.0f64..1.0, n),
                    prop::collection::vec(-1.0f64..1.0, n),
                    prop::collection::vec(-1.0f64..1.0, n),
                ]
            })
        }

        proptest! {
            #[test]
            fn bounds_and_scale_invariance(z in triple(), s in 0.01f64..50.0) {
                prop_assume!(z.iter().all(|v| norm(v) > 1e-3));
                let a = triplet_loss_a(&z[0], &z[1], &z[2]).unwrap().value;
                let b = triplet_loss_b(&z[0], &z[1], &z[2]).unwrap().value;
                prop_assert!((0.0..=2.0).contains(&a));
                prop_assert!((0.0..=2.0).contains(&b));
                let swapped = triplet_loss_a(&z[0], &z[2], &z[1]).unwrap().value;
                prop_assert_eq!(b, swapped);
                let scaled: Vec<f64> = z[1].iter().map(|v| v * s).collect();
                let a2 = triplet_loss_a(&z[0], &scaled, &z[2]).unwrap().value;
                prop_assert!((a - a2).abs() < 1e-12);
            }

            #[test]
            fn self_overlap_is_k(h in 1usize..50, l in 1usize..5, k_frac in 0.0f64..1.0) {
                let k = 1 + ((h - 1) as f64 * k_frac) as usize;
                let m = BinaryMask::from_fn(h, l, |d, layer| (d + layer) % h < k);
                prop_assert_eq!(overlap_loss(&m, &m).unwrap(), k as f64);
            }
        }
    }
}
