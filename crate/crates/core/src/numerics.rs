//! Dense vector math shared by every other module: cosine similarity with
//! its analytic gradient, a layer-major tensor type and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `h × l` real tensor stored layer-major: the `h` entries of layer 0
/// come first, then layer 1, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensor {
    dim: usize,
    layers: usize,
    data: Vec<f64>,
}

impl LayerTensor {
    pub fn new(dim: usize, layers: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || layers == 0 {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims must be positive, got {dim}x{layers}"
            )));
        }
        if data.len() != dim * layers {
            return Err(Error::LengthMismatch {
                expected: dim * layers,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { dim, layers, data })
    }

    pub fn zeros(dim: usize, layers: usize) -> Self {
        Self {
            dim,
            layers,
            data: vec![0.0; dim * layers],
        }
    }

    /// Build from a closure over `(dim_index, layer_index)`.
    pub fn from_fn(dim: usize, layers: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dim * layers);
        for layer in 0..layers {
            for d in 0..dim {
                data.push(f(d, layer));
            }
        }
        Self { dim, layers, data }
    }

    /// Hidden size `h`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of layers `l`.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn get(&self, d: usize, layer: usize) -> f64 {
        self.data[layer * self.dim + d]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.data[layer * self.dim..(layer + 1) * self.dim]
    }

    /// Flattened layer-major view of length `h·l`.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &LayerTensor) -> bool {
        self.dim == other.dim && self.layers == other.layers
    }

    pub fn scaled(&self, factor: f64) -> LayerTensor {
        LayerTensor {
            dim: self.dim,
            layers: self.layers,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::LengthMismatch {
            expected: 1,
            actual: 0,
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Cosine similarity `x·y / (‖x‖‖y‖)`, clamped to `[-1, 1]`.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradients with respect to both
/// arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineGrad {
    pub value: f64,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

pub fn cosine_with_grad(x: &[f64], y: &[f64]) -> Result<CosineGrad> {
    check_pair(x, y)?;
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroNorm);
    }
    // The gradient uses the unclamped ratio so it stays consistent with the
    // smooth function; clamping only guards the reported value.
    let raw = dot(x, y) / (nx * ny);
    let inv = 1.0 / (nx * ny);
    let cx = raw / (nx * nx);
    let cy = raw / (ny * ny);
    let dx = x.iter().zip(y).map(|(a, b)| b * inv - cx * a).collect();
    let dy = x.iter().zip(y).map(|(a, b)| a * inv - cy * b).collect();
    Ok(CosineGrad {
        value: raw.clamp(-1.0, 1.0),
        dx,
        dy,
    })
}

/// `(dcos/dx, dcos/dy)`.
pub fn cosine_grad(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = cosine_with_grad(x, y)?;
    Ok((g.dx, g.dy))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates and step counter for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                actual: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite);
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
