//! Binary masks over `h × l` layer-wise tensors.
//!
//! A mask is parameterized by real logits and binarized per layer by hard
//! top-k selection: in `Dim` mode the `k` largest of the `h` logits in a
//! layer are kept; in `Head` mode there is one logit per attention head and
//! the `k / a` largest heads are kept, each expanding to its `a` dimensions.
//! The backward pass is a straight-through estimator: the gradient with
//! respect to the binary mask is passed to the logits unchanged (summed over
//! a head's dimensions in `Head` mode).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LayerTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Dim,
    Head { head_size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    mode: MaskMode,
    k: usize,
    dim: usize,
    layers: usize,
    /// `rows × layers`, layer-major; `rows` is `h` or `h / a`.
    logits: Vec<f64>,
}

impl MaskParams {
    pub fn new(mode: MaskMode, k: usize, dim: usize, layers: usize, logits: Vec<f64>) -> Result<Self> {
        if dim == 0 || layers == 0 {
            return Err(Error::InvalidMask(format!("degenerate shape {dim}x{layers}")));
        }
        let rows = match mode {
            MaskMode::Dim => {
                if k == 0 || k > dim {
                    return Err(Error::InvalidMask(format!("k={k} must be in 1..={dim}")));
                }
                dim
            }
            MaskMode::Head { head_size } => {
                if head_size == 0 || !dim.is_multiple_of(head_size) {
                    return Err(Error::InvalidMask(format!(
                        "h={dim} is not divisible by head size {head_size}"
                    )));
                }
                if k == 0 || !k.is_multiple_of(head_size) || k > dim {
                    return Err(Error::InvalidMask(format!(
                        "k={k} must be a positive multiple of head size {head_size} up to {dim}"
                    )));
                }
                dim / head_size
            }
        };
        if logits.len() != rows * layers {
            return Err(Error::LengthMismatch {
                expected: rows * layers,
                actual: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            mode,
            k,
            dim,
            layers,
            logits,
        })
    }

    pub fn zeros(mode: MaskMode, k: usize, dim: usize, layers: usize) -> Result<Self> {
        let rows = match mode {
            MaskMode::Dim => dim,
            MaskMode::Head { head_size } if head_size > 0 => dim / head_size,
            MaskMode::Head { .. } => 0,
        };
        Self::new(mode, k, dim, layers, vec![0.0; rows * layers])
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Logit rows per layer: `h` for `Dim`, the head count for `Head`.
    pub fn rows(&self) -> usize {
        match self.mode {
            MaskMode::Dim => self.dim,
            MaskMode::Head { head_size } => self.dim / head_size,
        }
    }

    fn head_size(&self) -> usize {
        match self.mode {
            MaskMode::Dim => 1,
            MaskMode::Head { head_size } => head_size,
        }
    }

    /// Rows kept per layer: `k` or `k / a`.
    pub fn selected_rows(&self) -> usize {
        self.k / self.head_size()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable logits for the optimizer. Callers must keep entries finite.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Per-layer top-k binarization; ties go to the lower index.
    pub fn binarize(&self) -> BinaryMask {
        let rows = self.rows();
        let a = self.head_size();
        let keep = self.selected_rows();
        let mut bits = vec![false; self.dim * self.layers];
        let mut order: Vec<usize> = Vec::with_capacity(rows);
        for layer in 0..self.layers {
            let col = &self.logits[layer * rows..(layer + 1) * rows];
            order.clear();
            order.extend(0..rows);
            order.sort_unstable_by(|&i, &j| {
                col[j]
                    .partial_cmp(&col[i])
                    .expect("finite logits")
                    .then(i.cmp(&j))
            });
            for &row in &order[..keep] {
                let base = layer * self.dim + row * a;
                bits[base..base + a].iter_mut().for_each(|b| *b = true);
            }
        }
        BinaryMask {
            dim: self.dim,
            layers: self.layers,
            bits,
        }
    }

    pub fn apply(&self, x: &LayerTensor) -> Result<LayerTensor> {
        self.binarize().apply(x)
    }

    /// Straight-through backward: map a gradient on the `h × l` binary mask
    /// (layer-major) to a gradient on the logits.
    pub fn ste_backward(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.dim * self.layers {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} entries, mask is {}x{}",
                upstream.len(),
                self.dim,
                self.layers
            )));
        }
        let a = self.head_size();
        if a == 1 {
            return Ok(upstream.to_vec());
        }
        Ok(upstream.chunks_exact(a).map(|head| head.iter().sum()).collect())
    }

    pub fn to_file(&self) -> MaskFile {
        let rows = self.rows();
        let bin = self.binarize();
        let mut logits = Vec::with_capacity(self.logits.len());
        for r in 0..rows {
            for layer in 0..self.layers {
                logits.push(self.logits[layer * rows + r]);
            }
        }
        let mut binary = Vec::with_capacity(self.dim * self.layers);
        for d in 0..self.dim {
            for layer in 0..self.layers {
                binary.push(u8::from(bin.get(d, layer)));
            }
        }
        let (mode, a) = match self.mode {
            MaskMode::Dim => ("dim".to_string(), None),
            MaskMode::Head { head_size } => ("head".to_string(), Some(head_size)),
        };
        MaskFile {
            mode,
            k: self.k,
            a,
            h: self.dim,
            l: self.layers,
            logits,
            binary,
        }
    }

    /// Rebuild from the JSON export, checking that the stored binary mask is
    /// exactly the binarization of the stored logits.
    pub fn from_file(file: &MaskFile) -> Result<Self> {
        let mode = match (file.mode.as_str(), file.a) {
            ("dim", None) => MaskMode::Dim,
            ("head", Some(head_size)) => MaskMode::Head { head_size },
            (m, a) => {
                return Err(Error::InvalidMask(format!(
                    "unsupported mode {m:?} with head size {a:?}"
                )))
            }
        };
        let rows = match mode {
            MaskMode::Dim => file.h,
            MaskMode::Head { head_size } if head_size > 0 => file.h / head_size,
            MaskMode::Head { .. } => 0,
        };
        if file.logits.len() != rows * file.l {
            return Err(Error::InvalidMask(format!(
                "expected {} logits, found {}",
                rows * file.l,
                file.logits.len()
            )));
        }
        let mut logits = vec![0.0; rows * file.l];
        for r in 0..rows {
            for layer in 0..file.l {
                logits[layer * rows + r] = file.logits[r * file.l + layer];
            }
        }
        let params = Self::new(mode, file.k, file.h, file.l, logits)?;
        if file.binary.len() != file.h * file.l || file.binary.iter().any(|&b| b > 1) {
            return Err(Error::InvalidMask("binary field is not an h×l 0/1 matrix".into()));
        }
        let stored = BinaryMask::from_row_major(file.h, file.l, &file.binary);
        for layer in 0..file.l {
            let ones = stored.ones_in_layer(layer);
            if ones != file.k {
                return Err(Error::InvalidMask(format!(
                    "layer {layer} selects {ones} dimensions, expected exactly {}",
                    file.k
                )));
            }
        }
        if stored != params.binarize() {
            return Err(Error::InvalidMask(
                "binary field disagrees with the top-k of the logits".into(),
            ));
        }
        Ok(params)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_file()).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: MaskFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        Self::from_file(&file)
    }
}

/// JSON export of a mask. `logits` is `rows × l` and `binary` is `h × l`,
/// both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub mode: String,
    pub k: usize,
    pub a: Option<usize>,
    pub h: usize,
    pub l: usize,
    pub logits: Vec<f64>,
    pub binary: Vec<u8>,
}

/// A 0/1 matrix of shape `h × l`, layer-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dim: usize,
    layers: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn from_fn(dim: usize, layers: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(dim * layers);
        for layer in 0..layers {
            for d in 0..dim {
                bits.push(f(d, layer));
            }
        }
        Self { dim, layers, bits }
    }

    pub fn ones(dim: usize, layers: usize) -> Self {
        Self::from_fn(dim, layers, |_, _| true)
    }

    /// From per-layer index lists.
    pub fn from_selected(dim: usize, selected: &[Vec<usize>]) -> Result<Self> {
        let mut bits = vec![false; dim * selected.len()];
        for (layer, dims) in selected.iter().enumerate() {
            for &d in dims {
                if d >= dim {
                    return Err(Error::ShapeMismatch(format!(
                        "index {d} out of range for h={dim}"
                    )));
                }
                bits[layer * dim + d] = true;
            }
        }
        Ok(Self {
            dim,
            layers: selected.len(),
            bits,
        })
    }

    fn from_row_major(dim: usize, layers: usize, values: &[u8]) -> Self {
        Self::from_fn(dim, layers, |d, layer| values[d * layers + layer] == 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn get(&self, d: usize, layer: usize) -> bool {
        self.bits[layer * self.dim + d]
    }

    pub fn layer(&self, layer: usize) -> &[bool] {
        &self.bits[layer * self.dim..(layer + 1) * self.dim]
    }

    pub fn ones_in_layer(&self, layer: usize) -> usize {
        self.layer(layer).iter().filter(|&&b| b).count()
    }

    /// Selected dimension indices of one layer, ascending.
    pub fn selected(&self, layer: usize) -> Vec<usize> {
        self.layer(layer)
            .iter()
            .enumerate()
            .filter_map(|(d, &b)| b.then_some(d))
            .collect()
    }

    /// The mask as 0.0/1.0 values, layer-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.dim == other.dim && self.layers == other.layers
    }

    fn check_tensor(&self, x: &LayerTensor) -> Result<()> {
        if x.dim() != self.dim || x.layers() != self.layers {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, tensor is {}x{}",
                self.dim,
                self.layers,
                x.dim(),
                x.layers()
            )));
        }
        Ok(())
    }

    /// Elementwise product, keeping the `h × l` shape with zeros at
    /// unselected positions.
    pub fn apply(&self, x: &LayerTensor) -> Result<LayerTensor> {
        self.check_tensor(x)?;
        let data = x
            .as_slice()
            .iter()
            .zip(&self.bits)
            .map(|(&v, &b)| if b { v } else { 0.0 })
            .collect();
        LayerTensor::new(self.dim, self.layers, data)
    }

    /// Drop unselected rows, giving a `k × l` tensor. Every layer must select
    /// the same number of dimensions.
    pub fn compact(&self, x: &LayerTensor) -> Result<LayerTensor> {
        self.check_tensor(x)?;
        let k = self.ones_in_layer(0);
        if k == 0 || (1..self.layers).any(|l| self.ones_in_layer(l) != k) {
            return Err(Error::InvalidMask(
                "compaction needs the same nonzero count in every layer".into(),
            ));
        }
        let data = x
            .as_slice()
            .iter()
            .zip(&self.bits)
            .filter_map(|(&v, &b)| b.then_some(v))
            .collect();
        LayerTensor::new(k, self.layers, data)
    }
}

/// Cross-layer agreement of one mask and, optionally, its overlap with a
/// second mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStats {
    /// `l × l`; entry `(i, j)` counts dimensions whose bit is equal in
    /// layers `i` and `j`.
    pub agreement: Vec<Vec<usize>>,
    /// Positions selected by both masks, summed over layers.
    pub overlap_total: Option<usize>,
}

impl MaskStats {
    /// Overlap averaged over layers.
    pub fn overlap_mean(&self) -> Option<f64> {
        let l = self.agreement.len();
        self.overlap_total.map(|t| t as f64 / l as f64)
    }
}

pub fn mask_stats(a: &BinaryMask, b: Option<&BinaryMask>) -> Result<MaskStats> {
    let l = a.layers();
    let mut agreement = vec![vec![0usize; l]; l];
    for i in 0..l {
        for j in i..l {
            let n = a
                .layer(i)
                .iter()
                .zip(a.layer(j))
                .filter(|(x, y)| x == y)
                .count();
            agreement[i][j] = n;
            agreement[j][i] = n;
        }
    }
    let overlap_total = match b {
        None => None,
        Some(b) => {
            if !a.same_shape(b) {
                return Err(Error::ShapeMismatch(format!(
                    "masks are {}x{} and {}x{}",
                    a.dim(),
                    a.layers(),
                    b.dim(),
                    b.layers()
                )));
            }
            Some(a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count())
        }
    };
    Ok(MaskStats {
        agreement,
        overlap_total,
    })
}
