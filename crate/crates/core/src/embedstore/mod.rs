//! Layer-wise embedding dumps: the record types, the binary file format, and
//! the samplers that turn a dump into training triplets and labeled pairs.

mod format;
mod lists;
mod sampling;

use std::collections::HashMap;

pub use format::{load_dump, read_dump, save_dump, write_dump, DUMP_MAGIC, DUMP_VERSION};
pub use lists::{read_pairs_tsv, read_triplets_tsv, write_pairs_tsv, write_triplets_tsv};
pub use sampling::{sample_pairs, sample_triplets, split};

use crate::error::{Error, Result};
use crate::numerics::LayerTensor;

/// Which middle output a dump was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Hidden,
    /// Self-attention outputs before the output projection; `head_size`
    /// entries per head.
    Attention { head_size: usize },
}

impl Source {
    pub fn head_size(&self) -> Option<usize> {
        match self {
            Source::Hidden => None,
            Source::Attention { head_size } => Some(*head_size),
        }
    }
}

/// One word occurrence's stacked middle outputs plus its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseEmbedding {
    pub occurrence_id: u64,
    pub word_id: u32,
    pub sense_label: u32,
    pub aux_label: Option<i32>,
    pub tensor: LayerTensor,
}

/// A loaded dump: shared metadata and records in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    source: Source,
    dim: usize,
    layers: usize,
    records: Vec<LayerwiseEmbedding>,
    by_id: HashMap<u64, usize>,
}

impl EmbeddingSet {
    pub fn new(
        source: Source,
        dim: usize,
        layers: usize,
        records: Vec<LayerwiseEmbedding>,
    ) -> Result<Self> {
        if dim == 0 || layers == 0 {
            return Err(Error::ShapeMismatch(format!(
                "dump dims must be positive, got h={dim} l={layers}"
            )));
        }
        if let Source::Attention { head_size } = source {
            if head_size == 0 || !dim.is_multiple_of(head_size) {
                return Err(Error::ShapeMismatch(format!(
                    "h={dim} is not divisible by head size {head_size}"
                )));
            }
        }
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.tensor.dim() != dim || r.tensor.layers() != layers {
                return Err(Error::ShapeMismatch(format!(
                    "occurrence {} has shape {}x{}, dump is {dim}x{layers}",
                    r.occurrence_id,
                    r.tensor.dim(),
                    r.tensor.layers()
                )));
            }
            if r.aux_label.is_some_and(|a| a < 0) {
                return Err(Error::Format(format!(
                    "occurrence {} has negative aux label",
                    r.occurrence_id
                )));
            }
            if by_id.insert(r.occurrence_id, i).is_some() {
                return Err(Error::Format(format!(
                    "duplicate occurrence id {}",
                    r.occurrence_id
                )));
            }
        }
        Ok(Self {
            source,
            dim,
            layers,
            records,
            by_id,
        })
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[LayerwiseEmbedding] {
        &self.records
    }

    /// Borrowed view of all records, the input shape `split` and the
    /// samplers take.
    pub fn refs(&self) -> Vec<&LayerwiseEmbedding> {
        self.records.iter().collect()
    }

    pub fn get(&self, occurrence_id: u64) -> Option<&LayerwiseEmbedding> {
        self.by_id.get(&occurrence_id).map(|&i| &self.records[i])
    }

    /// Like `get`, but a missing id is an error.
    pub fn lookup(&self, occurrence_id: u64) -> Result<&LayerwiseEmbedding> {
        self.get(occurrence_id).ok_or_else(|| {
            Error::EmptyData(format!("occurrence {occurrence_id} is not in the dataset"))
        })
    }

    pub fn has_aux_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.aux_label.is_some())
    }
}

/// Three occurrences where `x0` and `x1` share the sense and `x2` does not.
/// With an auxiliary aspect, `x0` and `x2` share the aux label and `x1`
/// differs from both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub x0: u64,
    pub x1: u64,
    pub x2: u64,
}

impl Triplet {
    /// Re-check the label conditions against the records.
    pub fn is_valid(
        &self,
        x0: &LayerwiseEmbedding,
        x1: &LayerwiseEmbedding,
        x2: &LayerwiseEmbedding,
        use_aspect_b: bool,
    ) -> bool {
        let ids_match =
            x0.occurrence_id == self.x0 && x1.occurrence_id == self.x1 && x2.occurrence_id == self.x2;
        let distinct = self.x0 != self.x1 && self.x0 != self.x2 && self.x1 != self.x2;
        let same_word = x0.word_id == x1.word_id && x0.word_id == x2.word_id;
        let sense_ok = x0.sense_label == x1.sense_label && x0.sense_label != x2.sense_label;
        let aux_ok = !use_aspect_b
            || match (x0.aux_label, x1.aux_label, x2.aux_label) {
                (Some(a0), Some(a1), Some(a2)) => a0 != a1 && a0 == a2,
                _ => false,
            };
        ids_match && distinct && same_word && sense_ok && aux_ok
    }
}

/// Two occurrences of the same word, labeled with whether they share a sense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub x1: u64,
    pub x2: u64,
    pub label: bool,
}
