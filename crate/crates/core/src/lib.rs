//! Learn binary masks over layer-wise contextual embeddings to isolate one
//! aspect of meaning (such as word sense), then evaluate the masked
//! representations with a layer-wise cosine similarity classifier.

pub mod cli;
pub mod embedstore;
pub mod error;
pub mod losses;
pub mod masker;
pub mod numerics;
pub mod simcls;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
