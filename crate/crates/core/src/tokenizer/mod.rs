//! Text and image tokenization: a closed word-level vocabulary for story
//! sentences and a patch codebook that turns images into fixed-size grids
//! of indices.

mod codebook;
mod vocab;

pub use codebook::{dequantize, fit_codebook, patches, quantization_mse, quantize_image, Codebook, FitOptions};
pub use vocab::{build_vocab, decode_text, encode_text, normalize, Vocab, EOS, PAD, SOI, SOS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("corpus uses reserved token {0}")]
    ReservedWord(String),
    #[error("word not in vocabulary: {0}")]
    OutOfVocabulary(String),
    #[error("sentence of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("no images to fit a codebook on")]
    NoImages,
    #[error("codebook needs at least 2 entries, got {0}")]
    CodebookTooSmall(usize),
    #[error("codebook size {k} exceeds the {distinct} distinct patches available")]
    TooFewPatches { k: usize, distinct: usize },
    #[error("image shape: {0}")]
    ImageShape(String),
    #[error("token {index} out of range for codebook of size {size}")]
    TokenOutOfRange { index: usize, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

/// Modality-tagged index sequence. Text sequences are PAD-padded with the
/// true length (EOS included) in `len`; image sequences are always full.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub modality: Modality,
    pub indices: Vec<usize>,
    pub len: usize,
}

impl TokenSequence {
    /// The unpadded prefix.
    pub fn tokens(&self) -> &[usize] {
        &self.indices[..self.len]
    }
}
