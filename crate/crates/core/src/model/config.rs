use serde::{Deserialize, Serialize};

use crate::memory::{apply_topology, memory_param_count, Topology};
use crate::model::ModelError;

/// Architecture hyperparameters.
///
/// Trainable parameter count, with `V` the text vocabulary, `K` the
/// codebook size, `P = T_text + T_image + 2` positions and `F` the number of
/// fusion layers:
///
/// ```text
///   (V + K)·d + P·d + 2·d                 token, position, segment tables
/// + L·(12·d² + 13·d)                      attention (4 d² + 4 d), FFN (8 d² + 5 d), 2 layer norms
/// + 2·d                                   final layer norm
/// + (d·V + V) + (d·K + K)                 text and image heads
/// + F·(T_M·d + 13·d² + 5·d [+ 3·d²])      memory paths (bracket: attentive weighting)
/// ```
///
/// The memory path is `M_0`, the summary projections (3 d²), the GRU
/// (6 d² + 3 d) and the fusion sublayer (layer norm plus 4 d²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub t_text: usize,
    pub t_image: usize,
    pub text_vocab: usize,
    pub codebook_size: usize,
    pub t_m: usize,
    pub frames: usize,
    pub topology: Topology,
    pub awm: bool,
    pub memory_in_i2t: bool,
    pub dropout: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Small preset used for tests and experiments.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            t_text: 16,
            t_image: 16,
            text_vocab: 84,
            codebook_size: 64,
            t_m: 1,
            frames: 5,
            topology: Topology::PartialLevel,
            awm: true,
            memory_in_i2t: true,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    /// Full-size preset, kept for parameter accounting.
    pub fn paper() -> Self {
        Self {
            layers: 6,
            d_model: 512,
            heads: 16,
            t_text: 80,
            t_image: 256,
            text_vocab: 55_000,
            codebook_size: 16_384,
            t_m: 1,
            frames: 5,
            topology: Topology::PartialLevel,
            awm: true,
            memory_in_i2t: true,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 {
            return bad("layers, d_model and heads must be positive");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.t_m == 0 {
            return bad("t_m must be at least 1");
        }
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if self.t_text == 0 || self.t_image == 0 {
            return bad("token lengths must be positive");
        }
        if self.text_vocab < 5 || self.codebook_size < 2 {
            return bad("vocabulary or codebook too small");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Maximum combined sequence length (both specials included).
    pub fn positions(&self) -> usize {
        self.t_text + self.t_image + 2
    }

    pub fn fusion_layers(&self) -> Vec<usize> {
        apply_topology(self.topology, self.layers)
    }

    /// Closed-form trainable parameter count (see the type docs).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let (v, k) = (self.text_vocab, self.codebook_size);
        let embeddings = (v + k) * d + self.positions() * d + 2 * d;
        let layers = self.layers * (12 * d * d + 13 * d);
        let heads = (d * v + v) + (d * k + k);
        let memory = self.fusion_layers().len() * memory_param_count(d, self.t_m, self.awm);
        embeddings + layers + 2 * d + heads + memory
    }
}
