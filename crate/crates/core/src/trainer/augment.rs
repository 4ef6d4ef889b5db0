use serde::{Deserialize, Serialize};

use crate::model::{MemoryChain, Model};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::trainer::{TrainError, TrainStory};

/// A greedily decoded caption for one ground-truth frame. Only token ids
/// leave the decoder, so nothing links it back to the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoText {
    pub tokens: Vec<usize>,
    pub frame: usize,
    pub epoch: usize,
}

/// Captions every frame of a story with the image-to-text direction,
/// carrying the caption memory across frames like teacher-forced training.
pub fn make_pseudo_text<T: Scalar>(model: &Model<T>, images: &[Vec<usize>], epoch: usize) -> Result<Vec<PseudoText>, TrainError> {
    let use_memory = model.config.memory_in_i2t;
    let mut chain: MemoryChain<Tensor<T>> = model.new_chain();
    let mut out = Vec::with_capacity(images.len());
    for (frame, image) in images.iter().enumerate() {
        let gen = model.generate_text_tokens(image, use_memory.then_some(&chain), model.config.t_text)?;
        if let Some(m) = gen.memories {
            chain.push(m);
        }
        out.push(PseudoText { tokens: gen.tokens.tokens().to_vec(), frame, epoch });
    }
    Ok(out)
}

/// One frozen caption per image from a separately trained captioner.
pub fn offline_augment<T: Scalar>(data: &[TrainStory], captioner: &Model<T>, target: &Model<T>) -> Result<Vec<Vec<Vec<usize>>>, TrainError> {
    let (a, b) = (&captioner.config, &target.config);
    if a.text_vocab != b.text_vocab || a.codebook_size != b.codebook_size || a.t_image != b.t_image || a.t_text > b.t_text {
        return Err(TrainError::Incompatible(format!(
            "captioner vocab {}/{} tokens {}x{}, model vocab {}/{} tokens {}x{}",
            a.text_vocab, a.codebook_size, a.t_text, a.t_image, b.text_vocab, b.codebook_size, b.t_text, b.t_image
        )));
    }
    data.iter()
        .map(|s| Ok(make_pseudo_text(captioner, &s.images, 0)?.into_iter().map(|p| p.tokens).collect()))
        .collect()
}
