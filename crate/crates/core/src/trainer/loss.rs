//! Per-story losses, unrolled over frames with the memory chain.

use crate::model::{MemoryChain, Model};
use crate::numerics::{Graph, Var};
use crate::scalar::Scalar;
use crate::trainer::{TrainError, TrainStory};

/// Summed frame losses of one direction of one story.
#[derive(Debug, Clone)]
pub struct Unroll {
    pub total: Var,
    pub per_frame: Vec<Var>,
}

fn sum_nodes<T: Scalar>(g: &mut Graph<'_, T>, nodes: &[Var]) -> Result<Var, TrainError> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

fn check_frames(texts: usize, images: usize) -> Result<(), TrainError> {
    if texts != images || texts == 0 {
        return Err(TrainError::Data(format!("{texts} texts for {images} images")));
    }
    Ok(())
}

/// Teacher-forced image-token NLL for each frame, conditioning on `texts`
/// and carrying memory from frame to frame.
pub fn unroll_t2i<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    texts: &[Vec<usize>],
    images: &[Vec<usize>],
) -> Result<Unroll, TrainError> {
    check_frames(texts.len(), images.len())?;
    let mut chain: MemoryChain<Var> = model.new_chain();
    let mut per_frame = Vec::with_capacity(texts.len());
    for (text, image) in texts.iter().zip(images) {
        let seq = model.t2i_sequence(text, image)?;
        let out = model.forward(g, &seq, Some(&chain))?;
        per_frame.push(g.cross_entropy(out.logits, image)?);
        chain.push(out.memories);
    }
    Ok(Unroll { total: sum_nodes(g, &per_frame)?, per_frame })
}

/// Teacher-forced caption NLL for each frame (EOS included).
pub fn unroll_i2t<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    images: &[Vec<usize>],
    texts: &[Vec<usize>],
) -> Result<Unroll, TrainError> {
    check_frames(texts.len(), images.len())?;
    let mut chain: MemoryChain<Var> = model.new_chain();
    let use_memory = model.config.memory_in_i2t;
    let mut per_frame = Vec::with_capacity(texts.len());
    for (image, text) in images.iter().zip(texts) {
        let seq = model.i2t_sequence(image, text)?;
        let out = model.forward(g, &seq, use_memory.then_some(&chain))?;
        per_frame.push(g.cross_entropy(out.logits, text)?);
        if use_memory {
            chain.push(out.memories);
        }
    }
    Ok(Unroll { total: sum_nodes(g, &per_frame)?, per_frame })
}

pub fn loss_t2i<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, story: &TrainStory) -> Result<Unroll, TrainError> {
    unroll_t2i(g, model, &story.texts, &story.images)
}

pub fn loss_i2t<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, story: &TrainStory) -> Result<Unroll, TrainError> {
    unroll_i2t(g, model, &story.images, &story.texts)
}

/// [`loss_t2i`] with the pseudo-texts standing in for the captions.
pub fn loss_pt2i<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    story: &TrainStory,
    pseudo: &[Vec<usize>],
) -> Result<Unroll, TrainError> {
    if pseudo.len() != story.images.len() {
        return Err(TrainError::MissingPseudoText { have: pseudo.len(), frames: story.images.len() });
    }
    unroll_t2i(g, model, pseudo, &story.images)
}
