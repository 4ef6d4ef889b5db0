//! Training: story losses, pseudo-text augmentation and the AdamW loop.
//!
//! The objective for a batch of `B` stories with `T` frames each is
//!
//! ```text
//! L = 1/(B·T) · Σ_stories Σ_frames ( L_t2i + λ1·L_i2t + λ2·L_pt2i )
//! ```
//!
//! where each term is a summed token NLL and `L_pt2i` is the text-to-image
//! loss with a detached pseudo-caption in place of the real one. Gradients
//! flow through the memory chain across all frames of a story.

mod adamw;
mod augment;
mod loss;

pub use adamw::{adamw_step, clip_global_norm, AdamConfig, AdamState};
pub use augment::{make_pseudo_text, offline_augment, PseudoText};
pub use loss::{loss_i2t, loss_pt2i, loss_t2i, unroll_i2t, unroll_t2i, Unroll};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MemoryChain, Model, ModelError};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("pseudo-texts cover {have} frames, story has {frames}")]
    MissingPseudoText { have: usize, frames: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("captioner is incompatible with the model: {0}")]
    Incompatible(String),
}

impl TrainError {
    /// True when the failure is a NaN/Inf somewhere in the computation.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::Numerics(NumericsError::NonFinite { .. })
                | TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
        )
    }
}

/// One tokenized story: captions (EOS included, unpadded) and image grids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStory {
    pub texts: Vec<Vec<usize>>,
    pub images: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Offline,
    Online,
}

/// How the directions share optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// One step on the combined objective.
    Joint,
    /// A text-to-image step (with the pseudo-text term), then an
    /// image-to-text step, per batch.
    Alternate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Flat learning rate, used when `lr_per_batch` is absent.
    pub lr: f64,
    /// When set, the learning rate is this value times the batch size.
    pub lr_per_batch: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub augmentation: Augmentation,
    /// Online pseudo-texts are produced only from this epoch on.
    pub warmup_epochs: usize,
    pub clip_norm: Option<f64>,
    /// Train the image-to-text direction as well.
    pub bidirectional: bool,
    pub alternation: Alternation,
    /// Data-parallel gradient workers (1 = single worker).
    pub workers: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-2,
            lr: 1e-3,
            lr_per_batch: None,
            batch_size: 8,
            epochs: 25,
            augmentation: Augmentation::None,
            warmup_epochs: 3,
            clip_norm: Some(1.0),
            bidirectional: true,
            alternation: Alternation::Joint,
            workers: 1,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self { lr_per_batch: Some(4.5e-6), batch_size: 32, augmentation: Augmentation::Online, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.batch_size == 0 || self.workers == 0 {
            return bad("batch_size and workers must be positive");
        }
        if !(self.lr > 0.0) || self.lr_per_batch.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr_per_batch.map_or(self.lr, |l| l * self.batch_size as f64)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Batch-mean loss components. Each is `Σ NLL / (B·T)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub t2i: f64,
    pub i2t: f64,
    pub pt2i: f64,
    /// Value of the differentiated objective.
    pub total: f64,
    pub per_frame: Vec<FrameLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub story: usize,
    pub frame: usize,
    pub t2i: f64,
    pub i2t: Option<f64>,
    pub pt2i: Option<f64>,
}

impl LossBreakdown {
    fn merge(&mut self, other: LossBreakdown) {
        self.t2i += other.t2i;
        self.i2t += other.i2t;
        self.pt2i += other.pt2i;
        self.total += other.total;
        self.per_frame.extend(other.per_frame);
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_t2i: f64,
    pub l_i2t: f64,
    pub l_pt2i: f64,
    pub l_total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_t2i: f64,
    pub pseudo_texts: usize,
}

/// Which terms a gradient pass includes.
#[derive(Debug, Clone, Copy)]
struct Terms {
    t2i: bool,
    i2t: bool,
    pt2i: bool,
}

const STREAM_ORDER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// Model, optimizer and loop position. Everything needed to resume exactly
/// lives here, which is what the checkpoint serializes.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub adam: AdamState<T>,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    /// Story order of the current epoch (empty between epochs).
    pub order: Vec<usize>,
    /// Pseudo-texts in use this epoch, per story and frame.
    pub pseudo: Option<Vec<Vec<Vec<usize>>>>,
    /// Frozen captions for offline augmentation.
    pub offline: Option<Vec<Vec<Vec<usize>>>>,
    /// Pseudo-texts generated so far.
    pub pseudo_generated: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            config,
            adam,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            order: Vec::new(),
            pseudo: None,
            offline: None,
            pseudo_generated: 0,
        })
    }

    /// Installs the frozen captions used by offline augmentation.
    pub fn set_offline_texts(&mut self, texts: Vec<Vec<Vec<usize>>>) {
        self.pseudo_generated += texts.iter().map(Vec::len).sum::<usize>();
        self.offline = Some(texts);
    }

    pub fn steps_per_epoch(&self, stories: usize) -> usize {
        stories.div_ceil(self.config.batch_size)
    }

    fn begin_epoch(&mut self, data: &[TrainStory]) -> Result<(), TrainError> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &[STREAM_ORDER, self.epoch as u64]));
        self.order = order;
        self.pseudo = match self.config.augmentation {
            Augmentation::None => None,
            Augmentation::Offline => {
                let texts = self.offline.clone().ok_or_else(|| TrainError::Config("offline augmentation without captions".into()))?;
                if texts.len() != data.len() {
                    return Err(TrainError::Data(format!("{} offline captions for {} stories", texts.len(), data.len())));
                }
                Some(texts)
            }
            Augmentation::Online if self.epoch >= self.config.warmup_epochs => {
                let mut texts = Vec::with_capacity(data.len());
                for story in data {
                    let p = make_pseudo_text(&self.model, &story.images, self.epoch)?;
                    self.pseudo_generated += p.len();
                    texts.push(p.into_iter().map(|p| p.tokens).collect());
                }
                Some(texts)
            }
            Augmentation::Online => None,
        };
        Ok(())
    }

    /// Runs one optimizer batch, starting a new epoch first when needed.
    pub fn step(&mut self, data: &[TrainStory]) -> Result<StepRecord, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Data("empty training set".into()));
        }
        if self.order.is_empty() {
            self.begin_epoch(data)?;
        }
        let start = Instant::now();
        let b = self.config.batch_size;
        let batch: Vec<usize> = self.order[self.step_in_epoch * b..((self.step_in_epoch + 1) * b).min(self.order.len())].to_vec();
        let pseudo_on = self.pseudo.is_some();
        let bi = self.config.bidirectional;
        let mut grad_norm = 0.0;
        let phases: Vec<Terms> = match self.config.alternation {
            Alternation::Joint => vec![Terms { t2i: true, i2t: bi, pt2i: pseudo_on }],
            Alternation::Alternate => {
                let mut p = vec![Terms { t2i: true, i2t: false, pt2i: pseudo_on }];
                if bi && self.config.lambda1 > 0.0 {
                    p.push(Terms { t2i: false, i2t: true, pt2i: false });
                }
                p
            }
        };
        let mut losses = LossBreakdown::default();
        for terms in phases {
            let (mut grads, breakdown) = self.batch_gradients(data, &batch, terms)?;
            if let Some(c) = self.config.clip_norm {
                grad_norm = clip_global_norm(&mut grads, c);
            } else {
                grad_norm = grads.iter().flatten().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
            }
            adamw_step(&mut self.model.params, &grads, &mut self.adam, &self.config.adam())?;
            losses.merge(breakdown);
        }
        self.global_step += 1;
        self.step_in_epoch += 1;
        let epoch = self.epoch;
        if self.step_in_epoch * b >= self.order.len() {
            self.epoch += 1;
            self.step_in_epoch = 0;
            self.order.clear();
        }
        let tokens: usize = batch
            .iter()
            .map(|&i| data[i].images.iter().map(Vec::len).sum::<usize>() + if bi { data[i].texts.iter().map(Vec::len).sum() } else { 0 })
            .sum();
        Ok(StepRecord {
            step: self.global_step,
            epoch,
            l_t2i: losses.t2i,
            l_i2t: losses.i2t,
            l_pt2i: losses.pt2i,
            l_total: losses.total,
            lr: self.config.learning_rate(),
            grad_norm,
            tokens_per_sec: tokens as f64 / start.elapsed().as_secs_f64().max(1e-9),
        })
    }

    /// Runs steps until the current epoch ends.
    pub fn train_epoch(&mut self, data: &[TrainStory], mut sink: impl FnMut(&StepRecord)) -> Result<EpochMetrics, TrainError> {
        let epoch = self.epoch;
        let before = self.pseudo_generated;
        let mut m = EpochMetrics { epoch, ..Default::default() };
        while self.epoch == epoch {
            let rec = self.step(data)?;
            sink(&rec);
            m.steps += 1;
            m.mean_total += rec.l_total;
            m.mean_t2i += rec.l_t2i;
        }
        m.mean_total /= m.steps as f64;
        m.mean_t2i /= m.steps as f64;
        m.pseudo_texts = self.pseudo_generated - before;
        Ok(m)
    }

    /// Objective and gradients for the given stories of the current epoch,
    /// without touching parameters. Gradients are summed over stories in
    /// batch order (per worker, then across workers in worker order).
    pub fn gradients(&self, data: &[TrainStory], batch: &[usize]) -> Result<(Vec<Option<Tensor<T>>>, LossBreakdown), TrainError> {
        let terms = Terms { t2i: true, i2t: self.config.bidirectional, pt2i: self.pseudo.is_some() };
        self.batch_gradients(data, batch, terms)
    }

    fn batch_gradients(&self, data: &[TrainStory], batch: &[usize], terms: Terms) -> Result<(Vec<Option<Tensor<T>>>, LossBreakdown), TrainError> {
        let frames: usize = batch.iter().map(|&i| data[i].images.len()).sum();
        let norm = 1.0 / frames.max(1) as f64;
        let workers = self.config.workers.min(batch.len()).max(1);
        if workers == 1 {
            return self.chunk_gradients(data, batch, terms, norm);
        }
        let chunk = batch.len().div_ceil(workers);
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|c| s.spawn(move || self.chunk_gradients(data, c, terms, norm)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        });
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.model.params.len()];
        let mut losses = LossBreakdown::default();
        for r in results {
            let (g, l) = r?;
            accumulate(&mut grads, g);
            losses.merge(l);
        }
        Ok((grads, losses))
    }

    fn chunk_gradients(&self, data: &[TrainStory], stories: &[usize], terms: Terms, norm: f64) -> Result<(Vec<Option<Tensor<T>>>, LossBreakdown), TrainError> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.model.params.len()];
        let mut losses = LossBreakdown::default();
        let (l1, l2) = (self.config.lambda1, self.config.lambda2);
        for &idx in stories {
            let story = &data[idx];
            let mut frames: Vec<FrameLoss> = (0..story.images.len())
                .map(|frame| FrameLoss { story: idx, frame, t2i: 0.0, i2t: None, pt2i: None })
                .collect();
            let mut run = |dir: u64, weight: f64, f: &dyn Fn(&mut Graph<'_, T>) -> Result<Unroll, TrainError>| -> Result<(f64, Vec<f64>), TrainError> {
                let mut g = Graph::with_params(&self.model.params);
                g.enable_dropout(
                    self.model.config.dropout,
                    rng::stream(self.config.seed, &[STREAM_DROPOUT, self.epoch as u64, idx as u64, dir]),
                );
                let u = f(&mut g)?;
                let scaled = g.scale(u.total, T::lit(weight * norm))?;
                let grads_here = g.backward(scaled)?;
                accumulate(&mut grads, g.param_grads(&grads_here));
                let per: Vec<f64> = u.per_frame.iter().map(|&v| g.value(v).item().as_f64()).collect();
                Ok((g.value(scaled).item().as_f64(), per))
            };
            if terms.t2i {
                let (total, per) = run(0, 1.0, &|g| loss_t2i(g, &self.model, story))?;
                losses.total += total;
                losses.t2i += per.iter().sum::<f64>() * norm;
                frames.iter_mut().zip(&per).for_each(|(f, &v)| f.t2i = v);
            }
            if terms.i2t {
                let (total, per) = run(1, l1, &|g| loss_i2t(g, &self.model, story))?;
                losses.total += total;
                losses.i2t += per.iter().sum::<f64>() * norm;
                frames.iter_mut().zip(&per).for_each(|(f, &v)| f.i2t = Some(v));
            }
            if terms.pt2i {
                let pseudo = &self.pseudo.as_ref().expect("pt2i requires pseudo-texts")[idx];
                let (total, per) = run(2, l2, &|g| loss_pt2i(g, &self.model, story, pseudo))?;
                losses.total += total;
                losses.pt2i += per.iter().sum::<f64>() * norm;
                frames.iter_mut().zip(&per).for_each(|(f, &v)| f.pt2i = Some(v));
            }
            losses.per_frame.extend(frames);
        }
        Ok((grads, losses))
    }
}

fn accumulate<T: Scalar>(acc: &mut [Option<Tensor<T>>], grads: Vec<Option<Tensor<T>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Fraction of image tokens whose teacher-forced argmax equals the target,
/// with memory carried across each story.
pub fn teacher_forced_accuracy<T: Scalar>(model: &Model<T>, data: &[TrainStory]) -> Result<f64, TrainError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for story in data {
        let mut g = Graph::with_params(&model.params);
        let mut chain: MemoryChain<Var> = model.new_chain();
        for (text, image) in story.texts.iter().zip(&story.images) {
            let seq = model.t2i_sequence(text, image)?;
            let out = model.forward(&mut g, &seq, Some(&chain))?;
            let logits = g.value(out.logits);
            for (r, &z) in image.iter().enumerate() {
                hit += usize::from(crate::model::argmax(logits.row(r), |_| true) == z);
            }
            total += image.len();
            chain.push(out.memories);
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests;
