//! End-to-end plumbing: dataset to token stories, training runs, story
//! generation, evaluation and the ablation arms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::{seeds, ConfigError, RunConfig};
use crate::eval::{EvalError, MetricReport};
use crate::image::Image;
use crate::memory::Topology;
use crate::model::{MemoryChain, Model, ModelError};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::storyworld::{world_lexicon, Dataset, Story, WorldError};
use crate::tokenizer::{build_vocab, decode_text, dequantize, encode_text, fit_codebook, quantize_image, Codebook, FitOptions, TokenizerError, Vocab};
use crate::trainer::{offline_augment, Augmentation, EpochMetrics, StepRecord, TrainError, TrainStory, Trainer};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Incompatible(String),
}

impl ExperimentError {
    pub fn is_numerical(&self) -> bool {
        match self {
            ExperimentError::Train(e) => e.is_numerical(),
            ExperimentError::Model(ModelError::Numerics(crate::numerics::NumericsError::NonFinite { .. })) => true,
            _ => false,
        }
    }
}

/// The vocabulary of every caption the world can produce.
pub fn world_vocab() -> Vocab {
    build_vocab(&world_lexicon()).expect("lexicon is non-empty")
}

/// Fits the codebook on the training images only.
pub fn fit_world_codebook(data: &Dataset, cfg: &RunConfig) -> Result<Codebook, ExperimentError> {
    let images: Vec<Image> = data.train.iter().flat_map(|s| s.images.iter().cloned()).collect();
    let opts = FitOptions { seed: cfg.seed_for(seeds::CODEBOOK), max_iters: cfg.codebook.max_iters };
    Ok(fit_codebook(&images, cfg.codebook.size, cfg.codebook.patch, &opts)?)
}

/// Captions as unpadded ids ending in EOS; images as codebook indices.
pub fn encode_stories(stories: &[Story], vocab: &Vocab, codebook: &Codebook, t_text: usize) -> Result<Vec<TrainStory>, ExperimentError> {
    stories
        .iter()
        .map(|s| {
            let texts = s
                .sentences
                .iter()
                .map(|t| Ok(encode_text(t, vocab, t_text)?.tokens().to_vec()))
                .collect::<Result<_, TokenizerError>>()?;
            let images = s.images.iter().map(|i| Ok(quantize_image(i, codebook)?.indices)).collect::<Result<_, TokenizerError>>()?;
            Ok(TrainStory { texts, images })
        })
        .collect()
}

/// A dataset in token form, with the tokenizers that produced it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub codebook: Codebook,
    pub train: Vec<TrainStory>,
    pub val: Vec<TrainStory>,
    pub test: Vec<TrainStory>,
}

pub fn prepare(data: &Dataset, cfg: &RunConfig, codebook: Codebook) -> Result<Prepared, ExperimentError> {
    let vocab = world_vocab();
    check_tokenizers(cfg, &vocab, &codebook)?;
    let t = cfg.model.t_text;
    Ok(Prepared {
        train: encode_stories(&data.train, &vocab, &codebook, t)?,
        val: encode_stories(&data.val, &vocab, &codebook, t)?,
        test: encode_stories(&data.test, &vocab, &codebook, t)?,
        vocab,
        codebook,
    })
}

pub fn check_tokenizers(cfg: &RunConfig, vocab: &Vocab, codebook: &Codebook) -> Result<(), ExperimentError> {
    if vocab.len() > cfg.model.text_vocab {
        return Err(ExperimentError::Incompatible(format!("vocabulary has {} words, model text_vocab is {}", vocab.len(), cfg.model.text_vocab)));
    }
    if codebook.len() != cfg.model.codebook_size || codebook.tokens_per_image() != cfg.model.t_image {
        return Err(ExperimentError::Incompatible(format!(
            "codebook has {} entries and {} tokens per image, model expects {} and {}",
            codebook.len(),
            codebook.tokens_per_image(),
            cfg.model.codebook_size,
            cfg.model.t_image
        )));
    }
    Ok(())
}

/// A fresh trainer with the model seeded from the run seed.
pub fn new_trainer<T: Scalar>(cfg: &RunConfig) -> Result<Trainer<T>, ExperimentError> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone(), cfg.seed_for(seeds::MODEL))?;
    Ok(Trainer::new(model, cfg.resolved_train())?)
}

/// Trains until `trainer.epoch` reaches the configured epoch count.
pub fn train_to_end<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &[TrainStory],
    mut on_step: impl FnMut(&StepRecord),
    mut on_epoch: impl FnMut(&EpochMetrics, &Trainer<T>),
) -> Result<(), ExperimentError> {
    while trainer.epoch < trainer.config.epochs {
        let m = trainer.train_epoch(data, &mut on_step)?;
        on_epoch(&m, trainer);
    }
    Ok(())
}

/// Generated frames (and optionally captions) for a set of stories.
#[derive(Debug, Clone)]
pub struct Generated {
    pub tokens: Vec<Vec<Vec<usize>>>,
    pub images: Vec<Vec<Image>>,
    pub captions: Option<Vec<Vec<String>>>,
}

/// Greedy image generation from each story's captions, carrying memory
/// across frames; optionally greedy captioning of the real images.
pub fn generate<T: Scalar>(model: &Model<T>, stories: &[TrainStory], vocab: &Vocab, codebook: &Codebook, captions: bool) -> Result<Generated, ExperimentError> {
    let mut out = Generated { tokens: Vec::new(), images: Vec::new(), captions: captions.then(Vec::new) };
    for story in stories {
        let (tokens, images) = generate_story(model, &story.texts, codebook)?;
        out.tokens.push(tokens);
        out.images.push(images);
        if let Some(caps) = out.captions.as_mut() {
            caps.push(caption_story(model, &story.images, vocab)?);
        }
    }
    Ok(out)
}

pub fn generate_story<T: Scalar>(model: &Model<T>, texts: &[Vec<usize>], codebook: &Codebook) -> Result<(Vec<Vec<usize>>, Vec<Image>), ExperimentError> {
    let mut chain: MemoryChain<Tensor<T>> = model.new_chain();
    let (mut tokens, mut images) = (Vec::new(), Vec::new());
    for text in texts {
        let g = model.generate_image_tokens(text, Some(&chain))?;
        if let Some(m) = g.memories {
            chain.push(m);
        }
        images.push(dequantize(g.tokens.tokens(), codebook)?);
        tokens.push(g.tokens.indices);
    }
    Ok((tokens, images))
}

pub fn caption_story<T: Scalar>(model: &Model<T>, images: &[Vec<usize>], vocab: &Vocab) -> Result<Vec<String>, ExperimentError> {
    let pseudo = crate::trainer::make_pseudo_text(model, images, 0)?;
    Ok(pseudo.iter().map(|p| decode_text(&p.tokens, vocab)).collect())
}

/// Generates for the test split and scores it.
pub fn evaluate<T: Scalar>(model: &Model<T>, cfg: &RunConfig, data: &Dataset, prepared: &Prepared) -> Result<(MetricReport, Generated), ExperimentError> {
    let n = cfg.eval.max_stories.map_or(prepared.test.len(), |m| m.min(prepared.test.len()));
    let gen = generate(model, &prepared.test[..n], &prepared.vocab, &prepared.codebook, cfg.eval.captions)?;
    let report = MetricReport::compute(&gen.images, &data.test[..n], gen.captions.as_deref(), &cfg.hash())?;
    Ok((report, gen))
}

/// One row of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub name: &'static str,
    pub topology: Topology,
    pub awm: bool,
    pub bidirectional: bool,
    pub augmentation: Augmentation,
}

/// Components added one at a time, then the all-level and offline variants.
pub const ARMS: [Arm; 7] = [
    Arm { name: "tr", topology: Topology::None, awm: false, bidirectional: false, augmentation: Augmentation::None },
    Arm { name: "pma", topology: Topology::PartialLevel, awm: false, bidirectional: false, augmentation: Augmentation::None },
    Arm { name: "pma_awm", topology: Topology::PartialLevel, awm: true, bidirectional: false, augmentation: Augmentation::None },
    Arm { name: "pma_awm_bi", topology: Topology::PartialLevel, awm: true, bidirectional: true, augmentation: Augmentation::None },
    Arm { name: "full", topology: Topology::PartialLevel, awm: true, bidirectional: true, augmentation: Augmentation::Online },
    Arm { name: "all_level", topology: Topology::AllLevel, awm: true, bidirectional: true, augmentation: Augmentation::Online },
    Arm { name: "offline", topology: Topology::PartialLevel, awm: true, bidirectional: true, augmentation: Augmentation::Offline },
];

/// Arm whose trained model captions for the offline arm.
pub const OFFLINE_CAPTIONER: &str = "pma_awm_bi";

pub fn arm(name: &str) -> Option<Arm> {
    ARMS.iter().copied().find(|a| a.name == name)
}

impl Arm {
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.model.topology = self.topology;
        c.model.awm = self.awm;
        c.train.bidirectional = self.bidirectional;
        c.train.augmentation = self.augmentation;
        c
    }
}

/// Outcome of training and evaluating one arm.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: Arm,
    pub config: RunConfig,
    pub report: MetricReport,
    pub params: usize,
    pub trainer: Trainer<f32>,
}

/// Trains one arm on a prepared dataset and evaluates it on the test split.
/// The offline arm needs the captioner model.
pub fn run_arm(
    arm: Arm,
    base: &RunConfig,
    data: &Dataset,
    prepared: &Prepared,
    captioner: Option<&Model<f32>>,
    on_epoch: impl FnMut(&EpochMetrics, &Trainer<f32>),
) -> Result<ArmRun, ExperimentError> {
    let config = arm.apply(base);
    let mut trainer = new_trainer::<f32>(&config)?;
    if arm.augmentation == Augmentation::Offline {
        let captioner = captioner.ok_or_else(|| ExperimentError::Incompatible(format!("arm {} needs the {OFFLINE_CAPTIONER} captioner", arm.name)))?;
        let texts = offline_augment(&prepared.train, captioner, &trainer.model)?;
        trainer.set_offline_texts(texts);
    }
    train_to_end(&mut trainer, &prepared.train, |_| {}, on_epoch)?;
    let (report, _) = evaluate(&trainer.model, &config, data, prepared)?;
    Ok(ArmRun { arm, params: trainer.model.param_count(), config, report, trainer })
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Median metrics of one arm across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: usize,
    pub params: usize,
    pub char_f1: f64,
    pub frame_acc: f64,
    pub bleu2: Option<f64>,
    pub bleu3: Option<f64>,
    pub patch_fd: f64,
    pub bg_consistency: Option<f64>,
}

impl ArmSummary {
    pub fn from_reports(arm: &str, params: usize, reports: &[MetricReport]) -> Self {
        let med = |f: &dyn Fn(&MetricReport) -> Option<f64>| median(&mut reports.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            arm: arm.to_string(),
            seeds: reports.len(),
            params,
            char_f1: med(&|r| Some(r.char_f1)).unwrap_or(0.0),
            frame_acc: med(&|r| Some(r.frame_acc)).unwrap_or(0.0),
            bleu2: med(&|r| r.bleu2),
            bleu3: med(&|r| r.bleu3),
            patch_fd: med(&|r| Some(r.patch_fd)).unwrap_or(0.0),
            bg_consistency: med(&|r| r.bg_consistency),
        }
    }
}

/// Plain-text comparison table, one row per arm in the given order.
pub fn ablation_table(rows: &[ArmSummary]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut s = format!(
        "{:<12} {:>5} {:>9} {:>8} {:>9} {:>8} {:>8} {:>9} {:>8}\n",
        "arm", "seeds", "params", "char_f1", "frame_acc", "bleu2", "bleu3", "patch_fd", "bg_cons"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>5} {:>9} {:>8.4} {:>9.4} {:>8} {:>8} {:>9.4} {:>8}\n",
            r.arm,
            r.seeds,
            r.params,
            r.char_f1,
            r.frame_acc,
            opt(r.bleu2),
            opt(r.bleu3),
            r.patch_fd,
            opt(r.bg_consistency)
        ));
    }
    s
}
