//! Generation metrics: character presence, corpus BLEU, a patch-level
//! Fréchet distance and background consistency.

mod frechet;

pub use frechet::{fit_gaussian, frechet_distance, patch_features, patch_frechet_distance, Gaussian, SHRINKAGE};

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::storyworld::{detect_scene, Story, WorldError, CHARACTERS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: {left} vs {right} items")]
    SizeMismatch { what: &'static str, left: usize, right: usize },
    #[error("no candidate sentences")]
    EmptyCandidates,
    #[error("need at least 2 images per side, got {0}")]
    TooFewImages(usize),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("ledger: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger: {0}")]
    Json(#[from] serde_json::Error),
}

fn same_len(what: &'static str, left: usize, right: usize) -> Result<(), EvalError> {
    if left != right {
        return Err(EvalError::SizeMismatch { what, left, right });
    }
    Ok(())
}

/// Character presence scores over a set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharScores {
    /// Micro-averaged over every (frame, character) decision.
    pub micro_f1: f64,
    /// Fraction of frames whose predicted set is exactly right.
    pub frame_acc: f64,
    /// `None` for characters never present nor predicted.
    pub per_character: Vec<Option<f64>>,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// Scores predicted character sets against ground-truth sets. When nothing
/// is present and nothing predicted anywhere, micro F1 is 1.
pub fn character_scores(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<CharScores, EvalError> {
    same_len("character sets", predicted.len(), truth.len())?;
    let n = CHARACTERS.len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
    let mut exact = 0;
    for (p, t) in predicted.iter().zip(truth) {
        for c in 0..n {
            match (p.contains(&c), t.contains(&c)) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
        let (mut a, mut b) = (p.clone(), t.clone());
        a.sort_unstable();
        a.dedup();
        b.sort_unstable();
        b.dedup();
        exact += usize::from(a == b);
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    Ok(CharScores {
        micro_f1: f1(sum(&tp), sum(&fp), sum(&fn_)).unwrap_or(1.0),
        frame_acc: if truth.is_empty() { 1.0 } else { exact as f64 / truth.len() as f64 },
        per_character: (0..n).map(|c| f1(tp[c], fp[c], fn_[c])).collect(),
    })
}

fn detected_sets(images: &[Image]) -> Result<Vec<Vec<usize>>, EvalError> {
    images.iter().map(|img| Ok(detect_scene(img)?.characters)).collect()
}

/// Micro F1 of detected characters in `images` against the frames' truth.
pub fn char_f1(images: &[Image], truth: &[Vec<usize>]) -> Result<f64, EvalError> {
    same_len("images and scenes", images.len(), truth.len())?;
    Ok(character_scores(&detected_sets(images)?, truth)?.micro_f1)
}

pub fn frame_accuracy(images: &[Image], truth: &[Vec<usize>]) -> Result<f64, EvalError> {
    same_len("images and scenes", images.len(), truth.len())?;
    Ok(character_scores(&detected_sets(images)?, truth)?.frame_acc)
}

/// Floor applied to zero n-gram precisions.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts<W: Eq + Hash>(words: &[W], k: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    if words.len() >= k {
        for g in words.windows(k) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-n with one reference per candidate.
///
/// `p_k = Σ clipped k-gram matches / Σ candidate k-grams`, with any zero
/// (or undefined) precision replaced by [`BLEU_EPSILON`]. The score is
/// `BP · exp(mean_k ln p_k)` with `BP = exp(1 − r/c)` when the total
/// candidate length `c` is below the total reference length `r`.
pub fn bleu<W: Eq + Hash>(candidates: &[Vec<W>], references: &[Vec<W>], n: usize) -> Result<f64, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::EmptyCandidates);
    }
    same_len("candidates and references", candidates.len(), references.len())?;
    let (mut c, mut r) = (0usize, 0usize);
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for k in 1..=n {
            let rc = ngram_counts(refr, k);
            for (g, cnt) in ngram_counts(cand, k) {
                matched[k - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..n)
        .map(|k| {
            let p = if total[k] == 0 { 0.0 } else { matched[k] as f64 / total[k] as f64 };
            p.max(BLEU_EPSILON).ln()
        })
        .sum::<f64>()
        / n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

/// Fraction of frames after the first whose detected background equals the
/// story's, over stories whose later captions never name the background.
/// `None` when no frame qualifies.
pub fn bg_consistency(detected: &[Vec<Option<usize>>], stories: &[Story]) -> Result<Option<f64>, EvalError> {
    same_len("generated stories", detected.len(), stories.len())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (det, story) in detected.iter().zip(stories) {
        same_len("frames", det.len(), story.scenes.len())?;
        if !story.later_captions_omit_background() {
            continue;
        }
        for (d, scene) in det.iter().zip(&story.scenes).skip(1) {
            hit += usize::from(*d == Some(scene.background));
            total += 1;
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

/// Detects backgrounds in generated stories and scores them.
pub fn bg_consistency_images(generated: &[Vec<Image>], stories: &[Story]) -> Result<Option<f64>, EvalError> {
    let detected = generated
        .iter()
        .map(|imgs| imgs.iter().map(|i| Ok(detect_scene(i)?.background)).collect::<Result<Vec<_>, EvalError>>())
        .collect::<Result<Vec<_>, _>>()?;
    bg_consistency(&detected, stories)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub char_f1: f64,
    pub frame_acc: f64,
    pub per_character_f1: Vec<Option<f64>>,
    pub bleu2: Option<f64>,
    pub bleu3: Option<f64>,
    pub patch_fd: f64,
    pub bg_consistency: Option<f64>,
    pub n_samples: usize,
    pub config_hash: String,
}

impl MetricReport {
    /// Scores generated stories (images per frame) against the source
    /// stories. Captions, when given, are scored with BLEU against the
    /// ground-truth sentences.
    pub fn compute(
        generated: &[Vec<Image>],
        stories: &[Story],
        captions: Option<&[Vec<String>]>,
        config_hash: &str,
    ) -> Result<Self, EvalError> {
        same_len("generated stories", generated.len(), stories.len())?;
        let mut det_sets = Vec::new();
        let mut det_bgs = Vec::new();
        let mut truth = Vec::new();
        for (imgs, story) in generated.iter().zip(stories) {
            same_len("frames", imgs.len(), story.scenes.len())?;
            let mut bgs = Vec::new();
            for (img, scene) in imgs.iter().zip(&story.scenes) {
                let d = detect_scene(img)?;
                det_sets.push(d.characters);
                bgs.push(d.background);
                truth.push(scene.characters.clone());
            }
            det_bgs.push(bgs);
        }
        let scores = character_scores(&det_sets, &truth)?;
        let (bleu2, bleu3) = match captions {
            Some(caps) => {
                same_len("captioned stories", caps.len(), stories.len())?;
                let words = |s: &String| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
                let cands: Vec<Vec<String>> = caps.iter().flatten().map(words).collect();
                let refs: Vec<Vec<String>> = stories.iter().flat_map(|s| &s.sentences).map(words).collect();
                (Some(bleu(&cands, &refs, 2)?), Some(bleu(&cands, &refs, 3)?))
            }
            None => (None, None),
        };
        let real: Vec<Image> = stories.iter().flat_map(|s| s.images.iter().cloned()).collect();
        let fake: Vec<Image> = generated.iter().flatten().cloned().collect();
        Ok(Self {
            char_f1: scores.micro_f1,
            frame_acc: scores.frame_acc,
            per_character_f1: scores.per_character,
            bleu2,
            bleu3,
            patch_fd: patch_frechet_distance(&real, &fake)?,
            bg_consistency: bg_consistency(&det_bgs, stories)?,
            n_samples: truth.len(),
            config_hash: config_hash.to_string(),
        })
    }

    /// Tab-separated per-character F1 table.
    pub fn per_character_table(&self) -> String {
        let mut s = String::from("character\tf1\n");
        for (name, f) in CHARACTERS.iter().zip(&self.per_character_f1) {
            s.push_str(&format!("{name}\t{}\n", f.map_or("-".to_string(), |f| format!("{f:.4}"))));
        }
        s
    }
}

/// Appends one JSON line to the results ledger.
pub fn append_ledger(path: &Path, report: &MetricReport) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}
