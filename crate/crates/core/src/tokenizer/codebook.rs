//! Patch vector quantizer: k-means over `P x P` image patches.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::tokenizer::{Modality, TokenSequence, TokenizerError};

/// Fitted patch codebook. Entries are integer-valued so that dequantized
/// images are exact and `quantize(dequantize(t)) == t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub patch: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { seed: 0, max_iters: 50 }
    }
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    /// Tokens per image.
    pub fn tokens_per_image(&self) -> usize {
        self.grid_cols() * self.grid_rows()
    }

    /// Index of the nearest entry (squared Euclidean, ties to the lowest index).
    pub fn nearest(&self, patch: &[u8]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.entries.iter().enumerate() {
            let d = sq_dist_u8(patch, e);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn check_image(&self, img: &Image) -> Result<(), TokenizerError> {
        if img.width() != self.width || img.height() != self.height || img.channels() != self.channels {
            return Err(TokenizerError::ImageShape(format!(
                "expected {}x{}x{}, got {}x{}x{}",
                self.width,
                self.height,
                self.channels,
                img.width(),
                img.height(),
                img.channels()
            )));
        }
        Ok(())
    }
}

fn sq_dist_u8(patch: &[u8], entry: &[f64]) -> f64 {
    patch.iter().zip(entry).map(|(&p, &e)| (p as f64 - e) * (p as f64 - e)).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Every `p x p` patch of `img`, grid row-major.
pub fn patches(img: &Image, p: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::with_capacity((img.width() / p) * (img.height() / p));
    for gy in 0..img.height() / p {
        for gx in 0..img.width() / p {
            out.push(img.patch(gx * p, gy * p, p));
        }
    }
    out
}

/// k-means (k-means++ seeding, fixed seed and iteration cap) over every
/// patch of `images`. Identical patches are merged with multiplicity
/// weights, which gives the same objective as clustering them separately.
pub fn fit_codebook(images: &[Image], k: usize, p: usize, opts: &FitOptions) -> Result<Codebook, TokenizerError> {
    let first = images.first().ok_or(TokenizerError::NoImages)?;
    let (w, h, c) = (first.width(), first.height(), first.channels());
    if p == 0 || w % p != 0 || h % p != 0 {
        return Err(TokenizerError::ImageShape(format!("{w}x{h} not divisible by patch size {p}")));
    }
    if k < 2 {
        return Err(TokenizerError::CodebookTooSmall(k));
    }
    let mut counts: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut distinct: Vec<Vec<u8>> = Vec::new();
    for img in images {
        if img.width() != w || img.height() != h || img.channels() != c {
            return Err(TokenizerError::ImageShape("images differ in dimensions".into()));
        }
        for patch in patches(img, p) {
            let n = counts.entry(patch.clone()).or_insert(0);
            if *n == 0 {
                distinct.push(patch);
            }
            *n += 1;
        }
    }
    if k > distinct.len() {
        return Err(TokenizerError::TooFewPatches { k, distinct: distinct.len() });
    }
    let points: Vec<Vec<f64>> = distinct.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
    let weights: Vec<f64> = distinct.iter().map(|p| counts[p] as f64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centers = kmeans_pp(&points, &weights, k, &mut rng);
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..opts.max_iters {
        let mut changed = false;
        for (i, pt) in points.iter().enumerate() {
            let a = nearest_center(&centers, pt);
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        for (i, pt) in points.iter().enumerate() {
            let a = assign[i];
            mass[a] += weights[i];
            for (s, v) in sums[a].iter_mut().zip(pt) {
                *s += weights[i] * v;
            }
        }
        for j in 0..k {
            if mass[j] > 0.0 {
                centers[j] = sums[j].iter().map(|s| s / mass[j]).collect();
            } else {
                // Empty cluster: move it to the point with the largest weighted error.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = weights[a] * sq_dist(&points[a], &centers[assign[a]]);
                        let db = weights[b] * sq_dist(&points[b], &centers[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("points non-empty");
                centers[j] = points[far].clone();
                assign[far] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut entries: Vec<Vec<f64>> = centers.iter().map(|c| c.iter().map(|v| v.round().clamp(0.0, 255.0)).collect()).collect();
    dedupe_entries(&mut entries, &points);
    Ok(Codebook { patch: p, channels: c, width: w, height: h, entries })
}

fn nearest_center(centers: &[Vec<f64>], pt: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(pt, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn kmeans_pp(points: &[Vec<f64>], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let pick = |scores: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = scores.iter().sum();
        let mut r = rng.random::<f64>() * total;
        for (i, &s) in scores.iter().enumerate() {
            if s > 0.0 {
                if r < s {
                    return i;
                }
                r -= s;
            }
        }
        scores.iter().rposition(|&s| s > 0.0).expect("some positive score")
    };
    let mut centers = vec![points[pick(weights, rng)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let next = points[pick(&scores, rng)].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centers.push(next);
    }
    centers
}

/// Replaces entries that collided after rounding with the data points
/// farthest from the current codebook.
fn dedupe_entries(entries: &mut [Vec<f64>], points: &[Vec<f64>]) {
    for j in 1..entries.len() {
        if entries[..j].contains(&entries[j]) {
            let others: Vec<Vec<f64>> = entries.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, e)| e.clone()).collect();
            let far = points
                .iter()
                .filter(|p| !others.contains(p))
                .max_by(|a, b| {
                    let da = others.iter().map(|e| sq_dist(a, e)).fold(f64::INFINITY, f64::min);
                    let db = others.iter().map(|e| sq_dist(b, e)).fold(f64::INFINITY, f64::min);
                    da.total_cmp(&db)
                })
                .expect("k <= distinct points");
            entries[j] = far.clone();
        }
    }
}

/// Maps each patch to its nearest codebook entry.
pub fn quantize_image(img: &Image, cb: &Codebook) -> Result<TokenSequence, TokenizerError> {
    cb.check_image(img)?;
    let indices: Vec<usize> = patches(img, cb.patch).iter().map(|p| cb.nearest(p)).collect();
    let len = indices.len();
    Ok(TokenSequence { modality: Modality::Image, indices, len })
}

/// Places codebook patches back on the grid.
pub fn dequantize(tokens: &[usize], cb: &Codebook) -> Result<Image, TokenizerError> {
    if tokens.len() != cb.tokens_per_image() {
        return Err(TokenizerError::ImageShape(format!(
            "{} tokens for a {}-cell grid",
            tokens.len(),
            cb.tokens_per_image()
        )));
    }
    let mut img = Image::new(cb.width, cb.height, cb.channels, vec![0; cb.width * cb.height * cb.channels])
        .map_err(|e| TokenizerError::ImageShape(e.to_string()))?;
    let cols = cb.grid_cols();
    for (i, &t) in tokens.iter().enumerate() {
        let entry = cb.entries.get(t).ok_or(TokenizerError::TokenOutOfRange { index: t, size: cb.len() })?;
        let bytes: Vec<u8> = entry.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        img.set_patch((i % cols) * cb.patch, (i / cols) * cb.patch, cb.patch, &bytes);
    }
    Ok(img)
}

/// Mean squared per-pixel error of coding `images` with `cb`.
pub fn quantization_mse(images: &[Image], cb: &Codebook) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for img in images {
        for p in patches(img, cb.patch) {
            total += sq_dist_u8(&p, &cb.entries[cb.nearest(&p)]);
            n += p.len();
        }
    }
    total / n.max(1) as f64
}
