//! Brute-force reference implementations used by the integration tests.
//! Written with plain loops over `f64` and no library math.

#![allow(dead_code)]

use std::collections::BTreeMap;

pub type Matrix = Vec<Vec<f64>>;

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            c[i][j] = s;
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row vector times matrix.
fn vecmat(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w[0].len()).map(|j| (0..x.len()).map(|i| x[i] * w[i][j]).sum()).collect()
}

pub struct Gru {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Vec<f64>,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Vec<f64>,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Vec<f64>,
}

/// One GRU step per row: the new state keeps `1 - z` of the old state.
pub fn gru(x: &Matrix, h: &Matrix, p: &Gru) -> Matrix {
    x.iter()
        .zip(h)
        .map(|(x, h)| {
            let (xz, hz) = (vecmat(x, &p.w_z), vecmat(h, &p.u_z));
            let (xr, hr) = (vecmat(x, &p.w_r), vecmat(h, &p.u_r));
            let z: Vec<f64> = (0..h.len()).map(|i| sigmoid(xz[i] + hz[i] + p.b_z[i])).collect();
            let r: Vec<f64> = (0..h.len()).map(|i| sigmoid(xr[i] + hr[i] + p.b_r[i])).collect();
            let rh: Vec<f64> = (0..h.len()).map(|i| r[i] * h[i]).collect();
            let (xh, rhu) = (vecmat(x, &p.w_h), vecmat(&rh, &p.u_h));
            (0..h.len())
                .map(|i| {
                    let cand = (xh[i] + rhu[i] + p.b_h[i]).tanh();
                    (1.0 - z[i]) * h[i] + z[i] * cand
                })
                .collect()
        })
        .collect()
}

/// Multi-head scaled dot-product attention. Heads split the columns evenly;
/// a row with no visible key averages all values.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, visible: &dyn Fn(usize, usize) -> bool) -> Matrix {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let mut scores = Vec::new();
            for j in 0..k.len() {
                let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                scores.push(dot / (dh as f64).sqrt());
            }
            let allowed: Vec<bool> = (0..k.len()).map(|j| visible(i, j)).collect();
            let weights: Vec<f64> = if allowed.iter().any(|&a| a) {
                let max = (0..k.len()).filter(|&j| allowed[j]).map(|j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = (0..k.len()).map(|j| if allowed[j] { (scores[j] - max).exp() } else { 0.0 }).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|x| x / s).collect()
            } else {
                vec![1.0 / k.len() as f64; k.len()]
            };
            for c in cols.clone() {
                out[i][c] = (0..k.len()).map(|j| weights[j] * v[j][c]).sum();
            }
        }
    }
    out
}

/// Summed negative log-likelihood of `targets`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum()
}

/// Corpus BLEU-n by explicit n-gram enumeration: clipped counts per
/// sentence, zero precisions floored at 1e-9, brevity penalty when the
/// candidates are shorter than the references.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> f64 {
    let grams = |s: &[String], k: usize| -> BTreeMap<Vec<String>, usize> {
        let mut m = BTreeMap::new();
        let mut i = 0;
        while i + k <= s.len() {
            *m.entry(s[i..i + k].to_vec()).or_insert(0) += 1;
            i += 1;
        }
        m
    };
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut num, mut den) = (0usize, 0usize);
        for (cand, refr) in candidates.iter().zip(references) {
            let rg = grams(refr, k);
            for (g, cnt) in grams(cand, k) {
                num += cnt.min(*rg.get(&g).unwrap_or(&0));
                den += cnt;
            }
        }
        let p = if den == 0 { 0.0 } else { num as f64 / den as f64 };
        log_sum += if p == 0.0 { 1e-9f64.ln() } else { p.ln() };
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / n as f64).exp()
}

/// Index of the codeword closest to `patch` (first on ties).
pub fn nearest_codeword(patch: &[u8], entries: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, e) in entries.iter().enumerate() {
        let d: f64 = patch.iter().zip(e).map(|(&p, &c)| (p as f64 - c).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub fn max_abs_diff(a: &Matrix, b: &[f64]) -> f64 {
    a.iter().flatten().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
