use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::eval::EvalError;
use crate::image::Image;
use crate::storyworld::CELL;

/// Ridge added to both covariances when either is singular.
pub const SHRINKAGE: f64 = 1e-6;

/// Raw pixels of each 8x8 cell scaled to [0, 1], followed by the mean
/// absolute horizontal and vertical differences.
pub fn patch_features(img: &Image) -> Vec<Vec<f64>> {
    let c = img.channels();
    let mut out = Vec::new();
    for y0 in (0..img.height()).step_by(CELL) {
        for x0 in (0..img.width()).step_by(CELL) {
            let p = img.patch(x0, y0, CELL);
            let at = |x: usize, y: usize, ch: usize| p[(y * CELL + x) * c + ch] as f64 / 255.0;
            let mut f: Vec<f64> = p.iter().map(|&v| v as f64 / 255.0).collect();
            let (mut dx, mut dy) = (0.0, 0.0);
            for y in 0..CELL {
                for x in 0..CELL {
                    for ch in 0..c {
                        if x + 1 < CELL {
                            dx += (at(x + 1, y, ch) - at(x, y, ch)).abs();
                        }
                        if y + 1 < CELL {
                            dy += (at(x, y + 1, ch) - at(x, y, ch)).abs();
                        }
                    }
                }
            }
            let pairs = ((CELL - 1) * CELL * c) as f64;
            f.push(dx / pairs);
            f.push(dy / pairs);
            out.push(f);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and (unbiased) covariance.
pub fn fit_gaussian(points: &[Vec<f64>]) -> Gaussian {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += DVector::from_column_slice(p);
    }
    mean /= n as f64;
    let mut centered = DMatrix::zeros(d, n);
    for (j, p) in points.iter().enumerate() {
        for i in 0..d {
            centered[(i, j)] = p[i] - mean[i];
        }
    }
    let cov = &centered * centered.transpose() / (n.max(2) - 1) as f64;
    Gaussian { mean, cov }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^½)`. The cross term uses only
/// symmetric square roots: it is the mean of `Tr((Σ1^½ Σ2 Σ1^½)^½)` and
/// `Tr((Σ2^½ Σ1 Σ2^½)^½)`, which are equal in exact arithmetic, so the
/// result is symmetric in its arguments. Negative eigenvalues are clamped
/// to zero and the result to `≥ 0`.
pub fn frechet_distance(a: &Gaussian, b: &Gaussian) -> f64 {
    let mut s1 = a.cov.clone();
    let mut s2 = b.cov.clone();
    if min_eigenvalue(&s1).min(min_eigenvalue(&s2)) <= SHRINKAGE * 1e-3 {
        log::debug!("singular covariance, adding {SHRINKAGE}·I to both sides");
        for i in 0..s1.nrows() {
            s1[(i, i)] += SHRINKAGE;
            s2[(i, i)] += SHRINKAGE;
        }
    }
    let (r1, r2) = (sym_sqrt(&s1), sym_sqrt(&s2));
    let cross = 0.5 * (sym_sqrt(&(&r1 * &s2 * &r1)).trace() + sym_sqrt(&(&r2 * &s1 * &r2)).trace());
    let diff = &a.mean - &b.mean;
    (diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * cross).max(0.0)
}

/// Fréchet distance between Gaussians fitted to the patch features of
/// two image sets.
pub fn patch_frechet_distance(real: &[Image], generated: &[Image]) -> Result<f64, EvalError> {
    let few = real.len().min(generated.len());
    if few < 2 {
        return Err(EvalError::TooFewImages(few));
    }
    let feats = |imgs: &[Image]| imgs.iter().flat_map(patch_features).collect::<Vec<_>>();
    Ok(frechet_distance(&fit_gaussian(&feats(real)), &fit_gaussian(&feats(generated))))
}
