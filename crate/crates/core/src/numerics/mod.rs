//! Dense tensor math with a reverse-mode gradient tape.
//!
//! Everything above this module (transformer, memory, losses) is expressed
//! as ops on a [`Graph`]; the standalone helpers here ([`attention`],
//! [`gru_cell`], [`cross_entropy`], [`masked_softmax`]) wrap single ops for
//! direct use and for oracle comparisons.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("attention over an empty key set")]
    EmptyKeys,
}

/// Boolean visibility matrix `[rows x cols]`; `true` means "may attend".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    /// The same key visibility vector for every query row.
    pub fn keys(rows: usize, keys: &[bool]) -> Self {
        Self::from_fn(rows, keys.len(), |_, c| keys[c])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    fn check(&self, rows: usize, cols: usize) -> Result<(), NumericsError> {
        if self.rows != rows || self.cols != cols {
            return Err(NumericsError::Shape(format!(
                "mask {}x{} does not cover {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Update-gate, reset-gate and candidate weights of a GRU cell.
///
/// Generic over the handle type so the same layout serves stored parameters
/// (`ParamId`), bound graph nodes (`Var`) and plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<P> {
    pub w_z: P,
    pub u_z: P,
    pub b_z: P,
    pub w_r: P,
    pub u_r: P,
    pub b_r: P,
    pub w_h: P,
    pub u_h: P,
    pub b_h: P,
}

impl<P> GruParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> GruParams<Q> {
        GruParams {
            w_z: f(&self.w_z),
            u_z: f(&self.u_z),
            b_z: f(&self.b_z),
            w_r: f(&self.w_r),
            u_r: f(&self.u_r),
            b_r: f(&self.b_r),
            w_h: f(&self.w_h),
            u_h: f(&self.u_h),
            b_h: f(&self.b_h),
        }
    }
}

impl<T: Scalar> GruParams<Tensor<T>> {
    /// All-zero parameters of width `d`.
    pub fn zeros(d: usize) -> Self {
        let m = || Tensor::zeros(&[d, d]);
        let b = || Tensor::zeros(&[d]);
        Self { w_z: m(), u_z: m(), b_z: b(), w_r: m(), u_r: m(), b_r: b(), w_h: m(), u_h: m(), b_h: b() }
    }

    fn validate(&self, d: usize) -> Result<(), NumericsError> {
        let mats = [&self.w_z, &self.u_z, &self.w_r, &self.u_r, &self.w_h, &self.u_h];
        let biases = [&self.b_z, &self.b_r, &self.b_h];
        if mats.iter().any(|m| m.shape() != [d, d]) || biases.iter().any(|b| b.len() != d) {
            return Err(NumericsError::Shape(format!("GRU parameters do not match width {d}")));
        }
        Ok(())
    }
}

/// GRU step on a graph:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `h̃ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_step<T: Scalar>(g: &mut Graph<'_, T>, x: Var, h: Var, p: &GruParams<Var>) -> Result<Var, NumericsError> {
    if g.value(x).shape() != g.value(h).shape() {
        return Err(NumericsError::Shape(format!(
            "gru: input {:?} vs state {:?}",
            g.value(x).shape(),
            g.value(h).shape()
        )));
    }
    let gate = |g: &mut Graph<'_, T>, w: Var, u: Var, b: Var| -> Result<Var, NumericsError> {
        let xw = g.linear(x, w, Some(b))?;
        let hu = g.matmul(h, u)?;
        g.add(xw, hu)
    };
    let z_pre = gate(g, p.w_z, p.u_z, p.b_z)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate(g, p.w_r, p.u_r, p.b_r)?;
    let r = g.sigmoid(r_pre)?;
    let xw = g.linear(x, p.w_h, Some(p.b_h))?;
    let rh = g.mul(r, h)?;
    let rhu = g.matmul(rh, p.u_h)?;
    let cand_pre = g.add(xw, rhu)?;
    let cand = g.tanh(cand_pre)?;
    let keep = g.one_minus(z)?;
    let carried = g.mul(keep, h)?;
    let written = g.mul(z, cand)?;
    g.add(carried, written)
}

/// One GRU step on plain tensors.
pub fn gru_cell<T: Scalar>(x: &Tensor<T>, h: &Tensor<T>, p: &GruParams<Tensor<T>>) -> Result<Tensor<T>, NumericsError> {
    p.validate(x.cols())?;
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let hv = g.input(h.clone())?;
    let mut bind = |t: &Tensor<T>| g.input(t.clone());
    let pv = GruParams {
        w_z: bind(&p.w_z)?,
        u_z: bind(&p.u_z)?,
        b_z: bind(&p.b_z)?,
        w_r: bind(&p.w_r)?,
        u_r: bind(&p.u_r)?,
        b_r: bind(&p.b_r)?,
        w_h: bind(&p.w_h)?,
        u_h: bind(&p.u_h)?,
        b_h: bind(&p.b_h)?,
    };
    let out = gru_step(&mut g, xv, hv, &pv)?;
    Ok(g.value(out).clone())
}

/// Result of [`masked_softmax`]: the weights plus how many rows fell back
/// to uniform because every position was masked.
#[derive(Debug, Clone)]
pub struct SoftmaxOutput<T> {
    pub weights: Tensor<T>,
    pub degenerate_rows: usize,
}

/// Softmax along the last axis with an optional visibility mask.
pub fn masked_softmax<T: Scalar>(x: &Tensor<T>, mask: Option<&Mask>) -> Result<SoftmaxOutput<T>, NumericsError> {
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let out = g.masked_softmax(xv, mask)?;
    Ok(SoftmaxOutput { weights: g.value(out).clone(), degenerate_rows: g.degenerate_rows() })
}

/// Single-head `softmax(q kᵀ / sqrt(d_q)) v` with optional mask.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>, NumericsError> {
    if k.is_empty() {
        return Err(NumericsError::EmptyKeys);
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q.clone())?, g.input(k.clone())?, g.input(v.clone())?);
    let out = g.attention(qv, kv, vv, 1, mask)?;
    Ok(g.value(out).clone())
}

/// Summed token negative log-likelihood of `targets` under `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T, NumericsError> {
    let mut g = Graph::new();
    let lv = g.input(logits.clone())?;
    let out = g.cross_entropy(lv, targets)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests;
