//! Graph-level memory operations.

use crate::memory::{MemoryMask, Qkv};
use crate::numerics::{Graph, Mask, NumericsError, Var};
use crate::scalar::Scalar;

/// Summary attention over the visible rows of `h`. The returned node is
/// the attention node itself, so its weights are available through
/// [`Graph::attention_probs`].
pub fn summarize<T: Scalar>(
    g: &mut Graph<'_, T>,
    m_prev: Var,
    h: Var,
    mask: &MemoryMask,
    proj: &Qkv<Var>,
    heads: usize,
) -> Result<Var, NumericsError> {
    if mask.visible.len() != g.value(h).rows() {
        return Err(NumericsError::Shape(format!(
            "memory mask covers {} positions, hidden state has {}",
            mask.visible.len(),
            g.value(h).rows()
        )));
    }
    let q = g.matmul(m_prev, proj.wq)?;
    let k = g.matmul(h, proj.wk)?;
    let v = g.matmul(h, proj.wv)?;
    let rows = g.value(m_prev).rows();
    g.attention(q, k, v, heads, Some(&mask.for_queries(rows)))
}

/// Output of [`attentive_weight`].
#[derive(Debug, Clone, Copy)]
pub struct Bundle {
    pub bundle: Var,
    /// Attention node over the older memories, when one was built.
    pub weights: Option<Var>,
}

/// Builds the memory bundle from `entries = [M_1 .. M_{t-1}]`.
pub fn attentive_weight<T: Scalar>(
    g: &mut Graph<'_, T>,
    entries: &[Var],
    proj: Option<&Qkv<Var>>,
    heads: usize,
) -> Result<Bundle, NumericsError> {
    let (&latest, older) = entries.split_last().ok_or(NumericsError::EmptyKeys)?;
    let Some(proj) = proj.filter(|_| !older.is_empty()) else {
        return Ok(Bundle { bundle: latest, weights: None });
    };
    let past = if older.len() == 1 { older[0] } else { g.concat_rows(older)? };
    let q = g.matmul(latest, proj.wq)?;
    let k = g.matmul(past, proj.wk)?;
    let v = g.matmul(past, proj.wv)?;
    let weighted = g.attention(q, k, v, heads, None)?;
    let bundle = g.concat_rows(&[latest, weighted])?;
    Ok(Bundle { bundle, weights: Some(weighted) })
}

/// Visibility for fused attention: `mask` over the hidden columns, memory
/// columns open to every query.
pub fn fuse_mask(rows: usize, memory_rows: usize, mask: Option<&Mask>) -> Mask {
    Mask::from_fn(rows, rows + memory_rows, |r, c| c >= rows || mask.is_none_or(|m| m.allowed(r, c)))
}

/// `Attn(HW_q, [H; M̃]W_k, [H; M̃]W_v)`.
pub fn fuse_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    m_tilde: Var,
    proj: &Qkv<Var>,
    mask: Option<&Mask>,
    heads: usize,
) -> Result<Var, NumericsError> {
    let rows = g.value(h).rows();
    let memory_rows = g.value(m_tilde).rows();
    let joint = g.concat_rows(&[h, m_tilde])?;
    let q = g.matmul(h, proj.wq)?;
    let k = g.matmul(joint, proj.wk)?;
    let v = g.matmul(joint, proj.wv)?;
    g.attention(q, k, v, heads, Some(&fuse_mask(rows, memory_rows, mask)))
}
