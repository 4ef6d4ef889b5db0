//! Context memory carried across the frames of a story.
//!
//! Per frame `t` a fusion layer:
//! 1. builds the memory bundle `M̃` from the history (`M_0` at `t = 1`,
//!    `M_1` at `t = 2`, `[M_{t-1}; Attn(M_{t-1}, M_{1:t-2}, M_{1:t-2})]`
//!    afterwards when attentive weighting is on);
//! 2. fuses it into the hidden state, `Attn(H, [H; M̃], [H; M̃])`;
//! 3. summarizes the text positions of the frame, `S_t = Attn(M_{t-1}, H, H)`;
//! 4. writes `M_t = GRU(S_t, M_{t-1})`.
//!
//! [`ops`] holds the graph versions used by the model; the free functions
//! here are tensor-in, tensor-out wrappers with the same semantics.

pub mod ops;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{GruParams, Mask, NumericsError, Tensor};
use crate::scalar::Scalar;
use crate::tokenizer::Modality;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("no memory exists before frame 2 (asked for frame {0})")]
    NoMemory(usize),
    #[error("memory bank holds {got} states, frame {t} needs {expected}")]
    BankLength { t: usize, expected: usize, got: usize },
    #[error("memory timesteps must increase: {last} then {next}")]
    NonIncreasing { last: usize, next: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Where memory paths are attached in the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    None,
    AllLevel,
    PartialLevel,
}

/// Zero-based indices of the layers that own a memory path.
pub fn apply_topology(topology: Topology, layers: usize) -> Vec<usize> {
    match topology {
        Topology::None => Vec::new(),
        Topology::AllLevel => (0..layers).collect(),
        Topology::PartialLevel => layers.checked_sub(1).into_iter().collect(),
    }
}

/// Query/key/value projections (no bias, no output projection).
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
}

impl<P> Qkv<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Qkv<Q> {
        Qkv { wq: f(&self.wq), wk: f(&self.wk), wv: f(&self.wv) }
    }
}

/// Fusion sublayer: pre-norm plus projections and an output map.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseParams<P> {
    pub ln_gain: P,
    pub ln_bias: P,
    pub qkv: Qkv<P>,
    pub wo: P,
}

impl<P> FuseParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> FuseParams<Q> {
        FuseParams { ln_gain: f(&self.ln_gain), ln_bias: f(&self.ln_bias), qkv: self.qkv.map(&mut f), wo: f(&self.wo) }
    }
}

/// Everything one fusion layer owns.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryParams<P> {
    /// Learned initial state `M_0`, `T_M x d`.
    pub m0: P,
    pub summarize: Qkv<P>,
    pub gru: GruParams<P>,
    pub fuse: FuseParams<P>,
    /// Present when attentive weighting is enabled.
    pub awm: Option<Qkv<P>>,
}

impl<P> MemoryParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> MemoryParams<Q> {
        MemoryParams {
            m0: f(&self.m0),
            summarize: self.summarize.map(&mut f),
            gru: self.gru.map(&mut f),
            fuse: self.fuse.map(&mut f),
            awm: self.awm.as_ref().map(|a| a.map(&mut f)),
        }
    }
}

/// Trainable scalar count of one fusion layer's memory path.
pub fn memory_param_count(d: usize, t_m: usize, awm: bool) -> usize {
    let base = t_m * d + 3 * d * d + (6 * d * d + 3 * d) + (2 * d + 4 * d * d);
    base + if awm { 3 * d * d } else { 0 }
}

/// `M_t` together with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T> {
    pub m: Tensor<T>,
    pub t: usize,
}

/// Ordered history `M_1 .. M_{t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    states: Vec<MemoryState<T>>,
}

impl<T: Scalar> Default for MemoryBank<T> {
    fn default() -> Self {
        Self { states: Vec::new() }
    }
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, state: MemoryState<T>) -> Result<(), MemoryError> {
        if let Some(last) = self.states.last() {
            if state.t <= last.t {
                return Err(MemoryError::NonIncreasing { last: last.t, next: state.t });
            }
        }
        self.states.push(state);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[MemoryState<T>] {
        &self.states
    }

    pub fn latest(&self) -> Option<&MemoryState<T>> {
        self.states.last()
    }
}

/// Visibility of combined-sequence positions to memory summarization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryMask {
    pub visible: Vec<bool>,
}

impl MemoryMask {
    /// Attention mask for `rows` memory queries over the tagged positions.
    pub fn for_queries(&self, rows: usize) -> Mask {
        Mask::keys(rows, &self.visible)
    }

    pub fn count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// True exactly at text positions.
pub fn build_memory_mask(modalities: &[Modality]) -> MemoryMask {
    MemoryMask { visible: modalities.iter().map(|&m| m == Modality::Text).collect() }
}

fn check_bank<T: Scalar>(bank: &MemoryBank<T>, t: usize) -> Result<(), MemoryError> {
    if t < 2 {
        return Err(MemoryError::NoMemory(t));
    }
    if bank.len() != t - 1 {
        return Err(MemoryError::BankLength { t, expected: t - 1, got: bank.len() });
    }
    Ok(())
}

/// `S_t = Attn(M_{t-1}W_q, HW_k, HW_v)` restricted to visible positions.
pub fn summarize<T: Scalar>(
    m_prev: &MemoryState<T>,
    h: &Tensor<T>,
    mask: &MemoryMask,
    proj: &Qkv<Tensor<T>>,
    heads: usize,
) -> Result<Tensor<T>, MemoryError> {
    let mut g = crate::numerics::Graph::new();
    let m = g.input(m_prev.m.clone())?;
    let hv = g.input(h.clone())?;
    let p = proj.map(|t| g.input(t.clone()));
    let p = Qkv { wq: p.wq?, wk: p.wk?, wv: p.wv? };
    let s = ops::summarize(&mut g, m, hv, mask, &p, heads)?;
    Ok(g.value(s).clone())
}

/// `M_t = GRU(S_t, M_{t-1})`.
pub fn update<T: Scalar>(s: &Tensor<T>, m_prev: &MemoryState<T>, gru: &GruParams<Tensor<T>>) -> Result<MemoryState<T>, MemoryError> {
    let m = crate::numerics::gru_cell(s, &m_prev.m, gru)?;
    Ok(MemoryState { m, t: m_prev.t + 1 })
}

/// Memory bundle for frame `t >= 2` from a bank holding `M_1 .. M_{t-1}`.
///
/// Returns `M_1` at `t = 2`. For `t >= 3` with `proj` present the result is
/// `[M_{t-1}; Attn(M_{t-1}W_q, M_{1:t-2}W_k, M_{1:t-2}W_v)]`; without `proj`
/// it is `M_{t-1}`.
pub fn attentive_weight<T: Scalar>(
    bank: &MemoryBank<T>,
    t: usize,
    proj: Option<&Qkv<Tensor<T>>>,
    heads: usize,
) -> Result<Tensor<T>, MemoryError> {
    check_bank(bank, t)?;
    let mut g = crate::numerics::Graph::new();
    let entries = bank.states().iter().map(|s| g.input(s.m.clone())).collect::<Result<Vec<_>, _>>()?;
    let proj = match proj {
        Some(p) => {
            let b = p.map(|t| g.input(t.clone()));
            Some(Qkv { wq: b.wq?, wk: b.wk?, wv: b.wv? })
        }
        None => None,
    };
    let out = ops::attentive_weight(&mut g, &entries, proj.as_ref(), heads)?;
    Ok(g.value(out.bundle).clone())
}

/// `Attn(HW_q, [H; M̃]W_k, [H; M̃]W_v)` with `mask` applied over the `H`
/// columns and every memory column visible.
pub fn fuse<T: Scalar>(
    h: &Tensor<T>,
    m_tilde: &Tensor<T>,
    proj: &Qkv<Tensor<T>>,
    mask: Option<&Mask>,
    heads: usize,
) -> Result<Tensor<T>, MemoryError> {
    let mut g = crate::numerics::Graph::new();
    let hv = g.input(h.clone())?;
    let mv = g.input(m_tilde.clone())?;
    let p = proj.map(|t| g.input(t.clone()));
    let p = Qkv { wq: p.wq?, wk: p.wk?, wv: p.wv? };
    let out = ops::fuse_attention(&mut g, hv, mv, &p, mask, heads)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests;
