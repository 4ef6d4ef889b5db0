//! Bidirectional text↔image-token transformer.
//!
//! One trunk serves both directions. A text-to-image sequence is
//! `[SOS, t_1 .. t_m, SOI, z_1 .. z_{n-1}]` and predicts `z_1 .. z_n` from
//! the positions `SOI .. z_{n-1}`; image-to-text is
//! `[SOI, z_1 .. z_n, SOS, t_1 .. t_{m-1}]` predicting `t_1 .. t_m`.
//! Source positions see each other and nothing else; target positions see
//! every source position and earlier targets. Each position's input is
//! token + absolute position + segment (source/target) embedding.
//!
//! Layers are pre-norm: self-attention, then (at fusion layers, when a
//! memory history is supplied) the memory fusion sublayer, then a GELU
//! feed-forward block.

mod config;

pub use config::ModelConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::memory::{ops as mem_ops, build_memory_mask, FuseParams, MemoryError, MemoryParams, Qkv};
use crate::numerics::{gru_step, Graph, GruParams, Mask, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::tokenizer::{Modality, TokenSequence, EOS, PAD, SOI, SOS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    T2i,
    I2t,
}

/// A combined token sequence ready for embedding.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub direction: Direction,
    /// Rows of the joint embedding table (image ids offset by the text vocabulary).
    pub ids: Vec<usize>,
    pub modality: Vec<Modality>,
    /// 0 for source positions, 1 for target positions.
    pub segment: Vec<usize>,
    /// First position whose output is a prediction.
    pub output_start: usize,
    pub mask: Mask,
}

impl Sequence {
    /// `[SOS, text.., SOI, image_prefix..]`; `text` holds word ids (EOS included).
    pub fn t2i(cfg: &ModelConfig, text: &[usize], image_prefix: &[usize]) -> Result<Self, ModelError> {
        check_text(cfg, text)?;
        check_image(cfg, image_prefix, cfg.t_image - 1)?;
        let src: Vec<usize> = std::iter::once(SOS).chain(text.iter().copied()).collect();
        let tgt: Vec<usize> = std::iter::once(SOI).chain(image_prefix.iter().map(|&z| z + cfg.text_vocab)).collect();
        Ok(Self::build(Direction::T2i, src, Modality::Text, tgt, Modality::Image))
    }

    /// `[SOI, image.., SOS, text_prefix..]`.
    pub fn i2t(cfg: &ModelConfig, image: &[usize], text_prefix: &[usize]) -> Result<Self, ModelError> {
        check_image(cfg, image, cfg.t_image)?;
        if text_prefix.len() >= cfg.t_text {
            return Err(ModelError::Sequence(format!("text prefix of {} exceeds {}", text_prefix.len(), cfg.t_text - 1)));
        }
        check_text(cfg, text_prefix)?;
        let src: Vec<usize> = std::iter::once(SOI).chain(image.iter().map(|&z| z + cfg.text_vocab)).collect();
        let tgt: Vec<usize> = std::iter::once(SOS).chain(text_prefix.iter().copied()).collect();
        Ok(Self::build(Direction::I2t, src, Modality::Image, tgt, Modality::Text))
    }

    fn build(direction: Direction, src: Vec<usize>, src_mod: Modality, tgt: Vec<usize>, tgt_mod: Modality) -> Self {
        let s = src.len();
        let n = s + tgt.len();
        // The SOS/SOI markers carry the modality of what follows them.
        let mut modality = vec![src_mod; s];
        modality.extend(std::iter::repeat_n(tgt_mod, tgt.len()));
        let mut segment = vec![0; s];
        segment.extend(std::iter::repeat_n(1, tgt.len()));
        let mask = Mask::from_fn(n, n, |r, c| if r < s { c < s } else { c <= r });
        let mut ids = src;
        ids.extend(tgt);
        Self { direction, ids, modality, segment, output_start: s, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn output_len(&self) -> usize {
        self.len() - self.output_start
    }
}

fn check_text(cfg: &ModelConfig, text: &[usize]) -> Result<(), ModelError> {
    if text.len() > cfg.t_text {
        return Err(ModelError::Sequence(format!("text of {} tokens exceeds {}", text.len(), cfg.t_text)));
    }
    if let Some(&t) = text.iter().find(|&&t| t >= cfg.text_vocab) {
        return Err(ModelError::Sequence(format!("text token {t} outside vocabulary of {}", cfg.text_vocab)));
    }
    Ok(())
}

fn check_image(cfg: &ModelConfig, image: &[usize], max: usize) -> Result<(), ModelError> {
    if image.len() > max {
        return Err(ModelError::Sequence(format!("{} image tokens exceed {max}", image.len())));
    }
    if let Some(&z) = image.iter().find(|&&z| z >= cfg.codebook_size) {
        return Err(ModelError::Sequence(format!("image token {z} outside codebook of {}", cfg.codebook_size)));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    w1: (ParamId, ParamId),
    w2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct ModelIds {
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    layers: Vec<LayerIds>,
    /// Memory path of each fusion layer, parallel to `fusion`.
    memory: Vec<MemoryParams<ParamId>>,
    fusion: Vec<usize>,
    ln_f: (ParamId, ParamId),
    text_head: (ParamId, ParamId),
    image_head: (ParamId, ParamId),
}

/// Parameters plus the layout that addresses them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: ModelIds,
}

/// Graph nodes produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[output positions x target vocabulary]`.
    pub logits: Var,
    /// `M_t` for each fusion layer (empty without memory).
    pub memories: Vec<Var>,
    /// Summary attention node for each fusion layer.
    pub summary_attention: Vec<Var>,
    /// Attentive-weighting node for each fusion layer, when one was built.
    pub awm_attention: Vec<Option<Var>>,
    /// Residual stream after each layer.
    pub hidden: Vec<Var>,
}

/// Memory history of one direction of one story: `M_1 .. M_{t-1}` for each
/// fusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryChain<H> {
    pub layers: Vec<Vec<H>>,
}

impl<H: Clone> MemoryChain<H> {
    pub fn new(fusion_layers: usize) -> Self {
        Self { layers: vec![Vec::new(); fusion_layers] }
    }

    /// The frame the next forward pass belongs to (1-based).
    pub fn frame(&self) -> usize {
        self.layers.first().map_or(1, |l| l.len() + 1)
    }

    pub fn push(&mut self, memories: Vec<H>) {
        debug_assert_eq!(memories.len(), self.layers.len());
        for (layer, m) in self.layers.iter_mut().zip(memories) {
            layer.push(m);
        }
    }
}

impl<T: Scalar> MemoryChain<Tensor<T>> {
    /// Binds the stored values as constants on `g`.
    pub fn bind(&self, g: &mut Graph<'_, T>) -> Result<MemoryChain<Var>, NumericsError> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.iter().map(|m| g.input(m.clone())).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MemoryChain { layers })
    }
}

/// Result of greedy decoding.
#[derive(Debug, Clone)]
pub struct Generation<T> {
    pub tokens: TokenSequence,
    /// `M_t` per fusion layer when decoding ran with memory.
    pub memories: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, std) = (config.d_model, config.init_std);
        let dense = |p: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng| {
            (p.normal(&format!("{name}.w"), &[din, dout], std, rng), p.zeros(&format!("{name}.b"), &[dout]))
        };
        let ln = |p: &mut ParamStore<T>, name: &str| (p.ones(&format!("{name}.g"), &[d]), p.zeros(&format!("{name}.b"), &[d]));

        let tok = p.normal("embed.token", &[config.text_vocab + config.codebook_size, d], std, &mut rng);
        let pos = p.normal("embed.position", &[config.positions(), d], std, &mut rng);
        let seg = p.normal("embed.segment", &[2, d], std, &mut rng);
        let fusion = config.fusion_layers();
        let mut layers = Vec::new();
        let mut memory = Vec::new();
        for l in 0..config.layers {
            let n = format!("layer{l}");
            layers.push(LayerIds {
                ln1: ln(&mut p, &format!("{n}.ln1")),
                wq: dense(&mut p, &format!("{n}.attn.q"), d, d, &mut rng),
                wk: dense(&mut p, &format!("{n}.attn.k"), d, d, &mut rng),
                wv: dense(&mut p, &format!("{n}.attn.v"), d, d, &mut rng),
                wo: dense(&mut p, &format!("{n}.attn.o"), d, d, &mut rng),
                ln2: ln(&mut p, &format!("{n}.ln2")),
                w1: dense(&mut p, &format!("{n}.ffn.1"), d, 4 * d, &mut rng),
                w2: dense(&mut p, &format!("{n}.ffn.2"), 4 * d, d, &mut rng),
            });
            if fusion.contains(&l) {
                let n = format!("memory{l}");
                let mut mat = |p: &mut ParamStore<T>, name: &str| p.normal(&format!("{n}.{name}"), &[d, d], std, &mut rng);
                let summarize = Qkv { wq: mat(&mut p, "summary.q"), wk: mat(&mut p, "summary.k"), wv: mat(&mut p, "summary.v") };
                let gru = GruParams {
                    w_z: mat(&mut p, "gru.w_z"),
                    u_z: mat(&mut p, "gru.u_z"),
                    b_z: p.zeros(&format!("{n}.gru.b_z"), &[d]),
                    w_r: mat(&mut p, "gru.w_r"),
                    u_r: mat(&mut p, "gru.u_r"),
                    b_r: p.zeros(&format!("{n}.gru.b_r"), &[d]),
                    w_h: mat(&mut p, "gru.w_h"),
                    u_h: mat(&mut p, "gru.u_h"),
                    b_h: p.zeros(&format!("{n}.gru.b_h"), &[d]),
                };
                let fuse_qkv = Qkv { wq: mat(&mut p, "fuse.q"), wk: mat(&mut p, "fuse.k"), wv: mat(&mut p, "fuse.v") };
                let wo = mat(&mut p, "fuse.o");
                let awm = config
                    .awm
                    .then(|| Qkv { wq: mat(&mut p, "awm.q"), wk: mat(&mut p, "awm.k"), wv: mat(&mut p, "awm.v") });
                let fuse_ln = ln(&mut p, &format!("{n}.fuse.ln"));
                let m0 = p.normal(&format!("{n}.m0"), &[config.t_m, d], std, &mut rng);
                memory.push(MemoryParams {
                    m0,
                    summarize,
                    gru,
                    fuse: FuseParams { ln_gain: fuse_ln.0, ln_bias: fuse_ln.1, qkv: fuse_qkv, wo },
                    awm,
                });
            }
        }
        let ln_f = ln(&mut p, "final_ln");
        let text_head = dense(&mut p, "head.text", d, config.text_vocab, &mut rng);
        let image_head = dense(&mut p, "head.image", d, config.codebook_size, &mut rng);
        let ids = ModelIds { tok, pos, seg, layers, memory, fusion, ln_f, text_head, image_head };
        Ok(Self { config, params: p, ids })
    }

    /// Trainable scalars actually allocated.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Zeroes both output heads (every logit becomes 0).
    pub fn zero_heads(&mut self) {
        for id in [self.ids.text_head.0, self.ids.text_head.1, self.ids.image_head.0, self.ids.image_head.1] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn fusion_layers(&self) -> &[usize] {
        &self.ids.fusion
    }

    /// Parameter ids of the memory path of fusion layer `i` (index into [`Self::fusion_layers`]).
    pub fn memory_param_ids(&self, i: usize) -> &MemoryParams<ParamId> {
        &self.ids.memory[i]
    }

    /// An empty history for one story direction.
    pub fn new_chain<H: Clone>(&self) -> MemoryChain<H> {
        MemoryChain::new(self.ids.fusion.len())
    }

    /// Token + position + segment embedding of `seq`.
    pub fn embed(&self, g: &mut Graph<'_, T>, seq: &Sequence) -> Result<Var, ModelError> {
        if seq.len() > self.config.positions() {
            return Err(ModelError::Sequence(format!("{} positions exceed {}", seq.len(), self.config.positions())));
        }
        let (tok, pos, seg) = (g.param(self.ids.tok), g.param(self.ids.pos), g.param(self.ids.seg));
        let e_tok = g.embedding(tok, &seq.ids)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let e_pos = g.embedding(pos, &positions)?;
        let e_seg = g.embedding(seg, &seq.segment)?;
        let x = g.add(e_tok, e_pos)?;
        Ok(g.add(x, e_seg)?)
    }

    /// Runs the stack. With `memory` present, every fusion layer fuses its
    /// bundle and emits `M_t`; without it the model is a plain transformer.
    pub fn forward(&self, g: &mut Graph<'_, T>, seq: &Sequence, memory: Option<&MemoryChain<Var>>) -> Result<ForwardOutput, ModelError> {
        if let Some(m) = memory {
            if m.layers.len() != self.ids.fusion.len() {
                return Err(ModelError::Sequence(format!(
                    "memory chain has {} layers, model fuses at {}",
                    m.layers.len(),
                    self.ids.fusion.len()
                )));
            }
        }
        let heads = self.config.heads;
        let e = self.embed(g, seq)?;
        let mut x = g.dropout(e)?;
        let mut out = ForwardOutput {
            logits: x,
            memories: Vec::new(),
            summary_attention: Vec::new(),
            awm_attention: Vec::new(),
            hidden: Vec::new(),
        };
        let memory_mask = build_memory_mask(&seq.modality);
        for (l, ids) in self.ids.layers.iter().enumerate() {
            let (g1, b1) = (g.param(ids.ln1.0), g.param(ids.ln1.1));
            let a = g.layer_norm(x, g1, b1)?;
            let attn = self.self_attention(g, a, ids, &seq.mask)?;
            let attn = g.dropout(attn)?;
            x = g.add(x, attn)?;

            let slot = self.ids.fusion.iter().position(|&f| f == l);
            if let (Some(i), Some(chain)) = (slot, memory) {
                let mp = self.ids.memory[i].map(|&id| g.param(id));
                let history = &chain.layers[i];
                let (bundle, awm) = match history.len() {
                    0 => (mp.m0, None),
                    _ => {
                        let b = mem_ops::attentive_weight(g, history, mp.awm.as_ref(), heads)?;
                        (b.bundle, b.weights)
                    }
                };
                let f = g.layer_norm(x, mp.fuse.ln_gain, mp.fuse.ln_bias)?;
                let fused = mem_ops::fuse_attention(g, f, bundle, &mp.fuse.qkv, Some(&seq.mask), heads)?;
                let fused = g.matmul(fused, mp.fuse.wo)?;
                let fused = g.dropout(fused)?;
                x = g.add(x, fused)?;

                let m_prev = history.last().copied().unwrap_or(mp.m0);
                let s = mem_ops::summarize(g, m_prev, a, &memory_mask, &mp.summarize, heads)?;
                let m_t = gru_step(g, s, m_prev, &mp.gru)?;
                out.memories.push(m_t);
                out.summary_attention.push(s);
                out.awm_attention.push(awm);
            }

            let (g2, b2) = (g.param(ids.ln2.0), g.param(ids.ln2.1));
            let b = g.layer_norm(x, g2, b2)?;
            let (w1, c1) = (g.param(ids.w1.0), g.param(ids.w1.1));
            let h = g.linear(b, w1, Some(c1))?;
            let h = g.gelu(h)?;
            let (w2, c2) = (g.param(ids.w2.0), g.param(ids.w2.1));
            let f = g.linear(h, w2, Some(c2))?;
            let f = g.dropout(f)?;
            x = g.add(x, f)?;
            out.hidden.push(x);
        }
        let y = g.rows(x, seq.output_start, seq.output_len())?;
        let (gf, bf) = (g.param(self.ids.ln_f.0), g.param(self.ids.ln_f.1));
        let y = g.layer_norm(y, gf, bf)?;
        let head = match seq.direction {
            Direction::T2i => self.ids.image_head,
            Direction::I2t => self.ids.text_head,
        };
        let (hw, hb) = (g.param(head.0), g.param(head.1));
        out.logits = g.linear(y, hw, Some(hb))?;
        Ok(out)
    }

    fn self_attention(&self, g: &mut Graph<'_, T>, a: Var, ids: &LayerIds, mask: &Mask) -> Result<Var, ModelError> {
        let mut proj = |p: (ParamId, ParamId)| {
            let (w, b) = (g.param(p.0), g.param(p.1));
            g.linear(a, w, Some(b))
        };
        let q = proj(ids.wq)?;
        let k = proj(ids.wk)?;
        let v = proj(ids.wv)?;
        let att = g.attention(q, k, v, self.config.heads, Some(mask))?;
        let (wo, bo) = (g.param(ids.wo.0), g.param(ids.wo.1));
        Ok(g.linear(att, wo, Some(bo))?)
    }

    /// Teacher-forced text-to-image pass: logits for every image position.
    pub fn t2i_sequence(&self, text: &[usize], image: &[usize]) -> Result<Sequence, ModelError> {
        if image.len() != self.config.t_image {
            return Err(ModelError::Sequence(format!("expected {} image tokens, got {}", self.config.t_image, image.len())));
        }
        Sequence::t2i(&self.config, text, &image[..image.len() - 1])
    }

    /// Teacher-forced image-to-text pass over `text` (EOS included).
    pub fn i2t_sequence(&self, image: &[usize], text: &[usize]) -> Result<Sequence, ModelError> {
        if text.is_empty() {
            return Err(ModelError::Sequence("empty caption".into()));
        }
        Sequence::i2t(&self.config, image, &text[..text.len() - 1])
    }

    /// Greedy decoding of exactly `T_image` tokens (ties go to the lowest index).
    pub fn generate_image_tokens(&self, text: &[usize], memory: Option<&MemoryChain<Tensor<T>>>) -> Result<Generation<T>, ModelError> {
        let mut g = Graph::with_params(&self.params);
        let chain = memory.map(|m| m.bind(&mut g)).transpose()?;
        let (tokens, mems) = self.decode_image(&mut g, text, chain.as_ref())?;
        let memories = mems.map(|m| m.iter().map(|&v| g.value(v).clone()).collect());
        Ok(Generation { tokens, memories })
    }

    /// Greedy decoding until EOS or `max_len` tokens (capped at `T_text`).
    /// PAD, SOS and SOI are never emitted.
    pub fn generate_text_tokens(
        &self,
        image: &[usize],
        memory: Option<&MemoryChain<Tensor<T>>>,
        max_len: usize,
    ) -> Result<Generation<T>, ModelError> {
        let mut g = Graph::with_params(&self.params);
        let chain = memory.map(|m| m.bind(&mut g)).transpose()?;
        let (tokens, mems) = self.decode_text(&mut g, image, chain.as_ref(), max_len)?;
        let memories = mems.map(|m| m.iter().map(|&v| g.value(v).clone()).collect());
        Ok(Generation { tokens, memories })
    }

    /// [`Self::generate_image_tokens`] recorded on an existing graph. The
    /// emitted memories are those of the first decoding step; they depend on
    /// the text positions only, so every step produces the same values.
    pub fn decode_image(
        &self,
        g: &mut Graph<'_, T>,
        text: &[usize],
        memory: Option<&MemoryChain<Var>>,
    ) -> Result<(TokenSequence, Option<Vec<Var>>), ModelError> {
        let mut prefix = Vec::with_capacity(self.config.t_image);
        let mut memories = None;
        while prefix.len() < self.config.t_image {
            let seq = Sequence::t2i(&self.config, text, &prefix)?;
            let out = self.forward(g, &seq, memory)?;
            if prefix.is_empty() && memory.is_some() {
                memories = Some(out.memories.clone());
            }
            prefix.push(last_argmax(g, out.logits, |_| true));
        }
        let len = prefix.len();
        Ok((TokenSequence { modality: Modality::Image, indices: prefix, len }, memories))
    }

    /// [`Self::generate_text_tokens`] recorded on an existing graph. The
    /// emitted memories come from the final step, whose text prefix matches
    /// what a teacher-forced pass over the decoded caption would see.
    pub fn decode_text(
        &self,
        g: &mut Graph<'_, T>,
        image: &[usize],
        memory: Option<&MemoryChain<Var>>,
        max_len: usize,
    ) -> Result<(TokenSequence, Option<Vec<Var>>), ModelError> {
        let max_len = max_len.min(self.config.t_text);
        let mut out: Vec<usize> = Vec::new();
        let mut memories = None;
        while out.len() < max_len {
            let seq = Sequence::i2t(&self.config, image, &out)?;
            let fwd = self.forward(g, &seq, memory)?;
            if memory.is_some() {
                memories = Some(fwd.memories.clone());
            }
            let next = last_argmax(g, fwd.logits, |t| t != PAD && t != SOS && t != SOI);
            out.push(next);
            if next == EOS {
                break;
            }
        }
        let len = out.len();
        out.resize(self.config.t_text, PAD);
        Ok((TokenSequence { modality: Modality::Text, indices: out, len }, memories))
    }
}

fn last_argmax<T: Scalar>(g: &Graph<'_, T>, logits: Var, allowed: impl Fn(usize) -> bool) -> usize {
    let l = g.value(logits);
    argmax(l.row(l.rows() - 1), allowed)
}

/// Index of the largest allowed value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        if allowed(i) && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}

#[cfg(test)]
mod tests;
