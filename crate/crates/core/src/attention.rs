//! Attention masks, multi-head attention and pre-norm transformer blocks.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{ParamBuilder, ParamId, ParameterSet, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Square allowance matrix: `allows(i, j)` means query `i` may attend key `j`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..size * size).map(|k| f(k / size, k % size)).collect();
        Self { size, allowed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.size..(query + 1) * self.size]
    }
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask({})", self.size)?;
        for i in 0..self.size {
            let row: String = self.row(i).iter().map(|&a| if a { '1' } else { '.' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

/// Every token attends to itself and everything before it.
pub fn make_causal_mask(size: usize) -> AttentionMask {
    AttentionMask::from_fn(size, |i, j| j <= i)
}

/// The first `prefix_len` tokens attend to each other in both directions and
/// never to later tokens; the remaining tokens are causal over everything.
pub fn make_prefix_mask(prefix_len: usize, size: usize) -> Result<AttentionMask> {
    if prefix_len > size {
        return Err(Error::contract(format!(
            "prefix length {prefix_len} exceeds sequence length {size}"
        )));
    }
    Ok(AttentionMask::from_fn(size, |i, j| {
        (i < prefix_len && j < prefix_len) || (i >= prefix_len && j <= i)
    }))
}

/// Which mask the language model runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Prefix,
    Causal,
}

impl MaskKind {
    pub fn build(self, prefix_len: usize, size: usize) -> Result<AttentionMask> {
        match self {
            MaskKind::Prefix => make_prefix_mask(prefix_len, size),
            MaskKind::Causal => Ok(make_causal_mask(size)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Prefix => "prefix",
            MaskKind::Causal => "causal",
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(MaskKind::Prefix),
            "causal" => Ok(MaskKind::Causal),
            other => Err(Error::config("mask_kind", format!("expected prefix|causal, got `{other}`"))),
        }
    }
}

/// `softmax(q·kᵀ/√d_h) · v`, with disallowed pairs given exactly zero weight.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let d_h = tape.value(q).cols();
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d_h as f64).sqrt())?;
    if let Some(m) = mask {
        let (nq, nk) = (tape.value(scores).rows(), tape.value(scores).cols());
        if m.size() != nq || m.size() != nk {
            return Err(Error::dim("scaled_dot_attention", format!("{nq}x{nk} mask"), m.size()));
        }
    }
    let weights = tape.masked_softmax_rows(scores, mask.map(AttentionMask::as_slice))?;
    tape.matmul(weights, v)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.filled("gamma", &[d], 1.0)?,
            beta: b.filled("beta", &[d], 0.0)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParameterSet, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Query/key/value/output projections, each `d×d`, split into `n_heads`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, d: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::config("n_heads", format!("d_model {d} is not divisible by {n_heads} heads")));
        }
        Ok(Self {
            wq: b.normal("wq", &[d, d])?,
            wk: b.normal("wk", &[d, d])?,
            wv: b.normal("wv", &[d, d])?,
            wo: b.normal("wo", &[d, d])?,
            n_heads,
        })
    }
}

/// Queries from `q_in`, keys and values from `kv_in`.
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &ParameterSet,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let wq = tape.param(params, p.wq);
    let wk = tape.param(params, p.wk);
    let wv = tape.param(params, p.wv);
    let wo = tape.param(params, p.wo);
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(kv_in, wk)?;
    let v = tape.matmul(kv_in, wv)?;
    if let Some(m) = mask {
        let (nq, nk) = (tape.value(q).rows(), tape.value(k).rows());
        if m.size() != nq || m.size() != nk {
            return Err(Error::dim("multi_head_attention", format!("{nq}x{nk} mask"), m.size()));
        }
    }
    let joined = tape.multi_head(q, k, v, p.n_heads, mask.map(AttentionMask::as_slice))?;
    tape.matmul(joined, wo)
}

pub fn multi_head_self_attention(
    tape: &mut Tape,
    params: &ParameterSet,
    p: &AttentionParams,
    x: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    multi_head_attention(tape, params, p, x, x, mask)
}

/// Unmasked: every query sees every key.
pub fn multi_head_cross_attention(
    tape: &mut Tape,
    params: &ParameterSet,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
) -> Result<Var> {
    multi_head_attention(tape, params, p, q_in, kv_in, None)
}

/// `d → hidden → d` with GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: b.normal("w1", &[d, hidden])?,
            b1: b.filled("b1", &[hidden], 0.0)?,
            w2: b.normal("w2", &[hidden, d])?,
            b2: b.filled("b2", &[d], 0.0)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParameterSet, x: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(params, self.w1), tape.param(params, self.b1));
        let (w2, b2) = (tape.param(params, self.w2), tape.param(params, self.b2));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let out = tape.matmul(h, w2)?;
        tape.add_row(out, b2)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `h + ffn(ln(h))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlockParams {
    pub ln_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl TransformerBlockParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, d: usize, n_heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNormParams::new(&mut b.scoped("ln_attn"), d)?,
            attn: AttentionParams::new(&mut b.scoped("attn"), d, n_heads)?,
            ln_ffn: LayerNormParams::new(&mut b.scoped("ln_ffn"), d)?,
            ffn: FeedForwardParams::new(&mut b.scoped("ffn"), d, ffn_mult * d)?,
        })
    }
}

pub fn transformer_block(
    tape: &mut Tape,
    params: &ParameterSet,
    p: &TransformerBlockParams,
    x: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let normed = p.ln_attn.apply(tape, params, x)?;
    let attended = multi_head_self_attention(tape, params, &p.attn, normed, mask)?;
    let h = tape.add(x, attended)?;
    let normed = p.ln_ffn.apply(tape, params, h)?;
    let ff = p.ffn.apply(tape, params, normed)?;
    tape.add(h, ff)
}

/// Pre-norm cross-attention block used by the memory resampler and the
/// retrieval stages: `q + attn(ln_q(q), ln_kv(kv))`, then an FFN residual.
#[derive(Debug, Clone, Copy)]
pub struct CrossBlockParams {
    pub ln_query: LayerNormParams,
    pub ln_context: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl CrossBlockParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, d: usize, n_heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            ln_query: LayerNormParams::new(&mut b.scoped("ln_query"), d)?,
            ln_context: LayerNormParams::new(&mut b.scoped("ln_context"), d)?,
            attn: AttentionParams::new(&mut b.scoped("attn"), d, n_heads)?,
            ln_ffn: LayerNormParams::new(&mut b.scoped("ln_ffn"), d)?,
            ffn: FeedForwardParams::new(&mut b.scoped("ffn"), d, ffn_mult * d)?,
        })
    }
}

/// The attention read-out of a cross block, before any residual.
pub fn cross_readout(
    tape: &mut Tape,
    params: &ParameterSet,
    p: &CrossBlockParams,
    query: Var,
    context: Var,
) -> Result<Var> {
    let q = p.ln_query.apply(tape, params, query)?;
    let kv = p.ln_context.apply(tape, params, context)?;
    multi_head_cross_attention(tape, params, &p.attn, q, kv)
}

pub fn cross_block(
    tape: &mut Tape,
    params: &ParameterSet,
    p: &CrossBlockParams,
    query: Var,
    context: Var,
) -> Result<Var> {
    let read = cross_readout(tape, params, p, query, context)?;
    let h = tape.add(query, read)?;
    let normed = p.ln_ffn.apply(tape, params, h)?;
    let ff = p.ffn.apply(tape, params, normed)?;
    tape.add(h, ff)
}
