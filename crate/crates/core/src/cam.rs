//! Context-aware memory block.
//!
//! One sentence step maps `(text_n, mem_{n-1}, history_{n-1})` to `mem_n`:
//!
//! 1. **compress**: `L` learned latent queries cross-attend over the embedded
//!    target text, giving a fixed `L×d` summary whatever the text length.
//! 2. **retrieve**: the previous memory and the embedded previous sentence are
//!    stacked and passed through a bidirectional history encoder; the
//!    compressed text then queries that fused sequence through `R` stacked
//!    cross-attention stages, giving `mem*`.
//! 3. **update**: `mem_n = σ(α)·mem* + (1 − σ(α))·mem_{n-1}` with one learned
//!    scalar `α`.
//!
//! The text and speech memories are two instances with separate weights.
//! Their queries always come from the current text; only the history
//! modality differs.

use rand::Rng;

use crate::attention::{cross_block, cross_readout, transformer_block, CrossBlockParams, TransformerBlockParams};
use crate::error::{Error, Result};
use crate::tensorcore::{ParamBuilder, ParamId, ParameterSet, Tape, Tensor, Var};

/// Architecture of one memory block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CamShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub mem_slots: usize,
    pub history_blocks: usize,
    pub retrieve_stages: usize,
    pub ffn_mult: usize,
    /// Learn `mem_0` instead of starting from zeros.
    pub learned_initial_memory: bool,
}

#[derive(Debug, Clone)]
pub struct CamParams {
    pub shape: CamShape,
    pub latent_queries: ParamId,
    pub resampler: CrossBlockParams,
    pub history_encoder: Vec<TransformerBlockParams>,
    pub retrieve_stages: Vec<CrossBlockParams>,
    pub gate_alpha: ParamId,
    pub initial_memory: Option<ParamId>,
    /// Embedding table for the target text (shared with the language model).
    pub text_table: ParamId,
    /// Embedding table for the history modality (shared with the language model).
    pub history_table: ParamId,
}

impl CamParams {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        shape: CamShape,
        text_table: ParamId,
        history_table: ParamId,
    ) -> Result<Self> {
        if shape.mem_slots == 0 {
            return Err(Error::config("mem_slots", "memory needs at least one slot"));
        }
        let (d, h, f) = (shape.d_model, shape.n_heads, shape.ffn_mult);
        let latent_queries = b.normal("latent_queries", &[shape.mem_slots, d])?;
        let resampler = CrossBlockParams::new(&mut b.scoped("resampler"), d, h, f)?;
        let history_encoder = (0..shape.history_blocks)
            .map(|i| TransformerBlockParams::new(&mut b.scoped(&format!("history.{i}")), d, h, f))
            .collect::<Result<_>>()?;
        let retrieve_stages = (0..shape.retrieve_stages)
            .map(|i| CrossBlockParams::new(&mut b.scoped(&format!("retrieve.{i}")), d, h, f))
            .collect::<Result<_>>()?;
        let gate_alpha = b.filled("gate_alpha", &[1], 0.0)?;
        let initial_memory = if shape.learned_initial_memory {
            Some(b.normal("initial_memory", &[shape.mem_slots, d])?)
        } else {
            None
        };
        Ok(Self {
            shape,
            latent_queries,
            resampler,
            history_encoder,
            retrieve_stages,
            gate_alpha,
            initial_memory,
            text_table,
            history_table,
        })
    }

    /// `mem_0`: zeros, or the learned initial memory.
    pub fn initial_memory(&self, params: &ParameterSet) -> Tensor {
        match self.initial_memory {
            Some(id) => params.get(id).detached(),
            None => Tensor::zeros(&[self.shape.mem_slots, self.shape.d_model]),
        }
    }

    /// `mem_0` bound on a tape, so a learned initial memory receives gradient.
    pub fn initial_memory_var(&self, tape: &mut Tape, params: &ParameterSet) -> Var {
        match self.initial_memory {
            Some(id) => tape.param(params, id),
            None => tape.constant(Tensor::zeros(&[self.shape.mem_slots, self.shape.d_model])),
        }
    }

    pub fn alpha(&self, params: &ParameterSet) -> f64 {
        params.get(self.gate_alpha).item()
    }
}

/// Fixed-length latent of the target text: `L×d` for any `S ≥ 1` rows.
pub fn compress(tape: &mut Tape, params: &ParameterSet, p: &CamParams, text_emb: Var) -> Result<Var> {
    if tape.value(text_emb).rows() == 0 {
        return Err(Error::contract("compress needs at least one text row"));
    }
    let queries = tape.param(params, p.latent_queries);
    cross_block(tape, params, &p.resampler, queries, text_emb)
}

/// The resampler's attention read-out before the residual to the latents.
pub fn compress_readout(tape: &mut Tape, params: &ParameterSet, p: &CamParams, text_emb: Var) -> Result<Var> {
    let queries = tape.param(params, p.latent_queries);
    cross_readout(tape, params, &p.resampler, queries, text_emb)
}

/// Stacks `[mem_prev; hist_emb]` and runs the unmasked history encoder.
pub fn fuse_history(
    tape: &mut Tape,
    params: &ParameterSet,
    p: &CamParams,
    mem_prev: Var,
    hist_emb: Var,
) -> Result<Var> {
    if tape.value(hist_emb).rows() == 0 {
        return Err(Error::contract("fuse_history needs at least one history row"));
    }
    let mut x = tape.concat_rows(&[mem_prev, hist_emb])?;
    for block in &p.history_encoder {
        x = transformer_block(tape, params, block, x, None)?;
    }
    Ok(x)
}

/// Sequential cross-attention stages from `query` into `fused`; returns `mem*`.
pub fn retrieve(tape: &mut Tape, params: &ParameterSet, p: &CamParams, query: Var, fused: Var) -> Result<Var> {
    let mut current = query;
    for stage in &p.retrieve_stages {
        current = cross_block(tape, params, stage, current, fused)?;
    }
    Ok(current)
}

/// `σ(α)·mem_star + (1 − σ(α))·mem_prev`.
pub fn update(tape: &mut Tape, mem_star: Var, mem_prev: Var, alpha: Var) -> Result<Var> {
    let gate = tape.sigmoid(alpha)?;
    let keep = tape.affine(gate, -1.0, 1.0)?;
    let fresh = tape.mul_scalar(mem_star, gate)?;
    let old = tape.mul_scalar(mem_prev, keep)?;
    tape.add(fresh, old)
}

/// One memory step from token ids.
pub fn cam_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    p: &CamParams,
    text: &[usize],
    mem_prev: Var,
    history: &[usize],
) -> Result<Var> {
    if text.is_empty() {
        return Err(Error::contract("memory step needs non-empty target text"));
    }
    if history.is_empty() {
        return Err(Error::contract("memory step needs non-empty history (use the dummy token)"));
    }
    let text_table = tape.param(params, p.text_table);
    let hist_table = tape.param(params, p.history_table);
    let text_emb = tape.embedding(text_table, text)?;
    let hist_emb = tape.embedding(hist_table, history)?;
    let query = compress(tape, params, p, text_emb)?;
    let fused = fuse_history(tape, params, p, mem_prev, hist_emb)?;
    let mem_star = retrieve(tape, params, p, query, fused)?;
    let alpha = tape.param(params, p.gate_alpha);
    update(tape, mem_star, mem_prev, alpha)
}

/// Recurrent per-paragraph state between sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub mem_t: Tensor,
    pub mem_s: Tensor,
    pub prev_text: Vec<usize>,
    pub prev_speech: Vec<usize>,
}
