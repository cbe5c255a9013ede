//! Decoder-only language model over a memory-conditioned prefix.
//!
//! Input rows, in order:
//!
//! ```text
//! [ x_vec | mem_t (L) | mem_s (L) | text (S) ] [ BOS s_1 … s_M ]
//!  └──────────────── prefix, P rows ─────────┘ └─ generated ──┘
//! ```
//!
//! Each row gets a segment embedding plus a position embedding counted from
//! the start of its segment, so text token `j` and the suffix row predicting
//! its speech share a position vector whatever the prefix length.
//!
//! Under the prefix mask the first `P` rows see each other bidirectionally
//! and the generated rows are causal. Only next-speech-token predictions
//! (`s_1 … s_M`, then EOS) enter the loss.

use rand::Rng;

use crate::attention::{transformer_block, LayerNormParams, MaskKind, TransformerBlockParams};
use crate::error::{Error, Result};
use crate::tensorcore::{sigmoid, ParamBuilder, ParamId, ParameterSet, Tape, Tensor, Var};

/// Reserved ids appended after the content vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub blank_text: usize,
    pub sil_speech: usize,
    pub bos_speech: usize,
    pub eos_speech: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mem_slots: usize,
    /// Content text tokens; the blank token is id `text_vocab`.
    pub text_vocab: usize,
    /// Content speech tokens; silence, BOS and EOS follow.
    pub speech_vocab: usize,
    pub xvec_dim: usize,
    /// Rows of the position table: the longest segment (memory, text or
    /// suffix) a sequence may have.
    pub max_positions: usize,
    pub history_blocks: usize,
    pub retrieve_stages: usize,
    pub ffn_mult: usize,
    pub init_std: f64,
    pub use_mem_t: bool,
    pub use_mem_s: bool,
    pub mask_kind: MaskKind,
    pub learned_initial_memory: bool,
    /// Score speech tokens against the speech embedding table instead of a
    /// separate output matrix.
    pub tie_head: bool,
    pub max_generate_factor: usize,
    pub temperature: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            mem_slots: 8,
            text_vocab: 16,
            speech_vocab: 16,
            xvec_dim: crate::corpus::XVEC_DIM,
            max_positions: 64,
            history_blocks: 2,
            retrieve_stages: 2,
            ffn_mult: 4,
            init_std: 0.02,
            use_mem_t: true,
            use_mem_s: true,
            mask_kind: MaskKind::Prefix,
            learned_initial_memory: false,
            tie_head: true,
            max_generate_factor: 4,
            temperature: 1.0,
        }
    }
}

impl LmConfig {
    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens {
            blank_text: self.text_vocab,
            sil_speech: self.speech_vocab,
            bos_speech: self.speech_vocab + 1,
            eos_speech: self.speech_vocab + 2,
        }
    }

    pub fn text_table_size(&self) -> usize {
        self.text_vocab + 1
    }

    /// Speech table rows, which is also the width of the output head.
    pub fn speech_table_size(&self) -> usize {
        self.speech_vocab + 3
    }

    /// Memory-derived prefix rows: `L` per active memory.
    pub fn memory_prefix_len(&self) -> usize {
        self.mem_slots * (self.use_mem_t as usize + self.use_mem_s as usize)
    }

    /// `1 + (memory rows) + S`.
    pub fn prefix_len(&self, text_len: usize) -> usize {
        1 + self.memory_prefix_len() + text_len
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.d_model == 0 {
            return fail("d_model", "must be >= 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(
                "n_heads",
                format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads),
            );
        }
        if self.mem_slots == 0 && (self.use_mem_t || self.use_mem_s) {
            return fail("mem_slots", "must be >= 1 while a memory is enabled".into());
        }
        if self.text_vocab == 0 || self.speech_vocab == 0 {
            return fail("text_vocab", "vocabularies must be non-empty".into());
        }
        if self.xvec_dim == 0 {
            return fail("xvec_dim", "must be >= 1".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult", "must be >= 1".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail("init_std", format!("must be positive, got {}", self.init_std));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return fail("temperature", format!("must be >= 0, got {}", self.temperature));
        }
        if self.max_positions < 2 || self.max_positions < self.mem_slots {
            return fail(
                "max_positions",
                format!("{} cannot index {} memory slots and a BOS row", self.max_positions, self.mem_slots),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LmParams {
    pub text_embedding: ParamId,
    pub speech_embedding: ParamId,
    pub xvec_proj: ParamId,
    pub xvec_bias: ParamId,
    pub positions: ParamId,
    pub segments: ParamId,
    pub blocks: Vec<TransformerBlockParams>,
    pub final_ln: LayerNormParams,
    /// `None` when the head is tied to the speech embedding.
    pub head: Option<ParamId>,
    pub head_bias: ParamId,
}

impl LmParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &LmConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            text_embedding: b.normal("text_embedding", &[cfg.text_table_size(), d])?,
            speech_embedding: b.normal("speech_embedding", &[cfg.speech_table_size(), d])?,
            xvec_proj: b.normal("xvec_proj", &[cfg.xvec_dim, d])?,
            xvec_bias: b.filled("xvec_bias", &[d], 0.0)?,
            positions: b.normal("positions", &[cfg.max_positions, d])?,
            segments: b.normal("segments", &[SEGMENTS, d])?,
            blocks: (0..cfg.n_layers)
                .map(|i| TransformerBlockParams::new(&mut b.scoped(&format!("block.{i}")), d, cfg.n_heads, cfg.ffn_mult))
                .collect::<Result<_>>()?,
            final_ln: LayerNormParams::new(&mut b.scoped("final_ln"), d)?,
            head: if cfg.tie_head {
                None
            } else {
                Some(b.normal("head", &[d, cfg.speech_table_size()])?)
            },
            head_bias: b.filled("head_bias", &[cfg.speech_table_size()], 0.0)?,
        })
    }
}

/// Embedded input sequence with its prefix boundary and loss targets.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub embedded: Var,
    pub prefix_len: usize,
    /// True where the next-token target is a speech token (or EOS).
    pub loss_mask: Vec<bool>,
    /// Next-token target per position; meaningful only where `loss_mask` holds.
    pub targets: Vec<usize>,
}

impl Assembly {
    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }

    pub fn loss_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

const SEGMENTS: usize = 5;
const SEG_XVEC: usize = 0;
const SEG_MEM_T: usize = 1;
const SEG_MEM_S: usize = 2;
const SEG_TEXT: usize = 3;
const SEG_SPEECH: usize = 4;

/// Builds `[proj(x_vec); mem_t; mem_s; TE(text); ST([BOS] + speech)]` plus
/// segment and in-segment position embeddings.
///
/// A `None` memory is left out entirely, which shortens the prefix by `L`.
/// Empty `speech` yields the generation seed `[BOS]` and no loss positions.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    tape: &mut Tape,
    params: &ParameterSet,
    lm: &LmParams,
    cfg: &LmConfig,
    x_vec: &[f64],
    mem_t: Option<Var>,
    mem_s: Option<Var>,
    text: &[usize],
    speech: &[usize],
) -> Result<Assembly> {
    if text.is_empty() {
        return Err(Error::contract("assembly needs non-empty text"));
    }
    if x_vec.len() != cfg.xvec_dim {
        return Err(Error::dim("assemble", format!("x_vec of length {}", cfg.xvec_dim), x_vec.len()));
    }
    let sp = cfg.specials();
    let xv = tape.constant(Tensor::matrix(1, cfg.xvec_dim, x_vec.to_vec())?);
    let proj = tape.param(params, lm.xvec_proj);
    let bias = tape.param(params, lm.xvec_bias);
    let x_row = tape.matmul(xv, proj)?;
    let x_row = tape.add_row(x_row, bias)?;

    let mut pieces = vec![(SEG_XVEC, x_row)];
    pieces.extend(mem_t.map(|m| (SEG_MEM_T, m)));
    pieces.extend(mem_s.map(|m| (SEG_MEM_S, m)));
    let text_table = tape.param(params, lm.text_embedding);
    pieces.push((SEG_TEXT, tape.embedding(text_table, text)?));
    let prefix_len: usize = pieces.iter().map(|&(_, p)| tape.value(p).rows()).sum();

    let mut suffix = Vec::with_capacity(speech.len() + 1);
    suffix.push(sp.bos_speech);
    suffix.extend_from_slice(speech);
    let speech_table = tape.param(params, lm.speech_embedding);
    pieces.push((SEG_SPEECH, tape.embedding(speech_table, &suffix)?));

    let total = prefix_len + suffix.len();
    let mut pos_ids = Vec::with_capacity(total);
    let mut seg_ids = Vec::with_capacity(total);
    for &(seg, v) in &pieces {
        let len = tape.value(v).rows();
        if len > cfg.max_positions {
            return Err(Error::contract(format!(
                "segment of {len} rows exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        pos_ids.extend(0..len);
        seg_ids.extend(std::iter::repeat_n(seg, len));
    }
    let rows: Vec<Var> = pieces.iter().map(|&(_, v)| v).collect();
    let rows = tape.concat_rows(&rows)?;
    let pos_table = tape.param(params, lm.positions);
    let pos = tape.embedding(pos_table, &pos_ids)?;
    let seg_table = tape.param(params, lm.segments);
    let seg = tape.embedding(seg_table, &seg_ids)?;
    let embedded = tape.add(rows, pos)?;
    let embedded = tape.add(embedded, seg)?;

    let mut loss_mask = vec![false; total];
    let mut targets = vec![0; total];
    if !speech.is_empty() {
        for (i, &s) in speech.iter().chain(std::iter::once(&sp.eos_speech)).enumerate() {
            loss_mask[prefix_len + i] = true;
            targets[prefix_len + i] = s;
        }
    }
    Ok(Assembly {
        embedded,
        prefix_len,
        loss_mask,
        targets,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    /// Final-layer hidden states, before the output layer norm.
    pub hidden: Var,
    /// Scores over the speech table, one row per position.
    pub logits: Var,
}

pub fn forward(
    tape: &mut Tape,
    params: &ParameterSet,
    lm: &LmParams,
    assembly: &Assembly,
    mask_kind: MaskKind,
) -> Result<LmOutput> {
    let mask = mask_kind.build(assembly.prefix_len, assembly.len())?;
    let mut x = assembly.embedded;
    for block in &lm.blocks {
        x = transformer_block(tape, params, block, x, Some(&mask))?;
    }
    let normed = lm.final_ln.apply(tape, params, x)?;
    let bias = tape.param(params, lm.head_bias);
    let logits = match lm.head {
        Some(id) => {
            let head = tape.param(params, id);
            tape.matmul(normed, head)?
        }
        None => {
            let table = tape.param(params, lm.speech_embedding);
            tape.matmul_nt(normed, table)?
        }
    };
    let logits = tape.add_row(logits, bias)?;
    Ok(LmOutput { hidden: x, logits })
}

/// Mean cross-entropy over the speech-target positions only.
pub fn loss(tape: &mut Tape, assembly: &Assembly, logits: Var) -> Result<Var> {
    tape.masked_cross_entropy(logits, &assembly.targets, &assembly.loss_mask)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Samples from `softmax(logits / temperature)`; temperatures below
    /// `1e-6` fall back to greedy.
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated speech tokens, without BOS or EOS.
    pub tokens: Vec<usize>,
    /// True when decoding stopped at the length cap instead of EOS.
    pub hit_cap: bool,
}

/// `max_generate_factor · S + 8`, further bounded by the position table.
pub fn generation_cap(cfg: &LmConfig, text_len: usize) -> usize {
    let by_factor = cfg.max_generate_factor * text_len + 8;
    by_factor.min(cfg.max_positions - 1)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub(crate) fn pick_token<R: Rng + ?Sized>(row: &[f64], decoding: Decoding, rng: &mut R) -> usize {
    let argmax = || argmax(row);
    match decoding {
        Decoding::Greedy => argmax(),
        Decoding::Sample { temperature } if temperature < 1e-6 => argmax(),
        Decoding::Sample { temperature } => {
            let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            weights.len() - 1
        }
    }
}

/// Autoregressive decoding from `[BOS]` until EOS or the length cap.
///
/// Each step re-runs the full forward pass over the sequence so far.
#[allow(clippy::too_many_arguments)]
pub fn generate<R: Rng + ?Sized>(
    params: &ParameterSet,
    lm: &LmParams,
    cfg: &LmConfig,
    x_vec: &[f64],
    mem_t: Option<&Tensor>,
    mem_s: Option<&Tensor>,
    text: &[usize],
    decoding: Decoding,
    rng: &mut R,
) -> Result<Generation> {
    if text.is_empty() {
        return Err(Error::contract("generation needs non-empty text"));
    }
    let eos = cfg.specials().eos_speech;
    let cap = generation_cap(cfg, text.len());
    let mut tokens = Vec::new();
    loop {
        if tokens.len() >= cap {
            return Ok(Generation { tokens, hit_cap: true });
        }
        let mut tape = Tape::inference();
        let mt = mem_t.map(|m| tape.constant(m.clone()));
        let ms = mem_s.map(|m| tape.constant(m.clone()));
        let asm = assemble(&mut tape, params, lm, cfg, x_vec, mt, ms, text, &tokens)?;
        let out = forward(&mut tape, params, lm, &asm, cfg.mask_kind)?;
        let logits = tape.value(out.logits);
        let next = pick_token(logits.row(asm.len() - 1), decoding, rng);
        if next == eos {
            return Ok(Generation { tokens, hit_cap: false });
        }
        tokens.push(next);
    }
}

/// Gate value `σ(α)` for reporting.
pub fn gate_value(alpha: f64) -> f64 {
    sigmoid(alpha)
}
