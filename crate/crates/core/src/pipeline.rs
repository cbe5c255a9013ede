//! Paragraph-level recurrence: dummy-history bootstrap, per-sentence memory
//! updates feeding the language model, training unrolls, free-running
//! synthesis and context-cost accounting.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{cam_forward, CamParams, CamShape, MemoryState};
use crate::corpus::{oracle_speech, ParagraphSample, Sentence};
use crate::error::{Error, Result};
use crate::lclm::{self, assemble, forward, generate, Assembly, Decoding, Generation, LmConfig, LmParams};
use crate::tensorcore::{grad_check, GradCheckReport, ParamBuilder, ParameterSet, Tape, Tensor, Var};

/// Language model plus its two memory blocks, sharing one parameter set.
///
/// Parameters are named `lm.*`, `cam_t.*` and `cam_s.*`. An ablated memory
/// has no block at all.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: LmConfig,
    pub params: ParameterSet,
    pub lm: LmParams,
    pub cam_t: Option<CamParams>,
    pub cam_s: Option<CamParams>,
}

impl Model {
    pub fn new(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = cfg.init_std;
        let lm = LmParams::new(&mut ParamBuilder::new(&mut params, &mut rng, "lm", std), &cfg)?;
        let shape = CamShape {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            mem_slots: cfg.mem_slots,
            history_blocks: cfg.history_blocks,
            retrieve_stages: cfg.retrieve_stages,
            ffn_mult: cfg.ffn_mult,
            learned_initial_memory: cfg.learned_initial_memory,
        };
        let cam_t = if cfg.use_mem_t {
            let mut b = ParamBuilder::new(&mut params, &mut rng, "cam_t", std);
            Some(CamParams::new(&mut b, shape, lm.text_embedding, lm.text_embedding)?)
        } else {
            None
        };
        let cam_s = if cfg.use_mem_s {
            let mut b = ParamBuilder::new(&mut params, &mut rng, "cam_s", std);
            Some(CamParams::new(&mut b, shape, lm.text_embedding, lm.speech_embedding)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            params,
            lm,
            cam_t,
            cam_s,
        })
    }

    fn zero_memory(&self) -> Tensor {
        Tensor::zeros(&[self.cfg.mem_slots.max(1), self.cfg.d_model])
    }
}

/// Tensor-valued recurrent state between sentences of one paragraph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParagraphState {
    pub memory: MemoryState,
    /// Sentences consumed so far.
    pub n: usize,
}

/// `mem_0` for both memories and the one-token blank/silence dummy history.
pub fn init_state(model: &Model) -> ParagraphState {
    let sp = model.cfg.specials();
    let init = |cam: &Option<CamParams>| match cam {
        Some(c) => c.initial_memory(&model.params),
        None => model.zero_memory(),
    };
    ParagraphState {
        memory: MemoryState {
            mem_t: init(&model.cam_t),
            mem_s: init(&model.cam_s),
            prev_text: vec![sp.blank_text],
            prev_speech: vec![sp.sil_speech],
        },
        n: 0,
    }
}

/// Recurrent state whose memories live on a tape, so gradients can cross
/// sentence boundaries.
#[derive(Debug, Clone)]
pub struct TapeState {
    pub mem_t: Option<Var>,
    pub mem_s: Option<Var>,
    pub prev_text: Vec<usize>,
    pub prev_speech: Vec<usize>,
    pub n: usize,
}

impl TapeState {
    /// Binds the start of a paragraph. A learned `mem_0` is a parameter.
    pub fn initial(tape: &mut Tape, model: &Model) -> Self {
        let sp = model.cfg.specials();
        Self {
            mem_t: model.cam_t.as_ref().map(|c| c.initial_memory_var(tape, &model.params)),
            mem_s: model.cam_s.as_ref().map(|c| c.initial_memory_var(tape, &model.params)),
            prev_text: vec![sp.blank_text],
            prev_speech: vec![sp.sil_speech],
            n: 0,
        }
    }

    /// Places a tensor snapshot on `tape` as constants (no gradient).
    pub fn from_snapshot(tape: &mut Tape, model: &Model, state: &ParagraphState) -> Self {
        Self {
            mem_t: model.cam_t.as_ref().map(|_| tape.constant(state.memory.mem_t.clone())),
            mem_s: model.cam_s.as_ref().map(|_| tape.constant(state.memory.mem_s.clone())),
            prev_text: state.memory.prev_text.clone(),
            prev_speech: state.memory.prev_speech.clone(),
            n: state.n,
        }
    }

    pub fn snapshot(&self, tape: &Tape, model: &Model) -> ParagraphState {
        let value = |v: Option<Var>| v.map_or_else(|| model.zero_memory(), |v| tape.value(v).detached());
        ParagraphState {
            memory: MemoryState {
                mem_t: value(self.mem_t),
                mem_s: value(self.mem_s),
                prev_text: self.prev_text.clone(),
                prev_speech: self.prev_speech.clone(),
            },
            n: self.n,
        }
    }
}

/// Memories for sentence `text` from the previous state: both blocks query
/// with the current text; CAM-T reads the previous text, CAM-S the previous
/// speech.
pub fn advance_memory(
    tape: &mut Tape,
    model: &Model,
    state: &TapeState,
    text: &[usize],
) -> Result<(Option<Var>, Option<Var>)> {
    let mem_t = match (&model.cam_t, state.mem_t) {
        (Some(cam), Some(prev)) => Some(cam_forward(tape, &model.params, cam, text, prev, &state.prev_text)?),
        _ => None,
    };
    let mem_s = match (&model.cam_s, state.mem_s) {
        (Some(cam), Some(prev)) => Some(cam_forward(tape, &model.params, cam, text, prev, &state.prev_speech)?),
        _ => None,
    };
    Ok((mem_t, mem_s))
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: Var,
    pub logits: Var,
    pub assembly: Assembly,
    pub state: TapeState,
}

/// One teacher-forced sentence: memory update, assembly, forward and loss.
pub fn step_train(
    tape: &mut Tape,
    model: &Model,
    x_vec: &[f64],
    state: &TapeState,
    text: &[usize],
    speech: &[usize],
) -> Result<StepOutput> {
    if speech.is_empty() {
        return Err(Error::contract("training step needs non-empty teacher speech"));
    }
    let (mem_t, mem_s) = advance_memory(tape, model, state, text)?;
    let assembly = assemble(tape, &model.params, &model.lm, &model.cfg, x_vec, mem_t, mem_s, text, speech)?;
    let out = forward(tape, &model.params, &model.lm, &assembly, model.cfg.mask_kind)?;
    let loss = lclm::loss(tape, &assembly, out.logits)?;
    Ok(StepOutput {
        loss,
        logits: out.logits,
        assembly,
        state: TapeState {
            mem_t,
            mem_s,
            prev_text: text.to_vec(),
            prev_speech: speech.to_vec(),
            n: state.n + 1,
        },
    })
}

/// How far gradients travel back through the memory recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bptt {
    Full,
    /// Memory entering each window of `k` sentences is a constant.
    Truncate(usize),
}

impl Bptt {
    fn window(self, n: usize) -> usize {
        match self {
            Bptt::Full => n.max(1),
            Bptt::Truncate(k) => k.max(1),
        }
    }
}

impl fmt::Display for Bptt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bptt::Full => f.write_str("full"),
            Bptt::Truncate(k) => write!(f, "truncate_{k}"),
        }
    }
}

impl FromStr for Bptt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Bptt::Full);
        }
        s.strip_prefix("truncate_")
            .and_then(|k| k.parse().ok())
            .filter(|&k: &usize| k >= 1)
            .map(Bptt::Truncate)
            .ok_or_else(|| Error::config("bptt", format!("expected full|truncate_<k>, got `{s}`")))
    }
}

/// Teacher-forced outcome of one sentence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceScore {
    pub loss: f64,
    /// Argmax hits over the speech tokens (EOS excluded).
    pub correct: usize,
    pub total: usize,
    /// Whether the first speech token was predicted; it is the only token
    /// that cannot be inferred from earlier tokens of the same sentence.
    pub first_correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParagraphScore {
    pub sentences: Vec<SentenceScore>,
}

impl ParagraphScore {
    pub fn mean_loss(&self) -> f64 {
        self.sentences.iter().map(|s| s.loss).sum::<f64>() / self.sentences.len() as f64
    }
}

fn score_step(tape: &Tape, step: &StepOutput) -> SentenceScore {
    let logits = tape.value(step.logits);
    let asm = &step.assembly;
    let m = asm.loss_positions().count() - 1;
    let mut correct = 0;
    let mut first_correct = false;
    for (i, pos) in asm.loss_positions().take(m).enumerate() {
        let hit = lclm::argmax(logits.row(pos)) == asm.targets[pos];
        correct += hit as usize;
        if i == 0 {
            first_correct = hit;
        }
    }
    SentenceScore {
        loss: tape.value(step.loss).item(),
        correct,
        total: m,
        first_correct,
    }
}

fn unroll(
    model: &Model,
    sample: &ParagraphSample,
    window: usize,
    tape_for_window: impl Fn() -> Tape,
    mut on_window: impl FnMut(&Tape, Var) -> Result<()>,
) -> Result<ParagraphScore> {
    if sample.sentences.is_empty() {
        return Err(Error::contract("paragraph has no sentences"));
    }
    let n = sample.sentences.len() as f64;
    let x_vec = sample.x_vec();
    let mut carried: Option<ParagraphState> = None;
    let mut scores = Vec::with_capacity(sample.sentences.len());
    for chunk in sample.sentences.chunks(window) {
        let mut tape = tape_for_window();
        let mut state = match &carried {
            None => TapeState::initial(&mut tape, model),
            Some(snap) => TapeState::from_snapshot(&mut tape, model, snap),
        };
        let mut losses = Vec::with_capacity(chunk.len());
        for Sentence { text, speech } in chunk {
            let step = step_train(&mut tape, model, &x_vec, &state, text, speech)?;
            scores.push(score_step(&tape, &step));
            losses.push(step.loss);
            state = step.state;
        }
        let total = tape.sum(&losses)?;
        let mean_part = tape.scale(total, 1.0 / n)?;
        on_window(&tape, mean_part)?;
        carried = Some(state.snapshot(&tape, model));
    }
    Ok(ParagraphScore { sentences: scores })
}

/// Teacher-forced unroll over a paragraph, adding `grad_scale ×` the
/// gradient of the mean sentence loss into the model's parameter gradients.
pub fn train_paragraph(model: &mut Model, sample: &ParagraphSample, bptt: Bptt, grad_scale: f64) -> Result<ParagraphScore> {
    let window = bptt.window(sample.sentences.len());
    let mut grads = Vec::new();
    let score = unroll(model, sample, window, Tape::new, |tape, loss| {
        let g = tape.backward(loss)?;
        grads.extend(tape.param_grads(&g));
        Ok(())
    })?;
    for (id, g) in grads {
        for (acc, v) in model.params.get_mut(id).grad_mut().iter_mut().zip(g) {
            *acc += grad_scale * v;
        }
    }
    Ok(score)
}

/// Teacher-forced scores without building gradients.
pub fn score_paragraph(model: &Model, sample: &ParagraphSample) -> Result<ParagraphScore> {
    let window = sample.sentences.len();
    unroll(model, sample, window, Tape::inference, |_, _| Ok(()))
}

/// Mean sentence loss of a teacher-forced unroll with gradients through the
/// whole paragraph, built on `tape`.
pub fn paragraph_loss(tape: &mut Tape, model: &Model, sample: &ParagraphSample) -> Result<Var> {
    if sample.sentences.is_empty() {
        return Err(Error::contract("paragraph has no sentences"));
    }
    let x_vec = sample.x_vec();
    let mut state = TapeState::initial(tape, model);
    let mut losses = Vec::with_capacity(sample.sentences.len());
    for s in &sample.sentences {
        let step = step_train(tape, model, &x_vec, &state, &s.text, &s.speech)?;
        losses.push(step.loss);
        state = step.state;
    }
    let total = tape.sum(&losses)?;
    tape.scale(total, 1.0 / losses.len() as f64)
}

/// Worst relative gradient error per top-level module (`lm`, `cam_t`, `cam_s`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub per_module: Vec<(String, f64)>,
    pub report: GradCheckReport,
}

impl ModelGradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.report.max_rel_error
    }
}

/// Central-difference check of [`paragraph_loss`] over every parameter.
pub fn check_model_gradients(
    model: &Model,
    sample: &ParagraphSample,
    h: f64,
    max_coords: Option<usize>,
) -> Result<ModelGradCheck> {
    let mut params = model.params.clone();
    let report = grad_check(&mut params, h, max_coords, |tape, p| {
        let probe = Model {
            cfg: model.cfg.clone(),
            params: p.clone(),
            lm: model.lm.clone(),
            cam_t: model.cam_t.clone(),
            cam_s: model.cam_s.clone(),
        };
        paragraph_loss(tape, &probe, sample)
    })?;
    let mut per_module: Vec<(String, f64)> = Vec::new();
    for (name, err) in &report.per_param {
        let module = name.split('.').next().unwrap_or(name);
        match per_module.iter_mut().find(|(m, _)| m == module) {
            Some((_, worst)) => *worst = worst.max(*err),
            None => per_module.push((module.to_string(), *err)),
        }
    }
    Ok(ModelGradCheck { per_module, report })
}

/// Where the history for the next sentence comes from during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistorySource {
    /// Ground-truth speech of the previous sentence.
    Teacher,
    /// The model's own output for the previous sentence.
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub speech: Vec<Vec<usize>>,
    pub hit_cap: Vec<bool>,
    /// Memory shapes seen at every sentence, `(mem_t, mem_s)`.
    pub memory_shapes: Vec<(Vec<usize>, Vec<usize>)>,
    pub cost: CostReport,
}

fn decode(
    model: &Model,
    texts: &[Vec<usize>],
    teacher: Option<&[Vec<usize>]>,
    x_vec: &[f64],
    decoding: Decoding,
    rng: &mut dyn rand::RngCore,
) -> Result<Synthesis> {
    let sil = model.cfg.specials().sil_speech;
    let mut state = init_state(model);
    let mut speech = Vec::with_capacity(texts.len());
    let mut hit_cap = Vec::with_capacity(texts.len());
    let mut shapes = Vec::with_capacity(texts.len());
    for (i, text) in texts.iter().enumerate() {
        let mut tape = Tape::inference();
        let ts = TapeState::from_snapshot(&mut tape, model, &state);
        let (mt, ms) = advance_memory(&mut tape, model, &ts, text)?;
        let mem_t = mt.map(|v| tape.value(v).detached());
        let mem_s = ms.map(|v| tape.value(v).detached());
        let Generation { tokens, hit_cap: capped } = generate(
            &model.params,
            &model.lm,
            &model.cfg,
            x_vec,
            mem_t.as_ref(),
            mem_s.as_ref(),
            text,
            decoding,
            rng,
        )?;
        let history = match teacher {
            Some(t) => t[i].clone(),
            None if tokens.is_empty() => vec![sil],
            None => tokens.clone(),
        };
        let zero = model.zero_memory();
        let next = MemoryState {
            mem_t: mem_t.unwrap_or_else(|| zero.clone()),
            mem_s: mem_s.unwrap_or(zero),
            prev_text: text.clone(),
            prev_speech: history,
        };
        shapes.push((next.mem_t.shape().to_vec(), next.mem_s.shape().to_vec()));
        state = ParagraphState { memory: next, n: state.n + 1 };
        speech.push(tokens);
        hit_cap.push(capped);
    }
    let sentences: Vec<Sentence> = texts
        .iter()
        .zip(&speech)
        .map(|(t, s)| Sentence { text: t.clone(), speech: s.clone() })
        .collect();
    let cost = context_cost(Strategy::Proposed, &sentences, &model.cfg);
    Ok(Synthesis {
        speech,
        hit_cap,
        memory_shapes: shapes,
        cost,
    })
}

/// Free-running paragraph synthesis: each sentence's generated speech
/// becomes the next sentence's speech history.
pub fn synthesize_paragraph<R: Rng>(
    model: &Model,
    texts: &[Vec<usize>],
    x_vec: &[f64],
    decoding: Decoding,
    rng: &mut R,
) -> Result<Synthesis> {
    if texts.is_empty() {
        return Err(Error::contract("paragraph has no sentences"));
    }
    decode(model, texts, None, x_vec, decoding, rng)
}

/// Decodes every sentence of `sample` while feeding ground-truth history.
pub fn decode_with_teacher_history<R: Rng>(
    model: &Model,
    sample: &ParagraphSample,
    decoding: Decoding,
    rng: &mut R,
) -> Result<Synthesis> {
    let texts: Vec<Vec<usize>> = sample.sentences.iter().map(|s| s.text.clone()).collect();
    let speech: Vec<Vec<usize>> = sample.sentences.iter().map(|s| s.speech.clone()).collect();
    decode(model, &texts, Some(&speech), &sample.x_vec(), decoding, rng)
}

/// Position-wise matches against the oracle, per sentence: `(hits, oracle length)`.
///
/// Missing or surplus generated tokens count as misses.
pub fn oracle_matches(sample: &ParagraphSample, generated: &[Vec<usize>]) -> Vec<(usize, usize)> {
    generated
        .iter()
        .enumerate()
        .map(|(n, gen)| {
            let want = oracle_speech(sample, n);
            let hits = want.iter().zip(gen).filter(|(a, b)| a == b).count();
            (hits, want.len())
        })
        .collect()
}

/// Context strategy whose per-sentence cost is accounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Two fixed-size memories, one consumed context per sentence.
    Proposed,
    /// The whole previous sentence (text and speech) as a prompt.
    FullPrompt,
    /// A window of previous sentences compressed to a fixed token budget.
    KWindow,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Proposed, Strategy::FullPrompt, Strategy::KWindow];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Proposed => "proposed",
            Strategy::FullPrompt => "full_prompt",
            Strategy::KWindow => "k_window",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("strategies", format!("unknown strategy `{s}`")))
    }
}

/// Contexts consumed per sentence by the windowed strategy.
pub const K_WINDOW_CONTEXTS: usize = 5;
/// Compressed prefix tokens of the windowed strategy.
pub const K_WINDOW_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub strategy: Strategy,
    /// Contexts consumed per sentence (constant for every strategy here).
    pub num: usize,
    /// Context-derived prefix tokens when they do not depend on the history.
    pub prefix_len_fixed: Option<usize>,
    /// Context-derived prefix tokens, per sentence.
    pub per_sentence_prefix_lens: Vec<usize>,
    /// Everything ahead of BOS per sentence: speaker slot, context tokens and text.
    pub per_sentence_total_prefix: Vec<usize>,
    pub total_num: usize,
    pub total_prefix_tokens: usize,
}

/// Counts contexts and prefix tokens for `strategy`; no model is run.
///
/// The first sentence's history is the one-token blank/silence dummy pair.
pub fn context_cost(strategy: Strategy, sentences: &[Sentence], cfg: &LmConfig) -> CostReport {
    let (num, fixed) = match strategy {
        Strategy::Proposed => (1, Some(cfg.memory_prefix_len())),
        Strategy::FullPrompt => (1, None),
        Strategy::KWindow => (K_WINDOW_CONTEXTS, Some(K_WINDOW_TOKENS)),
    };
    let per_sentence: Vec<usize> = (0..sentences.len())
        .map(|n| match fixed {
            Some(f) => f,
            None if n == 0 => 2,
            None => sentences[n - 1].text.len() + sentences[n - 1].speech.len(),
        })
        .collect();
    let totals = per_sentence
        .iter()
        .zip(sentences)
        .map(|(ctx, s)| 1 + ctx + s.text.len())
        .collect();
    CostReport {
        strategy,
        num,
        prefix_len_fixed: fixed,
        total_num: num * sentences.len(),
        total_prefix_tokens: per_sentence.iter().sum(),
        per_sentence_prefix_lens: per_sentence,
        per_sentence_total_prefix: totals,
    }
}
