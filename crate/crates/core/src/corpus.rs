//! Synthetic paragraphs whose speech tokens depend on the speaker and on a
//! running state carried across sentences.
//!
//! For speaker `k` and sentence `n` with text `t_n`:
//!
//! ```text
//! s_{n,i} = (t_{n,i} + k + c_{n-1}) mod V_s,      c_0 = 0
//! local:       c_n = (Σ_i s_{n,i}) mod K_c
//! cumulative:  c_n = (c_{n-1} + Σ_i s_{n,i}) mod K_c
//! ```
//!
//! In local mode the previous sentence's speech pins the state down; in
//! cumulative mode it does not, so a model needs longer-term memory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the speaker conditioning vector.
pub const XVEC_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DependencyMode {
    Local,
    Cumulative,
}

impl DependencyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DependencyMode::Local => "local",
            DependencyMode::Cumulative => "cumulative",
        }
    }
}

impl std::str::FromStr for DependencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(DependencyMode::Local),
            "cumulative" => Ok(DependencyMode::Cumulative),
            other => Err(Error::config("mode", format!("expected local|cumulative, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Content text tokens, excluding the reserved blank token.
    pub text_vocab: usize,
    /// Content speech tokens, excluding silence/BOS/EOS.
    pub speech_vocab: usize,
    pub n_speakers: usize,
    pub state_modulus: usize,
    pub sentences_per_paragraph: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub mode: DependencyMode,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            text_vocab: 16,
            speech_vocab: 16,
            n_speakers: 4,
            state_modulus: 4,
            sentences_per_paragraph: 6,
            min_sentence_len: 3,
            max_sentence_len: 8,
            mode: DependencyMode::Local,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.state_modulus < 2 {
            return fail("state_modulus", format!("must be >= 2, got {}", self.state_modulus));
        }
        if self.sentences_per_paragraph < 2 {
            return fail(
                "sentences_per_paragraph",
                format!("must be >= 2, got {}", self.sentences_per_paragraph),
            );
        }
        if self.speech_vocab <= self.state_modulus {
            return fail(
                "speech_vocab",
                format!("must exceed state_modulus {}, got {}", self.state_modulus, self.speech_vocab),
            );
        }
        if self.text_vocab == 0 {
            return fail("text_vocab", "must be >= 1".into());
        }
        if self.n_speakers == 0 || self.n_speakers > XVEC_DIM {
            return fail("n_speakers", format!("must be in 1..={XVEC_DIM}, got {}", self.n_speakers));
        }
        if self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return fail(
                "min_sentence_len",
                format!(
                    "need 1 <= min <= max, got {}..{}",
                    self.min_sentence_len, self.max_sentence_len
                ),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: Vec<usize>,
    pub speech: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphSample {
    pub speaker: usize,
    pub mode: DependencyMode,
    pub sentences: Vec<Sentence>,
    pub config: CorpusConfig,
}

impl ParagraphSample {
    /// One-hot speaker id, zero padded to [`XVEC_DIM`].
    pub fn x_vec(&self) -> Vec<f64> {
        speaker_x_vec(self.speaker)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

pub fn speaker_x_vec(speaker: usize) -> Vec<f64> {
    let mut v = vec![0.0; XVEC_DIM];
    v[speaker] = 1.0;
    v
}

fn next_state(cfg: &CorpusConfig, prev: usize, speech: &[usize]) -> usize {
    let sum: usize = speech.iter().sum();
    match cfg.mode {
        DependencyMode::Local => sum % cfg.state_modulus,
        DependencyMode::Cumulative => (prev + sum) % cfg.state_modulus,
    }
}

fn speak(cfg: &CorpusConfig, speaker: usize, state: usize, text: &[usize]) -> Vec<usize> {
    text.iter()
        .map(|&t| (t + speaker + state) % cfg.speech_vocab)
        .collect()
}

pub fn gen_paragraph<R: Rng + ?Sized>(rng: &mut R, cfg: &CorpusConfig) -> ParagraphSample {
    let speaker = rng.random_range(0..cfg.n_speakers);
    let mut state = 0;
    let mut sentences = Vec::with_capacity(cfg.sentences_per_paragraph);
    for _ in 0..cfg.sentences_per_paragraph {
        let len = rng.random_range(cfg.min_sentence_len..=cfg.max_sentence_len);
        let text: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.text_vocab)).collect();
        let speech = speak(cfg, speaker, state, &text);
        state = next_state(cfg, state, &speech);
        sentences.push(Sentence { text, speech });
    }
    ParagraphSample {
        speaker,
        mode: cfg.mode,
        sentences,
        config: cfg.clone(),
    }
}

/// Generator for the `index`-th paragraph of the stream seeded by `seed`.
pub fn paragraph_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// The `index`-th paragraph of the stream seeded by `seed`.
pub fn nth_paragraph(cfg: &CorpusConfig, seed: u64, index: u64) -> ParagraphSample {
    gen_paragraph(&mut paragraph_rng(seed, index), cfg)
}

pub fn gen_corpus(cfg: &CorpusConfig, count: usize) -> Vec<ParagraphSample> {
    (0..count as u64).map(|i| nth_paragraph(cfg, cfg.seed, i)).collect()
}

/// State entering sentence `n` (0-based), rebuilt from the stored speech.
pub fn oracle_state(sample: &ParagraphSample, n: usize) -> usize {
    sample.sentences[..n]
        .iter()
        .fold(0, |c, s| next_state(&sample.config, c, &s.speech))
}

/// Speech tokens sentence `n` (0-based) must have under the generation law.
pub fn oracle_speech(sample: &ParagraphSample, n: usize) -> Vec<usize> {
    speak(
        &sample.config,
        sample.speaker,
        oracle_state(sample, n),
        &sample.sentences[n].text,
    )
}

/// True when every sentence matches [`oracle_speech`].
pub fn verify(sample: &ParagraphSample) -> bool {
    (0..sample.len()).all(|n| oracle_speech(sample, n) == sample.sentences[n].speech)
}

pub fn write_dataset(path: &Path, samples: &[ParagraphSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Generates `count` paragraphs from `cfg` and writes them as JSON lines.
pub fn generate_dataset(cfg: &CorpusConfig, count: usize, path: &Path) -> Result<Vec<ParagraphSample>> {
    cfg.validate()?;
    let samples = gen_corpus(cfg, count);
    write_dataset(path, &samples)?;
    Ok(samples)
}

pub fn read_dataset(path: &Path) -> Result<Vec<ParagraphSample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: ParagraphSample = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "dataset",
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(sample);
    }
    Ok(out)
}
