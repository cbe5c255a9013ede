//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; [`RunConfig::keys`] lists them with their defaults. The same
//! keys can be overridden one by one with [`RunConfig::set`], which is what
//! the command line does, and `CAM_SEED` in the environment replaces `seed`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::MaskKind;
use crate::corpus::{CorpusConfig, DependencyMode};
use crate::error::{Error, Result};
use crate::lclm::LmConfig;
use crate::pipeline::Bptt;
use crate::tensorcore::AdamConfig;

pub const SEED_ENV: &str = "CAM_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Paragraphs per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub bptt: Bptt,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_interval: u64,
    pub val_paragraphs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            adam: AdamConfig::default(),
            bptt: Bptt::Full,
            grad_clip: 1.0,
            eval_interval: 250,
            val_paragraphs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: LmConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}


fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true|false, got `{value}`"))),
    }
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every recognised key, in rendering order.
    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// `(key, value)` pairs that fully describe this configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let c = &self.corpus;
        let t = &self.train;
        vec![
            ("seed", self.seed.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("mem_slots", m.mem_slots.to_string()),
            ("history_blocks", m.history_blocks.to_string()),
            ("retrieve_stages", m.retrieve_stages.to_string()),
            ("ffn_mult", m.ffn_mult.to_string()),
            ("max_positions", m.max_positions.to_string()),
            ("init_std", m.init_std.to_string()),
            ("use_mem_t", m.use_mem_t.to_string()),
            ("use_mem_s", m.use_mem_s.to_string()),
            ("mask_kind", m.mask_kind.as_str().to_string()),
            ("init_memory", if m.learned_initial_memory { "learned" } else { "zero" }.to_string()),
            ("tie_head", m.tie_head.to_string()),
            ("max_generate_factor", m.max_generate_factor.to_string()),
            ("temperature", m.temperature.to_string()),
            ("text_vocab", c.text_vocab.to_string()),
            ("speech_vocab", c.speech_vocab.to_string()),
            ("n_speakers", c.n_speakers.to_string()),
            ("state_modulus", c.state_modulus.to_string()),
            ("sentences_per_paragraph", c.sentences_per_paragraph.to_string()),
            ("min_sentence_len", c.min_sentence_len.to_string()),
            ("max_sentence_len", c.max_sentence_len.to_string()),
            ("mode", c.mode.as_str().to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("bptt", t.bptt.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("val_paragraphs", t.val_paragraphs.to_string()),
            ("dataset", show_path(&self.dataset)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("metrics", show_path(&self.metrics)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let c = &mut self.corpus;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "n_layers" => m.n_layers = parse(key, value)?,
            "mem_slots" => m.mem_slots = parse(key, value)?,
            "history_blocks" => m.history_blocks = parse(key, value)?,
            "retrieve_stages" => m.retrieve_stages = parse(key, value)?,
            "ffn_mult" => m.ffn_mult = parse(key, value)?,
            "max_positions" => m.max_positions = parse(key, value)?,
            "init_std" => m.init_std = parse(key, value)?,
            "use_mem_t" => m.use_mem_t = parse_bool(key, value)?,
            "use_mem_s" => m.use_mem_s = parse_bool(key, value)?,
            "mask_kind" => m.mask_kind = value.parse::<MaskKind>()?,
            "init_memory" => {
                m.learned_initial_memory = match value {
                    "zero" => false,
                    "learned" => true,
                    _ => return Err(Error::config(key, format!("expected zero|learned, got `{value}`"))),
                }
            }
            "tie_head" => m.tie_head = parse_bool(key, value)?,
            "max_generate_factor" => m.max_generate_factor = parse(key, value)?,
            "temperature" => m.temperature = parse(key, value)?,
            "text_vocab" => c.text_vocab = parse(key, value)?,
            "speech_vocab" => c.speech_vocab = parse(key, value)?,
            "n_speakers" => c.n_speakers = parse(key, value)?,
            "state_modulus" => c.state_modulus = parse(key, value)?,
            "sentences_per_paragraph" => c.sentences_per_paragraph = parse(key, value)?,
            "min_sentence_len" => c.min_sentence_len = parse(key, value)?,
            "max_sentence_len" => c.max_sentence_len = parse(key, value)?,
            "mode" => c.mode = value.parse::<DependencyMode>()?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "bptt" => t.bptt = value.parse()?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "val_paragraphs" => t.val_paragraphs = parse(key, value)?,
            "dataset" => self.dataset = path_or_none(value),
            "checkpoint" => self.checkpoint = path_or_none(value),
            "metrics" => self.metrics = path_or_none(value),
            _ => return Err(Error::config(key, "unknown key")),
        }
        self.sync();
        Ok(())
    }

    /// Mirrors the shared fields (vocabularies, seed) into the sub-configs.
    fn sync(&mut self) {
        self.model.text_vocab = self.corpus.text_vocab;
        self.model.speech_vocab = self.corpus.speech_vocab;
        self.corpus.seed = self.seed;
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "config",
                message: format!("line {}: expected key=value, got `{line}`", i + 1),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    /// Replaces `seed` with `CAM_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", &v).map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{v}` is not an integer")))?;
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(t.adam.lr.is_finite() && t.adam.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", t.adam.lr)));
        }
        for (key, beta) in [("beta1", t.adam.beta1), ("beta2", t.adam.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(key, format!("must be in [0, 1), got {beta}")));
            }
        }
        if !(t.adam.eps.is_finite() && t.adam.eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if !(t.grad_clip.is_finite() && t.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be >= 0"));
        }
        if t.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be >= 1"));
        }
        if t.val_paragraphs == 0 {
            return Err(Error::config("val_paragraphs", "must be >= 1"));
        }
        let longest = self.corpus.max_sentence_len + 1;
        if longest > self.model.max_positions {
            return Err(Error::config(
                "max_positions",
                format!("{} is shorter than the longest suffix ({longest})", self.model.max_positions),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("d_model", "48").unwrap();
        cfg.set("mode", "cumulative").unwrap();
        cfg.set("bptt", "truncate_2").unwrap();
        cfg.set("metrics", "out/m.jsonl").unwrap();
        let back = RunConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_kv_str("mem_slots=0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "mem_slots"), "{err}");
        let err = RunConfig::from_kv_str("mem_slots=0\nuse_mem_t=false\nuse_mem_s=false\n");
        assert!(err.is_ok());
        let err = RunConfig::from_kv_str("lr=fast\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "lr"));
        let err = RunConfig::from_kv_str("colour=blue\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "colour"));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_kv_str("# desk run\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.corpus.seed, 7);
        assert!(RunConfig::from_kv_str("seed\n").is_err());
    }
}
