//! Training loop, evaluation and checkpoint persistence.
//!
//! Every optimizer step draws its paragraphs from indices derived from the
//! step number alone, so a run resumed from a checkpoint sees exactly the
//! data it would have seen without the interruption.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::corpus::{nth_paragraph, ParagraphSample};
use crate::error::{Error, Result};
use crate::lclm::Decoding;
use crate::pipeline::{
    decode_with_teacher_history, oracle_matches, score_paragraph, synthesize_paragraph, train_paragraph, Model,
};
use crate::tensorcore::{adam_step, load_checkpoint, save_checkpoint, AdamState, Tensor};

/// Stream index where held-out paragraphs start; training never gets there.
pub const VALIDATION_OFFSET: u64 = 1 << 40;

/// Where training and validation paragraphs come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Fresh paragraphs drawn from the corpus generator on demand.
    Stream,
    /// A fixed dataset: the last `val_paragraphs` are held out.
    Fixed {
        train: Vec<ParagraphSample>,
        val: Vec<ParagraphSample>,
    },
}

impl DataSource {
    pub fn split(mut samples: Vec<ParagraphSample>, val_paragraphs: usize) -> Result<Self> {
        if samples.len() <= val_paragraphs {
            return Err(Error::config(
                "val_paragraphs",
                format!("dataset of {} paragraphs leaves nothing to train on", samples.len()),
            ));
        }
        let val = samples.split_off(samples.len() - val_paragraphs);
        Ok(DataSource::Fixed { train: samples, val })
    }
}

/// Held-out paragraphs for `cfg`, independent of the training stream.
pub fn validation_set(cfg: &RunConfig) -> Vec<ParagraphSample> {
    (0..cfg.train.val_paragraphs as u64)
        .map(|i| nth_paragraph(&cfg.corpus, cfg.seed, VALIDATION_OFFSET + i))
        .collect()
}

/// Teacher-forced metrics over a set of paragraphs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub paragraphs: usize,
    pub loss: f64,
    /// Argmax next-speech-token accuracy over all speech tokens.
    pub token_accuracy: f64,
    /// Token accuracy per sentence position within the paragraph.
    pub per_position_accuracy: Vec<f64>,
    /// First-token accuracy per sentence position: the token that needs the
    /// state carried in from earlier sentences.
    pub per_position_first_token: Vec<f64>,
    /// First-token accuracy over sentences 2 onward.
    pub state_accuracy: f64,
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn evaluate(model: &Model, samples: &[ParagraphSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one paragraph"));
    }
    let width = samples.iter().map(ParagraphSample::len).max().unwrap_or(0);
    let mut pos_hits = vec![0; width];
    let mut pos_total = vec![0; width];
    let mut first_hits = vec![0; width];
    let mut first_total = vec![0; width];
    let mut loss = 0.0;
    let mut sentences = 0;
    for sample in samples {
        let score = score_paragraph(model, sample)?;
        for (n, s) in score.sentences.iter().enumerate() {
            loss += s.loss;
            sentences += 1;
            pos_hits[n] += s.correct;
            pos_total[n] += s.total;
            first_hits[n] += s.first_correct as usize;
            first_total[n] += 1;
        }
    }
    Ok(EvalReport {
        paragraphs: samples.len(),
        loss: loss / sentences as f64,
        token_accuracy: ratio(pos_hits.iter().sum(), pos_total.iter().sum()),
        per_position_accuracy: pos_hits.iter().zip(&pos_total).map(|(&h, &t)| ratio(h, t)).collect(),
        per_position_first_token: first_hits.iter().zip(&first_total).map(|(&h, &t)| ratio(h, t)).collect(),
        state_accuracy: ratio(first_hits.iter().skip(1).sum(), first_total.iter().skip(1).sum()),
    })
}

/// Decoding accuracy against the corpus oracle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeReport {
    pub paragraphs: usize,
    /// Oracle-token match over every sentence.
    pub accuracy: f64,
    /// Oracle-token match from the second sentence on.
    pub accuracy_after_first: f64,
    /// Oracle-token match from the third sentence on.
    pub accuracy_after_second: f64,
    pub per_position_accuracy: Vec<f64>,
    /// Sentences whose decoding stopped at the length cap.
    pub capped: usize,
}

/// Greedy decoding of every held-out sentence.
///
/// With `free_running` the model's own output is the speech history for the
/// next sentence; otherwise the ground-truth speech is.
pub fn evaluate_decoding(model: &Model, samples: &[ParagraphSample], free_running: bool) -> Result<DecodeReport> {
    let width = samples.iter().map(ParagraphSample::len).max().unwrap_or(0);
    let mut hits = vec![0; width];
    let mut total = vec![0; width];
    let mut capped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sample in samples {
        let synth = if free_running {
            let texts: Vec<Vec<usize>> = sample.sentences.iter().map(|s| s.text.clone()).collect();
            synthesize_paragraph(model, &texts, &sample.x_vec(), Decoding::Greedy, &mut rng)?
        } else {
            decode_with_teacher_history(model, sample, Decoding::Greedy, &mut rng)?
        };
        capped += synth.hit_cap.iter().filter(|&&c| c).count();
        for (n, (h, t)) in oracle_matches(sample, &synth.speech).into_iter().enumerate() {
            hits[n] += h;
            total[n] += t;
        }
    }
    let sum_from = |k: usize| (hits.iter().skip(k).sum(), total.iter().skip(k).sum());
    let (h0, t0) = sum_from(0);
    let (h1, t1) = sum_from(1);
    let (h2, t2) = sum_from(2);
    Ok(DecodeReport {
        paragraphs: samples.len(),
        accuracy: ratio(h0, t0),
        accuracy_after_first: ratio(h1, t1),
        accuracy_after_second: ratio(h2, t2),
        per_position_accuracy: hits.iter().zip(&total).map(|(&h, &t)| ratio(h, t)).collect(),
        capped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model, optimizer and data position of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub adam: AdamState,
    pub data: DataSource,
    val: Vec<ParagraphSample>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: DataSource) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let adam = AdamState::new(&model.params);
        let val = match &data {
            DataSource::Stream => validation_set(&cfg),
            DataSource::Fixed { val, .. } => val.clone(),
        };
        Ok(Self {
            cfg,
            model,
            adam,
            data,
            val,
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.adam.step()
    }

    pub fn validation(&self) -> &[ParagraphSample] {
        &self.val
    }

    /// The `j`-th paragraph of optimizer step `step`.
    pub fn batch_item(&self, step: u64, j: usize) -> ParagraphSample {
        let index = step * self.cfg.train.batch_size as u64 + j as u64;
        match &self.data {
            DataSource::Stream => nth_paragraph(&self.cfg.corpus, self.cfg.seed, index),
            DataSource::Fixed { train, .. } => train[(index % train.len() as u64) as usize].clone(),
        }
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let step = self.step();
        let b = self.cfg.train.batch_size;
        let mut loss = 0.0;
        for j in 0..b {
            let sample = self.batch_item(step, j);
            let score = train_paragraph(&mut self.model, &sample, self.cfg.train.bptt, 1.0 / b as f64)?;
            loss += score.mean_loss() / b as f64;
        }
        let grad_norm = self.model.params.grad_norm();
        let clip = self.cfg.train.grad_clip;
        if clip > 0.0 && grad_norm > clip {
            let k = clip / grad_norm;
            for (_, _, t) in self.model.params.iter_mut() {
                t.grad_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
        adam_step(&mut self.model.params, &mut self.adam, &self.cfg.train.adam)?;
        Ok(StepStats {
            step: self.step(),
            loss,
            grad_norm,
        })
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.model, &self.val)
    }

    /// Trains until `cfg.train.steps`, evaluating every `eval_interval`
    /// steps and at the end; each evaluation is passed to `on_eval` and,
    /// when given, appended to `metrics`.
    pub fn run(
        &mut self,
        mut metrics: Option<&mut MetricsWriter>,
        mut on_eval: impl FnMut(&EvalRecord),
    ) -> Result<Vec<EvalRecord>> {
        let mut records = Vec::new();
        let mut window = Vec::new();
        let interval = self.cfg.train.eval_interval;
        while self.step() < self.cfg.train.steps {
            let stats = self.train_step()?;
            window.push(stats.loss);
            if stats.step % interval == 0 || stats.step == self.cfg.train.steps {
                let report = self.evaluate()?;
                let record = EvalRecord {
                    step: stats.step,
                    train_loss: window.iter().sum::<f64>() / window.len() as f64,
                    val_loss: report.loss,
                    token_accuracy: report.token_accuracy,
                    state_accuracy: report.state_accuracy,
                };
                window.clear();
                if let Some(m) = metrics.as_deref_mut() {
                    m.eval(&record)?;
                }
                on_eval(&record);
                records.push(record);
            }
        }
        Ok(records)
    }

    /// Writes parameters, optimizer moments and the step count.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = self.cfg.to_kv_string();
        config.push_str(&format!("{STEP_KEY}={}\n", self.step()));
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .params
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.detached()))
            .collect();
        for ((_, name, t), (m, v)) in self.model.params.iter().zip(self.adam.moments()) {
            tensors.push((format!("optim.m.{name}"), Tensor::new(t.shape(), m.to_vec())?));
            tensors.push((format!("optim.v.{name}"), Tensor::new(t.shape(), v.to_vec())?));
        }
        save_checkpoint(path, &config, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Restores a run saved by [`Trainer::save`]. `overrides` are applied on
    /// top of the stored config (a larger `steps` continues training).
    pub fn load(path: &Path, data: DataSource, overrides: &[(String, String)]) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let (cfg_text, step) = split_step(&ckpt.config)?;
        let mut cfg = RunConfig::from_kv_str(&cfg_text)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        let mut trainer = Trainer::new(cfg, data)?;
        restore_params(&mut trainer.model, &ckpt)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, t) in trainer.model.params.iter() {
            for (prefix, out) in [("optim.m.", &mut m), ("optim.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let stored = ckpt.get(&key).ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    message: format!("missing `{key}`"),
                })?;
                if stored.shape() != t.shape() {
                    return Err(Error::dim("load", format!("{key} {:?}", t.shape()), format!("{:?}", stored.shape())));
                }
                out.push(stored.values().to_vec());
            }
        }
        trainer.adam = AdamState::from_parts(m, v, step);
        Ok(trainer)
    }
}

const STEP_KEY: &str = "trained_steps";

fn split_step(config: &str) -> Result<(String, u64)> {
    let mut step = 0;
    let mut rest = String::new();
    for line in config.lines() {
        match line.strip_prefix(&format!("{STEP_KEY}=")) {
            Some(v) => {
                step = v.trim().parse().map_err(|_| Error::Format {
                    what: "checkpoint",
                    message: format!("bad {STEP_KEY} `{v}`"),
                })?
            }
            None => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    Ok((rest, step))
}

fn restore_params(model: &mut Model, ckpt: &crate::tensorcore::Checkpoint) -> Result<()> {
    let ids: Vec<_> = model.params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let stored = ckpt.get(&name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            message: format!("missing parameter `{name}`"),
        })?;
        if stored.shape() != model.params.get(id).shape() {
            return Err(Error::dim(
                "load",
                format!("{name} {:?}", model.params.get(id).shape()),
                format!("{:?}", stored.shape()),
            ));
        }
        model.params.set_values(id, stored.values())?;
    }
    Ok(())
}

/// Loads a model for inference; optimizer state in the file is ignored.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model)> {
    let ckpt = load_checkpoint(path)?;
    let (cfg_text, _) = split_step(&ckpt.config)?;
    let cfg = RunConfig::from_kv_str(&cfg_text)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    restore_params(&mut model, &ckpt)?;
    Ok((cfg, model))
}

/// One evaluation event of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub token_accuracy: f64,
    pub state_accuracy: f64,
}

/// JSON-lines metrics file whose first line carries the effective config.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let mut w = Self {
            out: BufWriter::new(File::create(path)?),
        };
        w.write(&json!({ "event": "config", "config": config_json(cfg) }))?;
        Ok(w)
    }

    /// Appends to an existing metrics file (used when resuming).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn eval(&mut self, record: &EvalRecord) -> Result<()> {
        let mut v = serde_json::to_value(record)?;
        v.as_object_mut().expect("struct").insert("event".into(), "eval".into());
        self.write(&v)
    }

    pub fn write(&mut self, v: &Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, v)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn config_json(cfg: &RunConfig) -> Value {
    Value::Object(cfg.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect::<Map<_, _>>())
}
