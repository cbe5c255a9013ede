use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use camlm::config::RunConfig;
use camlm::corpus::{generate_dataset, nth_paragraph, read_dataset, speaker_x_vec, ParagraphSample};
use camlm::lclm::Decoding;
use camlm::pipeline::{check_model_gradients, context_cost, synthesize_paragraph, CostReport, Model, Strategy};
use camlm::train::{evaluate, evaluate_decoding, load_model, DataSource, MetricsWriter, Trainer};
use camlm::Error;

#[derive(Parser)]
#[command(name = "cam", version, about = "Context-aware memory language model on synthetic paragraphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set d_model=48` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn pairs(&self) -> Result<Vec<(String, String)>, Error> {
        self.overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config {
                        field: o.clone(),
                        message: "expected KEY=VALUE".into(),
                    })
            })
            .collect()
    }

    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for (k, v) in self.pairs()? {
            cfg.set(&k, &v)?;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and JSON-lines metrics
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset to train on; paragraphs are streamed from the generator when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier `train`
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Teacher-forced and greedy-decoding metrics of a checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset to evaluate; the run's held-out paragraphs when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate only the first N paragraphs
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Synthesize speech tokens for a paragraph of text token lists
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sentences separated by `;`, tokens by spaces, e.g. "1 2 3; 4 5 6"
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Argmax decoding instead of sampling
        #[arg(long)]
        greedy: bool,
    },
    /// Compare analytic gradients with central differences
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Coordinates checked per parameter tensor (all when omitted)
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Context-cost table for one paragraph under each strategy
    CostReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset to read the paragraph from; generated from the config when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "proposed,full_prompt,k_window")]
        strategies: String,
        #[arg(long, default_value_t = 0)]
        paragraph: usize,
    },
    /// Train the full model and the three ablations with a shared seed
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for per-variant checkpoints and metrics
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Run(Error),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Format { what: "config", .. } => 2,
        Error::Io(_) | Error::Json(_) | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn data_source(path: Option<&Path>, cfg: &RunConfig) -> Result<DataSource, Error> {
    match path {
        Some(p) => DataSource::split(read_dataset(p)?, cfg.train.val_paragraphs),
        None => Ok(DataSource::Stream),
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenCorpus { cfg, count, out } => {
            let cfg = cfg.load()?;
            let samples = generate_dataset(&cfg.corpus, count, &out)?;
            eprintln!("wrote {} paragraphs to {}", samples.len(), out.display());
        }
        Command::Train {
            cfg,
            data,
            out_ckpt,
            metrics,
            resume,
        } => {
            let (mut trainer, mut writer) = match &resume {
                Some(ckpt) => {
                    let base = camlm::train::load_model(ckpt)?.0;
                    let data = data_source(data.as_deref(), &base)?;
                    let trainer = Trainer::load(ckpt, data, &cfg.pairs()?)?;
                    let writer = match metrics.as_deref().or(trainer.cfg.metrics.as_deref()) {
                        Some(p) if p.exists() => Some(MetricsWriter::append(p)?),
                        Some(p) => Some(MetricsWriter::create(p, &trainer.cfg)?),
                        None => None,
                    };
                    (trainer, writer)
                }
                None => {
                    let mut run_cfg = cfg.load()?;
                    if let Some(d) = &data {
                        run_cfg.dataset = Some(d.clone());
                    }
                    if let Some(c) = &out_ckpt {
                        run_cfg.checkpoint = Some(c.clone());
                    }
                    if let Some(m) = &metrics {
                        run_cfg.metrics = Some(m.clone());
                    }
                    let source = data_source(run_cfg.dataset.as_deref(), &run_cfg)?;
                    let trainer = Trainer::new(run_cfg, source)?;
                    let writer = match &trainer.cfg.metrics {
                        Some(p) => Some(MetricsWriter::create(p, &trainer.cfg)?),
                        None => None,
                    };
                    (trainer, writer)
                }
            };
            trainer.run(writer.as_mut(), |r| {
                eprintln!(
                    "step {:>6}  train {:.4}  val {:.4}  acc {:.4}  state {:.4}",
                    r.step, r.train_loss, r.val_loss, r.token_accuracy, r.state_accuracy
                )
            })?;
            if let Some(path) = out_ckpt.as_ref().or(trainer.cfg.checkpoint.as_ref()) {
                trainer.save(path)?;
                eprintln!("saved {}", path.display());
            }
        }
        Command::Eval { ckpt, data, limit } => {
            let (cfg, model) = load_model(&ckpt)?;
            let mut samples = match &data {
                Some(p) => read_dataset(p)?,
                None => camlm::train::validation_set(&cfg),
            };
            if let Some(n) = limit {
                samples.truncate(n);
            }
            let teacher = evaluate(&model, &samples)?;
            let greedy = evaluate_decoding(&model, &samples, false)?;
            let free = evaluate_decoding(&model, &samples, true)?;
            print_json(&json!({
                "teacher_forced": teacher,
                "greedy_teacher_history": greedy,
                "greedy_free_running": free,
            }));
        }
        Command::Infer {
            ckpt,
            text,
            speaker,
            seed,
            greedy,
        } => {
            let (cfg, model) = load_model(&ckpt)?;
            let texts = parse_paragraph(&text)?;
            if speaker >= cfg.corpus.n_speakers {
                return Err(Error::Config {
                    field: "speaker".into(),
                    message: format!("must be < n_speakers {}", cfg.corpus.n_speakers),
                }
                .into());
            }
            let decoding = if greedy {
                Decoding::Greedy
            } else {
                Decoding::Sample {
                    temperature: cfg.model.temperature,
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = synthesize_paragraph(&model, &texts, &speaker_x_vec(speaker), decoding, &mut rng)?;
            print_json(&json!({
                "speech": out.speech,
                "hit_cap": out.hit_cap,
                "cost": out.cost,
            }));
        }
        Command::GradCheck {
            cfg,
            max_coords,
            tolerance,
        } => {
            let cfg = cfg.load()?;
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            let mut sample = nth_paragraph(&cfg.corpus, cfg.seed, 0);
            sample.sentences.truncate(2);
            let check = check_model_gradients(&model, &sample, 1e-5, max_coords)?;
            for (module, err) in &check.per_module {
                println!("{module:<6} max rel err {err:.3e}");
            }
            println!("checked {} coordinates", check.report.coords_checked);
            if check.max_rel_error() > tolerance {
                let (name, err) = check.report.worst().expect("non-empty");
                return Err(Failure::Threshold(format!(
                    "gradient check failed: `{name}` rel err {err:.3e} > {tolerance:e}"
                )));
            }
        }
        Command::CostReport {
            cfg,
            data,
            strategies,
            paragraph,
        } => {
            let cfg = cfg.load()?;
            let sample: ParagraphSample = match &data {
                Some(p) => read_dataset(p)?.into_iter().nth(paragraph).ok_or_else(|| Error::Config {
                    field: "paragraph".into(),
                    message: format!("dataset has no paragraph {paragraph}"),
                })?,
                None => nth_paragraph(&cfg.corpus, cfg.seed, paragraph as u64),
            };
            let strategies = strategies
                .split(',')
                .map(|s| s.trim().parse::<Strategy>())
                .collect::<Result<Vec<_>, _>>()?;
            let reports: Vec<CostReport> =
                strategies.iter().map(|&s| context_cost(s, &sample.sentences, &cfg.model)).collect();
            print_json(&serde_json::to_value(&reports).map_err(Error::from)?);
            println!();
            print!("{}", cost_table(&reports));
        }
        Command::Ablate { cfg, data, out_dir } => {
            let base = cfg.load()?;
            let variants: [(&str, &[(&str, &str)]); 4] = [
                ("full", &[]),
                ("no_mem_t", &[("use_mem_t", "false")]),
                ("no_mem_s", &[("use_mem_s", "false")]),
                ("causal", &[("mask_kind", "causal")]),
            ];
            if let Some(dir) = &out_dir {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
            }
            let mut rows = Vec::new();
            for (name, changes) in variants {
                let mut cfg = base.clone();
                for (k, v) in changes {
                    cfg.set(k, v)?;
                }
                let source = data_source(data.as_deref(), &cfg)?;
                let mut trainer = Trainer::new(cfg, source)?;
                let mut writer = match &out_dir {
                    Some(dir) => Some(MetricsWriter::create(&dir.join(format!("{name}.jsonl")), &trainer.cfg)?),
                    None => None,
                };
                trainer.run(writer.as_mut(), |r| {
                    eprintln!("[{name}] step {:>6}  val {:.4}  acc {:.4}", r.step, r.val_loss, r.token_accuracy)
                })?;
                if let Some(dir) = &out_dir {
                    trainer.save(&dir.join(format!("{name}.ckpt")))?;
                }
                let teacher = trainer.evaluate()?;
                let greedy = evaluate_decoding(&trainer.model, trainer.validation(), false)?;
                rows.push(json!({
                    "variant": name,
                    "val_loss": teacher.loss,
                    "token_accuracy": teacher.token_accuracy,
                    "state_accuracy": teacher.state_accuracy,
                    "greedy_accuracy": greedy.accuracy,
                    "greedy_accuracy_from_third": greedy.accuracy_after_second,
                }));
            }
            print_json(&serde_json::Value::Array(rows.clone()));
            println!();
            println!(
                "{:<10} {:>9} {:>9} {:>9} {:>9} {:>11}",
                "variant", "val_loss", "tok_acc", "state", "greedy", "greedy_n>=3"
            );
            for r in &rows {
                println!(
                    "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>11.4}",
                    r["variant"].as_str().unwrap_or(""),
                    r["val_loss"].as_f64().unwrap_or(f64::NAN),
                    r["token_accuracy"].as_f64().unwrap_or(f64::NAN),
                    r["state_accuracy"].as_f64().unwrap_or(f64::NAN),
                    r["greedy_accuracy"].as_f64().unwrap_or(f64::NAN),
                    r["greedy_accuracy_from_third"].as_f64().unwrap_or(f64::NAN),
                );
            }
        }
    }
    Ok(())
}

fn parse_paragraph(text: &str) -> Result<Vec<Vec<usize>>, Error> {
    let sentences: Vec<Vec<usize>> = text
        .split(';')
        .map(|s| {
            s.split_whitespace()
                .map(|tok| {
                    tok.parse().map_err(|_| Error::Config {
                        field: "text".into(),
                        message: format!("`{tok}` is not a token id"),
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if sentences.iter().any(Vec::is_empty) {
        return Err(Error::Config {
            field: "text".into(),
            message: "every sentence needs at least one token".into(),
        });
    }
    Ok(sentences)
}

fn cost_table(reports: &[CostReport]) -> String {
    let mut out = format!("{:<12} {:>4} {:>14} {:>10}  per-sentence\n", "strategy", "num", "prefix_len", "total");
    for r in reports {
        let prefix = match r.prefix_len_fixed {
            Some(n) => format!("fixed: {n}"),
            None => "variable".to_string(),
        };
        let per: Vec<String> = r.per_sentence_prefix_lens.iter().map(ToString::to_string).collect();
        out.push_str(&format!(
            "{:<12} {:>4} {:>14} {:>10}  {}\n",
            r.strategy.as_str(),
            r.num,
            prefix,
            r.total_prefix_tokens,
            per.join(" ")
        ));
    }
    out
}
