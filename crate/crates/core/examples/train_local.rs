//! Trains on the streaming corpus and prints teacher-forced validation rows.
//!
//! Arguments are `KEY=VALUE` overrides, e.g.
//! `cargo run --release --example train_local -- steps=2000 mode=cumulative`.

use camlm::config::RunConfig;
use camlm::train::{evaluate, evaluate_decoding, DataSource, Trainer};

fn main() -> camlm::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("steps", "600")?;
    cfg.set("eval_interval", "100")?;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are KEY=VALUE");
        cfg.set(k, v)?;
    }
    let mut trainer = Trainer::new(cfg.clone(), DataSource::Stream)?;
    println!("{} parameters, mode {}", trainer.model.params.numel(), cfg.corpus.mode.as_str());
    let val: Vec<_> = trainer.validation().iter().take(64).cloned().collect();
    println!("{:>6} {:>9} {:>9} {:>8} {:>8}", "step", "train", "val", "tok_acc", "state");
    let mut running = 0.0;
    while trainer.step() < cfg.train.steps {
        let s = trainer.train_step()?;
        running += s.loss;
        if s.step % cfg.train.eval_interval == 0 {
            let e = evaluate(&trainer.model, &val)?;
            println!(
                "{:>6} {:>9.4} {:>9.4} {:>8.3} {:>8.3}",
                s.step,
                running / cfg.train.eval_interval as f64,
                e.loss,
                e.token_accuracy,
                e.state_accuracy
            );
            running = 0.0;
        }
    }
    let greedy = evaluate_decoding(&trainer.model, &val, true)?;
    println!(
        "free-running greedy accuracy {:.3} (sentences 2+: {:.3})",
        greedy.accuracy, greedy.accuracy_after_first
    );
    Ok(())
}
