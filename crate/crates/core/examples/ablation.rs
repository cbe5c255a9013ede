//! Short training runs of the full model, each memory removed, and a causal
//! prefix, compared on the same validation paragraphs.

use camlm::config::RunConfig;
use camlm::train::{evaluate_decoding, DataSource, Trainer};

fn main() -> camlm::Result<()> {
    let steps = std::env::args().nth(1).unwrap_or_else(|| "300".into());
    let variants: [(&str, &[(&str, &str)]); 4] = [
        ("full", &[]),
        ("no_mem_t", &[("use_mem_t", "false")]),
        ("no_mem_s", &[("use_mem_s", "false")]),
        ("causal", &[("mask_kind", "causal")]),
    ];
    println!("{:<10} {:>9} {:>8} {:>8} {:>8}", "variant", "val_loss", "tok_acc", "state", "greedy");
    for (name, changes) in variants {
        let mut cfg = RunConfig::default();
        cfg.set("steps", &steps)?;
        cfg.set("eval_interval", &steps)?;
        for (k, v) in changes {
            cfg.set(k, v)?;
        }
        let mut trainer = Trainer::new(cfg, DataSource::Stream)?;
        trainer.run(None, |_| {})?;
        let e = trainer.evaluate()?;
        let g = evaluate_decoding(&trainer.model, trainer.validation(), false)?;
        println!(
            "{:<10} {:>9.4} {:>8.3} {:>8.3} {:>8.3}",
            name, e.loss, e.token_accuracy, e.state_accuracy, g.accuracy
        );
    }
    Ok(())
}
