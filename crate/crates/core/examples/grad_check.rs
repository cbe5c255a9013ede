//! Checks every parameter of a tiny model against central differences.

use camlm::corpus::{nth_paragraph, CorpusConfig};
use camlm::lclm::LmConfig;
use camlm::pipeline::{check_model_gradients, Model};

fn main() -> camlm::Result<()> {
    let cfg = LmConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        mem_slots: 4,
        max_positions: 8,
        init_std: 0.3,
        ..LmConfig::default()
    };
    let corpus = CorpusConfig { min_sentence_len: 3, max_sentence_len: 3, ..CorpusConfig::default() };
    let mut sample = nth_paragraph(&corpus, 0, 0);
    sample.sentences.truncate(2);
    let model = Model::new(cfg, 0)?;
    let check = check_model_gradients(&model, &sample, 1e-5, None)?;
    for (name, err) in &check.report.per_param {
        println!("{name:<40} {err:.2e}");
    }
    for (module, err) in &check.per_module {
        println!("{module:<6} max rel err {err:.2e}");
    }
    println!("{} coordinates", check.report.coords_checked);
    Ok(())
}
