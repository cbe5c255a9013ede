//! Greedy paragraph synthesis against the corpus oracle.
//!
//! `cargo run --release --example paragraph_inference -- model.ckpt` loads a
//! checkpoint written by `cam train`; without one a short run is trained first.

use camlm::corpus::nth_paragraph;
use camlm::lclm::Decoding;
use camlm::train::{DataSource, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> camlm::Result<()> {
    let trainer = match std::env::args().nth(1) {
        Some(path) => Trainer::load(path.as_ref(), DataSource::Stream, &[])?,
        None => {
            let mut cfg = camlm::config::RunConfig::default();
            cfg.set("steps", "200")?;
            let mut t = Trainer::new(cfg, DataSource::Stream)?;
            t.run(None, |_| {})?;
            t
        }
    };
    let sample = nth_paragraph(&trainer.cfg.corpus, trainer.cfg.seed ^ 0xfeed, 0);
    let texts: Vec<Vec<usize>> = sample.sentences.iter().map(|s| s.text.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = camlm::pipeline::synthesize_paragraph(&trainer.model, &texts, &sample.x_vec(), Decoding::Greedy, &mut rng)?;
    println!("speaker {}  mode {}", sample.speaker, sample.mode.as_str());
    for (n, (sent, spoken)) in sample.sentences.iter().zip(&out.speech).enumerate() {
        let hits = sent.speech.iter().zip(spoken).filter(|(a, b)| a == b).count();
        println!("sentence {}  text   {:?}", n + 1, sent.text);
        println!("            oracle {:?}", sent.speech);
        println!("            output {:?}  ({hits}/{} match)", spoken, sent.speech.len());
        println!("            memory {:?} / {:?}", out.memory_shapes[n].0, out.memory_shapes[n].1);
    }
    println!("prefix lengths {:?}", out.cost.per_sentence_prefix_lens);
    Ok(())
}
