//! Generates a few synthetic paragraphs and checks them against the oracle.
//!
//! `cargo run --example gen_corpus -- cumulative`

use camlm::corpus::{gen_corpus, oracle_state, verify, CorpusConfig, DependencyMode};

fn main() {
    let mode = match std::env::args().nth(1).as_deref() {
        Some("cumulative") => DependencyMode::Cumulative,
        _ => DependencyMode::Local,
    };
    let cfg = CorpusConfig { mode, ..CorpusConfig::default() };
    for (i, p) in gen_corpus(&cfg, 3).iter().enumerate() {
        println!("paragraph {i}: speaker {}  mode {}  oracle ok {}", p.speaker, p.mode.as_str(), verify(p));
        for (n, s) in p.sentences.iter().enumerate() {
            println!("  state {}  text {:?}\n           speech {:?}", oracle_state(p, n), s.text, s.speech);
        }
    }
}
