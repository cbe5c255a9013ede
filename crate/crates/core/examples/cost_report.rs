//! Context cost of one six-sentence paragraph under each strategy.

use camlm::corpus::{nth_paragraph, CorpusConfig};
use camlm::lclm::LmConfig;
use camlm::pipeline::{context_cost, Strategy};

fn main() {
    let cfg = LmConfig { mem_slots: 32, ..LmConfig::default() };
    let sample = nth_paragraph(&CorpusConfig::default(), 0, 0);
    let lens: Vec<usize> = sample.sentences.iter().map(|s| s.text.len() + s.speech.len()).collect();
    println!("sentence token counts (text + speech): {lens:?}");
    for strategy in [Strategy::Proposed, Strategy::FullPrompt, Strategy::KWindow] {
        let r = context_cost(strategy, &sample.sentences, &cfg);
        let fixed = r.prefix_len_fixed.map_or("variable".to_string(), |n| format!("fixed {n}"));
        println!(
            "{:<12} num {}  {:<10} per sentence {:?}  total {}",
            strategy.as_str(),
            r.num,
            fixed,
            r.per_sentence_prefix_lens,
            r.total_prefix_tokens
        );
    }
}
