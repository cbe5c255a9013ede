//! Mask, assembly and recurrence properties of the language model and the
//! paragraph pipeline.

use camlm::attention::{make_causal_mask, make_prefix_mask, MaskKind};
use camlm::cam::{cam_forward, update};
use camlm::corpus::{nth_paragraph, speaker_x_vec, CorpusConfig};
use camlm::lclm::{assemble, forward, loss, LmConfig};
use camlm::pipeline::{paragraph_loss, step_train, Model, TapeState};
use camlm::tensorcore::{Tape, Tensor};
use proptest::prelude::*;

fn small() -> LmConfig {
    LmConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        mem_slots: 4,
        max_positions: 16,
        init_std: 0.2,
        ..LmConfig::default()
    }
}

/// Final hidden states for one assembled sentence with fixed memories.
fn hidden(model: &Model, mask: MaskKind, text: &[usize], speech: &[usize]) -> (usize, Tensor) {
    let mut tape = Tape::inference();
    let cfg = &model.cfg;
    let mem = |t: &mut Tape, k: f64| {
        let vals = (0..cfg.mem_slots * cfg.d_model).map(|i| ((i as f64) * k).sin()).collect();
        t.constant(Tensor::matrix(cfg.mem_slots, cfg.d_model, vals).unwrap())
    };
    let mt = mem(&mut tape, 0.37);
    let ms = mem(&mut tape, 0.71);
    let asm = assemble(
        &mut tape,
        &model.params,
        &model.lm,
        cfg,
        &speaker_x_vec(2),
        Some(mt),
        Some(ms),
        text,
        speech,
    )
    .unwrap();
    let out = forward(&mut tape, &model.params, &model.lm, &asm, mask).unwrap();
    (asm.prefix_len, tape.value(out.hidden).clone())
}

fn max_row_change(a: &Tensor, b: &Tensor, rows: std::ops::Range<usize>) -> f64 {
    rows.flat_map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[test]
fn prefix_positions_see_later_prefix_positions_only_under_prefix_mask() {
    let model = Model::new(small(), 3).unwrap();
    let speech = [4, 5, 6];
    let base = [1, 2, 3, 4];
    let mut perturbed = base;
    perturbed[3] = 9;
    let (p, a) = hidden(&model, MaskKind::Prefix, &base, &speech);
    let (_, b) = hidden(&model, MaskKind::Prefix, &perturbed, &speech);
    let j = p - 1;
    assert!(max_row_change(&a, &b, 0..j) > 1e-8);

    let (_, a) = hidden(&model, MaskKind::Causal, &base, &speech);
    let (_, b) = hidden(&model, MaskKind::Causal, &perturbed, &speech);
    assert!(max_row_change(&a, &b, 0..j) < 1e-12);
    assert!(max_row_change(&a, &b, j..a.rows()) > 1e-8);
}

#[test]
fn suffix_is_causal_and_prefix_ignores_the_suffix() {
    let model = Model::new(small(), 5).unwrap();
    let text = [1, 2, 3];
    let (p, a) = hidden(&model, MaskKind::Prefix, &text, &[4, 5, 6, 7]);
    let (_, b) = hidden(&model, MaskKind::Prefix, &text, &[4, 5, 11, 7]);
    // Speech token 2 sits at suffix index 3 (after BOS).
    assert_eq!(max_row_change(&a, &b, 0..p + 3), 0.0);
    assert!(max_row_change(&a, &b, p + 3..a.rows()) > 1e-8);
}

#[test]
fn loss_gradient_touches_only_loss_positions() {
    let model = Model::new(small(), 7).unwrap();
    let mut tape = Tape::new();
    let x = speaker_x_vec(1);
    let asm = assemble(&mut tape, &model.params, &model.lm, &model.cfg, &x, None, None, &[3, 1, 4], &[1, 5, 9]).unwrap();
    let out = forward(&mut tape, &model.params, &model.lm, &asm, MaskKind::Prefix).unwrap();
    let logits = tape.input(tape.value(out.logits).detached());
    let l = loss(&mut tape, &asm, logits).unwrap();
    let grads = tape.backward(l).unwrap();
    let g = grads.wrt(logits).unwrap();
    let width = model.cfg.speech_table_size();
    for r in 0..asm.len() {
        let row_norm: f64 = g[r * width..(r + 1) * width].iter().map(|v| v.abs()).sum();
        assert_eq!(row_norm > 0.0, asm.loss_mask[r], "row {r}");
    }
    assert_eq!(asm.loss_positions().collect::<Vec<_>>(), (asm.prefix_len..asm.len()).collect::<Vec<_>>());
}

#[test]
fn text_and_speech_memories_have_independent_weights() {
    let model = Model::new(small(), 11).unwrap();
    let names: Vec<&str> = model.params.iter().map(|(_, n, _)| n).collect();
    let t: Vec<&str> = names.iter().filter_map(|n| n.strip_prefix("cam_t.")).collect();
    let s: Vec<&str> = names.iter().filter_map(|n| n.strip_prefix("cam_s.")).collect();
    assert_eq!(t, s);
    assert!(!t.is_empty());
    for suffix in &t {
        let a = model.params.id(&format!("cam_t.{suffix}")).unwrap();
        let b = model.params.id(&format!("cam_s.{suffix}")).unwrap();
        assert_ne!(a, b);
    }
    let q = |m: &str| model.params.by_name(&format!("{m}.latent_queries")).unwrap();
    assert!(q("cam_t").max_abs_diff(q("cam_s")) > 0.0);

    let mut moved = model.clone();
    let id = moved.params.id("cam_t.latent_queries").unwrap();
    moved.params.get_mut(id).values_mut()[0] += 1.0;
    let sample = nth_paragraph(&CorpusConfig::default(), 4, 0);
    let text = &sample.sentences[0].text;
    let memories = |m: &Model| {
        let mut tape = Tape::inference();
        let state = TapeState::initial(&mut tape, m);
        let (t, s) = camlm::pipeline::advance_memory(&mut tape, m, &state, text).unwrap();
        (tape.value(t.unwrap()).clone(), tape.value(s.unwrap()).clone())
    };
    let (t0, s0) = memories(&model);
    let (t1, s1) = memories(&moved);
    assert!(t0.max_abs_diff(&t1) > 0.0);
    assert_eq!(s0.max_abs_diff(&s1), 0.0);
}

#[test]
fn earlier_sentences_reach_later_losses_only_through_memory() {
    let corpus = CorpusConfig::default();
    let mut sample = nth_paragraph(&corpus, 1, 0);
    sample.sentences.truncate(3);
    let mut changed = sample.clone();
    changed.sentences[0].text[0] = (changed.sentences[0].text[0] + 1) % corpus.text_vocab;

    let last_loss = |model: &Model, s: &camlm::corpus::ParagraphSample| {
        let mut tape = Tape::inference();
        let mut state = TapeState::initial(&mut tape, model);
        let mut l = 0.0;
        for sent in &s.sentences {
            let out = step_train(&mut tape, model, &s.x_vec(), &state, &sent.text, &sent.speech).unwrap();
            l = tape.value(out.loss).item();
            state = out.state;
        }
        l
    };

    let full = Model::new(small(), 13).unwrap();
    assert_ne!(last_loss(&full, &sample), last_loss(&full, &changed));

    let ablated = Model::new(LmConfig { use_mem_t: false, use_mem_s: false, ..small() }, 13).unwrap();
    assert_eq!(last_loss(&ablated, &sample), last_loss(&ablated, &changed));
}

#[test]
fn paragraph_loss_is_deterministic() {
    let model = Model::new(small(), 17).unwrap();
    let sample = nth_paragraph(&CorpusConfig::default(), 2, 5);
    let run = || {
        let mut tape = Tape::new();
        let l = paragraph_loss(&mut tape, &model, &sample).unwrap();
        tape.value(l).item().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn prefix_mask_matches_closed_form_exhaustively() {
    for t in 0..=12 {
        for p in 0..=t {
            let m = make_prefix_mask(p, t).unwrap();
            for i in 0..t {
                for j in 0..t {
                    let expected = if i < p { j < p } else { j <= i };
                    assert_eq!(m.allows(i, j), expected, "P={p} T={t} ({i},{j})");
                }
            }
        }
        assert_eq!(make_prefix_mask(0, t).unwrap(), make_causal_mask(t));
    }
    assert!(make_prefix_mask(5, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn memory_is_fixed_size_for_any_lengths(text_len in 1usize..=64, hist_len in 1usize..=64, seed in 0u64..1000) {
        let cfg = LmConfig { max_positions: 64, ..small() };
        let model = Model::new(cfg.clone(), seed).unwrap();
        let cam = model.cam_s.as_ref().unwrap();
        let mut tape = Tape::inference();
        let prev = tape.constant(Tensor::zeros(&[cfg.mem_slots, cfg.d_model]));
        let text: Vec<usize> = (0..text_len).map(|i| (i * 7 + seed as usize) % cfg.text_vocab).collect();
        let hist: Vec<usize> = (0..hist_len).map(|i| (i * 3 + seed as usize) % cfg.speech_vocab).collect();
        let mem = cam_forward(&mut tape, &model.params, cam, &text, prev, &hist).unwrap();
        prop_assert_eq!(tape.shape(mem), &[cfg.mem_slots, cfg.d_model]);
    }

    #[test]
    fn gate_output_lies_between_its_inputs(alpha in -30.0f64..30.0, seed in 0u64..1000) {
        let mut tape = Tape::inference();
        let a: Vec<f64> = (0..12).map(|i| ((i as u64 * 31 + seed) as f64).sin()).collect();
        let b: Vec<f64> = (0..12).map(|i| ((i as u64 * 17 + seed) as f64).cos()).collect();
        let star = tape.constant(Tensor::matrix(3, 4, a.clone()).unwrap());
        let prev = tape.constant(Tensor::matrix(3, 4, b.clone()).unwrap());
        let al = tape.constant(Tensor::scalar(alpha));
        let out = update(&mut tape, star, prev, al).unwrap();
        for ((o, x), y) in tape.value(out).values().iter().zip(&a).zip(&b) {
            prop_assert!(*o >= x.min(*y) - 1e-15 && *o <= x.max(*y) + 1e-15);
        }
    }
}
