//! Runs one untrained memory block over sentences of growing length and
//! shows that the memory stays `L×d`, along with the gate extremes.

use camlm::cam::{cam_forward, update};
use camlm::lclm::LmConfig;
use camlm::pipeline::Model;
use camlm::tensorcore::{Tape, Tensor};

fn main() -> camlm::Result<()> {
    let cfg = LmConfig { mem_slots: 32, max_positions: 64, ..LmConfig::default() };
    let model = Model::new(cfg.clone(), 0)?;
    let cam = model.cam_t.as_ref().expect("text memory enabled");

    let mut tape = Tape::inference();
    let mut mem = tape.constant(Tensor::zeros(&[cfg.mem_slots, cfg.d_model]));
    let mut history = vec![cfg.specials().blank_text];
    for len in [1, 4, 16, 64] {
        let text: Vec<usize> = (0..len).map(|i| i % cfg.text_vocab).collect();
        mem = cam_forward(&mut tape, &model.params, cam, &text, mem, &history)?;
        println!("text length {len:>2}  history length {:>2}  memory {:?}", history.len(), tape.shape(mem));
        history = text;
    }

    let star = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0])?);
    let prev = tape.constant(Tensor::matrix(1, 3, vec![-1.0, 0.0, 5.0])?);
    for alpha in [-20.0, 0.0, 20.0] {
        let a = tape.constant(Tensor::scalar(alpha));
        let out = update(&mut tape, star, prev, a)?;
        println!("alpha {alpha:>5}: {:?}", tape.value(out).values());
    }
    Ok(())
}
