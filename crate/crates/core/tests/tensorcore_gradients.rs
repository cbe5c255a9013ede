//! Every differentiable op against central finite differences.

use camlm::tensorcore::{grad_check, normal_tensor, ParameterSet, Tape, Tensor, Var};
use camlm::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts an arbitrary tensor output to a scalar with fixed random weights,
/// so every output coordinate contributes to the checked gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = {
        let t = tape.value(out);
        (t.rows(), t.cols())
    };
    let w = tape.constant(normal_tensor(&mut rng(seed), &[r, c], 1.0));
    // sum_ij w_ij * out_ij as a sum of per-row dot products
    let mut acc = Vec::with_capacity(r);
    for i in 0..r {
        let oi = tape.slice_rows(out, i, 1)?;
        let wi = tape.slice_rows(w, i, 1)?;
        acc.push(tape.matmul_nt(oi, wi)?);
    }
    tape.sum(&acc)
}

fn check(params: &mut ParameterSet, f: impl Fn(&mut Tape, &ParameterSet) -> Result<Var>) -> f64 {
    let report = grad_check(params, H, None, f).unwrap();
    report.max_rel_error
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let mut p = ParameterSet::new();
    let a = p.insert("a", normal_tensor(&mut rng(1), &[3, 4], 1.0)).unwrap();
    let b = p.insert("b", normal_tensor(&mut rng(2), &[4, 2], 1.0)).unwrap();
    let err = check(&mut p, |t, p| {
        let (a, b) = (t.param(p, a), t.param(p, b));
        let c = t.matmul(a, b)?;
        project(t, c, 3)
    });
    assert!(err < 1e-6, "matmul rel err {err}");

    let mut p = ParameterSet::new();
    let a = p.insert("a", normal_tensor(&mut rng(4), &[3, 4], 1.0)).unwrap();
    let b = p.insert("b", normal_tensor(&mut rng(5), &[2, 4], 1.0)).unwrap();
    let err = check(&mut p, |t, p| {
        let (a, b) = (t.param(p, a), t.param(p, b));
        let c = t.matmul_nt(a, b)?;
        project(t, c, 6)
    });
    assert!(err < 1e-6, "matmul_nt rel err {err}");
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut p = ParameterSet::new();
    let x = p.insert("x", normal_tensor(&mut rng(7), &[2, 5], 1.0)).unwrap();
    let err = check(&mut p, |t, p| {
        let x = t.param(p, x);
        let y = t.softmax_rows(x)?;
        project(t, y, 8)
    });
    assert!(err < 1e-6, "softmax rel err {err}");
}

#[test]
fn masked_softmax_gradient_and_exact_zeros() {
    let allowed = [true, false, true, true, false, true, false, false, false, true];
    let mut p = ParameterSet::new();
    let x = p.insert("x", normal_tensor(&mut rng(9), &[2, 5], 1.0)).unwrap();
    let err = check(&mut p, |t, p| {
        let x = t.param(p, x);
        let y = t.masked_softmax_rows(x, Some(&allowed))?;
        project(t, y, 10)
    });
    assert!(err < 1e-6, "masked softmax rel err {err}");

    let mut t = Tape::new();
    let xv = t.input(normal_tensor(&mut rng(11), &[2, 5], 3.0));
    let y = t.masked_softmax_rows(xv, Some(&allowed)).unwrap();
    for (v, ok) in t.value(y).values().iter().zip(allowed) {
        if !ok {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut p = ParameterSet::new();
    let x = p.insert("x", normal_tensor(&mut rng(12), &[3, 6], 1.0)).unwrap();
    let g = p.insert("gamma", normal_tensor(&mut rng(13), &[6], 1.0)).unwrap();
    let b = p.insert("beta", normal_tensor(&mut rng(14), &[6], 1.0)).unwrap();
    let err = check(&mut p, |t, p| {
        let (x, g, b) = (t.param(p, x), t.param(p, g), t.param(p, b));
        let y = t.layer_norm(x, g, b, 1e-5)?;
        project(t, y, 15)
    });
    assert!(err < 1e-5, "layer_norm rel err {err}");
}

#[test]
fn gelu_and_sigmoid_gradients_match_finite_differences() {
    let mut p = ParameterSet::new();
    let x = p.insert("x", normal_tensor(&mut rng(16), &[4, 3], 1.5)).unwrap();
    let err = check(&mut p, |t, p| {
        let x = t.param(p, x);
        let y = t.gelu(x)?;
        project(t, y, 17)
    });
    assert!(err < 1e-5, "gelu rel err {err}");
    let err = check(&mut p, |t, p| {
        let x = t.param(p, x);
        let y = t.sigmoid(x)?;
        project(t, y, 18)
    });
    assert!(err < 1e-5, "sigmoid rel err {err}");
}

#[test]
fn embedding_scatter_accumulates_repeated_ids() {
    let mut p = ParameterSet::new();
    let table = p.insert("table", normal_tensor(&mut rng(19), &[5, 3], 1.0)).unwrap();
    let ids = [1, 3, 1, 0];
    let err = check(&mut p, |t, p| {
        let tb = t.param(p, table);
        let e = t.embedding(tb, &ids)?;
        project(t, e, 20)
    });
    assert!(err < 1e-6, "embedding rel err {err}");

    // An all-ones upstream gradient lands twice on row 1, once on rows 0 and 3.
    let mut t = Tape::new();
    let tb = t.param(&p, table);
    let e = t.embedding(tb, &ids).unwrap();
    let ones = t.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
    let col = t.matmul(e, ones).unwrap();
    let ones_r = t.constant(Tensor::matrix(1, 4, vec![1.0; 4]).unwrap());
    let total = t.matmul(ones_r, col).unwrap();
    let g = t.backward(total).unwrap();
    let gt = g.wrt(tb).unwrap();
    assert_eq!(&gt[3..6], &[2.0, 2.0, 2.0]);
    assert_eq!(&gt[0..3], &[1.0, 1.0, 1.0]);
    assert_eq!(&gt[6..9], &[0.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_gradient_and_mask_equivalence() {
    let mut p = ParameterSet::new();
    let logits = p.insert("logits", normal_tensor(&mut rng(21), &[5, 7], 1.0)).unwrap();
    let targets = [3, 0, 6, 2, 2];
    let mask = [false, true, false, true, false];
    let err = check(&mut p, |t, p| {
        let l = t.param(p, logits);
        t.masked_cross_entropy(l, &targets, &mask)
    });
    assert!(err < 1e-6, "cross entropy rel err {err}");

    // Masking 2 of 5 rows equals the plain loss over just those 2 rows.
    let mut t = Tape::new();
    let l = t.param(&p, logits);
    let masked = t.masked_cross_entropy(l, &targets, &mask).unwrap();
    let r1 = t.slice_rows(l, 1, 1).unwrap();
    let r3 = t.slice_rows(l, 3, 1).unwrap();
    let both = t.concat_rows(&[r1, r3]).unwrap();
    let plain = t.masked_cross_entropy(both, &[0, 2], &[true, true]).unwrap();
    assert!((t.value(masked).item() - t.value(plain).item()).abs() < 1e-14);
}

#[test]
fn layout_ops_and_scalar_mixing_gradients() {
    let mut p = ParameterSet::new();
    let a = p.insert("a", normal_tensor(&mut rng(22), &[3, 4], 1.0)).unwrap();
    let b = p.insert("b", normal_tensor(&mut rng(23), &[2, 4], 1.0)).unwrap();
    let bias = p.insert("bias", normal_tensor(&mut rng(24), &[4], 1.0)).unwrap();
    let s = p.insert("s", normal_tensor(&mut rng(25), &[1], 1.0)).unwrap();
    let err = check(&mut p, |t, p| {
        let (a, b, bias, s) = (t.param(p, a), t.param(p, b), t.param(p, bias), t.param(p, s));
        let cat = t.concat_rows(&[a, b])?;
        let left = t.slice_cols(cat, 0, 1)?;
        let right = t.slice_cols(cat, 1, 3)?;
        let swapped = t.concat_cols(&[right, left])?;
        let biased = t.add_row(swapped, bias)?;
        let g = t.sigmoid(s)?;
        let mixed = t.mul_scalar(biased, g)?;
        let one_minus = t.affine(g, -1.0, 1.0)?;
        let other = t.mul_scalar(cat, one_minus)?;
        let sum = t.add(mixed, other)?;
        let top = t.slice_rows(sum, 1, 3)?;
        let bottom = t.slice_rows(cat, 0, 3)?;
        let diff = t.sub(top, bottom)?;
        let total = t.sum(&[diff, top])?;
        project(t, total, 26)
    });
    assert!(err < 1e-6, "layout rel err {err}");
}

#[test]
fn fused_multi_head_matches_per_head_composition() {
    let allowed: Vec<bool> = (0..25).map(|i| i % 5 <= i / 5 || i % 7 == 0).collect();
    let mut p = ParameterSet::new();
    let q = p.insert("q", normal_tensor(&mut rng(30), &[5, 6], 1.0)).unwrap();
    let k = p.insert("k", normal_tensor(&mut rng(31), &[5, 6], 1.0)).unwrap();
    let v = p.insert("v", normal_tensor(&mut rng(32), &[5, 6], 1.0)).unwrap();
    for mask in [None, Some(allowed.as_slice())] {
        let err = check(&mut p, |t, p| {
            let (q, k, v) = (t.param(p, q), t.param(p, k), t.param(p, v));
            let y = t.multi_head(q, k, v, 3, mask)?;
            project(t, y, 33)
        });
        assert!(err < 1e-6, "multi_head rel err {err}");

        let mut t = Tape::new();
        let (qv, kv, vv) = (t.param(&p, q), t.param(&p, k), t.param(&p, v));
        let fused = t.multi_head(qv, kv, vv, 3, mask).unwrap();
        let mut heads = Vec::new();
        for h in 0..3 {
            let qh = t.slice_cols(qv, 2 * h, 2).unwrap();
            let kh = t.slice_cols(kv, 2 * h, 2).unwrap();
            let vh = t.slice_cols(vv, 2 * h, 2).unwrap();
            let s = t.matmul_nt(qh, kh).unwrap();
            let s = t.scale(s, 1.0 / 2f64.sqrt()).unwrap();
            let w = t.masked_softmax_rows(s, mask).unwrap();
            heads.push(t.matmul(w, vh).unwrap());
        }
        let composed = t.concat_cols(&heads).unwrap();
        assert!(t.value(fused).max_abs_diff(t.value(composed)) < 1e-14);
    }

    let mut p = ParameterSet::new();
    let q = p.insert("q", normal_tensor(&mut rng(34), &[2, 4], 1.0)).unwrap();
    let kv = p.insert("kv", normal_tensor(&mut rng(35), &[7, 4], 1.0)).unwrap();
    let err = check(&mut p, |t, p| {
        let (q, kv) = (t.param(p, q), t.param(p, kv));
        let y = t.multi_head(q, kv, kv, 2, None)?;
        project(t, y, 36)
    });
    assert!(err < 1e-6, "cross multi_head rel err {err}");
}
