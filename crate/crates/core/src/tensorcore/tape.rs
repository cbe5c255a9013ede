//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients into their parents. Nodes
//! that cannot reach a tracked leaf are skipped.

use std::collections::HashMap;

use super::params::{ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow { x: Var, bias: Var },
    Affine { x: Var, mul: f64 },
    MulScalar { x: Var, s: Var },
    Softmax(Var),
    MultiHead { q: Var, k: Var, v: Var, heads: usize, scale: f64, probs: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameters are bound untracked; backward reaches nothing.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if value.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked leaf; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf whose gradient can be read back from [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            tracked: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a detached snapshot of `v` onto the tape as a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.constant(t)
    }

    /// Binds a parameter, reusing the node if it is already on this tape.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: params.get(id).detached(),
            op: Op::Param,
            tracked: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (br, bc) = self.rc(b);
        let (bk, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::dim(
                "matmul",
                format!("inner dimension {k}"),
                format!("{bk} (lhs {m}x{k}, rhs {br}x{bc})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        let b_strides = if b_transposed { (1, bc as isize) } else { (bc as isize, 1) };
        gemm(
            (m, k, n),
            self.value(a).values(),
            (k as isize, 1),
            self.value(b).values(),
            b_strides,
            &mut out,
            0.0,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            "matmul",
            Tensor::matrix_unchecked(m, n, out),
            Op::MatMul { a, b, b_transposed },
            tracked,
        )
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("add", out, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("sub", out, Op::Sub(a, b), tracked)
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rc(x);
        let bn = self.value(bias).numel();
        if bn != c {
            return Err(Error::dim("add_row", format!("bias of length {c}"), bn));
        }
        let b = self.value(bias).values().to_vec();
        let xv = self.value(x);
        let mut out = xv.values().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            row.iter_mut().zip(&b).for_each(|(o, bi)| *o += bi);
        }
        let out = Tensor::with_shape_unchecked(xv.shape().to_vec(), out);
        let tracked = self.tracked(x) || self.tracked(bias);
        self.push("add_row", out, Op::AddRow { x, bias }, tracked)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `mul · x + add`, elementwise.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::with_shape_unchecked(
            xv.shape().to_vec(),
            xv.values().iter().map(|v| mul * v + add).collect(),
        );
        let tracked = self.tracked(x);
        self.push("affine", out, Op::Affine { x, mul }, tracked)
    }

    /// Multiplies every entry of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar", "one-element scale", self.value(s).numel()));
        }
        let sv = self.value(s).item();
        let xv = self.value(x);
        let out = Tensor::with_shape_unchecked(
            xv.shape().to_vec(),
            xv.values().iter().map(|v| v * sv).collect(),
        );
        let tracked = self.tracked(x) || self.tracked(s);
        self.push("mul_scalar", out, Op::MulScalar { x, s }, tracked)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("sum of an empty list"))?;
        let mut acc = self.value(first).values().to_vec();
        for &x in &xs[1..] {
            self.same_shape("sum", first, x)?;
            acc.iter_mut()
                .zip(self.value(x).values())
                .for_each(|(a, b)| *a += b);
        }
        let out = Tensor::with_shape_unchecked(self.shape(first).to_vec(), acc);
        let tracked = xs.iter().any(|&x| self.tracked(x));
        self.push("sum", out, Op::Sum(xs.to_vec()), tracked)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::with_shape_unchecked(
            xv.shape().to_vec(),
            xv.values().iter().map(|&v| gelu(v)).collect(),
        );
        let tracked = self.tracked(x);
        self.push("gelu", out, Op::Gelu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::with_shape_unchecked(
            xv.shape().to_vec(),
            xv.values().iter().map(|&v| sigmoid(v)).collect(),
        );
        let tracked = self.tracked(x);
        self.push("sigmoid", out, Op::Sigmoid(x), tracked)
    }

    /// Scaled dot-product attention over `heads` equal column blocks of `q`,
    /// `k`, `v`, with the per-head outputs joined column-wise.
    ///
    /// `allowed` is an `nq×nk` mask shared by every head. Same values as
    /// slicing, attending per head and concatenating, in one node.
    pub fn multi_head(&mut self, q: Var, k: Var, v: Var, heads: usize, allowed: Option<&[bool]>) -> Result<Var> {
        let (nq, d) = self.rc(q);
        let (nk, dk) = self.rc(k);
        if dk != d || self.rc(v) != (nk, d) {
            return Err(Error::dim(
                "multi_head",
                format!("k and v of {nk}x{d}"),
                format!("{:?} and {:?}", self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("multi_head", format!("heads dividing {d}"), heads));
        }
        if let Some(a) = allowed {
            if a.len() != nq * nk {
                return Err(Error::dim("multi_head", format!("mask of {nq}x{nk}"), a.len()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).values(), self.value(k).values(), self.value(v).values());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for (h, p) in probs.chunks_mut((nq * nk).max(1)).enumerate().take(heads) {
            let col = h * dh;
            gemm_strided((nq, dh, nk), scale, &qv[col..], (d, 1), &kv[col..], (1, d), p, (nk, 1), 0.0);
            for (i, row) in p.chunks_mut(nk.max(1)).enumerate().take(nq) {
                if let Some(a) = allowed {
                    let mask_row = &a[i * nk..(i + 1) * nk];
                    if !mask_row.iter().any(|&ok| ok) {
                        return Err(Error::contract(format!("attention row {i} is fully masked")));
                    }
                    row.iter_mut()
                        .zip(mask_row)
                        .filter(|(_, &ok)| !ok)
                        .for_each(|(v, _)| *v = MASKED_LOGIT);
                }
                softmax_in_place(row);
            }
            gemm_strided((nq, nk, dh), 1.0, p, (nk, 1), &vv[col..], (d, 1), &mut out[col..], (d, 1), 0.0);
        }
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push(
            "multi_head",
            Tensor::matrix_unchecked(nq, d, out),
            Op::MultiHead { q, k, v, heads, scale, probs },
            tracked,
        )
    }

    // ---- normalization --------------------------------------------------

    /// Row-wise softmax, max-subtracted for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax where `allowed[i * cols + j] == false` forces weight
    /// exactly zero. Disallowed logits are replaced by `MASKED_LOGIT` before
    /// normalization, so their gradient is zero as well.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.rc(x);
        if let Some(a) = allowed {
            if a.len() != r * c {
                return Err(Error::dim("softmax_rows", format!("mask of {r}x{c}"), a.len()));
            }
        }
        let xv = self.value(x);
        let mut out = xv.values().to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate().take(r) {
            if let Some(a) = allowed {
                let mask_row = &a[i * c..(i + 1) * c];
                if !mask_row.iter().any(|&ok| ok) {
                    return Err(Error::contract(format!("attention row {i} is fully masked")));
                }
                row.iter_mut()
                    .zip(mask_row)
                    .filter(|(_, &ok)| !ok)
                    .for_each(|(v, _)| *v = MASKED_LOGIT);
            }
            softmax_in_place(row);
        }
        let out = Tensor::with_shape_unchecked(xv.shape().to_vec(), out);
        let tracked = self.tracked(x);
        self.push("softmax_rows", out, Op::Softmax(x), tracked)
    }

    /// Per-row normalization followed by `gamma`/`beta` affine.
    ///
    /// The row scale is `1 / sqrt(var + eps²)`: `eps` floors the standard
    /// deviation, so constant rows map to zero and rows with `std ≫ eps` come
    /// out with unit variance to within `(eps / std)²`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.rc(x);
        if d == 0 {
            return Err(Error::dim("layer_norm", "d >= 1", 0));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).numel() != d {
                return Err(Error::dim("layer_norm", format!("{name} of length {d}"), self.value(p).numel()));
            }
        }
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let xv = self.value(x);
        let mut xhat = Vec::with_capacity(r * d);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * d);
        for row in xv.values().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps * eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::with_shape_unchecked(xv.shape().to_vec(), out);
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            tracked,
        )
    }

    // ---- indexing and layout -------------------------------------------

    /// Gathers rows of a `V×d` table; out-of-range ids are an index error.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rc(table);
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
            return Err(Error::Index {
                op: "embedding_lookup",
                position,
                id,
                bound: v,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(tv.row(id));
        }
        let tracked = self.tracked(table);
        self.push(
            "embedding_lookup",
            Tensor::matrix_unchecked(ids.len(), d, out),
            Op::Embedding { table, ids: ids.to_vec() },
            tracked,
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat_rows of an empty list"))?;
        let c = self.rc(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, xc) = self.rc(x);
            if xc != c {
                return Err(Error::dim("concat_rows", format!("{c} columns"), xc));
            }
            out.extend_from_slice(self.value(x).values());
            rows += r;
        }
        let tracked = xs.iter().any(|&x| self.tracked(x));
        self.push(
            "concat_rows",
            Tensor::matrix_unchecked(rows, c, out),
            Op::ConcatRows(xs.to_vec()),
            tracked,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("rows <= {r}"), start + len));
        }
        let out = self.value(x).values()[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(x);
        self.push(
            "slice_rows",
            Tensor::matrix_unchecked(len, c, out),
            Op::SliceRows { x, start },
            tracked,
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat_cols of an empty list"))?;
        let r = self.rc(first).0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xr, xc) = self.rc(x);
            if xr != r {
                return Err(Error::dim("concat_cols", format!("{r} rows"), xr));
            }
            widths.push(xc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.value(x).values();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&xv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let tracked = xs.iter().any(|&x| self.tracked(x));
        self.push(
            "concat_cols",
            Tensor::matrix_unchecked(r, total, out),
            Op::ConcatCols(xs.to_vec()),
            tracked,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("cols <= {c}"), start + len));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(x);
        self.push(
            "slice_cols",
            Tensor::matrix_unchecked(r, len, out),
            Op::SliceCols { x, start },
            tracked,
        )
    }

    // ---- losses ---------------------------------------------------------

    /// Mean token cross-entropy over rows with `mask[t] == true`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.rc(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(
                "masked_cross_entropy",
                format!("{t} targets and mask entries"),
                format!("{} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("masked_cross_entropy needs at least one masked-in position"));
        }
        if let Some((position, &id)) = targets
            .iter()
            .enumerate()
            .find(|&(i, &id)| mask[i] && id >= v)
        {
            return Err(Error::Index {
                op: "masked_cross_entropy",
                position,
                id,
                bound: v,
            });
        }
        let lv = self.value(logits).values();
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for i in (0..t).filter(|&i| mask[i]) {
            let row = &lv[i * v..(i + 1) * v];
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            let lse = log_sum_exp(row);
            total += lse - row[targets[i]];
            p.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let tracked = self.tracked(logits);
        self.push(
            "masked_cross_entropy",
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            tracked,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", "scalar loss", format!("{:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.tracked(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, b_transposed } => {
                    let (m, k) = self.rc(*a);
                    let (br, bc) = self.rc(*b);
                    let n = if *b_transposed { br } else { bc };
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        // dA = dC · Bᵀ (or dC · B when B was used transposed)
                        let b_strides = if *b_transposed { (bc as isize, 1) } else { (1, bc as isize) };
                        gemm((m, n, k), &g, (n as isize, 1), self.value(*b).values(), b_strides, ga, 1.0);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        let av = self.value(*a).values();
                        if *b_transposed {
                            // dB (n×k) = dCᵀ · A
                            gemm((n, m, k), &g, (1, n as isize), av, (k as isize, 1), gb, 1.0);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            gemm((k, m, n), av, (1, k as isize), &g, (n as isize, 1), gb, 1.0);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        axpy(ga, &g, 1.0);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        axpy(gb, &g, 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        axpy(ga, &g, 1.0);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        axpy(gb, &g, -1.0);
                    }
                }
                Op::AddRow { x, bias } => {
                    let c = self.rc(*x).1;
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        axpy(gx, &g, 1.0);
                    }
                    if let Some(gb) = self.slot(&mut grads, *bias) {
                        for row in g.chunks(c.max(1)) {
                            axpy(gb, row, 1.0);
                        }
                    }
                }
                Op::Affine { x, mul } => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        axpy(gx, &g, *mul);
                    }
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(*s).item();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        axpy(gx, &g, sv);
                    }
                    let xv = self.value(*x).values();
                    if let Some(gs) = self.slot(&mut grads, *s) {
                        gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        if let Some(gx) = self.slot(&mut grads, x) {
                            axpy(gx, &g, 1.0);
                        }
                    }
                }
                Op::Softmax(x) => {
                    let c = self.rc(*x).1;
                    let y = node.value.values();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((gr, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                gxr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::MultiHead { q, k, v, heads, scale, probs } => {
                    let (nq, d) = self.rc(*q);
                    let nk = self.rc(*k).0;
                    let dh = d / heads;
                    let block = nq * nk;
                    let (qv, kv, vv) = (self.value(*q).values(), self.value(*k).values(), self.value(*v).values());
                    if let Some(gv) = self.slot(&mut grads, *v) {
                        for h in 0..*heads {
                            let col = h * dh;
                            let p = &probs[h * block..(h + 1) * block];
                            // dV_h += P_hᵀ · dO_h
                            gemm_strided((nk, nq, dh), 1.0, p, (1, nk), &g[col..], (d, 1), &mut gv[col..], (d, 1), 1.0);
                        }
                    }
                    if !(self.tracked(*q) || self.tracked(*k)) {
                        continue;
                    }
                    let mut ds = vec![0.0; heads * block];
                    for h in 0..*heads {
                        let col = h * dh;
                        let p = &probs[h * block..(h + 1) * block];
                        let dsh = &mut ds[h * block..(h + 1) * block];
                        // dP_h = dO_h · V_hᵀ, then the softmax Jacobian
                        gemm_strided((nq, dh, nk), 1.0, &g[col..], (d, 1), &vv[col..], (1, d), dsh, (nk, 1), 0.0);
                        for (dr, pr) in dsh.chunks_mut(nk.max(1)).zip(p.chunks(nk.max(1))) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &y) in dr.iter_mut().zip(pr) {
                                *x = y * (*x - dot) * scale;
                            }
                        }
                    }
                    if let Some(gq) = self.slot(&mut grads, *q) {
                        for h in 0..*heads {
                            let col = h * dh;
                            let dsh = &ds[h * block..(h + 1) * block];
                            gemm_strided((nq, nk, dh), 1.0, dsh, (nk, 1), &kv[col..], (d, 1), &mut gq[col..], (d, 1), 1.0);
                        }
                    }
                    if let Some(gk) = self.slot(&mut grads, *k) {
                        for h in 0..*heads {
                            let col = h * dh;
                            let dsh = &ds[h * block..(h + 1) * block];
                            gemm_strided((nk, nq, dh), 1.0, dsh, (1, nk), &qv[col..], (d, 1), &mut gk[col..], (d, 1), 1.0);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let d = self.rc(*x).1;
                    let gv = self.value(*gamma).values();
                    if let Some(gg) = self.slot(&mut grads, *gamma) {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gbeta) = self.slot(&mut grads, *beta) {
                        for gr in g.chunks(d) {
                            axpy(gbeta, gr, 1.0);
                        }
                    }
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        let inv_d = 1.0 / d as f64;
                        for (((gr, hr), gxr), &is) in g
                            .chunks(d)
                            .zip(xhat.chunks(d))
                            .zip(gx.chunks_mut(d))
                            .zip(inv_std)
                        {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh *= inv_d;
                            mean_dh_h *= inv_d;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                gxr[j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).values();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((o, gi), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                            *o += gi * gelu_grad(xi);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.values();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((o, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                            *o += gi * yi * (1.0 - yi);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = self.rc(*table).1;
                    if let Some(gt) = self.slot(&mut grads, *table) {
                        for (k, &id) in ids.iter().enumerate() {
                            axpy(&mut gt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d], 1.0);
                        }
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = self.value(x).numel();
                        if let Some(gx) = self.slot(&mut grads, x) {
                            axpy(gx, &g[offset..offset + n], 1.0);
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = self.rc(*x).1;
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        axpy(&mut gx[start * c..start * c + g.len()], &g, 1.0);
                    }
                }
                Op::ConcatCols(xs) => {
                    let (r, total) = (node.value.rows(), node.value.cols());
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.rc(x).1;
                        if let Some(gx) = self.slot(&mut grads, x) {
                            for i in 0..r {
                                axpy(
                                    &mut gx[i * w..(i + 1) * w],
                                    &g[i * total + offset..i * total + offset + w],
                                    1.0,
                                );
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.rc(*x);
                    let w = node.value.cols();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for i in 0..r {
                            axpy(&mut gx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w], 1.0);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, mask, probs } => {
                    let v = self.rc(*logits).1;
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let scale = g[0] / count;
                    if let Some(gl) = self.slot(&mut grads, *logits) {
                        for i in (0..mask.len()).filter(|&i| mask[i]) {
                            let row = &mut gl[i * v..(i + 1) * v];
                            axpy(row, &probs[i * v..(i + 1) * v], scale);
                            row[targets[i]] -= scale;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Adds `scale ×` each bound parameter's gradient into `params`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, params: &mut ParameterSet, scale: f64) {
        for (&id, &var) in &self.bound {
            if let Some(g) = grads.wrt(var) {
                axpy(params.get_mut(id).grad_mut(), g, scale);
            }
        }
    }

    /// Gradient of each bound parameter, ordered by parameter id.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &var)| grads.wrt(var).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Backward from `loss` and accumulate parameter gradients (scale 1).
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, params, 1.0);
        Ok(())
    }
}

/// Logit assigned to disallowed attention entries before softmax.
pub const MASKED_LOGIT: f64 = -1e30;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation, evaluated as `x·σ(2u)` since
/// `(1 + tanh u)/2 = σ(2u)`.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    x * sigmoid(2.0 * u)
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let s = sigmoid(2.0 * u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::with_shape_unchecked(
        a.shape().to_vec(),
        a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

/// `c = a · b + beta · c` with explicit strides; `c` is row-major `m×n`.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the strides address exactly the m×k, k×n and m×n extents of the
    // slices, whose lengths are checked above; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = alpha · a · b + beta · c` over strided views; every stride is
/// non-negative and each view must fit inside its slice.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs + 1;
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm_strided: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm_strided: a out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm_strided: b out of bounds");
    // SAFETY: the asserts above bound every addressed element of a, b and c
    // by the slice lengths; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
