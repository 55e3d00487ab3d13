//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are borrowed from a [`ParamStore`] and each one appears on the tape at most
//! once, so gradients from repeated uses accumulate on a single leaf.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::params::ParamStore;
use crate::tensor::{gemm, Mat};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Unfold {
        x: Var,
        width: usize,
        pad_left: usize,
    },
    MaxRows(Var, Vec<usize>),
    PoolHalve(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    DotConst(Var, Mat),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
}

/// Gradients indexed by parameter id of the store they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Mat> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient sets differ in size");
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|g| g.scale_assign(s));
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Mat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    params: HashMap<usize, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// The named parameter as a leaf; panics if the store lacks it.
    pub fn param(&mut self, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the store"));
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.get_by_id(id)),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a 1×C row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), rv.cols(), "add_row width mismatch");
        let rv = rv.data().to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape mismatch");
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::MulConst(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.rows(), "row slice out of range");
        let out = Mat::from_vec(
            end - start,
            av.cols(),
            av.data()[start * av.cols()..end * av.cols()].to_vec(),
        );
        self.push(out, Op::SliceRows(a, start))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "column slice out of range");
        let mut out = Mat::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "gather id {id} out of range");
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Row-wise softmax with optional key mask; masked columns get exactly
    /// zero probability (equivalent to an additive −∞ logit).
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let av = self.value(a);
        if let Some(m) = key_mask {
            assert_eq!(m.len(), av.cols(), "key mask width");
            assert!(m.iter().any(|k| *k), "every key is masked");
        }
        let keep = |c: usize| key_mask.is_none_or(|m| m[c]);
        let mut out = Mat::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let max = (0..row.len())
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..row.len() {
                if keep(c) {
                    o[c] = (row[c] - max).exp();
                    sum += o[c];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let (rows, cols) = (xv.rows(), xv.cols());
        assert_eq!(gv.shape(), [1, cols], "layer norm gain shape");
        assert_eq!(bv.shape(), [1, cols], "layer norm bias shape");
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Sliding windows of `width` rows flattened into single rows, with
    /// `pad_left`/`pad_right` zero rows added around the input. Composed with
    /// a matmul this is a 1-D convolution over time.
    pub fn unfold(&mut self, x: Var, width: usize, pad_left: usize, pad_right: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let padded = n + pad_left + pad_right;
        assert!(width >= 1 && padded >= width, "unfold window larger than input");
        let out_len = padded - width + 1;
        let mut out = Mat::zeros(out_len, width * c);
        for i in 0..out_len {
            let o = out.row_mut(i);
            for j in 0..width {
                let src = i + j;
                if src >= pad_left && src - pad_left < n {
                    o[j * c..(j + 1) * c].copy_from_slice(xv.row(src - pad_left));
                }
            }
        }
        self.push(
            out,
            Op::Unfold {
                x,
                width,
                pad_left,
            },
        )
    }

    /// Column-wise maximum over all rows (ties to the earliest row).
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.rows() > 0, "max over zero rows");
        let mut arg = vec![0usize; xv.cols()];
        let mut out = Mat::from_vec(1, xv.cols(), xv.row(0).to_vec());
        for r in 1..xv.rows() {
            for (c, v) in xv.row(r).iter().enumerate() {
                if *v > out[(0, c)] {
                    out[(0, c)] = *v;
                    arg[c] = r;
                }
            }
        }
        self.push(out, Op::MaxRows(x, arg))
    }

    /// Max-pool over time with window 3 and stride 2; output has ⌊n/2⌋ rows.
    pub fn pool_halve(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let out_len = n / 2;
        assert!(out_len >= 1, "sequence of length {n} cannot be halved");
        let mut out = Mat::zeros(out_len, c);
        let mut arg = vec![0usize; out_len * c];
        for i in 0..out_len {
            let lo = 2 * i;
            let hi = (lo + 3).min(n);
            for col in 0..c {
                let mut best = lo;
                for r in lo + 1..hi {
                    if xv[(r, col)] > xv[(best, col)] {
                        best = r;
                    }
                }
                out[(i, col)] = xv[(best, col)];
                arg[i * c + col] = best;
            }
        }
        self.push(out, Op::PoolHalve(x, arg))
    }

    /// Softmax cross-entropy of a 1×C logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), 1, "cross entropy expects a single logit row");
        let probs = softmax(lv.data());
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[label];
        self.push(
            Mat::from_vec(1, 1, vec![loss.max(0.0)]),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        )
    }

    /// `Σ a ⊙ c` as a 1×1 value.
    pub fn dot_const(&mut self, a: Var, c: Mat) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "dot_const shape mismatch");
        let s = av.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::DotConst(a, c))
    }

    /// Back-propagates from `root`, seeding its gradient with `seed` in every
    /// entry, and returns the gradients of all parameters reached.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let rs = self.nodes[root.0].value.shape();
        grads[root.0] = Some(Mat::filled(rs[0], rs[1], seed));
        let mut result = Gradients::empty(self.store.len());

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => result.grads[*id] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, true, &mut ga, 0.0);
                    let mut gb = Mat::zeros(bv.rows(), bv.cols());
                    gemm(av, true, &g, false, &mut gb, 0.0);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |g, y| g * y);
                    let gb = zip_map(&g, self.value(*a), |g, x| g * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::MulConst(a, c) => acc(&mut grads, *a, zip_map(&g, c, |g, c| g * c)),
                Op::Tanh(a) => acc(&mut grads, *a, zip_map(&g, out, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_map(&g, out, |g, y| g * y * (1.0 - y))),
                Op::Gelu(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, self.value(*a), |g, x| g * gelu_grad(x)),
                ),
                Op::Relu(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    let c = av.cols();
                    ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let [pr, pc] = self.shape(*p);
                        let gp = Mat::from_vec(pr, pc, g.data()[r0 * pc..(r0 + pr) * pc].to_vec());
                        acc(&mut grads, *p, gp);
                        r0 += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let [pr, pc] = self.shape(*p);
                        let mut gp = Mat::zeros(pr, pc);
                        for r in 0..pr {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pc]);
                        }
                        acc(&mut grads, *p, gp);
                        c0 += pc;
                    }
                }
                Op::Gather(table, ids) => {
                    let [tr, tc] = self.shape(*table);
                    let mut gt = Mat::zeros(tr, tc);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SoftmaxRows(a) => {
                    let mut ga = Mat::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), g) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = (xhat.rows(), xhat.cols());
                    let mut ggain = Mat::zeros(1, cols);
                    let mut gbias = Mat::zeros(1, cols);
                    let mut gx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            ggain.data_mut()[c] += gr[c] * hr[c];
                            gbias.data_mut()[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data()[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(hr).map(|(d, h)| d * h).sum();
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] / n * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
                        }
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::Unfold { x, width, pad_left } => {
                    let [n, c] = self.shape(*x);
                    let mut gx = Mat::zeros(n, c);
                    for i in 0..g.rows() {
                        let gr = g.row(i);
                        for j in 0..*width {
                            let src = i + j;
                            if src >= *pad_left && src - pad_left < n {
                                for (d, s) in gx.row_mut(src - pad_left).iter_mut().zip(&gr[j * c..(j + 1) * c]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MaxRows(x, arg) => {
                    let [n, c] = self.shape(*x);
                    let mut gx = Mat::zeros(n, c);
                    for (col, &r) in arg.iter().enumerate() {
                        gx[(r, col)] += g[(0, col)];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::PoolHalve(x, arg) => {
                    let [n, c] = self.shape(*x);
                    let mut gx = Mat::zeros(n, c);
                    for (k, &r) in arg.iter().enumerate() {
                        gx[(r, k % c)] += g.data()[k];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let s = g.data()[0];
                    let mut gl = Mat::from_vec(1, probs.len(), probs.iter().map(|p| p * s).collect());
                    gl.data_mut()[*label] -= s;
                    acc(&mut grads, *logits, gl);
                }
                Op::DotConst(a, c) => {
                    let s = g.data()[0];
                    acc(&mut grads, *a, c.map(|v| v * s));
                }
            }
        }
        result
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
