//! Layer helpers shared by the encoder and the classifier heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{orthogonal, truncated_normal, ParamStore, INIT_STD};
use crate::tensor::Mat;

/// Forward-pass context: training flag and the dropout RNG.
pub struct Ctx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let [r, c] = g.shape(x);
        let keep = 1.0 - rate;
        let mask = (0..r * c)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul_const(x, Mat::from_vec(r, c, mask))
    }
}

pub(crate) fn linear(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = g.param(&format!("{prefix}/w"));
    let b = g.param(&format!("{prefix}/b"));
    g.affine(x, w, b)
}

pub(crate) fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let gain = g.param(&format!("{prefix}/gain"));
    let beta = g.param(&format!("{prefix}/beta"));
    g.layer_norm(x, gain, beta)
}

/// 1-D convolution over the rows of `x` (time), `width` taps, zero padding
/// `pad_left`/`pad_right`. Weights are stored as a (width·in)×out matrix.
pub(crate) fn conv1d(g: &mut Graph, x: Var, prefix: &str, width: usize, pad_left: usize, pad_right: usize) -> Var {
    let cols = g.unfold(x, width, pad_left, pad_right);
    linear(g, cols, prefix)
}

pub(crate) fn init_linear<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut R) {
    store.insert(format!("{prefix}/w"), truncated_normal(input, output, INIT_STD, rng));
    store.insert(format!("{prefix}/b"), Mat::zeros(1, output));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}/gain"), Mat::filled(1, dim, 1.0));
    store.insert(format!("{prefix}/beta"), Mat::zeros(1, dim));
}

/// LSTM parameters: input weights in×4h, orthogonal recurrent weights h×4h
/// (one orthogonal block per gate), bias 1×4h with forget-gate bias 1.
/// Gate order is input, forget, cell, output.
pub(crate) fn init_lstm<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    store.insert(format!("{prefix}/wx"), truncated_normal(input, 4 * hidden, INIT_STD, rng));
    let mut wh = Mat::zeros(hidden, 4 * hidden);
    for gate in 0..4 {
        let q = orthogonal(hidden, rng);
        for r in 0..hidden {
            wh.row_mut(r)[gate * hidden..(gate + 1) * hidden].copy_from_slice(q.row(r));
        }
    }
    store.insert(format!("{prefix}/wh"), wh);
    let mut b = Mat::zeros(1, 4 * hidden);
    b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    store.insert(format!("{prefix}/b"), b);
}

/// Runs one LSTM direction over the rows of `x`; returns the n×h hidden states
/// in input order.
pub(crate) fn lstm(g: &mut Graph, x: Var, prefix: &str, reverse: bool) -> Var {
    let n = g.shape(x)[0];
    let wx = g.param(&format!("{prefix}/wx"));
    let wh = g.param(&format!("{prefix}/wh"));
    let b = g.param(&format!("{prefix}/b"));
    let hidden = g.shape(wh)[0];
    let xw = g.matmul(x, wx);
    let pre_all = g.add_row(xw, b);
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut states = vec![None; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let mut pre = g.slice_rows(pre_all, t, t + 1);
        if let Some(hp) = h {
            let rec = g.matmul(hp, wh);
            pre = g.add(pre, rec);
        }
        let i_pre = g.slice_cols(pre, 0, hidden);
        let f_pre = g.slice_cols(pre, hidden, 2 * hidden);
        let c_pre = g.slice_cols(pre, 2 * hidden, 3 * hidden);
        let o_pre = g.slice_cols(pre, 3 * hidden, 4 * hidden);
        let i = g.sigmoid(i_pre);
        let o = g.sigmoid(o_pre);
        let cand = g.tanh(c_pre);
        let ic = g.mul(i, cand);
        let cell = match c {
            Some(cp) => {
                let f = g.sigmoid(f_pre);
                let fc = g.mul(f, cp);
                g.add(fc, ic)
            }
            None => ic,
        };
        let ct = g.tanh(cell);
        let ht = g.mul(o, ct);
        states[t] = Some(ht);
        h = Some(ht);
        c = Some(cell);
    }
    let rows: Vec<Var> = states.into_iter().map(|s| s.expect("every step visited")).collect();
    g.concat_rows(&rows)
}

/// Bidirectional LSTM: [forward ; backward] hidden states, n×2h.
pub(crate) fn bilstm(g: &mut Graph, x: Var, prefix: &str) -> (Var, Var) {
    let fwd = lstm(g, x, &format!("{prefix}/fwd"), false);
    let bwd = lstm(g, x, &format!("{prefix}/bwd"), true);
    (fwd, bwd)
}

pub(crate) fn init_bilstm<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    init_lstm(store, &format!("{prefix}/fwd"), input, hidden, rng);
    init_lstm(store, &format!("{prefix}/bwd"), input, hidden, rng);
}
