use rand::Rng;

use super::{HeadConfig, PREFIX};
use crate::autograd::{Graph, Var};
use crate::nn::{bilstm, init_bilstm, init_linear, linear};
use crate::params::ParamStore;
use crate::tensor::Mat;

pub(super) fn init<R: Rng>(store: &mut ParamStore, cfg: &HeadConfig, input: usize, rng: &mut R) {
    let r = cfg.rcnn_hidden;
    init_bilstm(store, &format!("{PREFIX}/rcnn/ctx"), input, r, rng);
    init_linear(store, &format!("{PREFIX}/rcnn/proj"), 2 * r + input, cfg.rcnn_proj, rng);
    init_linear(store, &format!("{PREFIX}/out"), cfg.rcnn_proj, cfg.num_classes, rng);
}

/// Per-position `[left context; state; right context]`, n×(2r+H).
///
/// The left context of row i is the forward LSTM state after row i−1 and
/// the right context is the backward state after row i+1; both are zero at
/// the sequence ends.
pub(crate) fn contextual_rows(g: &mut Graph, x: Var) -> Var {
    let n = g.shape(x)[0];
    let (fwd, bwd) = bilstm(g, x, &format!("{PREFIX}/rcnn/ctx"));
    let r = g.shape(fwd)[1];
    let zero = g.input(Mat::zeros(1, r));
    let (left, right) = if n > 1 {
        let head = g.slice_rows(fwd, 0, n - 1);
        let tail = g.slice_rows(bwd, 1, n);
        (g.concat_rows(&[zero, head]), g.concat_rows(&[tail, zero]))
    } else {
        (zero, zero)
    };
    g.concat_cols(&[left, x, right])
}

pub(super) fn features(g: &mut Graph, x: Var) -> Var {
    let rows = contextual_rows(g, x);
    let proj = linear(g, rows, &format!("{PREFIX}/rcnn/proj"));
    let act = g.tanh(proj);
    g.max_rows(act)
}
