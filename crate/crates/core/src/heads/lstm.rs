use rand::Rng;

use super::{HeadConfig, PREFIX};
use crate::autograd::{Graph, Var};
use crate::nn::{bilstm, init_bilstm, init_linear};
use crate::params::ParamStore;

pub(super) fn init<R: Rng>(store: &mut ParamStore, cfg: &HeadConfig, input: usize, rng: &mut R) {
    let h = cfg.lstm_hidden;
    for layer in 0..cfg.lstm_layers {
        let width = if layer == 0 { input } else { 2 * h };
        init_bilstm(store, &format!("{PREFIX}/lstm{layer}"), width, h, rng);
    }
    init_linear(store, &format!("{PREFIX}/out"), 2 * h, cfg.num_classes, rng);
}

/// Stacked bidirectional LSTM, then max over time of the final [fwd; bwd] states.
pub(super) fn features(g: &mut Graph, cfg: &HeadConfig, x: Var) -> Var {
    let mut x = x;
    for layer in 0..cfg.lstm_layers {
        let (fwd, bwd) = bilstm(g, x, &format!("{PREFIX}/lstm{layer}"));
        x = g.concat_cols(&[fwd, bwd]);
    }
    g.max_rows(x)
}
