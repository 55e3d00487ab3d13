use rand::Rng;

use super::{HeadConfig, PREFIX};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{conv1d, init_linear};
use crate::params::ParamStore;

pub(super) fn init<R: Rng>(store: &mut ParamStore, cfg: &HeadConfig, input: usize, rng: &mut R) {
    init_linear(
        store,
        &format!("{PREFIX}/conv"),
        cfg.cnn_kernel_width * input,
        cfg.cnn_filters,
        rng,
    );
    init_linear(store, &format!("{PREFIX}/out"), cfg.cnn_filters, cfg.num_classes, rng);
}

/// Valid convolution, ReLU, max over time.
pub(super) fn features(g: &mut Graph, cfg: &HeadConfig, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    if n < cfg.cnn_kernel_width {
        return Err(Error::Input(format!(
            "sequence of {n} rows is shorter than the kernel width {}",
            cfg.cnn_kernel_width
        )));
    }
    let conv = conv1d(g, x, &format!("{PREFIX}/conv"), cfg.cnn_kernel_width, 0, 0);
    let act = g.relu(conv);
    Ok(g.max_rows(act))
}
