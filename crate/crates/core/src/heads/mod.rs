//! Deep classifier heads over a hidden-state sequence, the softmax/cross-entropy
//! output, and the encoder-free path over raw posterior frames.
//!
//! Every head consumes an L×H state matrix plus a prefix mask and pools over
//! the unmasked rows only; padded rows never reach a pooling operator.

mod cnn;
mod dpcnn;
mod lstm;
mod rcnn;

pub use dpcnn::weight_layer_count as dpcnn_weight_layer_count;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear};
use crate::params::ParamStore;
use crate::ppg::{TokenContent, TokenizedInput};
use crate::tensor::Mat;

pub const PREFIX: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cnn,
    Lstm,
    Dpcnn,
    Rcnn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Cnn, HeadKind::Lstm, HeadKind::Dpcnn, HeadKind::Rcnn];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Cnn => "cnn",
            HeadKind::Lstm => "lstm",
            HeadKind::Dpcnn => "dpcnn",
            HeadKind::Rcnn => "rcnn",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(HeadKind::Cnn),
            "lstm" => Ok(HeadKind::Lstm),
            "dpcnn" => Ok(HeadKind::Dpcnn),
            "rcnn" => Ok(HeadKind::Rcnn),
            other => Err(Error::Config(format!(
                "unknown head kind `{other}` (expected cnn, lstm, dpcnn or rcnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub num_classes: usize,
    pub cnn_filters: usize,
    pub cnn_kernel_width: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dpcnn_channels: usize,
    pub dpcnn_region_width: usize,
    /// Number of downsampling blocks after the first convolution pair.
    pub dpcnn_blocks: usize,
    pub rcnn_hidden: usize,
    /// Width of the tanh projection applied to each [left; state; right] row.
    pub rcnn_proj: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Rcnn,
            num_classes: 2,
            cnn_filters: 200,
            cnn_kernel_width: 3,
            lstm_hidden: 300,
            lstm_layers: 2,
            dpcnn_channels: 250,
            dpcnn_region_width: 3,
            dpcnn_blocks: 6,
            rcnn_hidden: 300,
            rcnn_proj: 300,
            seed: 1,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "head.num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let sizes = [
            ("head.cnn_filters", self.cnn_filters),
            ("head.cnn_kernel_width", self.cnn_kernel_width),
            ("head.lstm_hidden", self.lstm_hidden),
            ("head.lstm_layers", self.lstm_layers),
            ("head.dpcnn_channels", self.dpcnn_channels),
            ("head.dpcnn_region_width", self.dpcnn_region_width),
            ("head.rcnn_hidden", self.rcnn_hidden),
            ("head.rcnn_proj", self.rcnn_proj),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Ok(())
    }
}

/// Head parameters for inputs of width `input_dim`, deterministic in `cfg.seed`.
pub fn init_head(cfg: &HeadConfig, input_dim: usize) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    match cfg.kind {
        HeadKind::Cnn => cnn::init(&mut store, cfg, input_dim, &mut rng),
        HeadKind::Lstm => lstm::init(&mut store, cfg, input_dim, &mut rng),
        HeadKind::Dpcnn => dpcnn::init(&mut store, cfg, input_dim, &mut rng),
        HeadKind::Rcnn => rcnn::init(&mut store, cfg, input_dim, &mut rng),
    }
    Ok(store)
}

/// Number of leading `true` entries, rejecting masks that are not a prefix.
pub(crate) fn valid_prefix(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|m| **m).count();
    if mask[n..].iter().any(|m| *m) {
        return Err(Error::Input("mask must mark a prefix of real rows".into()));
    }
    if n == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    Ok(n)
}

/// Pooled feature vector (1×F) before the output layer.
pub fn pooled_features(g: &mut Graph, cfg: &HeadConfig, states: Var, mask: &[bool]) -> Result<Var> {
    assert_eq!(g.shape(states)[0], mask.len(), "mask length");
    let n = valid_prefix(mask)?;
    let x = g.slice_rows(states, 0, n);
    match cfg.kind {
        HeadKind::Cnn => cnn::features(g, cfg, x),
        HeadKind::Lstm => Ok(lstm::features(g, cfg, x)),
        HeadKind::Dpcnn => dpcnn::features(g, cfg, x),
        HeadKind::Rcnn => Ok(rcnn::features(g, x)),
    }
}

/// Logits (1×C) of the configured head.
pub fn head_forward(g: &mut Graph, cfg: &HeadConfig, states: Var, mask: &[bool]) -> Result<Var> {
    let feats = pooled_features(g, cfg, states, mask)?;
    Ok(linear(g, feats, &format!("{PREFIX}/out")))
}

pub fn cnn_forward(g: &mut Graph, cfg: &HeadConfig, states: Var, mask: &[bool]) -> Result<Var> {
    head_forward(g, &HeadConfig { kind: HeadKind::Cnn, ..cfg.clone() }, states, mask)
}

pub fn lstm_forward(g: &mut Graph, cfg: &HeadConfig, states: Var, mask: &[bool]) -> Result<Var> {
    head_forward(g, &HeadConfig { kind: HeadKind::Lstm, ..cfg.clone() }, states, mask)
}

pub fn dpcnn_forward(g: &mut Graph, cfg: &HeadConfig, states: Var, mask: &[bool]) -> Result<Var> {
    head_forward(g, &HeadConfig { kind: HeadKind::Dpcnn, ..cfg.clone() }, states, mask)
}

pub fn rcnn_forward(g: &mut Graph, cfg: &HeadConfig, states: Var, mask: &[bool]) -> Result<Var> {
    head_forward(g, &HeadConfig { kind: HeadKind::Rcnn, ..cfg.clone() }, states, mask)
}

/// Projection P→H used when the encoder is bypassed.
pub fn init_lid_projection(store: &mut ParamStore, ppg_dim: usize, hidden: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1d);
    init_linear(store, &format!("{PREFIX}/lid_proj"), ppg_dim, hidden, &mut rng);
}

/// Feeds posterior vectors straight into the head through a learned projection.
pub fn lid_only_forward(g: &mut Graph, cfg: &HeadConfig, tokens: &TokenizedInput) -> Result<Var> {
    tokens.validate()?;
    let (dim, data) = match &tokens.content {
        TokenContent::Vectors { dim, data } => (*dim, data),
        TokenContent::Ids(_) => {
            return Err(Error::Input("the encoder-free path needs vector tokens".into()))
        }
    };
    let n = tokens.num_real();
    if n == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    let x = g.input(Mat::from_vec(n, dim, data[..n * dim].to_vec()));
    let proj = linear(g, x, &format!("{PREFIX}/lid_proj"));
    head_forward(g, cfg, proj, &vec![true; n])
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn loss_and_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let probs = softmax(logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = (lse - logits[label]).max(0.0);
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}
