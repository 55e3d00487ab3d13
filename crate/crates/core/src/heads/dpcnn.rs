//! Deep pyramid CNN: a region-embedding convolution, one equal-width
//! convolution pair with a skip connection, then blocks of
//! [stride-2 pool → conv → conv] with skip connections. Convolutions are
//! pre-activated (ReLU before each conv) and keep the sequence length.
//! Once the sequence is a single row the pooling step is skipped, so short
//! inputs still pass through every block.

use rand::Rng;

use super::{HeadConfig, PREFIX};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{conv1d, init_linear};
use crate::params::ParamStore;

const CONV_WIDTH: usize = 3;

/// Convolutional weight layers of the feature extractor: the region
/// embedding, the unpooled pair, and two per downsampling block.
pub fn weight_layer_count(cfg: &HeadConfig) -> usize {
    1 + 2 + 2 * cfg.dpcnn_blocks
}

fn pair_prefix(i: usize) -> String {
    format!("{PREFIX}/dpcnn/pair{i}")
}

pub(super) fn init<R: Rng>(store: &mut ParamStore, cfg: &HeadConfig, input: usize, rng: &mut R) {
    let ch = cfg.dpcnn_channels;
    init_linear(
        store,
        &format!("{PREFIX}/dpcnn/region"),
        cfg.dpcnn_region_width * input,
        ch,
        rng,
    );
    for i in 0..=cfg.dpcnn_blocks {
        let p = pair_prefix(i);
        init_linear(store, &format!("{p}/conv1"), CONV_WIDTH * ch, ch, rng);
        init_linear(store, &format!("{p}/conv2"), CONV_WIDTH * ch, ch, rng);
    }
    init_linear(store, &format!("{PREFIX}/out"), ch, cfg.num_classes, rng);
}

fn same_conv(g: &mut Graph, x: Var, prefix: &str, width: usize) -> Var {
    let left = (width - 1) / 2;
    conv1d(g, x, prefix, width, left, width - 1 - left)
}

/// `x + conv2(relu(conv1(relu(x))))`.
pub(super) fn conv_pair(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let a = g.relu(x);
    let a = same_conv(g, a, &format!("{prefix}/conv1"), CONV_WIDTH);
    let a = g.relu(a);
    let a = same_conv(g, a, &format!("{prefix}/conv2"), CONV_WIDTH);
    g.add(x, a)
}

/// Pooled features plus the sequence length after each downsampling block.
pub(super) fn features_traced(g: &mut Graph, cfg: &HeadConfig, x: Var) -> Result<(Var, Vec<usize>)> {
    if g.shape(x)[0] == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    let region = same_conv(g, x, &format!("{PREFIX}/dpcnn/region"), cfg.dpcnn_region_width);
    let mut y = conv_pair(g, region, &pair_prefix(0));
    let mut lengths = Vec::with_capacity(cfg.dpcnn_blocks);
    for b in 1..=cfg.dpcnn_blocks {
        let pooled = if g.shape(y)[0] >= 2 { g.pool_halve(y) } else { y };
        lengths.push(g.shape(pooled)[0]);
        y = conv_pair(g, pooled, &pair_prefix(b));
    }
    Ok((g.max_rows(y), lengths))
}

pub(super) fn features(g: &mut Graph, cfg: &HeadConfig, x: Var) -> Result<Var> {
    features_traced(g, cfg, x).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{init_head, HeadKind};
    use crate::tensor::Mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(blocks: usize) -> HeadConfig {
        HeadConfig {
            kind: HeadKind::Dpcnn,
            dpcnn_channels: 4,
            dpcnn_blocks: blocks,
            ..HeadConfig::default()
        }
    }

    fn random_input(n: usize, h: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(n, h, (0..n * h).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn default_network_has_fifteen_weight_layers() {
        let c = HeadConfig {
            kind: HeadKind::Dpcnn,
            ..HeadConfig::default()
        };
        assert_eq!(weight_layer_count(&c), 15);
        let store = init_head(&c, 8).unwrap();
        let convs = store
            .iter()
            .filter(|(n, _)| n.starts_with("head/dpcnn/") && n.ends_with("/w"))
            .count();
        assert_eq!(convs, 15);
    }

    #[test]
    fn each_block_halves_the_length() {
        let c = cfg(6);
        let store = init_head(&c, 3).unwrap();
        for n in [1, 2, 3, 15, 64, 65, 100, 127, 130] {
            let mut g = Graph::new(&store);
            let x = g.input(random_input(n, 3, n as u64));
            let (_, lengths) = features_traced(&mut g, &c, x).unwrap();
            assert_eq!(lengths.len(), 6);
            let mut expect = n;
            for l in lengths {
                expect = (expect / 2).max(1);
                assert_eq!(l, expect);
            }
        }
    }

    #[test]
    fn zeroed_block_is_its_pooled_input() {
        let c = cfg(1);
        let mut store = init_head(&c, 3).unwrap();
        for name in ["conv1/w", "conv1/b", "conv2/w", "conv2/b"] {
            let full = format!("{}/{name}", pair_prefix(1));
            store.get_mut(&full).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.input(random_input(9, 4, 5));
        let pooled = g.pool_halve(x);
        let out = conv_pair(&mut g, pooled, &pair_prefix(1));
        assert_eq!(g.value(out), g.value(pooled));
    }
}
