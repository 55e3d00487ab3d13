//! BERT-style transformer encoder over phone-level or frame-level tokens.
//!
//! Each input row is the sum of a content embedding (an affine projection of
//! a posterior vector, or a lookup of a phone id), a position embedding and a
//! segment embedding, followed by layer norm. A learned CLS vector is
//! prepended and a SEP vector follows the last real token. The stack is the
//! post-layer-norm transformer with GELU feed-forward blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, layer_norm, linear, Ctx};
use crate::params::{load_archive, save_archive, truncated_normal, ParamStore, INIT_STD};
use crate::ppg::tokens::{CLS_ID, NUM_SPECIAL_IDS, SEP_ID};
use crate::ppg::{EmbeddingMode, TokenContent, TokenizedInput};
use crate::tensor::Mat;

pub const PREFIX: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_sequence_length: usize,
    pub dropout_rate: f64,
    /// Size of the id vocabulary, specials included (id mode).
    pub phone_vocab_size: usize,
    /// Width of posterior vectors (vector modes).
    pub ppg_dim: usize,
    pub embedding: EmbeddingMode,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 1024,
            max_sequence_length: 256,
            dropout_rate: 0.1,
            phone_vocab_size: 0,
            ppg_dim: 0,
            embedding: EmbeddingMode::AvPpg,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Default sizes for an inventory of `phones` phones.
    pub fn for_inventory(phones: usize, embedding: EmbeddingMode) -> Self {
        Self {
            phone_vocab_size: phones + NUM_SPECIAL_IDS,
            ppg_dim: phones,
            embedding,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("encoder sizes must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "encoder.hidden_dim {} is not divisible by encoder.num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_sequence_length < 3 {
            return fail("encoder.max_sequence_length must be at least 3".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("encoder.dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.embedding.is_vector() && self.ppg_dim == 0 {
            return fail("encoder.ppg_dim must be positive for vector embeddings".into());
        }
        if !self.embedding.is_vector() && self.phone_vocab_size <= NUM_SPECIAL_IDS {
            return fail("encoder.phone_vocab_size must exceed the special ids".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

fn layer_prefix(l: usize) -> String {
    format!("{PREFIX}/layer{l}")
}

/// Random initialization, deterministic in `cfg.seed`.
pub fn init_encoder(cfg: &EncoderConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden_dim;
    let mut s = ParamStore::new();
    if cfg.embedding.is_vector() {
        init_linear(&mut s, &format!("{PREFIX}/input_proj"), cfg.ppg_dim, h, &mut rng);
        s.insert(format!("{PREFIX}/cls"), truncated_normal(1, h, INIT_STD, &mut rng));
        s.insert(format!("{PREFIX}/sep"), truncated_normal(1, h, INIT_STD, &mut rng));
    } else {
        s.insert(
            format!("{PREFIX}/token_emb"),
            truncated_normal(cfg.phone_vocab_size, h, INIT_STD, &mut rng),
        );
    }
    s.insert(
        format!("{PREFIX}/pos_emb"),
        truncated_normal(cfg.max_sequence_length, h, INIT_STD, &mut rng),
    );
    s.insert(format!("{PREFIX}/seg_emb"), truncated_normal(2, h, INIT_STD, &mut rng));
    init_layer_norm(&mut s, &format!("{PREFIX}/emb_ln"), h);
    for l in 0..cfg.num_layers {
        let p = layer_prefix(l);
        for proj in ["q", "k", "v", "o"] {
            init_linear(&mut s, &format!("{p}/attn/{proj}"), h, h, &mut rng);
        }
        init_layer_norm(&mut s, &format!("{p}/attn_ln"), h);
        init_linear(&mut s, &format!("{p}/ffn/w1"), h, cfg.ffn_dim, &mut rng);
        init_linear(&mut s, &format!("{p}/ffn/w2"), cfg.ffn_dim, h, &mut rng);
        init_layer_norm(&mut s, &format!("{p}/ffn_ln"), h);
    }
    Ok(s)
}

/// Content rows with the specials in place, before position/segment
/// embeddings and normalization. Returns the L×H content and the row mask.
pub fn token_content(g: &mut Graph, input: &TokenizedInput, cfg: &EncoderConfig) -> Result<(Var, Vec<bool>)> {
    input.validate()?;
    if input.mode.is_vector() != cfg.embedding.is_vector() {
        return Err(Error::Input(format!(
            "input mode {} does not match encoder embedding {}",
            input.mode, cfg.embedding
        )));
    }
    let l = input.len();
    let n = input.num_real();
    if l > cfg.max_sequence_length || n + 2 > l {
        return Err(Error::Input(format!(
            "sequence of {n} tokens does not fit {l} slots with CLS/SEP (max length {})",
            cfg.max_sequence_length
        )));
    }
    let content = match &input.content {
        TokenContent::Vectors { dim, data } => {
            if *dim != cfg.ppg_dim {
                return Err(Error::Input(format!(
                    "token vectors have width {dim}, encoder expects {}",
                    cfg.ppg_dim
                )));
            }
            let x = g.input(Mat::from_vec(l, *dim, data.clone()));
            let proj = linear(g, x, &format!("{PREFIX}/input_proj"));
            let cls = g.param(&format!("{PREFIX}/cls"));
            let sep = g.param(&format!("{PREFIX}/sep"));
            let mut parts = vec![cls];
            if n > 0 {
                parts.push(g.slice_rows(proj, 0, n));
            }
            parts.push(sep);
            if l > n + 2 {
                parts.push(g.slice_rows(proj, n, l - 2));
            }
            g.concat_rows(&parts)
        }
        TokenContent::Ids(ids) => {
            if let Some(bad) = ids.iter().find(|&&id| id >= cfg.phone_vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} outside vocabulary of {}",
                    cfg.phone_vocab_size
                )));
            }
            let mut seq = Vec::with_capacity(l);
            seq.push(CLS_ID);
            seq.extend_from_slice(&ids[..n]);
            seq.push(SEP_ID);
            seq.extend_from_slice(&ids[n..l - 2]);
            let table = g.param(&format!("{PREFIX}/token_emb"));
            g.gather(table, &seq)
        }
    };
    let mut mask = vec![false; l];
    mask[..n + 2].iter_mut().for_each(|m| *m = true);
    Ok((content, mask))
}

/// Triplet embedding: content + position + segment, then layer norm and dropout.
pub fn embed(
    g: &mut Graph,
    input: &TokenizedInput,
    cfg: &EncoderConfig,
    ctx: &mut Ctx,
) -> Result<(Var, Vec<bool>)> {
    let (content, mask) = token_content(g, input, cfg)?;
    let l = mask.len();
    let pos_table = g.param(&format!("{PREFIX}/pos_emb"));
    let pos = g.gather(pos_table, &input.positions);
    let seg_table = g.param(&format!("{PREFIX}/seg_emb"));
    let seg = g.gather(seg_table, &input.segments[..l]);
    let sum = g.add(content, pos);
    let sum = g.add(sum, seg);
    let normed = layer_norm(g, sum, &format!("{PREFIX}/emb_ln"));
    Ok((ctx.dropout(g, normed, cfg.dropout_rate), mask))
}

/// Runs the transformer stack. Also returns, per layer and head, the
/// attention probability matrices.
pub fn encode_traced(
    g: &mut Graph,
    x: Var,
    mask: &[bool],
    cfg: &EncoderConfig,
    ctx: &mut Ctx,
) -> (Var, Vec<Vec<Var>>) {
    let [l, h] = g.shape(x);
    assert_eq!(l, mask.len(), "mask length");
    assert_eq!(h, cfg.hidden_dim, "hidden width");
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut x = x;
    let mut trace = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let p = layer_prefix(layer);
        let q = linear(g, x, &format!("{p}/attn/q"));
        let k = linear(g, x, &format!("{p}/attn/k"));
        let v = linear(g, x, &format!("{p}/attn/v"));
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let (c0, c1) = (head * d, (head + 1) * d);
            let qh = g.slice_cols(q, c0, c1);
            let kh = g.slice_cols(k, c0, c1);
            let vh = g.slice_cols(v, c0, c1);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let pr = g.softmax_rows(scores, Some(mask));
            probs.push(pr);
            heads.push(g.matmul(pr, vh));
        }
        let ctx_all = g.concat_cols(&heads);
        let attn = linear(g, ctx_all, &format!("{p}/attn/o"));
        let attn = ctx.dropout(g, attn, cfg.dropout_rate);
        let res = g.add(x, attn);
        let x1 = layer_norm(g, res, &format!("{p}/attn_ln"));
        let ff = linear(g, x1, &format!("{p}/ffn/w1"));
        let ff = g.gelu(ff);
        let ff = linear(g, ff, &format!("{p}/ffn/w2"));
        let ff = ctx.dropout(g, ff, cfg.dropout_rate);
        let res = g.add(x1, ff);
        x = layer_norm(g, res, &format!("{p}/ffn_ln"));
        trace.push(probs);
    }
    (x, trace)
}

pub fn encode(g: &mut Graph, x: Var, mask: &[bool], cfg: &EncoderConfig, ctx: &mut Ctx) -> Var {
    encode_traced(g, x, mask, cfg, ctx).0
}

/// Hidden state at the CLS position.
pub fn pool_cls(g: &mut Graph, states: Var) -> Var {
    g.slice_rows(states, 0, 1)
}

/// Serializes the `encoder/` tensors of `params`.
pub fn save_params(params: &ParamStore) -> Result<Vec<u8>> {
    let encoder_only = params.iter().filter(|(n, _)| n.starts_with(PREFIX));
    save_archive(encoder_only, None)
}

/// Loads encoder tensors, validating names and shapes against `cfg`.
pub fn load_params(bytes: &[u8], cfg: &EncoderConfig) -> Result<ParamStore> {
    let mut template = init_encoder(cfg)?;
    let (tensors, _) = load_archive(bytes)?;
    template.assign_checked(&tensors)?;
    Ok(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppg::{build_tokens, PosteriorGram};

    fn tiny(embedding: EmbeddingMode) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_sequence_length: 8,
            dropout_rate: 0.0,
            phone_vocab_size: 3 + NUM_SPECIAL_IDS,
            ppg_dim: 3,
            embedding,
            seed: 11,
        }
    }

    fn ppg(frames: usize) -> PosteriorGram {
        let rows: Vec<Vec<f64>> = (0..frames)
            .map(|t| {
                let a = 0.1 + 0.1 * (t % 5) as f64;
                vec![a, 0.5 - a / 2.0, 0.5 - a / 2.0]
            })
            .collect();
        PosteriorGram::from_rows(&rows, 10.0).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = tiny(EmbeddingMode::PpgFrm);
        let a = init_encoder(&cfg).unwrap();
        let b = init_encoder(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("encoder/layer0/attn/q/w").unwrap().shape(), [8, 8]);
        assert_eq!(a.get("encoder/input_proj/w").unwrap().shape(), [3, 8]);
        assert_eq!(a.get("encoder/emb_ln/gain").unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let cfg = EncoderConfig {
            hidden_dim: 7,
            ..tiny(EmbeddingMode::PpgFrm)
        };
        assert!(matches!(init_encoder(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn specials_surround_real_tokens() {
        let cfg = tiny(EmbeddingMode::PpgFrm);
        let store = init_encoder(&cfg).unwrap();
        let input = build_tokens(&ppg(1), None, EmbeddingMode::PpgFrm, None, 5).unwrap();
        let mut g = Graph::new(&store);
        let (content, mask) = token_content(&mut g, &input, &cfg).unwrap();
        assert_eq!(mask, vec![true, true, true, false, false]);
        let c = g.value(content).clone();
        assert_eq!(c.row(0), store.get("encoder/cls").unwrap().data());
        assert_eq!(c.row(2), store.get("encoder/sep").unwrap().data());
        let w = store.get("encoder/input_proj/w").unwrap();
        let expected = Mat::from_vec(1, 3, ppg(1).row(0).to_vec()).matmul(w);
        assert!(Mat::from_vec(1, 8, c.row(1).to_vec()).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn zero_vector_with_zero_bias_contributes_nothing() {
        let cfg = tiny(EmbeddingMode::AvPpg);
        let store = init_encoder(&cfg).unwrap();
        let mut input = build_tokens(&ppg(2), None, EmbeddingMode::PpgFrm, None, 6).unwrap();
        input.mode = EmbeddingMode::AvPpg;
        if let TokenContent::Vectors { data, .. } = &mut input.content {
            data[..3].iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let (content, _) = token_content(&mut g, &input, &cfg).unwrap();
        assert!(g.value(content).row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn id_mode_places_specials_from_the_table() {
        let cfg = tiny(EmbeddingMode::PhoneEmb);
        let store = init_encoder(&cfg).unwrap();
        let input = TokenizedInput {
            mode: EmbeddingMode::PhoneEmb,
            content: TokenContent::Ids(vec![4, 0, 0, 0]),
            positions: vec![0, 1, 2, 3],
            segments: vec![0; 4],
            mask: vec![true, false, false, false],
        };
        let mut g = Graph::new(&store);
        let (content, mask) = token_content(&mut g, &input, &cfg).unwrap();
        let table = store.get("encoder/token_emb").unwrap();
        let c = g.value(content);
        assert_eq!(c.row(0), table.row(CLS_ID));
        assert_eq!(c.row(1), table.row(4));
        assert_eq!(c.row(2), table.row(SEP_ID));
        assert_eq!(mask, vec![true, true, true, false]);
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let cfg = tiny(EmbeddingMode::PhoneEmb);
        let store = init_encoder(&cfg).unwrap();
        let input = build_tokens(&ppg(2), None, EmbeddingMode::PpgFrm, None, 6).unwrap();
        let mut g = Graph::new(&store);
        assert!(embed(&mut g, &input, &cfg, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn residual_identity_with_zeroed_sublayers() {
        let cfg = tiny(EmbeddingMode::PpgFrm);
        let mut store = init_encoder(&cfg).unwrap();
        for name in [
            "encoder/layer0/attn/v/w",
            "encoder/layer0/attn/v/b",
            "encoder/layer0/attn/o/w",
            "encoder/layer0/attn/o/b",
            "encoder/layer0/ffn/w1/w",
            "encoder/layer0/ffn/w2/w",
            "encoder/layer0/ffn/w2/b",
        ] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let input = build_tokens(&ppg(3), None, EmbeddingMode::PpgFrm, None, 5).unwrap();
        let mut g = Graph::new(&store);
        let mut ctx = Ctx::eval();
        let (x, mask) = embed(&mut g, &input, &cfg, &mut ctx).unwrap();
        let y = encode(&mut g, x, &mask, &cfg, &mut ctx);
        // embedded rows are already normalized, so the residual path is the
        // identity up to the layer-norm epsilon
        let diff = g.value(y).max_abs_diff(g.value(x));
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn save_load_round_trip_and_shape_errors() {
        let cfg = tiny(EmbeddingMode::PpgFrm);
        let store = init_encoder(&cfg).unwrap();
        let bytes = save_params(&store).unwrap();
        assert_eq!(load_params(&bytes, &cfg).unwrap(), store);
        let wider = EncoderConfig {
            hidden_dim: 12,
            ..cfg.clone()
        };
        match load_params(&bytes, &wider).unwrap_err() {
            Error::ShapeMismatch { name, .. } => assert!(name.starts_with("encoder/")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_params(&bytes[..bytes.len() / 2], &cfg), Err(Error::Archive(_))));
    }
}
