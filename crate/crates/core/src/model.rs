//! End-to-end classifier: encoder and head wired for one of three run modes,
//! with prediction and a self-describing archive format.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Graph, Var};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{self, HeadConfig};
use crate::nn::{init_linear, linear, Ctx};
use crate::params::{load_archive, save_archive, ParamStore};
use crate::ppg::tokens::default_phone_vocab;
use crate::ppg::{build_tokens, PhoneSegment, PosteriorGram, TokenContent, TokenizedInput};
use crate::tensor::{argmax, Mat};

/// Which parts of the network run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Encoder states feed a deep classifier head.
    BertLid,
    /// Posterior vectors feed the head through a projection; no encoder.
    LidOnly,
    /// A linear layer on the encoder's CLS state.
    BertOnly,
}

impl RunMode {
    pub const ALL: [RunMode; 3] = [RunMode::BertLid, RunMode::LidOnly, RunMode::BertOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::BertLid => "bert_lid",
            RunMode::LidOnly => "lid_only",
            RunMode::BertOnly => "bert_only",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bert_lid" => Ok(RunMode::BertLid),
            "lid_only" => Ok(RunMode::LidOnly),
            "bert_only" => Ok(RunMode::BertOnly),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected bert_lid, lid_only or bert_only)"
            ))),
        }
    }
}

const CLS_OUT: &str = "head/cls_out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: RunMode,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Phone symbols of the inventory the model was built for.
    #[serde(default)]
    pub phones: Vec<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.mode == RunMode::LidOnly && !self.encoder.embedding.is_vector() {
            return Err(Error::Config(
                "lid_only mode feeds posterior vectors to the head; use ppg_frm or avppg".into(),
            ));
        }
        if !self.phones.is_empty() && self.phones.len() != self.encoder.ppg_dim {
            return Err(Error::Config(format!(
                "inventory of {} phones does not match encoder.ppg_dim {}",
                self.phones.len(),
                self.encoder.ppg_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Archive metadata stored next to the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta {
    model: ModelConfig,
    #[serde(default)]
    optimizer_step: Option<u64>,
}

/// Adam moments saved with a model so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedOptimizer {
    pub step: u64,
    /// `(name, first moment, second moment)` for every parameter.
    pub moments: Vec<(String, Mat, Mat)>,
}

const OPT_M: &str = "opt/m/";
const OPT_V: &str = "opt/v/";

impl LidModel {
    /// Freshly initialized parameters, deterministic in the config seeds.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.encoder.hidden_dim;
        let mut params = ParamStore::new();
        match config.mode {
            RunMode::BertLid => {
                params.extend_from(&encoder::init_encoder(&config.encoder)?);
                params.extend_from(&heads::init_head(&config.head, h)?);
            }
            RunMode::LidOnly => {
                params.extend_from(&heads::init_head(&config.head, h)?);
                heads::init_lid_projection(&mut params, config.encoder.ppg_dim, h, config.head.seed);
            }
            RunMode::BertOnly => {
                params.extend_from(&encoder::init_encoder(&config.encoder)?);
                let mut rng = ChaCha8Rng::seed_from_u64(config.head.seed);
                init_linear(&mut params, CLS_OUT, h, config.head.num_classes, &mut rng);
            }
        }
        Ok(Self { config, params })
    }

    pub fn num_classes(&self) -> usize {
        self.config.head.num_classes
    }

    /// Token input for one utterance in the model's embedding mode.
    pub fn tokenize(&self, ppg: &PosteriorGram, segs: Option<&[PhoneSegment]>) -> Result<TokenizedInput> {
        let enc = &self.config.encoder;
        if ppg.phones() != enc.ppg_dim {
            return Err(Error::Input(format!(
                "posteriorgram has {} phones, model expects {}",
                ppg.phones(),
                enc.ppg_dim
            )));
        }
        let vocab = default_phone_vocab(enc.ppg_dim);
        build_tokens(ppg, segs, enc.embedding, Some(&vocab), enc.max_sequence_length)
    }

    /// Logits (1×C) for one input.
    pub fn logits(&self, g: &mut Graph, tokens: &TokenizedInput, ctx: &mut Ctx) -> Result<Var> {
        if tokens.mode != self.config.encoder.embedding {
            return Err(Error::Input(format!(
                "input built for {} but the model uses {}",
                tokens.mode, self.config.encoder.embedding
            )));
        }
        let cfg = &self.config;
        match cfg.mode {
            RunMode::LidOnly => heads::lid_only_forward(g, &cfg.head, tokens),
            RunMode::BertLid | RunMode::BertOnly => {
                // Padding cannot influence real rows, so it is dropped up front.
                let trimmed = trim_padding(tokens)?;
                let (x, mask) = encoder::embed(g, &trimmed, &cfg.encoder, ctx)?;
                let states = encoder::encode(g, x, &mask, &cfg.encoder, ctx);
                if cfg.mode == RunMode::BertOnly {
                    let cls = encoder::pool_cls(g, states);
                    Ok(linear(g, cls, CLS_OUT))
                } else {
                    heads::head_forward(g, &cfg.head, states, &mask)
                }
            }
        }
    }

    /// Cross-entropy loss node and the logits node.
    pub fn loss(&self, g: &mut Graph, tokens: &TokenizedInput, label: usize, ctx: &mut Ctx) -> Result<(Var, Var)> {
        if label >= self.num_classes() {
            return Err(Error::Input(format!(
                "label {label} outside {} classes",
                self.num_classes()
            )));
        }
        let logits = self.logits(g, tokens, ctx)?;
        Ok((g.cross_entropy(logits, label), logits))
    }

    /// Most probable class (ties to the lowest index) and class probabilities.
    pub fn predict(&self, tokens: &TokenizedInput) -> Result<(usize, Vec<f64>)> {
        let mut g = Graph::new(&self.params);
        let logits = self.logits(&mut g, tokens, &mut Ctx::eval())?;
        let probs = softmax(g.value(logits).data());
        Ok((argmax(&probs), probs))
    }

    /// Predictions in input order.
    pub fn predict_batch(&self, inputs: &[TokenizedInput]) -> Result<Vec<(usize, Vec<f64>)>> {
        inputs.par_iter().map(|t| self.predict(t)).collect()
    }

    /// Archive with parameters, config metadata and optional optimizer state.
    pub fn to_bytes(&self, optimizer: Option<&SavedOptimizer>) -> Result<Vec<u8>> {
        let meta = BundleMeta {
            model: self.config.clone(),
            optimizer_step: optimizer.map(|o| o.step),
        };
        let meta = serde_json::to_string(&meta)?;
        let mut names: Vec<(String, &Mat)> = self.params.iter().map(|(n, m)| (n.to_string(), m)).collect();
        if let Some(opt) = optimizer {
            for (n, m, v) in &opt.moments {
                names.push((format!("{OPT_M}{n}"), m));
                names.push((format!("{OPT_V}{n}"), v));
            }
        }
        save_archive(names.iter().map(|(n, m)| (n.as_str(), *m)), Some(&meta))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<SavedOptimizer>)> {
        let (tensors, meta) = load_archive(bytes)?;
        let meta = meta.ok_or_else(|| Error::Archive("archive has no model metadata".into()))?;
        let meta: BundleMeta = serde_json::from_str(&meta)
            .map_err(|e| Error::Archive(format!("bad model metadata: {e}")))?;
        let mut model = Self::new(meta.model)?;
        let (opt, weights): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with("opt/"));
        model.params.assign_checked(&weights)?;
        let optimizer = match meta.optimizer_step {
            None => None,
            Some(step) => {
                let find = |name: &str| {
                    opt.iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, m)| m.clone())
                        .ok_or_else(|| Error::MissingTensor(name.to_string()))
                };
                let mut moments = Vec::with_capacity(model.params.len());
                for (name, value) in model.params.iter() {
                    let m = find(&format!("{OPT_M}{name}"))?;
                    let v = find(&format!("{OPT_V}{name}"))?;
                    for (which, t) in [("m", &m), ("v", &v)] {
                        if t.shape() != value.shape() {
                            return Err(Error::ShapeMismatch {
                                name: format!("opt/{which}/{name}"),
                                expected: value.shape().to_vec(),
                                found: t.shape().to_vec(),
                            });
                        }
                    }
                    moments.push((name.to_string(), m, v));
                }
                Some(SavedOptimizer { step, moments })
            }
        };
        Ok((model, optimizer))
    }
}

/// Copy of `tokens` cut down to the real tokens plus the two special slots.
pub fn trim_padding(tokens: &TokenizedInput) -> Result<TokenizedInput> {
    tokens.validate()?;
    let keep = (tokens.num_real() + 2).min(tokens.len());
    if keep == tokens.len() {
        return Ok(tokens.clone());
    }
    let content = match &tokens.content {
        TokenContent::Vectors { dim, data } => TokenContent::Vectors {
            dim: *dim,
            data: data[..keep * dim].to_vec(),
        },
        TokenContent::Ids(ids) => TokenContent::Ids(ids[..keep].to_vec()),
    };
    Ok(TokenizedInput {
        mode: tokens.mode,
        content,
        positions: tokens.positions[..keep].to_vec(),
        segments: tokens.segments[..keep].to_vec(),
        mask: tokens.mask[..keep].to_vec(),
    })
}
