//! Flat `section.key = value` configuration.
//!
//! Each section decodes into one library config struct. Values are typed by
//! the field they land in, so `train.learning_rate = 1e-3` becomes a float and
//! `run.mode = lid_only` stays a string. All component seeds are derived from
//! `run.seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lid_core::encoder::EncoderConfig;
use lid_core::heads::HeadConfig;
use lid_core::model::RunMode;
use lid_core::ngram::{SvmConfig, Weighting};
use lid_core::ppg::EmbeddingMode;
use lid_core::seeds::derive_seed;
use lid_core::synth::SynthConfig;
use lid_core::training::TrainConfig;
use lid_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

const SEED_STREAM_SYNTH: u64 = 1;
const SEED_STREAM_ENCODER: u64 = 2;
const SEED_STREAM_HEAD: u64 = 3;
const SEED_STREAM_TRAIN: u64 = 4;
const SEED_STREAM_BASELINE: u64 = 5;

/// Keys that are derived rather than set.
const DERIVED: &[&str] = &[
    "synth.seed",
    "train.seed",
    "encoder.seed",
    "head.seed",
    "encoder.ppg_dim",
    "encoder.phone_vocab_size",
    "encoder.embedding",
    "head.num_classes",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = k.trim().to_string();
            if cfg.entries.contains_key(&key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            cfg.entries.insert(key, unquote(v.trim()).to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets or replaces one key, as a command-line override does.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.trim().to_string(), unquote(value.trim()).to_string());
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn section(&self, name: &str) -> impl Iterator<Item = (&str, &str)> {
        let prefix = format!("{name}.");
        self.entries
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(&prefix).map(|f| (f, v.as_str())))
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

/// Overlays the `section.*` entries on `defaults`, typing each value after
/// the default it replaces.
fn decode_section<T: Serialize + DeserializeOwned>(raw: &RawConfig, section: &str, defaults: &T) -> Result<T> {
    let mut obj: Map<String, Value> = match serde_json::to_value(defaults)? {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    };
    for (field, text) in raw.section(section) {
        let key = format!("{section}.{field}");
        if DERIVED.contains(&key.as_str()) {
            return Err(Error::Config(format!("`{key}` is derived and cannot be set")));
        }
        let slot = obj
            .get_mut(field)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        *slot = typed(&key, text, slot)?;
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Config(format!("section `{section}`: {e}")))
}

fn typed(key: &str, text: &str, like: &Value) -> Result<Value> {
    let bad = || Error::Config(format!("`{key}`: cannot read `{text}` as {}", kind_name(like)));
    Ok(match like {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => match text.parse::<u64>() {
            Ok(v) => Value::from(v),
            // Let the struct's own check reject a float in an integer field.
            Err(_) => Value::from(text.parse::<f64>().map_err(|_| bad())?),
        },
        Value::Number(_) => {
            let v: f64 = text.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
        }
        _ => Value::String(text.to_string()),
    })
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        _ => "text",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub n_max: usize,
    pub weighting: Weighting,
    pub svm: SvmConfig,
}

/// Fully decoded configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub mode: RunMode,
    pub embedding: EmbeddingMode,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Size fields only; inventory-dependent fields are filled per dataset.
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub baseline: BaselineConfig,
    pub min_run: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

const SECTIONS: &[&str] = &["run", "paths", "synth", "train", "encoder", "head", "baseline", "decode"];
const RUN_KEYS: &[&str] = &["run.seed", "run.mode", "run.embedding"];
const PATH_KEYS: &[&str] = &["paths.data", "paths.out"];
const BASELINE_KEYS: &[&str] = &["baseline.n_max", "baseline.weighting", "baseline.lambda", "baseline.epochs"];
const DECODE_KEYS: &[&str] = &["decode.min_run"];

fn parsed<T: std::str::FromStr>(raw: &RawConfig, key: &str, default: T) -> Result<T> {
    match raw.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot read `{v}`"))),
    }
}

impl Config {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        for key in raw.entries.keys() {
            let section = key.split('.').next().unwrap_or("");
            if !SECTIONS.contains(&section) || !key.contains('.') {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
            let fixed: &[&str] = match section {
                "run" => RUN_KEYS,
                "paths" => PATH_KEYS,
                "baseline" => BASELINE_KEYS,
                "decode" => DECODE_KEYS,
                _ => continue,
            };
            if !fixed.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let seed: u64 = parsed(raw, "run.seed", 0)?;
        let mode: RunMode = raw.get("run.mode").unwrap_or("bert_lid").parse()?;
        let embedding: EmbeddingMode = raw.get("run.embedding").unwrap_or("avppg").parse()?;

        let mut synth: SynthConfig = decode_section(raw, "synth", &SynthConfig::default())?;
        synth.seed = derive_seed(seed, SEED_STREAM_SYNTH, 0);
        synth.validate()?;
        let mut train: TrainConfig = decode_section(raw, "train", &TrainConfig::default())?;
        train.seed = derive_seed(seed, SEED_STREAM_TRAIN, 0);
        train.validate()?;
        let mut encoder: EncoderConfig = decode_section(raw, "encoder", &EncoderConfig::default())?;
        encoder.seed = derive_seed(seed, SEED_STREAM_ENCODER, 0);
        encoder.embedding = embedding;
        let mut head: HeadConfig = decode_section(raw, "head", &HeadConfig::default())?;
        head.seed = derive_seed(seed, SEED_STREAM_HEAD, 0);

        let svm_default = SvmConfig::default();
        let baseline = BaselineConfig {
            n_max: parsed(raw, "baseline.n_max", 3)?,
            weighting: raw.get("baseline.weighting").unwrap_or("l2").parse()?,
            svm: SvmConfig {
                lambda: parsed(raw, "baseline.lambda", svm_default.lambda)?,
                epochs: parsed(raw, "baseline.epochs", svm_default.epochs)?,
                seed: derive_seed(seed, SEED_STREAM_BASELINE, 0),
            },
        };
        if baseline.n_max == 0 {
            return Err(Error::Config("`baseline.n_max` must be at least 1".into()));
        }
        let min_run: usize = parsed(raw, "decode.min_run", 1)?;
        if min_run == 0 {
            return Err(Error::Config("`decode.min_run` must be at least 1".into()));
        }
        Ok(Self {
            seed,
            mode,
            embedding,
            synth,
            train,
            encoder,
            head,
            baseline,
            min_run,
            data_dir: PathBuf::from(raw.get("paths.data").unwrap_or("data")),
            out_dir: PathBuf::from(raw.get("paths.out").unwrap_or("out")),
        })
    }

    /// Encoder and head configs for an inventory of `phones` phones and
    /// `classes` languages.
    pub fn model_parts(&self, phones: usize, classes: usize) -> (EncoderConfig, HeadConfig) {
        let encoder = EncoderConfig {
            hidden_dim: self.encoder.hidden_dim,
            num_layers: self.encoder.num_layers,
            num_heads: self.encoder.num_heads,
            ffn_dim: self.encoder.ffn_dim,
            max_sequence_length: self.encoder.max_sequence_length,
            dropout_rate: self.encoder.dropout_rate,
            seed: self.encoder.seed,
            ..EncoderConfig::for_inventory(phones, self.embedding)
        };
        let head = HeadConfig {
            num_classes: classes,
            ..self.head.clone()
        };
        (encoder, head)
    }
}
