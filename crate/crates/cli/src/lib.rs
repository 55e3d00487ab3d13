//! Command implementations behind the `lid` binary.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use lid_core::eval::{make_report, MetricsReport};
use lid_core::model::{LidModel, ModelConfig, RunMode};
use lid_core::ngram::{featurize, predict_margin, train_margin_classifier, NGramModel, NGramVocab};
use lid_core::ppg::{
    greedy_decode, parse_alignment, parse_inventory, parse_manifest, parse_ppg_file, PhoneInventory, PhoneSegment,
    PosteriorGram,
};
use lid_core::synth::build_dataset;
use lid_core::training::{fit, AdamState, Example};
use lid_core::Error;

use config::{Config, RawConfig};

pub const MODEL_FILE: &str = "model.safetensors";
pub const HISTORY_FILE: &str = "history.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const BASELINE_REPORT_FILE: &str = "baseline_report.json";
pub const BASELINE_MODEL_FILE: &str = "ngram.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.category(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lid", version, about = "Phonotactic spoken language identification from posteriorgrams")]
pub struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `run.seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (the dataset directory for `synth`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    BertLid,
    LidOnly,
    BertOnly,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::BertLid => RunMode::BertLid,
            ModeArg::LidOnly => RunMode::LidOnly,
            ModeArg::BertOnly => RunMode::BertOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Dev => "dev",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train a model on the train split, early-stopping on dev.
    Train {
        /// Overrides `run.mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Continue from a saved archive and its optimizer state.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Derive phone segments by greedy decoding where alignments are missing.
        #[arg(long)]
        decode: bool,
    },
    /// Score a trained model and write a metrics report.
    Eval {
        /// Defaults to the model archive in the output directory.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Greedy-decode segments for fragments without an alignment.
        #[arg(long)]
        decode: bool,
    },
    /// Classify one posteriorgram and print a JSON line.
    Predict {
        /// Trained model archive.
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Posteriorgram file.
        #[arg(long, value_name = "PATH")]
        ppg: PathBuf,
        /// Phone alignment for the same frames.
        #[arg(long, value_name = "PATH")]
        align: Option<PathBuf>,
        /// Greedy-decode segments when no alignment is given.
        #[arg(long)]
        decode: bool,
        /// Identifier echoed in the output; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Train and score the n-gram margin-classifier baseline.
    Baseline {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    Ok(fs::write(path, bytes).map_err(|e| Error::io(path, e))?)
}

fn create_dir(path: &Path) -> Result<()> {
    Ok(fs::create_dir_all(path).map_err(|e| Error::io(path, e))?)
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut raw = match &cli.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    for kv in &cli.set {
        raw.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        raw.set("run.seed", &seed.to_string());
    }
    Ok(Config::from_raw(&raw)?)
}

/// One manifest entry with its posteriorgram and, when known, its segments.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub label: usize,
    pub ppg: PosteriorGram,
    pub segments: Option<Vec<PhoneSegment>>,
}

fn load_split(data: &Path, split: &str, inv: &PhoneInventory, decode: Option<usize>) -> Result<Vec<Utterance>> {
    let manifest = data.join(format!("{split}.tsv"));
    let records = parse_manifest(&read(&manifest)?, data)?;
    if records.is_empty() {
        return Err(Error::Input(format!("{} lists no utterances", manifest.display())).into());
    }
    records
        .into_iter()
        .map(|r| {
            let ppg = parse_ppg_file(&read(&r.ppg_path)?)?;
            if ppg.phones() != inv.len() {
                return Err(Error::Input(format!(
                    "{}: {} phone columns, inventory has {}",
                    r.id,
                    ppg.phones(),
                    inv.len()
                ))
                .into());
            }
            let segments = match (&r.align_path, decode) {
                (Some(a), _) => Some(parse_alignment(&read(a)?, inv, ppg.frames())?),
                (None, Some(min_run)) => Some(greedy_decode(&ppg, min_run)),
                (None, None) => None,
            };
            Ok(Utterance {
                id: r.id,
                label: r.label,
                ppg,
                segments,
            })
        })
        .collect()
}

fn load_inventory(data: &Path) -> Result<PhoneInventory> {
    Ok(parse_inventory(&read(&data.join("inventory.txt"))?)?)
}

fn tokenize_all(model: &LidModel, utts: &[Utterance]) -> Result<Vec<Example>> {
    let needs = model.config.encoder.embedding.needs_segments();
    utts.iter()
        .map(|u| {
            if needs && u.segments.is_none() {
                return Err(Error::Input(format!(
                    "{} has no alignment and {} tokens need phone segments; pass --decode",
                    u.id, model.config.encoder.embedding
                ))
                .into());
            }
            if u.label >= model.num_classes() {
                return Err(Error::Input(format!(
                    "{} has label {} but the model has {} classes",
                    u.id,
                    u.label,
                    model.num_classes()
                ))
                .into());
            }
            Ok(Example {
                tokens: model.tokenize(&u.ppg, u.segments.as_deref())?,
                label: u.label,
            })
        })
        .collect()
}

fn check_inventory(model: &LidModel, inv: &PhoneInventory) -> Result<()> {
    if model.config.phones != inv.symbols() {
        return Err(Error::Config(format!(
            "model was trained on a {}-phone inventory that differs from the dataset's {}-phone inventory",
            model.config.phones.len(),
            inv.len()
        ))
        .into());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(LidModel, Option<lid_core::model::SavedOptimizer>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(LidModel::from_bytes(&bytes)?)
}

fn out_dir(cli: &Cli, cfg: &Config) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

/// Runs one parsed command, writing human output to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth => cmd_synth(cli, stdout),
        Command::Train { mode, resume, decode } => cmd_train(cli, *mode, resume.as_deref(), *decode, stdout),
        Command::Eval { model, split, decode } => cmd_eval(cli, model.as_deref(), *split, *decode, stdout),
        Command::Predict {
            model,
            ppg,
            align,
            decode,
            id,
        } => cmd_predict(cli, model, ppg, align.as_deref(), *decode, id.as_deref(), stdout),
        Command::Baseline { split } => cmd_baseline(cli, *split, stdout),
    }
}

fn say(stdout: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn cmd_synth(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = cli.out.clone().unwrap_or(cfg.data_dir.clone());
    let paths = build_dataset(&cfg.synth, &dir)?;
    for m in &paths.manifests {
        say(stdout, format!("wrote {}", m.display()))?;
    }
    Ok(())
}

fn cmd_train(cli: &Cli, mode: Option<ModeArg>, resume: Option<&Path>, decode: bool, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    let inv = load_inventory(&cfg.data_dir)?;
    let decode = decode.then_some(cfg.min_run);
    let train_utts = load_split(&cfg.data_dir, "train", &inv, decode)?;
    let dev_utts = load_split(&cfg.data_dir, "dev", &inv, decode)?;

    let (mut model, state) = match resume {
        Some(path) => {
            let (model, saved) = load_model(path)?;
            if mode.is_some() && model.config.mode != cfg.mode {
                return Err(Error::Config(format!(
                    "archive holds a {} model, --mode asked for {}",
                    model.config.mode, cfg.mode
                ))
                .into());
            }
            check_inventory(&model, &inv)?;
            let saved = saved
                .ok_or_else(|| Error::Archive(format!("{} carries no optimizer state", path.display())))?;
            let state = AdamState::from_saved(&saved, &model.params)?;
            (model, Some(state))
        }
        None => {
            let classes = train_utts.iter().map(|u| u.label).max().unwrap_or(0) + 1;
            let (encoder, head) = cfg.model_parts(inv.len(), classes.max(2));
            let model = LidModel::new(ModelConfig {
                mode: cfg.mode,
                encoder,
                head,
                phones: inv.symbols().to_vec(),
            })?;
            (model, None)
        }
    };
    let train = tokenize_all(&model, &train_utts)?;
    let dev = tokenize_all(&model, &dev_utts)?;
    let report = fit(&mut model, &train, &dev, &cfg.train, state)?;

    let out = out_dir(cli, &cfg);
    create_dir(&out)?;
    let saved = report.state.to_saved(&model.params);
    write(&out.join(MODEL_FILE), model.to_bytes(Some(&saved))?)?;
    write(&out.join(HISTORY_FILE), report.history_tsv())?;
    let best = report.best_entry();
    say(
        stdout,
        format!(
            "trained {} steps; best dev loss {:.6} (accuracy {:.4}) at step {}{}",
            report.state.step,
            best.dev_loss,
            best.dev_accuracy,
            best.step,
            if report.stopped_early { "; stopped early" } else { "" }
        ),
    )?;
    say(stdout, format!("wrote {}", out.join(MODEL_FILE).display()))
}

/// Scores `model` on labelled examples.
pub fn score(model: &LidModel, examples: &[Example]) -> Result<MetricsReport> {
    let tokens: Vec<_> = examples.iter().map(|e| e.tokens.clone()).collect();
    let out = model.predict_batch(&tokens)?;
    let preds: Vec<usize> = out.iter().map(|o| o.0).collect();
    let probs: Vec<Vec<f64>> = out.into_iter().map(|o| o.1).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(make_report(&preds, &probs, &labels, model.num_classes())?)
}

fn cmd_eval(cli: &Cli, model: Option<&Path>, split: SplitArg, decode: bool, stdout: &mut dyn Write) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, &cfg);
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| out.join(MODEL_FILE));
    let (model, _) = load_model(&model_path)?;
    let inv = load_inventory(&cfg.data_dir)?;
    check_inventory(&model, &inv)?;
    let utts = load_split(&cfg.data_dir, split.name(), &inv, decode.then_some(cfg.min_run))?;
    let report = score(&model, &tokenize_all(&model, &utts)?)?;
    create_dir(&out)?;
    write(&out.join(REPORT_FILE), report.to_json())?;
    say(
        stdout,
        format!(
            "{}: accuracy {:.4} macro-F1 {:.4} EER {:.4} over {}",
            split.name(),
            report.accuracy,
            report.f1_macro,
            report.eer,
            report.n
        ),
    )
}

#[derive(serde::Serialize)]
struct Prediction<'a> {
    id: &'a str,
    label: usize,
    probs: &'a [f64],
}

fn cmd_predict(
    cli: &Cli,
    model: &Path,
    ppg_path: &Path,
    align: Option<&Path>,
    decode: bool,
    id: Option<&str>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let cfg = load_config(cli)?;
    let (model, _) = load_model(model)?;
    let ppg = parse_ppg_file(&read(ppg_path)?)?;
    let inv = PhoneInventory::new(model.config.phones.clone())?;
    let segments = match align {
        Some(a) => Some(parse_alignment(&read(a)?, &inv, ppg.frames())?),
        None if decode => Some(greedy_decode(&ppg, cfg.min_run)),
        None if model.config.encoder.embedding.needs_segments() => {
            return Err(Error::Input(format!(
                "{} tokens need phone segments: pass --align PATH or --decode",
                model.config.encoder.embedding
            ))
            .into())
        }
        None => None,
    };
    let tokens = model.tokenize(&ppg, segments.as_deref())?;
    let (label, probs) = model.predict(&tokens)?;
    let stem = ppg_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let line = serde_json::to_string(&Prediction {
        id: id.unwrap_or(&stem),
        label,
        probs: &probs,
    })
    .map_err(Error::from)?;
    say(stdout, line)
}

fn cmd_baseline(cli: &Cli, split: SplitArg, stdout: &mut dyn Write) -> Result<()> {
    let cfg = load_config(cli)?;
    let inv = load_inventory(&cfg.data_dir)?;
    let decode = Some(cfg.min_run);
    let phones = |u: &Utterance| -> Vec<usize> {
        u.segments.as_ref().expect("decoded").iter().map(|s| s.phone).collect()
    };
    let train = load_split(&cfg.data_dir, "train", &inv, decode)?;
    let test = load_split(&cfg.data_dir, split.name(), &inv, decode)?;
    let seqs: Vec<Vec<usize>> = train.iter().map(phones).collect();
    let labels: Vec<usize> = train.iter().map(|u| u.label).collect();
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let b = &cfg.baseline;
    let vocab = NGramVocab::build(&seqs, b.n_max)?;
    let feats = seqs
        .iter()
        .map(|s| featurize(s, &vocab, b.weighting))
        .collect::<lid_core::Result<Vec<_>>>()?;
    let clf = train_margin_classifier(&feats, &labels, classes, vocab.len(), &b.svm)?;

    let mut preds = Vec::with_capacity(test.len());
    let mut scores = Vec::with_capacity(test.len());
    let mut truth = Vec::with_capacity(test.len());
    for u in &test {
        if u.label >= classes {
            return Err(Error::Input(format!("{} has label {} unseen in training", u.id, u.label)).into());
        }
        let (p, s) = predict_margin(&featurize(&phones(u), &vocab, b.weighting)?, &clf)?;
        preds.push(p);
        scores.push(s);
        truth.push(u.label);
    }
    let report = make_report(&preds, &scores, &truth, classes)?;
    let out = out_dir(cli, &cfg);
    create_dir(&out)?;
    write(&out.join(BASELINE_REPORT_FILE), report.to_json())?;
    let model = NGramModel {
        vocab,
        weighting: b.weighting,
        classifier: clf,
    };
    write(&out.join(BASELINE_MODEL_FILE), model.to_text(&inv))?;
    say(
        stdout,
        format!(
            "baseline {}: accuracy {:.4} macro-F1 {:.4} EER {:.4} over {} ({} n-grams)",
            split.name(),
            report.accuracy,
            report.f1_macro,
            report.eer,
            report.n,
            model.vocab.len()
        ),
    )
}
