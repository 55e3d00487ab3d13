//! Mini-batch training with gradient accumulation, periodic development
//! evaluation, early stopping and best-checkpoint selection.

mod optimizer;

pub use optimizer::{optimizer_step, warmup_linear, AdamState};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::model::LidModel;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::ppg::TokenizedInput;
use crate::seeds::{derive_seed, derived_rng};

const SHUFFLE_STREAM: u64 = 20;
const DROPOUT_STREAM: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub grad_accumulation_steps: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optimizer steps between development evaluations; 0 means once per epoch.
    pub eval_every: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-6,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            epochs: 200,
            grad_accumulation_steps: 1,
            patience: 50,
            batch_size: 32,
            seed: 0,
            eval_every: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1)");
        }
        for (k, v) in [
            ("epochs", self.epochs),
            ("grad_accumulation_steps", self.grad_accumulation_steps),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{k} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// A tokenized utterance and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: TokenizedInput,
    pub label: usize,
}

/// Counts consecutive strict increases of a monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    prev: Option<f64>,
    increases: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            prev: None,
            increases: 0,
        }
    }

    /// Records a loss; returns true once `patience` consecutive increases
    /// have been seen. An equal loss resets the count.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.prev {
            Some(p) if loss > p => self.increases += 1,
            _ => self.increases = 0,
        }
        self.prev = Some(loss);
        self.increases >= self.patience
    }

    pub fn increases(&self) -> usize {
        self.increases
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub epoch: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub history: Vec<HistoryEntry>,
    /// Index into `history` of the returned checkpoint.
    pub best: usize,
    pub stopped_early: bool,
    /// Optimizer state after the last update (not the best checkpoint).
    pub state: AdamState,
}

impl FitReport {
    pub fn best_entry(&self) -> &HistoryEntry {
        &self.history[self.best]
    }

    /// Tab-separated history, one line per development evaluation.
    pub fn history_tsv(&self) -> String {
        let mut s = String::from("step\tepoch\ttrain_loss\tdev_loss\tdev_accuracy\n");
        for h in &self.history {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                h.step, h.epoch, h.train_loss, h.dev_loss, h.dev_accuracy
            ));
        }
        s
    }
}

/// Loss and accuracy of `model` over `data`, dropout off.
pub fn evaluate(model: &LidModel, data: &[Example]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let per: Vec<(f64, bool)> = data
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(&model.params);
            let (loss, logits) = model.loss(&mut g, &ex.tokens, ex.label, &mut Ctx::eval())?;
            let pred = crate::tensor::argmax(g.value(logits).data());
            Ok((g.value(loss).data()[0], pred == ex.label))
        })
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("evaluation loss".into()));
    }
    Ok((loss, acc))
}

/// Gradient of `weight · Σ loss` over `group`, summed in input order, plus
/// the unweighted loss sum. Examples run in parallel.
fn group_gradients(
    model: &LidModel,
    group: &[(&Example, f64)],
    train: bool,
    seed: u64,
    step: u64,
) -> Result<(Gradients, f64)> {
    let parts: Vec<(Gradients, f64)> = group
        .par_iter()
        .enumerate()
        .map(|(i, (ex, weight))| {
            let mut ctx = if train {
                Ctx::train(derive_seed(seed, DROPOUT_STREAM ^ step.rotate_left(17), i as u64))
            } else {
                Ctx::eval()
            };
            let mut g = Graph::new(&model.params);
            let (loss, _) = model.loss(&mut g, &ex.tokens, ex.label, &mut ctx)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            Ok((g.backward(loss, *weight), value))
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::empty(model.params.len());
    let mut loss = 0.0;
    for (g, l) in &parts {
        total.accumulate(g);
        loss += l;
    }
    Ok((total, loss))
}

/// Number of optimizer steps one epoch takes.
pub fn steps_per_epoch(examples: usize, cfg: &TrainConfig) -> u64 {
    let batches = examples.div_ceil(cfg.batch_size);
    batches.div_ceil(cfg.grad_accumulation_steps) as u64
}

/// Trains `model` in place and leaves it at the parameters with the lowest
/// development loss.
///
/// Each optimizer step sums per-example gradients over
/// `grad_accumulation_steps` micro-batches, every example weighted by
/// 1 / (micro-batch size · micro-batches in the step). `resume` continues
/// from a saved optimizer state and step counter.
pub fn fit(
    model: &mut LidModel,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    resume: Option<AdamState>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Input("training and development sets must be non-empty".into()));
    }
    let mut state = resume.unwrap_or_else(|| AdamState::new(&model.params));
    if state.m.len() != model.params.len() {
        return Err(Error::Input("optimizer state does not match the model".into()));
    }
    let start_step = state.step;
    let total_steps = start_step + cfg.epochs as u64 * steps_per_epoch(train.len(), cfg);
    let dropout = model.config.encoder.dropout_rate > 0.0;

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stopped_early = false;
    let mut running = (0.0, 0usize);
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut derived_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        }
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for step_batches in batches.chunks(cfg.grad_accumulation_steps) {
            let k = step_batches.len() as f64;
            let group: Vec<(&Example, f64)> = step_batches
                .iter()
                .flat_map(|b| b.iter().map(move |&i| (&train[i], 1.0 / (b.len() as f64 * k))))
                .collect();
            let (grads, loss) = group_gradients(model, &group, dropout, cfg.seed, state.step)?;
            optimizer_step(&mut model.params, &grads, &mut state, cfg, total_steps)?;
            running.0 += loss;
            running.1 += group.len();

            let due = cfg.eval_every > 0 && (state.step - start_step) % cfg.eval_every as u64 == 0;
            if due {
                let loss = record(model, dev, &mut history, &mut best, &mut running, state.step, epoch)?;
                if stopper.observe(loss) {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
        if cfg.eval_every == 0 {
            let loss = record(model, dev, &mut history, &mut best, &mut running, state.step, epoch)?;
            if stopper.observe(loss) {
                stopped_early = true;
                break;
            }
        }
    }
    if history.is_empty() || running.1 > 0 {
        record(model, dev, &mut history, &mut best, &mut running, state.step, cfg.epochs - 1)?;
    }
    let (_, best_index, params) = best.expect("at least one evaluation");
    model.params = params;
    Ok(FitReport {
        history,
        best: best_index,
        stopped_early,
        state,
    })
}

fn record(
    model: &LidModel,
    dev: &[Example],
    history: &mut Vec<HistoryEntry>,
    best: &mut Option<(f64, usize, ParamStore)>,
    running: &mut (f64, usize),
    step: u64,
    epoch: usize,
) -> Result<f64> {
    let (dev_loss, dev_accuracy) = evaluate(model, dev)?;
    let train_loss = if running.1 > 0 { running.0 / running.1 as f64 } else { f64::NAN };
    *running = (0.0, 0);
    history.push(HistoryEntry {
        step,
        epoch,
        train_loss,
        dev_loss,
        dev_accuracy,
    });
    if best.as_ref().is_none_or(|b| dev_loss < b.0) {
        *best = Some((dev_loss, history.len() - 1, model.params.clone()));
    }
    Ok(dev_loss)
}
