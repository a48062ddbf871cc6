//! Mini-batch training with Adam, λ schedules, half-epoch dev evaluation
//! and early stopping, plus accuracy evaluation.
//!
//! Training log schema (one JSON object per line):
//!
//! ```text
//! {"event":"step","step":0,"epoch":0,"loss":0.69,"kl":0.01,"lambda":0.1,"batch":[4,17,...]}
//! {"event":"eval","step":12,"epoch":0,"dev_accuracy":0.71,"best":true}
//! ```
//!
//! `kl` is null for models without a continuous gate. `batch` lists
//! training-set indices in the order they were processed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Gradients, ParamStore, Tape};
use crate::data::{Dataset, UNK};
use crate::error::{Error, Result};
use crate::inference::{predict, InferConfig};
use crate::models::Model;

/// Default λ grid for sweeps.
pub const LAMBDA_GRID: [f64; 9] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LambdaSchedule {
    Fixed,
    /// Ramp linearly from 0 to λ over `steps` updates (one epoch if unset).
    LinearAnneal { steps: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub schedule: LambdaSchedule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    pub evals_per_epoch: usize,
    pub seed: u64,
    /// Prediction strategy used for dev accuracy.
    pub eval: InferConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            schedule: LambdaSchedule::Fixed,
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            evals_per_epoch: 2,
            seed: 0,
            eval: InferConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.max_epochs == 0 || self.evals_per_epoch == 0 {
            return Err(Error::Invalid("max_epochs and evals_per_epoch must be positive".into()));
        }
        if let LambdaSchedule::LinearAnneal { steps: Some(0) } = self.schedule {
            return Err(Error::Invalid("anneal length must be positive".into()));
        }
        self.eval.validate()
    }

    /// KL weight at update `step` (0-based).
    pub fn lambda_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        match self.schedule {
            LambdaSchedule::Fixed => self.lambda,
            LambdaSchedule::LinearAnneal { steps } => {
                let n = steps.unwrap_or(steps_per_epoch).max(1);
                self.lambda * (step as f64 / n as f64).min(1.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        loss: f64,
        kl: Option<f64>,
        lambda: f64,
        batch: Vec<usize>,
    },
    Eval {
        step: usize,
        epoch: usize,
        dev_accuracy: f64,
        best: bool,
    },
}

pub fn log_to_jsonl(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log records always serialize") + "\n")
        .collect()
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: "training log".into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best dev evaluation.
    pub model: Model,
    pub log: Vec<LogRecord>,
    /// Number of updates applied before the best evaluation.
    pub best_step: usize,
    pub best_dev_accuracy: f64,
    pub steps: usize,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

struct StepResult {
    loss: f64,
    kl: Option<f64>,
}

fn apply_batch(
    model: &mut Model,
    adam: &mut AdamState,
    data: &Dataset,
    batch: &[usize],
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<StepResult>> {
    let mut grads = Gradients::empty(model.params.len());
    let mut total = 0.0;
    let mut kl_total = 0.0;
    let mut has_kl = false;
    let mut count = 0usize;
    let mut per_instance = Vec::with_capacity(batch.len());
    for &i in batch {
        let ex = &data.examples[i];
        let mut tape = Tape::new(&model.params);
        let Some(terms) = model.instance_loss(&mut tape, &ex.seq, ex.label, ex.domain, lambda, rng)? else {
            continue;
        };
        total += tape.value(terms.loss).item();
        if let Some(kl) = terms.kl {
            kl_total += tape.value(kl).item();
            has_kl = true;
        }
        per_instance.push(tape.backward(terms.loss)?);
        count += 1;
    }
    if count == 0 {
        return Ok(None);
    }
    let scale = 1.0 / count as f64;
    for g in &per_instance {
        grads.accumulate(g, scale);
    }
    adam.step(&mut model.params, &grads)?;
    Ok(Some(StepResult {
        loss: total * scale,
        kl: has_kl.then_some(kl_total * scale),
    }))
}

fn eval_points(steps_in_epoch: usize, evals: usize) -> Vec<usize> {
    let mut pts: Vec<usize> = (1..=evals).map(|j| (steps_in_epoch * j).div_ceil(evals)).filter(|&p| p > 0).collect();
    pts.dedup();
    pts
}

/// Train `model` in place of a fresh copy and return the best-dev state.
pub fn train(mut model: Model, data: &Dataset, dev: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    if dev.is_empty() || dev.examples.iter().any(|e| e.label.is_none()) {
        return Err(Error::Training("dev set must be non-empty and fully labeled".into()));
    }
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    'epochs: for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let points = eval_points(steps_per_epoch, config.evals_per_epoch);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let lambda = config.lambda_at(step, steps_per_epoch);
            let mut rng = step_rng(config.seed, step);
            if let Some(r) = apply_batch(&mut model, &mut adam, data, batch, lambda, &mut rng)? {
                log.push(LogRecord::Step {
                    step,
                    epoch,
                    loss: r.loss,
                    kl: r.kl,
                    lambda,
                    batch: batch.to_vec(),
                });
            }
            step += 1;
            if points.contains(&(b + 1)) {
                let acc = evaluate(&model, dev, &config.eval)?.accuracy;
                if !acc.is_finite() {
                    return Err(Error::Training(format!("dev accuracy is {acc} at step {step}, epoch {epoch}")));
                }
                let improved = best.as_ref().is_none_or(|(b, _, _)| acc > *b);
                log.push(LogRecord::Eval {
                    step,
                    epoch,
                    dev_accuracy: acc,
                    best: improved,
                });
                if improved {
                    best = Some((acc, model.params.clone(), step));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= config.patience {
                        break 'epochs;
                    }
                }
            }
        }
    }
    let (best_dev_accuracy, params, best_step) = best.expect("at least one evaluation per epoch");
    model.params = params;
    Ok(TrainOutcome {
        model,
        log,
        best_step,
        best_dev_accuracy,
        steps: step,
    })
}

/// Re-apply the batches recorded in `log` up to `until_step` updates,
/// starting from `model`. With the same initial model and config this
/// reproduces the trained parameters bitwise.
pub fn replay(mut model: Model, data: &Dataset, config: &TrainConfig, log: &[LogRecord], until_step: usize) -> Result<Model> {
    config.validate()?;
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    for rec in log {
        let LogRecord::Step { step, lambda, batch, .. } = rec else { continue };
        if *step >= until_step {
            break;
        }
        if batch.iter().any(|&i| i >= data.len()) {
            return Err(Error::Training(format!("log step {step} names an instance outside the dataset")));
        }
        let mut rng = step_rng(config.seed, *step);
        apply_batch(&mut model, &mut adam, data, batch, *lambda, &mut rng)?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Sorted by domain name; documents without a domain appear as UNK.
    pub per_domain: Vec<DomainAccuracy>,
}

/// Micro accuracy over labeled examples, overall and per domain.
pub fn evaluate(model: &Model, data: &Dataset, config: &InferConfig) -> Result<EvalReport> {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut correct, mut total) = (0, 0);
    for ex in &data.examples {
        let Some(y) = ex.label else { continue };
        let p = predict(model, &ex.seq, &ex.id, config)?;
        let hit = usize::from(p.label == y);
        correct += hit;
        total += 1;
        let e = tally.entry(ex.domain_name.clone().unwrap_or_else(|| UNK.into())).or_default();
        e.0 += hit;
        e.1 += 1;
    }
    let ratio = |c: usize, t: usize| if t == 0 { f64::NAN } else { c as f64 / t as f64 };
    Ok(EvalReport {
        accuracy: ratio(correct, total),
        correct,
        total,
        per_domain: tally
            .into_iter()
            .map(|(domain, (c, t))| DomainAccuracy {
                domain,
                correct: c,
                total: t,
                accuracy: ratio(c, t),
            })
            .collect(),
    })
}
