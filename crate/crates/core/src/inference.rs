//! Test-time label prediction from `x` alone.
//!
//! Continuous-gate models support four strategies: one prior sample, the
//! prior mean, an average of `m` prior samples, and importance sampling
//! with the inference network as proposal (conditioned on each candidate
//! label and an UNK domain). The discrete mixture is always marginalized
//! exactly; channel baselines have no gate at all.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::distributions::GateDistribution;
use crate::error::{Error, Result};
use crate::models::{gate_vectors, Model, ModelKind};
use crate::text::TokenSeq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    PriorSample,
    PriorMean,
    McAverage,
    ImportanceSampling,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior-sample" => Ok(Strategy::PriorSample),
            "prior-mean" => Ok(Strategy::PriorMean),
            "mc-average" => Ok(Strategy::McAverage),
            "importance-sampling" => Ok(Strategy::ImportanceSampling),
            _ => Err(Error::Invalid(format!(
                "unknown strategy `{s}` (expected prior-sample, prior-mean, mc-average or importance-sampling)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::PriorSample => "prior-sample",
            Strategy::PriorMean => "prior-mean",
            Strategy::McAverage => "mc-average",
            Strategy::ImportanceSampling => "importance-sampling",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub strategy: Strategy,
    /// Sample count for mc-average and importance-sampling.
    pub samples: usize,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::PriorSample,
            samples: 100,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Invalid("sample count m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Normalized label distribution.
    pub probs: Vec<f64>,
    /// Importance-sampling estimates of p(y | x) before normalization.
    pub estimates: Option<Vec<f64>>,
    /// What was actually computed, e.g. `exact-marginalization` for DSDA.
    pub method: &'static str,
}

/// One line of batch prediction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: String,
    pub probs: Vec<(String, f64)>,
    pub strategy: String,
    pub seed: u64,
}

/// RNG for one instance, independent of evaluation order.
pub fn instance_rng(seed: u64, instance_id: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in instance_id.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

fn softmax_from_log(lp: &[f64]) -> Vec<f64> {
    let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = lp.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Dropout-free channel encodings, prior and head evaluation on plain
/// vectors for one document.
pub struct Encoded<'m> {
    model: &'m Model,
    pub channels: Vec<Vec<f64>>,
}

impl<'m> Encoded<'m> {
    pub fn new(model: &'m Model, seq: &TokenSeq) -> Result<Self> {
        let mut tape = Tape::new(&model.params);
        let hs = model.channel_outputs(&mut tape, seq, None)?;
        Ok(Self {
            model,
            channels: hs.iter().map(|&h| tape.value(h).data().to_vec()).collect(),
        })
    }

    /// log p_θ(y | x, z) for every label.
    pub fn label_log_probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        let h = gate_vectors(&self.channels, z)?;
        self.head(h)
    }

    fn head(&self, h: Vec<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.model.params);
        let hv = tape.constant(Tensor::vector(h));
        let lp = self.model.classify(&mut tape, hv)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Baseline head on the single or concatenated channel output.
    pub fn baseline_log_probs(&self) -> Result<Vec<f64>> {
        self.head(self.channels.concat())
    }
}

pub fn prior_distribution(model: &Model, seq: &TokenSeq) -> Result<GateDistribution> {
    let mut tape = Tape::new(&model.params);
    let g = model.prior(&mut tape, seq)?;
    g.distribution(&tape)
}

pub fn posterior_distribution(model: &Model, seq: &TokenSeq, y: Option<usize>, d: Option<usize>) -> Result<GateDistribution> {
    let mut tape = Tape::new(&model.params);
    let g = model.posterior(&mut tape, seq, y, d)?;
    g.distribution(&tape)
}

fn clamp_open(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)).collect()
}

fn exact(log_probs: Vec<f64>, method: &'static str) -> Prediction {
    let probs = softmax_from_log(&log_probs);
    Prediction {
        label: argmax(&probs),
        probs,
        estimates: None,
        method,
    }
}

/// Predict the label of `seq`. `instance_id` selects the RNG stream.
pub fn predict(model: &Model, seq: &TokenSeq, instance_id: &str, config: &InferConfig) -> Result<Prediction> {
    config.validate()?;
    let enc = Encoded::new(model, seq)?;
    match model.config.kind {
        ModelKind::Scnn | ModelKind::Mcnn => Ok(exact(enc.baseline_log_probs()?, "deterministic")),
        ModelKind::Dsda => {
            let prior = prior_distribution(model, seq)?;
            let pz = prior.mean();
            let k = pz.len();
            let per_channel = (0..k)
                .map(|i| {
                    let mut z = vec![0.0; k];
                    z[i] = 1.0;
                    enc.label_log_probs(&z)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = model.config.num_labels;
            let log_marginal: Vec<f64> = (0..labels)
                .map(|y| {
                    let terms: Vec<f64> = (0..k).map(|i| pz[i].ln() + per_channel[i][y]).collect();
                    log_sum_exp(&terms)
                })
                .collect();
            Ok(exact(log_marginal, "exact-marginalization"))
        }
        ModelKind::CsdaBeta | ModelKind::CsdaDirichlet => {
            let mut rng = instance_rng(config.seed, instance_id);
            let prior = prior_distribution(model, seq)?;
            match config.strategy {
                Strategy::PriorSample => {
                    let z = prior.sample(&mut rng)?;
                    Ok(exact(enc.label_log_probs(z.gate.values())?, "prior-sample"))
                }
                Strategy::PriorMean => Ok(exact(enc.label_log_probs(&prior.mean())?, "prior-mean")),
                Strategy::McAverage => {
                    let mut acc = vec![0.0; model.config.num_labels];
                    for _ in 0..config.samples {
                        let z = prior.sample(&mut rng)?;
                        let p = softmax_from_log(&enc.label_log_probs(z.gate.values())?);
                        acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                    }
                    let probs: Vec<f64> = acc.iter().map(|v| v / config.samples as f64).collect();
                    Ok(Prediction {
                        label: argmax(&probs),
                        probs,
                        estimates: None,
                        method: "mc-average",
                    })
                }
                Strategy::ImportanceSampling => {
                    let mut log_est = Vec::with_capacity(model.config.num_labels);
                    for y in 0..model.config.num_labels {
                        let q = posterior_distribution(model, seq, Some(y), None)?;
                        let mut log_w = Vec::with_capacity(config.samples);
                        for _ in 0..config.samples {
                            let z = q.sample(&mut rng)?;
                            let zc = match q {
                                GateDistribution::Beta(_) => clamp_open(z.gate.values()),
                                _ => z.gate.values().to_vec(),
                            };
                            let lq = q.log_pdf(&zc);
                            let lp = prior.log_pdf(&zc);
                            let ly = enc.label_log_probs(z.gate.values())?[y];
                            // k = 1 Dirichlet is a point mass: both densities are 0
                            log_w.push(if lq.is_finite() { lp + ly - lq } else { f64::NEG_INFINITY });
                        }
                        log_est.push(log_sum_exp(&log_w) - (config.samples as f64).ln());
                    }
                    let probs = softmax_from_log(&log_est);
                    Ok(Prediction {
                        label: argmax(&probs),
                        probs,
                        estimates: Some(log_est.iter().map(|v| v.exp()).collect()),
                        method: "importance-sampling",
                    })
                }
            }
        }
    }
}

/// Predictions for every example, in dataset order.
pub fn predict_dataset(model: &Model, data: &Dataset, config: &InferConfig) -> Result<Vec<PredictionRecord>> {
    data.examples
        .iter()
        .map(|ex| {
            let p = predict(model, &ex.seq, &ex.id, config)?;
            Ok(PredictionRecord {
                id: ex.id.clone(),
                label: data.labels[p.label].clone(),
                probs: data.labels.iter().cloned().zip(p.probs).collect(),
                strategy: p.method.to_owned(),
                seed: config.seed,
            })
        })
        .collect()
}
