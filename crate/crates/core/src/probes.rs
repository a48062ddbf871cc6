//! Linear probes on latent gate samples, and representation export.
//!
//! A probe fits multinomial logistic regression (L2 strength 1e-3 on all
//! coefficients, bias included) on 70% of the records and reports accuracy
//! on the remaining 30%. The fit is full-batch and runs Newton steps with
//! backtracking until the gradient norm drops below 1e-6.
//!
//! Export format: tab-separated, header row
//! `id<TAB>label<TAB>domain<TAB>v0<TAB>v1...`; UNK label or domain is
//! written as `UNK`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UNK};
use crate::error::{Error, Result};
use crate::inference::{instance_rng, posterior_distribution, prior_distribution, Encoded};
use crate::models::{gate_vectors, Model, ModelKind};

pub const PROBE_L2: f64 = 1e-3;
pub const PROBE_TOLERANCE: f64 = 1e-6;
pub const PROBE_TRAIN_SHARE: f64 = 0.7;
pub const PROBE_RUNS: usize = 3;
const MAX_NEWTON_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub z: Vec<f64>,
    pub y: usize,
    pub d: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTarget {
    Label,
    Domain,
}

/// One gate sample from the inference network per example with both a
/// label and a known domain.
pub fn collect(model: &Model, data: &Dataset, seed: u64) -> Result<Vec<ProbeRecord>> {
    if !model.config.kind.is_csda() {
        return Err(Error::Invalid(format!("{} has no inference network to probe", model.config.kind)));
    }
    let mut out = Vec::new();
    for ex in &data.examples {
        let (Some(y), Some(d)) = (ex.label, ex.domain) else { continue };
        let q = posterior_distribution(model, &ex.seq, Some(y), Some(d))?;
        let s = q.sample(&mut instance_rng(seed, &ex.id))?;
        out.push(ProbeRecord {
            z: s.gate.values().to_vec(),
            y,
            d,
        });
    }
    Ok(out)
}

/// Multinomial logistic regression fitted by damped Newton iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    /// `classes x (features + 1)`, the last column is the bias.
    pub weights: DMatrix<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn augmented(x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len() + 1, x.iter().copied().chain(std::iter::once(1.0)))
}

fn softmax(v: &DVector<f64>) -> DVector<f64> {
    let m = v.max();
    let e = v.map(|a| (a - m).exp());
    let s = e.sum();
    e / s
}

impl LogisticRegression {
    pub fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize, l2: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() || classes < 2 {
            return Err(Error::Invalid(format!("{} inputs, {} targets, {classes} classes", xs.len(), ys.len())));
        }
        let f = xs[0].len() + 1;
        let p = classes * f;
        let n = xs.len() as f64;
        let feats: Vec<DVector<f64>> = xs.iter().map(|x| augmented(x)).collect();
        let objective = |w: &DVector<f64>| -> f64 {
            let wm = DMatrix::from_column_slice(f, classes, w.as_slice());
            let mut total = 0.0;
            for (x, &y) in feats.iter().zip(ys) {
                let logits = wm.tr_mul(x);
                let m = logits.max();
                let lse = m + logits.map(|a| (a - m).exp()).sum().ln();
                total += lse - logits[y];
            }
            total / n + 0.5 * l2 * w.norm_squared()
        };
        let mut w = DVector::zeros(p);
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;
        while iterations < MAX_NEWTON_STEPS {
            let wm = DMatrix::from_column_slice(f, classes, w.as_slice());
            let mut grad = &w * l2;
            let mut hess = DMatrix::identity(p, p) * l2;
            for (x, &y) in feats.iter().zip(ys) {
                let prob = softmax(&wm.tr_mul(x));
                for c in 0..classes {
                    let r = prob[c] - if c == y { 1.0 } else { 0.0 };
                    for i in 0..f {
                        grad[c * f + i] += r * x[i] / n;
                    }
                    for c2 in 0..classes {
                        let s = prob[c] * (if c == c2 { 1.0 } else { 0.0 } - prob[c2]) / n;
                        if s == 0.0 {
                            continue;
                        }
                        for i in 0..f {
                            for j in 0..f {
                                hess[(c * f + i, c2 * f + j)] += s * x[i] * x[j];
                            }
                        }
                    }
                }
            }
            grad_norm = grad.norm();
            if grad_norm < PROBE_TOLERANCE {
                break;
            }
            let chol = hess
                .cholesky()
                .ok_or_else(|| Error::NoConvergence {
                    func: "logistic_regression",
                    iterations,
                    detail: "Hessian lost positive definiteness".into(),
                })?;
            let step = chol.solve(&grad);
            let f0 = objective(&w);
            let slope = grad.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &w - &step * t;
                if objective(&cand) <= f0 - 1e-4 * t * slope || t < 1e-10 {
                    w = cand;
                    break;
                }
                t *= 0.5;
            }
            iterations += 1;
        }
        if grad_norm >= PROBE_TOLERANCE {
            return Err(Error::NoConvergence {
                func: "logistic_regression",
                iterations,
                detail: format!("gradient norm {grad_norm:e}"),
            });
        }
        Ok(Self {
            weights: DMatrix::from_column_slice(f, classes, w.as_slice()).transpose(),
            iterations,
            gradient_norm: grad_norm,
        })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let scores = &self.weights * augmented(x);
        scores.argmax().0
    }
}

/// Fit on a seeded 70% split of `records`, return accuracy on the rest.
pub fn probe(records: &[ProbeRecord], target: ProbeTarget, split_seed: u64) -> Result<f64> {
    let pick = |r: &ProbeRecord| match target {
        ProbeTarget::Label => r.y,
        ProbeTarget::Domain => r.d,
    };
    let mut classes: Vec<usize> = records.iter().map(pick).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Invalid(format!("probe target {target:?} has fewer than two classes")));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = ((records.len() as f64) * PROBE_TRAIN_SHARE).round() as usize;
    if n_train == 0 || n_train == records.len() {
        return Err(Error::Invalid(format!("{} records are too few to split", records.len())));
    }
    let class_of = |v: usize| classes.binary_search(&v).expect("class collected above");
    let (train, test) = idx.split_at(n_train);
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| records[i].z.clone()).collect();
    let ys: Vec<usize> = train.iter().map(|&i| class_of(pick(&records[i]))).collect();
    let lr = LogisticRegression::fit(&xs, &ys, classes.len(), PROBE_L2)?;
    let hits = test
        .iter()
        .filter(|&&i| lr.predict(&records[i].z) == class_of(pick(&records[i])))
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub target: ProbeTarget,
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean over runs.
    pub std_error: f64,
    /// 1 / number of classes.
    pub chance: f64,
}

/// Average probe accuracy over `PROBE_RUNS` runs, each with fresh z
/// samples and a fresh split.
pub fn probe_runs(model: &Model, data: &Dataset, target: ProbeTarget, seed: u64) -> Result<ProbeSummary> {
    let mut runs = Vec::with_capacity(PROBE_RUNS);
    let mut classes = 0;
    for r in 0..PROBE_RUNS as u64 {
        let records = collect(model, data, seed.wrapping_add(r))?;
        let mut c: Vec<usize> = records
            .iter()
            .map(|x| match target {
                ProbeTarget::Label => x.y,
                ProbeTarget::Domain => x.d,
            })
            .collect();
        c.sort_unstable();
        c.dedup();
        classes = c.len();
        runs.push(probe(&records, target, seed.wrapping_add(r))?);
    }
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let var = runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(ProbeSummary {
        target,
        runs,
        mean,
        std_error: (var / n).sqrt(),
        chance: 1.0 / classes as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Gated hidden vector fed to the classifier.
    Hidden,
    /// Latent gate sample.
    Gate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationRow {
    pub id: String,
    pub label: Option<String>,
    pub domain: Option<String>,
    pub vector: Vec<f64>,
}

/// One row per example. The gate is drawn from the inference network
/// (with UNK for missing fields); the discrete model reports its prior
/// probabilities and the baselines have only `Hidden`.
pub fn export_representations(model: &Model, data: &Dataset, what: Representation, seed: u64) -> Result<Vec<RepresentationRow>> {
    data.examples
        .iter()
        .map(|ex| {
            let z = match model.config.kind {
                ModelKind::Scnn | ModelKind::Mcnn => None,
                ModelKind::Dsda => Some(prior_distribution(model, &ex.seq)?.mean()),
                ModelKind::CsdaBeta | ModelKind::CsdaDirichlet => {
                    let q = posterior_distribution(model, &ex.seq, ex.label, ex.domain)?;
                    Some(q.sample(&mut instance_rng(seed, &ex.id))?.gate.values().to_vec())
                }
            };
            let vector = match (what, z) {
                (Representation::Gate, Some(z)) => z,
                (Representation::Gate, None) => {
                    return Err(Error::Invalid(format!("{} has no latent gate", model.config.kind)))
                }
                (Representation::Hidden, z) => {
                    let enc = Encoded::new(model, &ex.seq)?;
                    match z {
                        Some(z) => gate_vectors(&enc.channels, &z)?,
                        None => enc.channels.concat(),
                    }
                }
            };
            Ok(RepresentationRow {
                id: ex.id.clone(),
                label: ex.label.map(|y| data.labels[y].clone()),
                domain: ex.domain_name.clone(),
                vector,
            })
        })
        .collect()
}

pub fn representations_to_tsv(rows: &[RepresentationRow]) -> String {
    let width = rows.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("id\tlabel\tdomain");
    for i in 0..width {
        let _ = write!(out, "\tv{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{}\t{}\t{}",
            r.id,
            r.label.as_deref().unwrap_or(UNK),
            r.domain.as_deref().unwrap_or(UNK)
        );
        for v in &r.vector {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}
