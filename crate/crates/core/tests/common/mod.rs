//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sda_core::autodiff::{ParamStore, Tensor};
use sda_core::data::{generate_synthetic, Dataset, SynthSpec, SYNTH_LABELS};
use sda_core::models::{Model, ModelConfig, ModelKind};
use sda_core::text::{TokenMode, TokenSeq, Vocab};
use sda_core::training::{evaluate, train, TrainConfig};

/// Tanh-sinh quadrature of `f` over (0, 1), refined until two successive
/// levels agree to `tol` (relative). Handles integrable endpoint
/// singularities such as Beta densities with shape < 1.
pub fn tanh_sinh<F: Fn(f64) -> f64>(f: F, tol: f64) -> f64 {
    let half_pi = std::f64::consts::FRAC_PI_2;
    // abscissa and its complement, both computed without cancellation
    let node = |t: f64| {
        let u = half_pi * t.sinh();
        let x = 1.0 / (1.0 + (-2.0 * u).exp());
        let w = half_pi * t.cosh() / (2.0 * u.cosh().powi(2));
        (x, w)
    };
    let mut h = 1.0;
    let t_max = 4.0;
    let eval = |h: f64, offset: f64, step: f64| {
        let mut s = 0.0;
        let mut t = offset;
        while t <= t_max {
            for tt in if t == 0.0 { vec![0.0] } else { vec![t, -t] } {
                let (x, w) = node(tt);
                if x > 0.0 && x < 1.0 && w > 0.0 {
                    s += w * f(x);
                }
            }
            t += step;
        }
        s * h
    };
    let mut sum = eval(h, 0.0, h) / h;
    let mut estimate = sum * h;
    for _ in 0..12 {
        h /= 2.0;
        sum += eval(1.0, h, 2.0 * h);
        let next = sum * h;
        if (next - estimate).abs() <= tol * next.abs() {
            return next;
        }
        estimate = next;
    }
    estimate
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Marsaglia-Tsang Gamma(shape, 1) sampler, with the usual boost for
/// shape < 1. Independent of the inverse-CDF sampler under test.
pub fn gamma_draw(shape: f64, rng: &mut ChaCha8Rng) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        return gamma_draw(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = std_normal(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

pub fn beta_draw(a: f64, b: f64, rng: &mut ChaCha8Rng) -> f64 {
    let x = gamma_draw(a, rng);
    let y = gamma_draw(b, rng);
    x / (x + y)
}

pub fn dirichlet_draw(c: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g: Vec<f64> = c.iter().map(|&a| gamma_draw(a, rng)).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Central differences of `f` over every parameter scalar.
pub fn central_differences<F: Fn(&ParamStore) -> f64>(store: &ParamStore, step: f64, f: F) -> Vec<Tensor> {
    let mut work = store.clone();
    store
        .ids()
        .map(|id| {
            let n = store.get(id).len();
            let mut out = vec![0.0; n];
            for (i, slot) in out.iter_mut().enumerate() {
                let orig = work.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + step;
                let up = f(&work);
                work.get_mut(id).data_mut()[i] = orig - step;
                let down = f(&work);
                work.get_mut(id).data_mut()[i] = orig;
                *slot = (up - down) / (2.0 * step);
            }
            Tensor::new(store.get(id).shape().to_vec(), out).unwrap()
        })
        .collect()
}

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(1e-5)
}

pub fn toy_seq(ids: &[usize]) -> TokenSeq {
    TokenSeq {
        ids: ids.to_vec(),
        mode: TokenMode::Word,
        empty_input: false,
    }
}

/// Small model: embedding 8, 4 filters per window, hidden 8.
pub fn toy_model(kind: ModelKind, k: usize, vocab: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(kind, k, 2, 2, vocab);
    cfg.encoder.embed_dim = 8;
    cfg.encoder.filters = 4;
    cfg.hidden = 8;
    Model::new(cfg, seed).unwrap()
}

pub fn set_param(model: &mut Model, name: &str, values: &[f64]) {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params.get_mut(id).data_mut().copy_from_slice(values);
}

/// k = 1 Beta model with prior near Beta(2, 3) and a flatter posterior
/// near Beta(1.2, 1.5), so importance weights have finite variance. The
/// head is scaled up so the label depends visibly on z.
pub fn toy_beta_k1() -> (Model, TokenSeq) {
    let mut m = toy_model(ModelKind::CsdaBeta, 1, 20, 21);
    set_param(&mut m, "phi.out0.bias", &[1.0]);
    set_param(&mut m, "phi.out1.bias", &[2.0]);
    set_param(&mut m, "sigma.out0.bias", &[0.2]);
    set_param(&mut m, "sigma.out1.bias", &[0.5]);
    for name in ["theta.head.hidden.weight", "theta.head.output.weight"] {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 4.0);
    }
    (m, toy_seq(&[3, 9, 14, 2, 17, 6, 11]))
}

/// Desk-scale model: embedding 16, 16 filters per window, hidden 32.
pub fn desk_model(kind: ModelKind, k: usize, num_domains: usize, vocab: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(kind, k, 2, num_domains, vocab);
    cfg.encoder.embed_dim = 16;
    cfg.encoder.filters = 16;
    cfg.hidden = 32;
    Model::new(cfg, seed).unwrap()
}

pub fn desk_train_config(seed: u64, lambda: f64) -> TrainConfig {
    TrainConfig {
        lambda,
        learning_rate: 1e-3,
        max_epochs: 30,
        patience: 20,
        seed,
        ..TrainConfig::default()
    }
}

pub struct Splits {
    pub vocab: Vocab,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Training domains form the training set (documents without a domain are
/// kept only when `with_unlabeled_domain`); held-out domains are split 4:6
/// into dev and test.
pub fn synthetic_splits(spec: &SynthSpec, with_unlabeled_domain: bool) -> Splits {
    let corpus = generate_synthetic(spec).unwrap();
    let held = spec.held_out_names();
    let train_corpus = corpus
        .filter(|d| match &d.domain {
            Some(x) => !held.contains(x),
            None => with_unlabeled_domain,
        })
        .unwrap();
    let (dev, test) = corpus.in_domains(&held).unwrap().split_dev_test(4, 6, spec.seed).unwrap();
    let vocab = Vocab::build(train_corpus.documents().iter().map(|d| d.text.as_str()), 1, None);
    let labels: Vec<String> = SYNTH_LABELS.iter().map(|s| s.to_string()).collect();
    let domains = spec.training_names();
    Splits {
        train: Dataset::new(&train_corpus, &vocab, &labels, &domains).unwrap(),
        dev: Dataset::new(&dev, &vocab, &labels, &domains).unwrap(),
        test: Dataset::new(&test, &vocab, &labels, &domains).unwrap(),
        vocab,
    }
}

/// Train `kind` on `splits` and return (trained model, test accuracy).
pub fn train_and_test(kind: ModelKind, splits: &Splits, seed: u64, lambda: f64) -> (Model, f64) {
    let k = splits.train.domains.len();
    let model = desk_model(kind, k, k, splits.vocab.len(), seed);
    let cfg = desk_train_config(seed, lambda);
    let out = train(model, &splits.train, &splits.dev, &cfg).unwrap();
    let acc = evaluate(&out.model, &splits.test, &cfg.eval).unwrap().accuracy;
    (out.model, acc)
}
