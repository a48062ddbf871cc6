//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p sda-core --test acceptance` runs everything; set
//! `SDA_ACCEPTANCE=1,4,9` to run a subset.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sda_core::autodiff::Tape;
use sda_core::data::{generate_synthetic, SynthSpec};
use sda_core::distributions::{BetaParams, DirichletParams, GammaParams, GateDistribution};
use sda_core::inference::{posterior_distribution, predict, predict_dataset, prior_distribution, Encoded, InferConfig, Strategy};
use sda_core::models::{Model, ModelKind, ParamGroup};
use sda_core::probes::{collect, probe_runs, ProbeTarget, PROBE_RUNS, PROBE_TRAIN_SHARE};
use sda_core::special;
use sda_core::text::TokenSeq;
use sda_core::training::{log_to_jsonl, replay, train, TrainConfig};
use statrs::distribution::{Beta as OracleBeta, Continuous, ContinuousCDF, Gamma as OracleGamma};
use statrs::function::gamma::ln_gamma;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const SEEDS: u64 = 5;

// ------------------------------------------------------------ criterion 1

fn implicit_gradients() -> Outcome {
    let shapes = [0.5, 1.0, 2.0, 5.0];
    let eps = [0.1, 0.5, 0.9];
    let mut worst: f64 = 0.0;
    let mut roundtrip: f64 = 0.0;
    // Gamma
    for &a in &shapes {
        for &u in &eps {
            let g = GammaParams::new(a).unwrap();
            let z = g.sample_with_noise(u).unwrap();
            let oracle = OracleGamma::new(a, 1.0).unwrap();
            roundtrip = roundtrip.max((oracle.cdf(z) - u).abs());
            let h = 1e-5 * a.max(1.0);
            let fd = (special::inv_reg_inc_gamma(u, a + h).unwrap() - special::inv_reg_inc_gamma(u, a - h).unwrap()) / (2.0 * h);
            worst = worst.max(rel_err(g.implicit_grad(z).unwrap(), fd));
        }
    }
    // Beta, both parameters over the grid
    for &a in &shapes {
        for &b in &shapes {
            for &u in &eps {
                let p = BetaParams::new(vec![a], vec![b]).unwrap();
                let z = p.sample_with_noise(&[u]).unwrap().gate.values()[0];
                let oracle = OracleBeta::new(a, b).unwrap();
                roundtrip = roundtrip.max((oracle.cdf(z) - u).abs());
                let grad = p.implicit_grad(&[z]).unwrap();
                let ha = 1e-5 * a.max(1.0);
                let hb = 1e-5 * b.max(1.0);
                let fa = (special::inv_reg_inc_beta(u, a + ha, b).unwrap() - special::inv_reg_inc_beta(u, a - ha, b).unwrap()) / (2.0 * ha);
                let fb = (special::inv_reg_inc_beta(u, a, b + hb).unwrap() - special::inv_reg_inc_beta(u, a, b - hb).unwrap()) / (2.0 * hb);
                worst = worst.max(rel_err(grad.d_alpha[0], fa)).max(rel_err(grad.d_beta[0], fb));
            }
        }
    }
    // Dirichlet k = 3: Jacobian wrt concentration, alpha0 and alpha_hat
    let mut dir_worst: f64 = 0.0;
    let sample = |c: &[f64], noise: &[f64]| {
        DirichletParams::from_concentration(c.to_vec())
            .unwrap()
            .sample_with_noise(noise)
            .unwrap()
            .gate
            .values()
            .to_vec()
    };
    for &c0 in &shapes {
        for &c1 in &shapes {
            for &c2 in &shapes {
                for (n, &u0) in eps.iter().enumerate() {
                    let noise = [u0, eps[(n + 1) % 3], eps[(n + 2) % 3]];
                    let c = [c0, c1, c2];
                    let p = DirichletParams::from_concentration(c.to_vec()).unwrap();
                    let jac = p.implicit_grad(&noise).unwrap();
                    for j in 0..3 {
                        let h = 1e-5 * c[j].max(1.0);
                        let (mut up, mut down) = (c, c);
                        up[j] += h;
                        down[j] -= h;
                        let (zu, zd) = (sample(&up, &noise), sample(&down, &noise));
                        for i in 0..3 {
                            let fd = (zu[i] - zd[i]) / (2.0 * h);
                            dir_worst = dir_worst.max(rel_err(jac.d_concentration[i][j], fd));
                        }
                    }
                    // the alpha0 / alpha_hat parameterization, via the chain rule
                    let alpha0 = 2.5;
                    let hat: Vec<f64> = c.iter().map(|v| v / alpha0).collect();
                    let q = DirichletParams::new(alpha0, hat.clone()).unwrap();
                    let jq = q.implicit_grad(&noise).unwrap();
                    let h = 1e-6;
                    let zu = q_sample(alpha0 + h, &hat, &noise);
                    let zd = q_sample(alpha0 - h, &hat, &noise);
                    for i in 0..3 {
                        dir_worst = dir_worst.max(rel_err(jq.d_alpha0[i], (zu[i] - zd[i]) / (2.0 * h)));
                    }
                    for j in 0..3 {
                        let (mut up, mut down) = (hat.clone(), hat.clone());
                        up[j] += h;
                        down[j] -= h;
                        let (zu, zd) = (q_sample(alpha0, &up, &noise), q_sample(alpha0, &down, &noise));
                        for i in 0..3 {
                            dir_worst = dir_worst.max(rel_err(jq.d_alpha_hat[i][j], (zu[i] - zd[i]) / (2.0 * h)));
                        }
                    }
                }
            }
        }
    }
    outcome(
        worst <= 1e-3 && dir_worst <= 1e-3 && roundtrip <= 1e-10,
        format!("max rel err beta/gamma {worst:.2e}, dirichlet {dir_worst:.2e}; inverse-cdf roundtrip {roundtrip:.1e}"),
    )
}

fn q_sample(alpha0: f64, hat: &[f64], noise: &[f64]) -> Vec<f64> {
    DirichletParams::new(alpha0, hat.to_vec())
        .unwrap()
        .sample_with_noise(noise)
        .unwrap()
        .gate
        .values()
        .to_vec()
}

// ------------------------------------------------------------ criterion 2

fn oracle_beta_ln_pdf(p: &BetaParams, z: &[f64]) -> f64 {
    z.iter()
        .enumerate()
        .map(|(i, &x)| OracleBeta::new(p.alpha[i], p.beta[i]).unwrap().ln_pdf(x))
        .sum()
}

fn oracle_dirichlet_ln_pdf(c: &[f64], z: &[f64]) -> f64 {
    let total: f64 = c.iter().sum();
    ln_gamma(total) + c.iter().zip(z).map(|(&a, &x)| (a - 1.0) * x.ln() - ln_gamma(a)).sum::<f64>()
}

fn kl_monte_carlo() -> Outcome {
    const N: usize = 100_000;
    const PAIRS: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draw = |rng: &mut ChaCha8Rng| (0..3).map(|_| rng.gen_range(0.5..5.0)).collect::<Vec<f64>>();
    let mut worst_z: f64 = 0.0;
    let mut self_kl: f64 = 0.0;
    for _ in 0..PAIRS {
        let p = BetaParams::new(draw(&mut rng), draw(&mut rng)).unwrap();
        let q = BetaParams::new(draw(&mut rng), draw(&mut rng)).unwrap();
        let closed = p.kl(&q).unwrap();
        self_kl = self_kl.max(p.kl(&p).unwrap().abs());
        let xs: Vec<f64> = (0..N)
            .map(|_| {
                let z: Vec<f64> = (0..3).map(|i| beta_draw(p.alpha[i], p.beta[i], &mut rng)).collect();
                oracle_beta_ln_pdf(&p, &z) - oracle_beta_ln_pdf(&q, &z)
            })
            .collect();
        let (m, se) = mean_and_se(&xs);
        worst_z = worst_z.max((closed - m).abs() / se);
    }
    let mut worst_dir: f64 = 0.0;
    for _ in 0..PAIRS {
        let (c1, c2) = (draw(&mut rng), draw(&mut rng));
        let p = DirichletParams::from_concentration(c1.clone()).unwrap();
        let q = DirichletParams::from_concentration(c2.clone()).unwrap();
        let closed = p.kl(&q).unwrap();
        self_kl = self_kl.max(p.kl(&p).unwrap().abs());
        let xs: Vec<f64> = (0..N)
            .map(|_| {
                let z = dirichlet_draw(&c1, &mut rng);
                oracle_dirichlet_ln_pdf(&c1, &z) - oracle_dirichlet_ln_pdf(&c2, &z)
            })
            .collect();
        let (m, se) = mean_and_se(&xs);
        worst_dir = worst_dir.max((closed - m).abs() / se);
    }
    outcome(
        worst_z <= 3.0 && worst_dir <= 3.0 && self_kl <= 1e-9,
        format!("max |closed - mc| / se: beta {worst_z:.2}, dirichlet {worst_dir:.2}; max |KL(p||p)| {self_kl:.1e}"),
    )
}

// ------------------------------------------------------------ criterion 3

/// Tape gradient vs central differences, worst relative error per group.
fn group_errors<F: Fn(&mut Tape) -> f64, G: Fn(&mut Tape) -> sda_core::autodiff::Var>(
    model: &Model,
    value: F,
    loss: G,
) -> Vec<(ParamGroup, f64, usize)> {
    let mut tape = Tape::new(&model.params);
    let l = loss(&mut tape);
    let grads = tape.backward(l).unwrap();
    let fd = central_differences(&model.params, 1e-6, |store| value(&mut Tape::new(store)));
    let mut out: Vec<(ParamGroup, f64, usize)> = Vec::new();
    for (id, numeric) in model.params.ids().zip(&fd) {
        let group = model.param_group(id).expect("every parameter has a group");
        let analytic = grads.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; numeric.len()]);
        let worst = analytic
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max);
        match out.iter_mut().find(|(g, _, _)| *g == group) {
            Some(entry) => {
                entry.1 = entry.1.max(worst);
                entry.2 += numeric.len();
            }
            None => out.push((group, worst, numeric.len())),
        }
    }
    out
}

fn gradient_check() -> Outcome {
    let seq = toy_seq(&[4, 11, 7, 19, 2, 13, 8, 5]);
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [ModelKind::CsdaBeta, ModelKind::CsdaDirichlet] {
        let model = toy_model(kind, 2, 20, 7);
        let noise = [0.35, 0.8];
        let f = |tape: &mut Tape| model.csda_elbo(tape, &seq, 1, Some(0), 0.7, &noise, None).unwrap().loss;
        let errs = group_errors(&model, |t| { let l = f(t); t.value(l).item() }, f);
        pass &= errs.len() == 3 && errs.iter().all(|(_, e, _)| *e <= 1e-3);
        lines.push(format!("{kind} {}", fmt_groups(&errs)));
    }
    let model = toy_model(ModelKind::Dsda, 2, 20, 7);
    let f = |tape: &mut Tape| model.dsda_loss(tape, &seq, 1, Some(1), None).unwrap();
    let errs = group_errors(&model, |t| { let l = f(t); t.value(l).item() }, f);
    pass &= errs.len() == 2 && errs.iter().all(|(_, e, _)| *e <= 1e-3);
    lines.push(format!("dsda {}", fmt_groups(&errs)));
    outcome(pass, lines.join("; "))
}

fn fmt_groups(errs: &[(ParamGroup, f64, usize)]) -> String {
    errs.iter()
        .map(|(g, e, n)| format!("{g:?} {e:.1e} ({n})"))
        .collect::<Vec<_>>()
        .join(", ")
}

// ------------------------------------------------------------ criterion 4

/// log p(y | x) for the k = 1 Beta toy model by quadrature over z.
fn quadrature_marginal(model: &Model, seq: &TokenSeq, y: usize) -> f64 {
    let GateDistribution::Beta(prior) = prior_distribution(model, seq).unwrap() else { unreachable!() };
    let oracle = OracleBeta::new(prior.alpha[0], prior.beta[0]).unwrap();
    let enc = Encoded::new(model, seq).unwrap();
    tanh_sinh(|z| oracle.pdf(z) * enc.label_log_probs(&[z]).unwrap()[y].exp(), 1e-13)
}

fn elbo_bound() -> Outcome {
    let (model, seq) = toy_beta_k1();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut lines = Vec::new();
    let mut pass = true;
    for y in 0..2 {
        let log_marginal = quadrature_marginal(&model, &seq, y).ln();
        let elbos: Vec<f64> = (0..10_000)
            .map(|_| {
                let noise = [rng.gen_range(1e-12..1.0)];
                let mut tape = Tape::new(&model.params);
                let terms = model.csda_elbo(&mut tape, &seq, y, None, 1.0, &noise, None).unwrap();
                -tape.value(terms.loss).item()
            })
            .collect();
        let (m, se) = mean_and_se(&elbos);
        pass &= m <= log_marginal + 3.0 * se;
        lines.push(format!("y={y}: elbo {m:.4} (se {se:.1e}) vs log p(y|x) {log_marginal:.4}"));
    }
    outcome(pass, lines.join("; "))
}

// ------------------------------------------------------------ criteria 5-7

fn transfer_benefit() -> Outcome {
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..SEEDS {
        let splits = synthetic_splits(&SynthSpec { seed, ..SynthSpec::default() }, true);
        let (_, base) = train_and_test(ModelKind::Scnn, &splits, seed, 0.1);
        let (_, csda) = train_and_test(ModelKind::CsdaDirichlet, &splits, seed, 0.1);
        gaps.push(csda - base);
        detail.push(format!("{base:.3}/{csda:.3}"));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    outcome(
        mean >= 0.02,
        format!("scnn/csda-dirichlet per seed [{}]; mean gain {mean:.4} (threshold 0.02)", detail.join(" ")),
    )
}

fn semi_supervision() -> Outcome {
    let mut without = Vec::new();
    let mut with = Vec::new();
    for seed in 0..SEEDS {
        let spec = SynthSpec {
            seed,
            unlabeled_domain_rate: 0.5,
            ..SynthSpec::default()
        };
        without.push(train_and_test(ModelKind::CsdaDirichlet, &synthetic_splits(&spec, false), seed, 0.1).1);
        with.push(train_and_test(ModelKind::CsdaDirichlet, &synthetic_splits(&spec, true), seed, 0.1).1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&without), mean(&with));
    outcome(
        b > a,
        format!("mean held-out accuracy F only {a:.4}, F+Y {b:.4} over {SEEDS} seeds (per seed {without:.3?} vs {with:.3?})"),
    )
}

fn probe_trend() -> Outcome {
    let mut low = Vec::new();
    let mut high = Vec::new();
    let mut domain_hits = Vec::new();
    let mut domain_n = 0usize;
    let mut chance = 0.0;
    for seed in 0..3 {
        let splits = synthetic_splits(&SynthSpec { seed, ..SynthSpec::default() }, true);
        let (m_low, _) = train_and_test(ModelKind::CsdaDirichlet, &splits, seed, 1e-3);
        let (m_high, _) = train_and_test(ModelKind::CsdaDirichlet, &splits, seed, 1.0);
        low.push(probe_runs(&m_low, &splits.train, ProbeTarget::Label, seed).unwrap().mean);
        high.push(probe_runs(&m_high, &splits.train, ProbeTarget::Label, seed).unwrap().mean);
        let d = probe_runs(&m_low, &splits.train, ProbeTarget::Domain, seed).unwrap();
        chance = d.chance;
        let records = collect(&m_low, &splits.train, seed).unwrap().len();
        let n_test = records - ((records as f64) * PROBE_TRAIN_SHARE).round() as usize;
        domain_n += n_test * PROBE_RUNS;
        domain_hits.extend(d.runs);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (lo, hi, dm) = (mean(&low), mean(&high), mean(&domain_hits));
    // binomial standard error of the pooled held-out probe accuracy under chance
    let se = (chance * (1.0 - chance) / domain_n as f64).sqrt();
    outcome(
        lo > hi && dm > chance + 3.0 * se,
        format!(
            "y-probe lambda=1e-3 {lo:.4} vs lambda=1 {hi:.4} (per seed {low:.3?} vs {high:.3?}); d-probe {dm:.4} vs chance {chance:.3} + 3 se {:.4}",
            3.0 * se
        ),
    )
}

// ------------------------------------------------------------ criterion 8

fn determinism() -> Outcome {
    let spec = SynthSpec {
        instances_per_domain: 40,
        unlabeled_domain_rate: 0.2,
        seed: 3,
        ..SynthSpec::default()
    };
    let synth_a = generate_synthetic(&spec).unwrap().to_jsonl();
    let synth_b = generate_synthetic(&spec).unwrap().to_jsonl();
    let splits = synthetic_splits(&spec, true);
    let cfg = TrainConfig {
        max_epochs: 2,
        learning_rate: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let k = splits.train.domains.len();
        let model = desk_model(ModelKind::CsdaDirichlet, k, k, splits.vocab.len(), 3);
        let out = train(model, &splits.train, &splits.dev, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        sda_core::autodiff::checkpoint::write_params(&out.model.params, std::fs::File::create(dir.path().join("m.ckpt")).unwrap()).unwrap();
        let ckpt = std::fs::read(dir.path().join("m.ckpt")).unwrap();
        let infer = InferConfig {
            strategy: Strategy::McAverage,
            samples: 10,
            seed: 5,
        };
        let preds = serde_json::to_string(&predict_dataset(&out.model, &splits.test, &infer).unwrap()).unwrap();
        (out, ckpt, preds)
    };
    let (a, ckpt_a, preds_a) = run();
    let (b, ckpt_b, preds_b) = run();
    let k = splits.train.domains.len();
    let fresh = desk_model(ModelKind::CsdaDirichlet, k, k, splits.vocab.len(), 3);
    let replayed = replay(fresh, &splits.train, &cfg, &a.log, a.best_step).unwrap();
    let checks = [
        ("gen-synth", synth_a == synth_b),
        ("train log", log_to_jsonl(&a.log) == log_to_jsonl(&b.log)),
        ("checkpoint", ckpt_a == ckpt_b),
        ("predictions", preds_a == preds_b),
        ("replay", replayed.params == a.model.params),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} identical: gen-synth, train log ({} steps), checkpoint, predictions, replay", checks.len(), a.steps)
        } else {
            format!("differs: {}", failed.join(", "))
        },
    )
}

// ------------------------------------------------------------ criterion 9

fn estimator_consistency() -> Outcome {
    let (model, seq) = toy_beta_k1();
    let mut pass = true;
    let mut lines = Vec::new();
    let is = predict(
        &model,
        &seq,
        "toy",
        &InferConfig {
            strategy: Strategy::ImportanceSampling,
            samples: 100_000,
            seed: 1,
        },
    )
    .unwrap();
    let estimates = is.estimates.expect("importance sampling reports p(y|x)");
    for (y, est) in estimates.iter().enumerate() {
        let exact = quadrature_marginal(&model, &seq, y);
        let rel = (est - exact).abs() / exact;
        pass &= rel <= 0.01;
        lines.push(format!("p(y={y}|x) is {est:.5} quad {exact:.5} rel {rel:.1e}"));
    }
    let show = |d: GateDistribution| match d {
        GateDistribution::Beta(b) => format!("Beta({:.2}, {:.2})", b.alpha[0], b.beta[0]),
        other => format!("{other:?}"),
    };
    lines.push(format!(
        "prior {}, q(z|x,y=0) {}, q(z|x,y=1) {}",
        show(prior_distribution(&model, &seq).unwrap()),
        show(posterior_distribution(&model, &seq, Some(0), None).unwrap()),
        show(posterior_distribution(&model, &seq, Some(1), None).unwrap())
    ));
    let mut vars = Vec::new();
    for m in [1usize, 10, 100] {
        let ps: Vec<f64> = (0..30)
            .map(|seed| {
                let cfg = InferConfig {
                    strategy: Strategy::McAverage,
                    samples: m,
                    seed,
                };
                predict(&model, &seq, "toy", &cfg).unwrap().probs[1]
            })
            .collect();
        let (mean, _) = mean_and_se(&ps);
        vars.push(ps.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / 29.0);
    }
    pass &= vars[0] > vars[1] && vars[1] > vars[2];
    lines.push(format!("mc-average variance over 30 seeds m=1/10/100: {:.2e} {:.2e} {:.2e}", vars[0], vars[1], vars[2]));
    outcome(pass, lines.join("; "))
}

// ------------------------------------------------------------ driver

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "implicit-gradient oracle", implicit_gradients),
        (2, "KL oracle", kl_monte_carlo),
        (3, "end-to-end gradient check", gradient_check),
        (4, "ELBO bound", elbo_bound),
        (5, "transfer benefit", transfer_benefit),
        (6, "semi-supervision benefit", semi_supervision),
        (7, "probe trend", probe_trend),
        (8, "determinism", determinism),
        (9, "estimator consistency", estimator_consistency),
    ];
    let only: Option<Vec<usize>> = std::env::var("SDA_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // libtest flags such as --nocapture are accepted and ignored
    let mut failures = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let res = run();
        println!(
            "{} criterion {n} ({name}): {} [{:.1}s]",
            if res.pass { "PASS" } else { "FAIL" },
            res.detail,
            start.elapsed().as_secs_f64()
        );
        failures += usize::from(!res.pass);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
