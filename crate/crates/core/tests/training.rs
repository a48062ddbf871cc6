mod common;

use std::collections::BTreeMap;

use common::{synthetic_splits, toy_model, Splits};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sda_core::autodiff::{checkpoint, Tape};
use sda_core::data::SynthSpec;
use sda_core::models::{Model, ModelKind};
use sda_core::training::{replay, train, LambdaSchedule, LogRecord, TrainConfig};

fn small_splits() -> Splits {
    let spec = SynthSpec {
        instances_per_domain: 25,
        ..SynthSpec::default()
    };
    synthetic_splits(&spec, false)
}

fn model_for(kind: ModelKind, s: &Splits, seed: u64) -> Model {
    let k = s.train.domains.len();
    let mut cfg = toy_model(kind, k, s.vocab.len(), seed).config;
    cfg.num_domains = k;
    Model::new(cfg, seed).unwrap()
}

fn config(seed: u64, schedule: LambdaSchedule) -> TrainConfig {
    TrainConfig {
        lambda: 0.5,
        schedule,
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 3,
        patience: 100,
        seed,
        ..TrainConfig::default()
    }
}

fn steps(log: &[LogRecord]) -> impl Iterator<Item = (usize, usize, f64, &Vec<usize>)> {
    log.iter().filter_map(|r| match r {
        LogRecord::Step { step, epoch, lambda, batch, .. } => Some((*step, *epoch, *lambda, batch)),
        _ => None,
    })
}

fn bytes(m: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    checkpoint::write_params(&m.params, &mut out).unwrap();
    out
}

#[test]
fn every_epoch_visits_each_example_once() {
    let s = small_splits();
    let out = train(model_for(ModelKind::CsdaBeta, &s, 1), &s.train, &s.dev, &config(1, LambdaSchedule::Fixed)).unwrap();
    let mut per_epoch: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (_, epoch, lambda, batch) in steps(&out.log) {
        assert_eq!(lambda, 0.5);
        per_epoch.entry(epoch).or_default().extend(batch);
    }
    assert_eq!(per_epoch.len(), 3);
    let all: Vec<usize> = (0..s.train.len()).collect();
    let orders: Vec<Vec<usize>> = per_epoch.into_values().collect();
    for order in &orders {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, all);
    }
    assert_ne!(orders[0], orders[1], "epochs reshuffle");
}

#[test]
fn annealed_lambda_is_monotone_and_reaches_target() {
    let s = small_splits();
    let cfg = config(2, LambdaSchedule::LinearAnneal { steps: None });
    let out = train(model_for(ModelKind::CsdaDirichlet, &s, 2), &s.train, &s.dev, &cfg).unwrap();
    let lambdas: Vec<f64> = steps(&out.log).map(|(_, _, l, _)| l).collect();
    assert_eq!(lambdas[0], 0.0);
    assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*lambdas.last().unwrap(), 0.5);
}

#[test]
fn unknown_labels_are_skipped() {
    let mut s = small_splits();
    for (i, ex) in s.train.examples.iter_mut().enumerate() {
        if i % 3 == 0 {
            ex.label = None;
        }
    }
    let model = model_for(ModelKind::CsdaBeta, &s, 3);
    let ex = &s.train.examples[0];
    let mut tape = Tape::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(model.instance_loss(&mut tape, &ex.seq, None, ex.domain, 0.5, &mut rng).unwrap().is_none());

    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 1,
        ..config(3, LambdaSchedule::Fixed)
    };
    let out = train(model, &s.train, &s.dev, &cfg).unwrap();
    let seen: Vec<usize> = steps(&out.log).flat_map(|(_, _, _, b)| b.clone()).collect();
    assert_eq!(seen.len(), s.train.len() - s.train.len().div_ceil(3));
    assert!(seen.iter().all(|i| i % 3 != 0));
}

#[test]
fn replay_reproduces_baselines_and_dsda_bitwise() {
    let s = small_splits();
    for (seed, kind) in [(4, ModelKind::Scnn), (5, ModelKind::Mcnn), (6, ModelKind::Dsda)] {
        let init = model_for(kind, &s, seed);
        let cfg = config(seed, LambdaSchedule::Fixed);
        let out = train(init.clone(), &s.train, &s.dev, &cfg).unwrap();
        let again = replay(init, &s.train, &cfg, &out.log, out.best_step).unwrap();
        assert_eq!(bytes(&again), bytes(&out.model), "{kind}");
    }
}
