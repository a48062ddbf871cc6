mod common;

use common::{mean_and_se, toy_model, toy_seq};
use proptest::prelude::*;
use sda_core::inference::{predict, InferConfig, Strategy};
use sda_core::models::{Model, ModelKind};

/// Make the inference network an exact copy of the prior network: the same
/// encoder, output layers that ignore the label and domain embeddings.
fn posterior_equals_prior(model: &mut Model) {
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_owned()).collect();
    for name in names.iter().filter(|n| n.starts_with("phi.")) {
        let src = model.params.get(model.params.id(name).unwrap()).data().to_vec();
        let dst = model.params.id(&name.replacen("phi.", "sigma.", 1)).unwrap();
        let data = model.params.get_mut(dst).data_mut();
        data.fill(0.0);
        data[..src.len()].copy_from_slice(&src);
    }
    for name in ["sigma.label_embedding", "sigma.domain_embedding"] {
        let id = model.params.id(name).unwrap();
        model.params.get_mut(id).data_mut().fill(0.0);
    }
}

fn sharp(kind: ModelKind, k: usize, seed: u64) -> Model {
    let mut m = toy_model(kind, k, 20, seed);
    for name in ["theta.head.hidden.weight", "theta.head.output.weight"] {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 4.0);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mc_average_is_a_distribution(seed in 0u64..1000, m in 1usize..40, ids in prop::collection::vec(1usize..20, 1..12)) {
        for kind in [ModelKind::CsdaBeta, ModelKind::CsdaDirichlet] {
            let model = toy_model(kind, 3, 20, seed);
            let cfg = InferConfig { strategy: Strategy::McAverage, samples: m, seed };
            let p = predict(&model, &toy_seq(&ids), "doc", &cfg).unwrap();
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn importance_sampling_with_prior_proposal_matches_mc_average() {
    let m = 20_000;
    for (kind, seed) in [(ModelKind::CsdaBeta, 31), (ModelKind::CsdaDirichlet, 32)] {
        let mut model = sharp(kind, 3, seed);
        posterior_equals_prior(&mut model);
        let s = toy_seq(&[2, 7, 11, 5, 19, 3]);
        let is = predict(&model, &s, "a", &InferConfig { strategy: Strategy::ImportanceSampling, samples: m, seed: 1 }).unwrap();
        let mc = predict(&model, &s, "b", &InferConfig { strategy: Strategy::McAverage, samples: m, seed: 2 }).unwrap();
        // per-draw spread of p(y = 0 | x, z), from a separate run of single draws
        let singles: Vec<f64> = (0..400)
            .map(|i| {
                let cfg = InferConfig { strategy: Strategy::PriorSample, samples: 1, seed: 3 };
                predict(&model, &s, &format!("s{i}"), &cfg).unwrap().probs[0]
            })
            .collect();
        let sd = mean_and_se(&singles).1 * (singles.len() as f64).sqrt();
        let tol = 5.0 * sd * (2.0 / m as f64).sqrt() + 1e-9;
        let est = is.estimates.as_ref().unwrap();
        // each label gets its own draws, so the sum is one only up to MC error
        assert!((est.iter().sum::<f64>() - 1.0).abs() < 2.0 * tol, "{kind}: estimates {est:?}");
        assert!((is.probs[0] - mc.probs[0]).abs() < tol, "{kind}: {:?} vs {:?} (tol {tol})", is.probs, mc.probs);
    }
}

#[test]
fn prior_sample_depends_on_instance_not_order() {
    let model = toy_model(ModelKind::CsdaDirichlet, 4, 20, 7);
    let cfg = InferConfig::default();
    let seqs = [toy_seq(&[1, 2, 3]), toy_seq(&[4, 5, 6, 7]), toy_seq(&[8, 9])];
    let forward: Vec<_> = seqs.iter().enumerate().map(|(i, s)| predict(&model, s, &i.to_string(), &cfg).unwrap().probs).collect();
    let mut backward: Vec<_> = seqs.iter().enumerate().rev().map(|(i, s)| predict(&model, s, &i.to_string(), &cfg).unwrap().probs).collect();
    backward.reverse();
    assert_eq!(forward, backward);
}
