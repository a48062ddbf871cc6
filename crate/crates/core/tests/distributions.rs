use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sda_core::distributions::{BetaParams, DirichletParams, GateDistribution, GateFamily};
use sda_core::special::{
    inv_reg_inc_beta, inv_reg_inc_gamma, reg_inc_beta, reg_inc_beta_param_grad, reg_inc_beta_param_grad_fd,
    reg_inc_gamma, reg_inc_gamma_shape_grad, reg_inc_gamma_shape_grad_fd,
};

fn shape() -> impl Strategy<Value = f64> {
    (-1.2f64..2.5).prop_map(|e| 10f64.powf(e * 0.8))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_cdf_is_monotone_with_fixed_ends(a in shape(), b in shape()) {
        prop_assert_eq!(reg_inc_beta(0.0, a, b).unwrap(), 0.0);
        prop_assert_eq!(reg_inc_beta(1.0, a, b).unwrap(), 1.0);
        let mut prev = 0.0;
        for i in 1..200 {
            let f = reg_inc_beta(i as f64 / 200.0, a, b).unwrap();
            prop_assert!(f >= prev && f <= 1.0);
            prev = f;
        }
    }

    #[test]
    fn gamma_cdf_is_monotone_and_tends_to_one(a in shape()) {
        prop_assert_eq!(reg_inc_gamma(a, 0.0).unwrap(), 0.0);
        let mut prev = 0.0;
        for i in 1..200 {
            let f = reg_inc_gamma(a, i as f64 * a.max(1.0) / 20.0).unwrap();
            prop_assert!(f >= prev && f <= 1.0);
            prev = f;
        }
        prop_assert!(reg_inc_gamma(a, 50.0 * a.max(1.0) + 50.0).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn inverses_round_trip(a in shape(), b in shape(), u in 0.01f64..0.99) {
        let x = inv_reg_inc_beta(u, a, b).unwrap();
        prop_assert!((reg_inc_beta(x, a, b).unwrap() - u).abs() < 1e-9);
        let g = inv_reg_inc_gamma(u, a).unwrap();
        prop_assert!((reg_inc_gamma(a, g).unwrap() - u).abs() < 1e-9);
    }

    #[test]
    fn shape_derivatives_two_routes_agree(a in 0.3f64..20.0, b in 0.3f64..20.0, x in 0.05f64..0.95) {
        let (da, db) = reg_inc_beta_param_grad(x, a, b).unwrap();
        let (fa, fb) = reg_inc_beta_param_grad_fd(x, a, b).unwrap();
        prop_assert!((da - fa).abs() < 1e-5, "{} vs {}", da, fa);
        prop_assert!((db - fb).abs() < 1e-5, "{} vs {}", db, fb);
        let t = x * 3.0 * a;
        let ga = reg_inc_gamma_shape_grad(a, t).unwrap();
        let gf = reg_inc_gamma_shape_grad_fd(a, t).unwrap();
        prop_assert!((ga - gf).abs() < 1e-5, "{} vs {}", ga, gf);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_on_the_diagonal(
        p in prop::collection::vec(shape(), 6),
        q in prop::collection::vec(shape(), 6),
    ) {
        let bp = BetaParams::new(p[..3].to_vec(), p[3..].to_vec()).unwrap();
        let bq = BetaParams::new(q[..3].to_vec(), q[3..].to_vec()).unwrap();
        prop_assert!(bp.kl(&bq).unwrap() >= -1e-12);
        prop_assert!(bp.kl(&bp).unwrap().abs() <= 1e-9);
        let dp = DirichletParams::from_concentration(p[..3].to_vec()).unwrap();
        let dq = DirichletParams::from_concentration(q[..3].to_vec()).unwrap();
        prop_assert!(dp.kl(&dq).unwrap() >= -1e-12);
        prop_assert!(dp.kl(&dp).unwrap().abs() <= 1e-9);
        if p != q {
            prop_assert!(bp.kl(&bq).unwrap() > 0.0);
        }
    }

    #[test]
    fn samples_satisfy_family_invariants(c in prop::collection::vec(shape(), 1..6), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = GateDistribution::Beta(BetaParams::new(c.clone(), c.iter().rev().cloned().collect()).unwrap());
        let s = beta.sample(&mut rng).unwrap();
        prop_assert_eq!(s.gate.family(), GateFamily::Box);
        prop_assert!(s.gate.values().iter().all(|&z| (0.0..=1.0).contains(&z)));
        let dir = GateDistribution::Dirichlet(DirichletParams::from_concentration(c.clone()).unwrap());
        let s = dir.sample(&mut rng).unwrap();
        prop_assert_eq!(s.gate.family(), GateFamily::Simplex);
        prop_assert!((s.gate.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.gate.values().iter().all(|&z| z >= 0.0));
    }

    #[test]
    fn beta_implicit_gradient_matches_inverse_cdf_differences(a in 0.3f64..10.0, b in 0.3f64..10.0, u in 0.05f64..0.95) {
        let p = BetaParams::new(vec![a], vec![b]).unwrap();
        let z = p.sample_with_noise(&[u]).unwrap().gate.values()[0];
        let g = p.implicit_grad(&[z]).unwrap();
        let h = 1e-5 * a.max(1.0);
        let fd = (inv_reg_inc_beta(u, a + h, b).unwrap() - inv_reg_inc_beta(u, a - h, b).unwrap()) / (2.0 * h);
        prop_assert!((g.d_alpha[0] - fd).abs() <= 1e-3 * fd.abs().max(1e-6));
    }
}

#[test]
fn one_dimensional_dirichlet_is_a_point_mass() {
    let d = DirichletParams::new(3.0, vec![0.4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        assert_eq!(d.sample(&mut rng).unwrap().gate.values(), &[1.0]);
    }
}
