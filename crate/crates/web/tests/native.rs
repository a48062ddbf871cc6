use sda_web::{beta_curve_native, beta_draw_native, beta_kl_native, dirichlet_draws_native};

#[test]
fn beta_draw_matches_finite_differences() {
    let (a, b, u) = (2.0, 3.0, 0.3);
    let r = beta_draw_native(a, b, u).unwrap();
    assert!(r[0] > 0.0 && r[0] < 1.0 && r[1] > 0.0);
    let h = 1e-6;
    let fd = (beta_draw_native(a + h, b, u).unwrap()[0] - beta_draw_native(a - h, b, u).unwrap()[0]) / (2.0 * h);
    assert!((fd - r[2]).abs() < 1e-6 * fd.abs().max(1.0));
    // a larger alpha moves mass right, a larger beta moves it left
    assert!(r[2] > 0.0 && r[3] < 0.0);
}

#[test]
fn curve_integrates_to_one() {
    let n = 2000;
    let c = beta_curve_native(2.0, 5.0, n).unwrap();
    let integral: f64 = c.iter().sum::<f64>() / (n + 1) as f64;
    assert!((integral - 1.0).abs() < 1e-3, "{integral}");
}

#[test]
fn kl_is_zero_on_the_diagonal_and_positive_off_it() {
    assert!(beta_kl_native(1.5, 2.5, 1.5, 2.5).unwrap().abs() < 1e-12);
    assert!(beta_kl_native(1.5, 2.5, 4.0, 1.0).unwrap() > 0.0);
    assert!(beta_kl_native(-1.0, 2.0, 1.0, 1.0).is_err());
}

#[test]
fn dirichlet_draws_lie_on_the_simplex() {
    let d = dirichlet_draws_native(&[0.5, 1.0, 3.0], 200, 7).unwrap();
    assert_eq!(d.len(), 600);
    for z in d.chunks(3) {
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|&v| v >= 0.0));
    }
    assert_eq!(d, dirichlet_draws_native(&[0.5, 1.0, 3.0], 200, 7).unwrap());
}
