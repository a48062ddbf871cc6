//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations: draw a Beta sample with its implicit gradient, compare
//! two Betas by closed-form KL, and draw Dirichlet samples on the
//! 3-simplex. Everything returns flat `Float64Array`s.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sda_core::distributions::{BetaParams, DirichletParams};
use sda_core::special;
use wasm_bindgen::prelude::*;

fn js(e: sda_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[z, density, dz/dalpha, dz/dbeta]` for the draw from noise `u`.
pub fn beta_draw_native(alpha: f64, beta: f64, u: f64) -> sda_core::Result<Vec<f64>> {
    let p = BetaParams::new(vec![alpha], vec![beta])?;
    let z = p.sample_with_noise(&[u])?.gate.values()[0];
    let g = p.implicit_grad(&[z])?;
    Ok(vec![z, p.log_pdf(&[z]).exp(), g.d_alpha[0], g.d_beta[0]])
}

/// Density on `points` evenly spaced interior abscissae.
pub fn beta_curve_native(alpha: f64, beta: f64, points: usize) -> sda_core::Result<Vec<f64>> {
    BetaParams::new(vec![alpha], vec![beta])?;
    Ok((1..=points)
        .map(|i| special::beta_ln_pdf(i as f64 / (points + 1) as f64, alpha, beta).exp())
        .collect())
}

pub fn beta_kl_native(a1: f64, b1: f64, a2: f64, b2: f64) -> sda_core::Result<f64> {
    BetaParams::new(vec![a1], vec![b1])?.kl(&BetaParams::new(vec![a2], vec![b2])?)
}

/// `n` draws flattened as `[z0, z1, z2, z0, ...]`.
pub fn dirichlet_draws_native(concentration: &[f64], n: usize, seed: u64) -> sda_core::Result<Vec<f64>> {
    let p = DirichletParams::from_concentration(concentration.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * p.dim());
    for _ in 0..n {
        out.extend_from_slice(p.sample(&mut rng)?.gate.values());
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn beta_draw(alpha: f64, beta: f64, u: f64) -> Result<Vec<f64>, JsError> {
    beta_draw_native(alpha, beta, u).map_err(js)
}

#[wasm_bindgen]
pub fn beta_curve(alpha: f64, beta: f64, points: usize) -> Result<Vec<f64>, JsError> {
    beta_curve_native(alpha, beta, points).map_err(js)
}

#[wasm_bindgen]
pub fn beta_kl(a1: f64, b1: f64, a2: f64, b2: f64) -> Result<f64, JsError> {
    beta_kl_native(a1, b1, a2, b2).map_err(js)
}

#[wasm_bindgen]
pub fn dirichlet_draws(concentration: Vec<f64>, n: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    dirichlet_draws_native(&concentration, n, seed).map_err(js)
}
