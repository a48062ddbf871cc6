//! Beta, Gamma and Dirichlet distributions for the latent gate.
//!
//! Sampling goes through the inverse CDF so that every draw keeps the
//! uniform noise that produced it. Gradients of a sample with respect to
//! the distribution parameters then follow from implicit differentiation
//! of `F(z; params) = u`:
//!
//! ```text
//! dz/dparam = -(dF/dparam) / pdf(z)
//! ```
//!
//! Beta dimensions are sampled independently (the gate is a point in the
//! unit hypercube). Dirichlet draws normalize independent Gamma(c_j, 1)
//! variables, and their gradients are chained through the normalization.

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::special;

const MIN_PDF: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateFamily {
    OneHot,
    /// Every entry in [0, 1].
    Box,
    /// Entries in [0, 1] summing to one.
    Simplex,
}

/// A realized latent gate `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    values: Vec<f64>,
    family: GateFamily,
}

impl GateVector {
    pub fn new(values: Vec<f64>, family: GateFamily) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("gate vector must be non-empty".into()));
        }
        let ok = match family {
            GateFamily::OneHot => {
                values.iter().all(|&v| v == 0.0 || v == 1.0) && values.iter().filter(|&&v| v == 1.0).count() == 1
            }
            GateFamily::Box => values.iter().all(|&v| (0.0..=1.0).contains(&v)),
            GateFamily::Simplex => {
                values.iter().all(|&v| (0.0..=1.0).contains(&v)) && (values.iter().sum::<f64>() - 1.0).abs() <= 1e-10
            }
        };
        if !ok {
            return Err(Error::Invalid(format!("{values:?} violates the {family:?} gate invariant")));
        }
        Ok(Self { values, family })
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::Invalid(format!("one-hot index {index} >= {k}")));
        }
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Self::new(v, GateFamily::OneHot)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn family(&self) -> GateFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A draw together with the uniform noise that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub gate: GateVector,
    pub noise: Vec<f64>,
}

pub fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.sample(Open01)).collect()
}

fn check_params(what: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() || xs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid(format!("{what} must be non-empty, positive and finite: {xs:?}")));
    }
    Ok(())
}

fn check_noise(noise: &[f64], k: usize) -> Result<()> {
    if noise.len() != k || noise.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::Invalid(format!("need {k} noise values in (0, 1), got {noise:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- Gamma

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
}

impl GammaParams {
    pub fn new(shape: f64) -> Result<Self> {
        check_params("gamma shape", &[shape])?;
        Ok(Self { shape })
    }

    pub fn sample_with_noise(&self, u: f64) -> Result<f64> {
        special::inv_reg_inc_gamma(u, self.shape)
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        special::gamma_ln_pdf(x, self.shape)
    }

    pub fn mean(&self) -> f64 {
        self.shape
    }

    /// dz/dshape for a draw `z` (implicit reparameterization).
    pub fn implicit_grad(&self, z: f64) -> Result<f64> {
        let pdf = self.log_pdf(z).exp();
        if !(pdf >= MIN_PDF) {
            return Err(Error::DegenerateSample(format!("gamma({}) density {pdf:e} at z={z:e}", self.shape)));
        }
        Ok(-special::reg_inc_gamma_shape_grad(self.shape, z)? / pdf)
    }
}

// ---------------------------------------------------------------- Beta

/// Independent Beta(alpha_i, beta_i) per gate dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// dz_i/dalpha_i and dz_i/dbeta_i.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaGrad {
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
}

impl BetaParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        check_params("beta alpha", &alpha)?;
        check_params("beta beta", &beta)?;
        if alpha.len() != beta.len() {
            return Err(Error::Invalid(format!("alpha has {} entries, beta {}", alpha.len(), beta.len())));
        }
        Ok(Self { alpha, beta })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Sample> {
        self.sample_with_noise(&uniform_noise(rng, self.dim()))
    }

    pub fn sample_with_noise(&self, noise: &[f64]) -> Result<Sample> {
        check_noise(noise, self.dim())?;
        let z = noise
            .iter()
            .zip(self.alpha.iter().zip(&self.beta))
            .map(|(&u, (&a, &b))| special::inv_reg_inc_beta(u, a, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample {
            gate: GateVector::new(z, GateFamily::Box)?,
            noise: noise.to_vec(),
        })
    }

    /// Joint log-density; `-inf` when any coordinate is outside (0, 1).
    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        if z.len() != self.dim() {
            return f64::NEG_INFINITY;
        }
        z.iter()
            .zip(self.alpha.iter().zip(&self.beta))
            .map(|(&x, (&a, &b))| special::beta_ln_pdf(x, a, b))
            .sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.beta).map(|(a, b)| a / (a + b)).collect()
    }

    /// KL(self || other), summed over dimensions.
    pub fn kl(&self, other: &BetaParams) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Invalid(format!("KL between dimensions {} and {}", self.dim(), other.dim())));
        }
        let mut total = 0.0;
        for i in 0..self.dim() {
            let (a1, b1, a2, b2) = (self.alpha[i], self.beta[i], other.alpha[i], other.beta[i]);
            total += special::ln_beta(a2, b2)? - special::ln_beta(a1, b1)?
                + (a1 - a2) * special::digamma(a1)?
                + (b1 - b2) * special::digamma(b1)?
                + (a2 - a1 + b2 - b1) * special::digamma(a1 + b1)?;
        }
        Ok(total)
    }

    pub fn implicit_grad(&self, z: &[f64]) -> Result<BetaGrad> {
        if z.len() != self.dim() {
            return Err(Error::Invalid(format!("sample has {} entries, expected {}", z.len(), self.dim())));
        }
        let mut d_alpha = Vec::with_capacity(z.len());
        let mut d_beta = Vec::with_capacity(z.len());
        for (i, &x) in z.iter().enumerate() {
            let (a, b) = (self.alpha[i], self.beta[i]);
            let pdf = special::beta_ln_pdf(x, a, b).exp();
            if !(pdf >= MIN_PDF) {
                return Err(Error::DegenerateSample(format!("beta({a}, {b}) density {pdf:e} at z={x:e}")));
            }
            let (da, db) = special::reg_inc_beta_param_grad(x, a, b)?;
            d_alpha.push(-da / pdf);
            d_beta.push(-db / pdf);
        }
        Ok(BetaGrad { d_alpha, d_beta })
    }
}

// ---------------------------------------------------------------- Dirichlet

/// Dirichlet with concentration `alpha0 * alpha_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub alpha0: f64,
    pub alpha_hat: Vec<f64>,
}

/// Derivatives of a Dirichlet draw.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletGrad {
    /// `d_concentration[i][j]` = dz_i / dc_j with c = alpha0 * alpha_hat.
    pub d_concentration: Vec<Vec<f64>>,
    /// dz_i / dalpha0.
    pub d_alpha0: Vec<f64>,
    /// `d_alpha_hat[i][j]` = dz_i / dalpha_hat_j.
    pub d_alpha_hat: Vec<Vec<f64>>,
}

impl DirichletParams {
    pub fn new(alpha0: f64, alpha_hat: Vec<f64>) -> Result<Self> {
        check_params("dirichlet alpha0", &[alpha0])?;
        check_params("dirichlet alpha_hat", &alpha_hat)?;
        Ok(Self { alpha0, alpha_hat })
    }

    /// Build from an effective concentration vector, with alpha0 = 1.
    pub fn from_concentration(c: Vec<f64>) -> Result<Self> {
        Self::new(1.0, c)
    }

    pub fn dim(&self) -> usize {
        self.alpha_hat.len()
    }

    pub fn concentration(&self) -> Vec<f64> {
        self.alpha_hat.iter().map(|a| a * self.alpha0).collect()
    }

    fn gammas(&self, noise: &[f64]) -> Result<Vec<f64>> {
        check_noise(noise, self.dim())?;
        noise
            .iter()
            .zip(self.concentration())
            .map(|(&u, c)| special::inv_reg_inc_gamma(u, c))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Sample> {
        self.sample_with_noise(&uniform_noise(rng, self.dim()))
    }

    pub fn sample_with_noise(&self, noise: &[f64]) -> Result<Sample> {
        let g = self.gammas(noise)?;
        let total: f64 = g.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::DegenerateSample(format!("gamma draws {g:?} do not normalize")));
        }
        let mut z: Vec<f64> = g.iter().map(|v| v / total).collect();
        // renormalize once more so the simplex invariant holds to rounding
        let s: f64 = z.iter().sum();
        z.iter_mut().for_each(|v| *v /= s);
        Ok(Sample {
            gate: GateVector::new(z, GateFamily::Simplex)?,
            noise: noise.to_vec(),
        })
    }

    /// Log-density on the simplex; `-inf` off the simplex interior.
    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        if z.len() != self.dim() || z.iter().any(|&v| !(v > 0.0 && v < 1.0) && self.dim() > 1) {
            return f64::NEG_INFINITY;
        }
        if (z.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return f64::NEG_INFINITY;
        }
        let c = self.concentration();
        if c.len() == 1 {
            // point mass at z = 1
            return 0.0;
        }
        let c0: f64 = c.iter().sum();
        let lg = |x: f64| special::lgamma(x).unwrap_or(f64::NAN);
        lg(c0) - c.iter().map(|&a| lg(a)).sum::<f64>() + c.iter().zip(z).map(|(&a, &x)| (a - 1.0) * x.ln()).sum::<f64>()
    }

    pub fn mean(&self) -> Vec<f64> {
        let c = self.concentration();
        let total: f64 = c.iter().sum();
        c.into_iter().map(|v| v / total).collect()
    }

    /// KL(self || other) between Dirichlets over the same simplex.
    pub fn kl(&self, other: &DirichletParams) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Invalid(format!("KL between dimensions {} and {}", self.dim(), other.dim())));
        }
        let (a, b) = (self.concentration(), other.concentration());
        let (a0, b0) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        let psi_a0 = special::digamma(a0)?;
        let mut total = special::lgamma(a0)? - special::lgamma(b0)?;
        for i in 0..a.len() {
            total += special::lgamma(b[i])? - special::lgamma(a[i])? + (a[i] - b[i]) * (special::digamma(a[i])? - psi_a0);
        }
        Ok(total)
    }

    /// Jacobian of the draw made from `noise` with respect to the
    /// concentration, alpha0 and alpha_hat.
    pub fn implicit_grad(&self, noise: &[f64]) -> Result<DirichletGrad> {
        let g = self.gammas(noise)?;
        let c = self.concentration();
        let total: f64 = g.iter().sum();
        let dg = g
            .iter()
            .zip(&c)
            .map(|(&x, &shape)| GammaParams { shape }.implicit_grad(x))
            .collect::<Result<Vec<_>>>()?;
        let k = self.dim();
        let z: Vec<f64> = g.iter().map(|v| v / total).collect();
        let mut d_conc = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                let delta = if i == j { 1.0 } else { 0.0 };
                d_conc[i][j] = (delta - z[i]) / total * dg[j];
            }
        }
        let d_alpha0 = (0..k)
            .map(|i| (0..k).map(|j| d_conc[i][j] * self.alpha_hat[j]).sum())
            .collect();
        let d_alpha_hat = d_conc
            .iter()
            .map(|row| row.iter().map(|v| v * self.alpha0).collect())
            .collect();
        Ok(DirichletGrad {
            d_concentration: d_conc,
            d_alpha0,
            d_alpha_hat,
        })
    }
}

// ---------------------------------------------------------------- families

/// Parameters of the latent-gate distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum GateDistribution {
    Categorical { logits: Vec<f64> },
    Beta(BetaParams),
    Dirichlet(DirichletParams),
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl GateDistribution {
    pub fn family_name(&self) -> &'static str {
        match self {
            GateDistribution::Categorical { .. } => "categorical",
            GateDistribution::Beta(_) => "beta",
            GateDistribution::Dirichlet(_) => "dirichlet",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GateDistribution::Categorical { logits } => logits.len(),
            GateDistribution::Beta(p) => p.dim(),
            GateDistribution::Dirichlet(p) => p.dim(),
        }
    }

    /// Category probabilities for the categorical family; the mean gate
    /// otherwise.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            GateDistribution::Categorical { logits } => softmax(logits),
            GateDistribution::Beta(p) => p.mean(),
            GateDistribution::Dirichlet(p) => p.mean(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Sample> {
        match self {
            GateDistribution::Categorical { logits } => {
                let u: f64 = rng.sample(Open01);
                let probs = softmax(logits);
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                Ok(Sample {
                    gate: GateVector::one_hot(probs.len(), pick)?,
                    noise: vec![u],
                })
            }
            GateDistribution::Beta(p) => p.sample(rng),
            GateDistribution::Dirichlet(p) => p.sample(rng),
        }
    }

    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        match self {
            GateDistribution::Categorical { logits } => {
                let hot: Vec<usize> = z.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
                if z.len() != logits.len() || hot.len() != 1 {
                    return f64::NEG_INFINITY;
                }
                softmax(logits)[hot[0]].ln()
            }
            GateDistribution::Beta(p) => p.log_pdf(z),
            GateDistribution::Dirichlet(p) => p.log_pdf(z),
        }
    }

    /// Closed-form KL(self || other); both must be the same family.
    pub fn kl(&self, other: &GateDistribution) -> Result<f64> {
        match (self, other) {
            (GateDistribution::Beta(q), GateDistribution::Beta(p)) => q.kl(p),
            (GateDistribution::Dirichlet(q), GateDistribution::Dirichlet(p)) => q.kl(p),
            (GateDistribution::Categorical { logits: q }, GateDistribution::Categorical { logits: p }) => {
                if q.len() != p.len() {
                    return Err(Error::Invalid("categorical KL dimension mismatch".into()));
                }
                let (q, p) = (softmax(q), softmax(p));
                Ok(q.iter().zip(&p).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum())
            }
            _ => Err(Error::FamilyMismatch(self.family_name(), other.family_name())),
        }
    }
}

// ---------------------------------------------------------------- tape ops

/// Beta draw on the tape; gradients reach `alpha` and `beta` through the
/// implicit reparameterization.
pub fn beta_sample_on_tape(tape: &mut Tape, alpha: Var, beta: Var, noise: &[f64]) -> Result<Var> {
    let params = BetaParams::new(tape.value(alpha).data().to_vec(), tape.value(beta).data().to_vec())?;
    let sample = params.sample_with_noise(noise)?;
    let grad = params.implicit_grad(sample.gate.values())?;
    let shape = tape.value(alpha).shape().to_vec();
    let value = Tensor::new(shape, sample.gate.values().to_vec())?;
    tape.elementwise(&[alpha, beta], value, vec![grad.d_alpha, grad.d_beta])
}

/// Independent Gamma(shape_i, 1) draws on the tape.
pub fn gamma_sample_on_tape(tape: &mut Tape, shape: Var, noise: &[f64]) -> Result<Var> {
    let shapes = tape.value(shape).data().to_vec();
    check_noise(noise, shapes.len())?;
    let mut values = Vec::with_capacity(shapes.len());
    let mut partials = Vec::with_capacity(shapes.len());
    for (&u, &s) in noise.iter().zip(&shapes) {
        let p = GammaParams::new(s)?;
        let z = p.sample_with_noise(u)?;
        partials.push(p.implicit_grad(z)?);
        values.push(z);
    }
    let value = Tensor::new(tape.value(shape).shape().to_vec(), values)?;
    tape.elementwise(&[shape], value, vec![partials])
}

/// Dirichlet draw on the tape from an effective concentration vector:
/// Gamma draws normalized by their sum, differentiated by the chain rule.
pub fn dirichlet_sample_on_tape(tape: &mut Tape, concentration: Var, noise: &[f64]) -> Result<Var> {
    let g = gamma_sample_on_tape(tape, concentration, noise)?;
    let total = tape.sum(g)?;
    let inv = tape.recip(total)?;
    tape.scale_by(g, inv)
}

fn ln_beta_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let la = tape.lgamma(a)?;
    let lb = tape.lgamma(b)?;
    let ab = tape.add(a, b)?;
    let lab = tape.lgamma(ab)?;
    let s = tape.add(la, lb)?;
    tape.sub(s, lab)
}

/// KL(Beta(a1, b1) || Beta(a2, b2)) summed over dimensions, on the tape.
pub fn beta_kl_on_tape(tape: &mut Tape, a1: Var, b1: Var, a2: Var, b2: Var) -> Result<Var> {
    let lb2 = ln_beta_on_tape(tape, a2, b2)?;
    let lb1 = ln_beta_on_tape(tape, a1, b1)?;
    let mut acc = tape.sub(lb2, lb1)?;
    let da = tape.sub(a1, a2)?;
    let psi_a1 = tape.digamma(a1)?;
    let t = tape.mul(da, psi_a1)?;
    acc = tape.add(acc, t)?;
    let db = tape.sub(b1, b2)?;
    let psi_b1 = tape.digamma(b1)?;
    let t = tape.mul(db, psi_b1)?;
    acc = tape.add(acc, t)?;
    let s1 = tape.add(a1, b1)?;
    let psi_s1 = tape.digamma(s1)?;
    let s2 = tape.add(a2, b2)?;
    let ds = tape.sub(s2, s1)?;
    let t = tape.mul(ds, psi_s1)?;
    acc = tape.add(acc, t)?;
    tape.sum(acc)
}

/// KL(Dir(c1) || Dir(c2)) on the tape, from effective concentrations.
pub fn dirichlet_kl_on_tape(tape: &mut Tape, c1: Var, c2: Var) -> Result<Var> {
    let a0 = tape.sum(c1)?;
    let b0 = tape.sum(c2)?;
    let lg_a0 = tape.lgamma(a0)?;
    let lg_b0 = tape.lgamma(b0)?;
    let head = tape.sub(lg_a0, lg_b0)?;
    let lg_c1 = tape.lgamma(c1)?;
    let lg_c2 = tape.lgamma(c2)?;
    let lg_diff = tape.sub(lg_c2, lg_c1)?;
    let lg_sum = tape.sum(lg_diff)?;
    let psi_c1 = tape.digamma(c1)?;
    let psi_a0 = tape.digamma(a0)?;
    let ones = tape_ones_like(tape, c1);
    let centered = tape.scale_by(ones, psi_a0)?;
    let psi_diff = tape.sub(psi_c1, centered)?;
    let dc = tape.sub(c1, c2)?;
    let prod = tape.mul(dc, psi_diff)?;
    let tail = tape.sum(prod)?;
    let acc = tape.add(head, lg_sum)?;
    tape.add(acc, tail)
}

fn tape_ones_like(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).len();
    tape.constant(Tensor::new(shape, vec![1.0; n]).expect("shape of an existing tensor"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_vector_invariants() {
        assert!(GateVector::new(vec![0.0, 1.0, 0.0], GateFamily::OneHot).is_ok());
        assert!(GateVector::new(vec![1.0, 1.0], GateFamily::OneHot).is_err());
        assert!(GateVector::new(vec![0.2, 0.9], GateFamily::Box).is_ok());
        assert!(GateVector::new(vec![0.2, 1.1], GateFamily::Box).is_err());
        assert!(GateVector::new(vec![0.25, 0.75], GateFamily::Simplex).is_ok());
        assert!(GateVector::new(vec![0.2, 0.75], GateFamily::Simplex).is_err());
    }

    #[test]
    fn uniform_beta_sample_is_the_noise() {
        let p = BetaParams::new(vec![1.0], vec![1.0]).unwrap();
        let s = p.sample_with_noise(&[0.73]).unwrap();
        assert!((s.gate.values()[0] - 0.73).abs() < 1e-14);
        assert_eq!(s.noise, vec![0.73]);
    }

    #[test]
    fn dirichlet_samples_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DirichletParams::new(2.0, vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        for _ in 0..200 {
            let s = p.sample(&mut rng).unwrap();
            assert!((s.gate.values().iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            assert_eq!(s.gate.family(), GateFamily::Simplex);
        }
    }

    #[test]
    fn beta_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BetaParams::new(vec![2.0], vec![6.0]).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| p.sample(&mut rng).unwrap().gate.values()[0]).sum::<f64>() / n as f64;
        // Var = ab / ((a+b)^2 (a+b+1)) = 12 / 576
        let se = (12.0f64 / 576.0 / n as f64).sqrt();
        assert!((mean - 0.25).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn log_densities() {
        let u = BetaParams::new(vec![1.0], vec![1.0]).unwrap();
        for z in [0.01, 0.4, 0.99] {
            assert!(u.log_pdf(&[z]).abs() < 1e-14);
        }
        assert_eq!(u.log_pdf(&[1.2]), f64::NEG_INFINITY);
        let d = DirichletParams::from_concentration(vec![1.0, 1.0, 1.0]).unwrap();
        assert!((d.log_pdf(&[0.2, 0.3, 0.5]) - 2f64.ln()).abs() < 1e-14);
        assert_eq!(d.log_pdf(&[0.2, 0.3, 0.6]), f64::NEG_INFINITY);
        // quadrature-normalized density of Beta(2, 5) at 0.3
        let b = BetaParams::new(vec![2.0], vec![5.0]).unwrap();
        assert!((b.log_pdf(&[0.3]).exp() - 2.1609).abs() < 1e-12);
    }

    #[test]
    fn means() {
        assert_eq!(BetaParams::new(vec![2.0], vec![2.0]).unwrap().mean(), vec![0.5]);
        assert_eq!(BetaParams::new(vec![2.0], vec![6.0]).unwrap().mean(), vec![0.25]);
        let d = DirichletParams::from_concentration(vec![1.0; 4]).unwrap();
        assert_eq!(d.mean(), vec![0.25; 4]);
    }

    #[test]
    fn kl_values() {
        let q = BetaParams::new(vec![1.0], vec![1.0]).unwrap();
        let p = BetaParams::new(vec![2.0], vec![2.0]).unwrap();
        // quadrature of -ln(6 z (1 - z)) over (0, 1)
        assert!((q.kl(&p).unwrap() - 0.208_240_530_771_945).abs() < 1e-12);
        assert_eq!(p.kl(&p).unwrap(), 0.0);
        let d = DirichletParams::new(3.0, vec![0.2, 0.7]).unwrap();
        assert_eq!(d.kl(&d).unwrap(), 0.0);
        let gq = GateDistribution::Beta(q);
        let gd = GateDistribution::Dirichlet(d);
        assert!(matches!(gq.kl(&gd), Err(Error::FamilyMismatch("beta", "dirichlet"))));
    }

    #[test]
    fn beta_implicit_grad_reference_values() {
        // derivatives of the inverse CDF at 40-digit precision
        let cases = [
            (0.5, 2.0, 2.0, 0.147_715_726_853_315, -0.147_715_726_853_315),
            (0.1, 0.5, 5.0, 0.016_092_951_950_976_8, -0.000_347_912_443_043_156),
            (0.9, 5.0, 0.5, 0.000_347_912_443_043_156, -0.016_092_951_950_976_7),
        ];
        for (u, a, b, want_a, want_b) in cases {
            let p = BetaParams::new(vec![a], vec![b]).unwrap();
            let s = p.sample_with_noise(&[u]).unwrap();
            let g = p.implicit_grad(s.gate.values()).unwrap();
            assert!((g.d_alpha[0] - want_a).abs() < 1e-8 * want_a.abs().max(1.0), "{:?}", g);
            assert!((g.d_beta[0] - want_b).abs() < 1e-8 * want_b.abs().max(1.0), "{:?}", g);
            assert!(g.d_alpha[0] > 0.0 && g.d_beta[0] < 0.0);
        }
        let gp = GammaParams::new(2.0).unwrap();
        let z = gp.sample_with_noise(0.5).unwrap();
        assert!((z - 1.678_346_990_016_660_7).abs() < 1e-12);
        assert!((gp.implicit_grad(z).unwrap() - 0.993_294_893_726_102).abs() < 1e-8);
        let gp = GammaParams::new(0.5).unwrap();
        let z = gp.sample_with_noise(0.1).unwrap();
        assert!((gp.implicit_grad(z).unwrap() - 0.077_489_281_206_631_7).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_jacobian_rows_sum_to_zero() {
        let p = DirichletParams::new(1.5, vec![0.2, 0.6, 0.9]).unwrap();
        let g = p.implicit_grad(&[0.3, 0.6, 0.8]).unwrap();
        for j in 0..3 {
            let col: f64 = (0..3).map(|i| g.d_concentration[i][j]).sum();
            assert!(col.abs() < 1e-12);
        }
    }

    #[test]
    fn tape_kl_matches_closed_form_and_differentiates() {
        let mut store = ParamStore::new();
        let a1 = store.add("a1", Tensor::vector(vec![0.7, 2.0])).unwrap();
        let b1 = store.add("b1", Tensor::vector(vec![1.3, 4.0])).unwrap();
        let a2 = store.add("a2", Tensor::vector(vec![2.5, 0.9])).unwrap();
        let b2 = store.add("b2", Tensor::vector(vec![1.1, 3.0])).unwrap();
        let eval = |s: &ParamStore| -> Result<(f64, Option<crate::autodiff::Gradients>)> {
            let mut t = Tape::new(s);
            let v: Vec<Var> = [a1, b1, a2, b2].iter().map(|&i| t.param(i)).collect();
            let k = beta_kl_on_tape(&mut t, v[0], v[1], v[2], v[3])?;
            Ok((t.value(k).item(), Some(t.backward(k)?)))
        };
        let (value, grads) = eval(&store).unwrap();
        let q = BetaParams::new(vec![0.7, 2.0], vec![1.3, 4.0]).unwrap();
        let p = BetaParams::new(vec![2.5, 0.9], vec![1.1, 3.0]).unwrap();
        assert!((value - q.kl(&p).unwrap()).abs() < 1e-12);
        let fd = finite_difference(&store, 1e-6, |s| Ok(eval(s)?.0)).unwrap();
        let grads = grads.unwrap();
        for (id, want) in store.ids().zip(fd) {
            for (g, w) in grads.get(id).unwrap().data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-6 * w.abs().max(1.0), "{g} vs {w}");
            }
        }

        let mut store = ParamStore::new();
        let c1 = store.add("c1", Tensor::vector(vec![0.5, 1.5, 3.0])).unwrap();
        let c2 = store.add("c2", Tensor::vector(vec![1.0, 0.4, 2.0])).unwrap();
        let eval = |s: &ParamStore| -> Result<(f64, crate::autodiff::Gradients)> {
            let mut t = Tape::new(s);
            let (x, y) = (t.param(c1), t.param(c2));
            let k = dirichlet_kl_on_tape(&mut t, x, y)?;
            Ok((t.value(k).item(), t.backward(k)?))
        };
        let (value, grads) = eval(&store).unwrap();
        let q = DirichletParams::from_concentration(vec![0.5, 1.5, 3.0]).unwrap();
        let p = DirichletParams::from_concentration(vec![1.0, 0.4, 2.0]).unwrap();
        assert!((value - q.kl(&p).unwrap()).abs() < 1e-12);
        let fd = finite_difference(&store, 1e-6, |s| Ok(eval(s)?.0)).unwrap();
        for (id, want) in store.ids().zip(fd) {
            for (g, w) in grads.get(id).unwrap().data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-6 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn tape_dirichlet_sample_gradient_matches_jacobian() {
        let mut store = ParamStore::new();
        let c = store.add("c", Tensor::vector(vec![0.8, 2.0, 1.2])).unwrap();
        let noise = [0.35, 0.6, 0.85];
        let weights = [1.0, -2.0, 0.5];
        let mut t = Tape::new(&store);
        let cv = t.param(c);
        let z = dirichlet_sample_on_tape(&mut t, cv, &noise).unwrap();
        let w = t.constant(Tensor::vector(weights.to_vec()));
        let m = t.mul(z, w).unwrap();
        let l = t.sum(m).unwrap();
        let g = t.backward(l).unwrap();
        let jac = DirichletParams::from_concentration(vec![0.8, 2.0, 1.2])
            .unwrap()
            .implicit_grad(&noise)
            .unwrap();
        for j in 0..3 {
            let want: f64 = (0..3).map(|i| weights[i] * jac.d_concentration[i][j]).sum();
            assert!((g.get(c).unwrap().data()[j] - want).abs() < 1e-12);
        }
    }
}
