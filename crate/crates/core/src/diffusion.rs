//! Discrete variance-preserving diffusion with exact Gaussian-mixture scores.
//!
//! Timesteps run `1..=T`; `alpha_bar(0)` is defined as 1. The canonical
//! network-free quantity is the true score `s = grad log p_t`. The
//! noise-prediction form used by the DDPM mean is `eps = -sqrt(1 - alpha_bar) * s`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_normal, Domain, Stream, StreamKey};
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaSchedule {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: BetaSchedule,
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn build(steps: usize, beta_min: f64, beta_max: f64, kind: BetaSchedule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = match kind {
            BetaSchedule::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { kind, beta_min, beta_max, betas, alpha_bars })
    }

    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::build(steps, beta_min, beta_max, BetaSchedule::Linear)
    }

    /// Linear schedule whose endpoints are stretched by `reference_steps / steps`,
    /// so a short chain still ends close to pure noise. `beta_max` is capped at 0.999.
    pub fn linear_rescaled(steps: usize, beta_min: f64, beta_max: f64, reference_steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let factor = reference_steps as f64 / steps as f64;
        let lo = (beta_min * factor).min(0.999);
        let hi = (beta_max * factor).min(0.999);
        Self::linear(steps, lo, hi)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn kind(&self) -> BetaSchedule {
        self.kind
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    /// Coefficients `(a, b)` of the forward-posterior mean `a * x0 + b * x_t`.
    pub fn posterior_mean_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let a = ab_prev.sqrt() * beta / (1.0 - ab);
        let b = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (a, b)
    }
}

pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64, kind: BetaSchedule) -> Result<Schedule> {
    Schedule::build(steps, beta_min, beta_max, kind)
}

/// Symmetric positive semi-definite covariance.
///
/// The full form is stored by its eigendecomposition so every marginal
/// `a * Sigma + b * I` shares the same eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full {
        eigenvalues: Vec<f64>,
        /// Column-major `d x d`; column `j` is the eigenvector for `eigenvalues[j]`.
        eigenvectors: Vec<f64>,
    },
}

impl Covariance {
    pub fn isotropic(d: usize, variance: f64) -> Self {
        Covariance::Diagonal(vec![variance; d])
    }

    /// From a row-major `d x d` symmetric matrix.
    pub fn full(d: usize, matrix: &[f64]) -> Result<Self> {
        if matrix.len() != d * d {
            return Err(Error::mismatch(d * d, matrix.len()));
        }
        let m = DMatrix::from_row_slice(d, d, matrix);
        let asym = (&m - m.transpose()).abs().max();
        if asym > 1e-12 * m.abs().max().max(1.0) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(m);
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        if eigenvalues.iter().any(|&l| !(l >= -1e-12)) {
            return Err(Error::InvalidInput("covariance is not positive semi-definite".into()));
        }
        Ok(Covariance::Full {
            eigenvalues: eigenvalues.into_iter().map(|l| l.max(0.0)).collect(),
            eigenvectors: eig.eigenvectors.as_slice().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full { eigenvalues, .. } => eigenvalues.len(),
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        match self {
            Covariance::Diagonal(v) => v,
            Covariance::Full { eigenvalues, .. } => eigenvalues,
        }
    }

    /// `V f(Lambda) V^T v`.
    pub fn apply_spectral(&self, v: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        match self {
            Covariance::Diagonal(var) => var.iter().zip(v).map(|(&l, &x)| f(l) * x).collect(),
            Covariance::Full { eigenvalues, eigenvectors } => {
                let d = eigenvalues.len();
                let mut coeff = vec![0.0; d];
                for j in 0..d {
                    let col = &eigenvectors[j * d..(j + 1) * d];
                    coeff[j] = f(eigenvalues[j]) * vecops::dot(col, v);
                }
                let mut out = vec![0.0; d];
                for j in 0..d {
                    vecops::axpy(coeff[j], &eigenvectors[j * d..(j + 1) * d], &mut out);
                }
                out
            }
        }
    }

    /// Dense row-major matrix `V f(Lambda) V^T`.
    pub fn dense_spectral(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        match self {
            Covariance::Diagonal(var) => {
                for j in 0..d {
                    out[j * d + j] = f(var[j]);
                }
            }
            Covariance::Full { eigenvalues, eigenvectors } => {
                for (j, &l) in eigenvalues.iter().enumerate() {
                    let fl = f(l);
                    let col = &eigenvectors[j * d..(j + 1) * d];
                    for r in 0..d {
                        let s = fl * col[r];
                        for c in 0..d {
                            out[r * d + c] += s * col[c];
                        }
                    }
                }
            }
        }
        out
    }

    /// Same eigenvectors, eigenvalues mapped through `f`.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> Covariance {
        match self {
            Covariance::Diagonal(var) => Covariance::Diagonal(var.iter().map(|&l| f(l)).collect()),
            Covariance::Full { eigenvalues, eigenvectors } => Covariance::Full {
                eigenvalues: eigenvalues.iter().map(|&l| f(l)).collect(),
                eigenvectors: eigenvectors.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Covariance,
}

/// Gaussian-mixture data prior. Zero-variance directions are allowed, which
/// makes point masses expressible; every marginal at `t >= 1` is still
/// positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    dim: usize,
    components: Vec<Component>,
}

/// Per-evaluation quantities shared by score, Tweedie and Jacobian.
#[derive(Debug, Clone)]
pub struct PosteriorTerms {
    pub log_density: f64,
    pub responsibilities: Vec<f64>,
    /// `-C_k^{-1} (x - sqrt(alpha_bar) mu_k)` per component.
    pub component_scores: Vec<Vec<f64>>,
    /// `E[x0 | x_t, k]` per component.
    pub component_means: Vec<Vec<f64>>,
    pub score: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    alpha_bar: f64,
}

impl GaussianMixturePrior {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidDimension("prior dimension must be at least 1".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim || c.covariance.dim() != dim {
                return Err(Error::mismatch(dim, c.mean.len().min(c.covariance.dim())));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidArgument(format!("weight {} must be positive", c.weight)));
            }
            if !vecops::all_finite(&c.mean) {
                return Err(Error::InvalidInput("component mean is not finite".into()));
            }
            if c.covariance.eigenvalues().iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
                return Err(Error::InvalidInput("covariance must be positive semi-definite".into()));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, components })
    }

    pub fn gaussian(mean: Vec<f64>, covariance: Covariance) -> Result<Self> {
        Self::new(vec![Component { weight: 1.0, mean, covariance }])
    }

    pub fn standard_normal(d: usize) -> Result<Self> {
        Self::gaussian(vec![0.0; d], Covariance::isotropic(d, 1.0))
    }

    pub fn point_mass(mean: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        Self::gaussian(mean, Covariance::isotropic(d, 0.0))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Exact mixture marginal of `x_t`.
    pub fn marginal(&self, schedule: &Schedule, t: usize) -> Result<Vec<Component>> {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar(t);
        let sa = ab.sqrt();
        Ok(self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: vecops::scale(sa, &c.mean),
                covariance: c.covariance.map_eigenvalues(|l| ab * l + (1.0 - ab)),
            })
            .collect())
    }

    pub fn evaluate(&self, schedule: &Schedule, x: &[f64], t: usize) -> Result<PosteriorTerms> {
        schedule.check_t(t)?;
        if x.len() != self.dim {
            return Err(Error::mismatch(self.dim, x.len()));
        }
        if !vecops::all_finite(x) {
            return Err(Error::InvalidInput("state contains non-finite values".into()));
        }
        let ab = schedule.alpha_bar(t);
        let sa = ab.sqrt();
        let noise = 1.0 - ab;
        let d = self.dim as f64;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();

        let n = self.components.len();
        let mut log_w = Vec::with_capacity(n);
        let mut component_scores = Vec::with_capacity(n);
        let mut component_means = Vec::with_capacity(n);
        for c in &self.components {
            let resid: Vec<f64> = x.iter().zip(&c.mean).map(|(xi, mi)| xi - sa * mi).collect();
            let prec_resid = c.covariance.apply_spectral(&resid, |l| 1.0 / (ab * l + noise));
            let maha = vecops::dot(&resid, &prec_resid);
            let log_det: f64 = c.covariance.eigenvalues().iter().map(|&l| (ab * l + noise).ln()).sum();
            log_w.push(c.weight.ln() - 0.5 * (d * ln_2pi + log_det + maha));

            let gain = c.covariance.apply_spectral(&resid, |l| l / (ab * l + noise));
            let mut mean = c.mean.clone();
            vecops::axpy(sa, &gain, &mut mean);
            component_means.push(mean);
            component_scores.push(prec_resid.into_iter().map(|v| -v).collect::<Vec<_>>());
        }

        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + sum.ln();
        let responsibilities: Vec<f64> = log_w.iter().map(|l| (l - log_density).exp()).collect();

        let mut score = vec![0.0; self.dim];
        let mut posterior_mean = vec![0.0; self.dim];
        for k in 0..n {
            vecops::axpy(responsibilities[k], &component_scores[k], &mut score);
            vecops::axpy(responsibilities[k], &component_means[k], &mut posterior_mean);
        }
        Ok(PosteriorTerms {
            log_density,
            responsibilities,
            component_scores,
            component_means,
            score,
            posterior_mean,
            alpha_bar: ab,
        })
    }

    pub fn log_density(&self, schedule: &Schedule, x: &[f64], t: usize) -> Result<f64> {
        Ok(self.evaluate(schedule, x, t)?.log_density)
    }

    pub fn score(&self, schedule: &Schedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(self.evaluate(schedule, x, t)?.score)
    }

    /// `E[x0 | x_t]`, which equals `(x_t + (1 - alpha_bar) * score) / sqrt(alpha_bar)`.
    pub fn tweedie_estimate(&self, schedule: &Schedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(self.evaluate(schedule, x, t)?.posterior_mean)
    }

    /// Dense row-major `d x d` Jacobian of the posterior mean with respect to `x_t`.
    pub fn tweedie_jacobian(&self, schedule: &Schedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let terms = self.evaluate(schedule, x, t)?;
        Ok(self.jacobian_from_terms(&terms))
    }

    pub fn jacobian_from_terms(&self, terms: &PosteriorTerms) -> Vec<f64> {
        let d = self.dim;
        let ab = terms.alpha_bar;
        let sa = ab.sqrt();
        let mut jac = vec![0.0; d * d];
        for (k, c) in self.components.iter().enumerate() {
            let r = terms.responsibilities[k];
            let linear = c.covariance.dense_spectral(|l| sa * l / (ab * l + 1.0 - ab));
            vecops::axpy(r, &linear, &mut jac);
            let dg = vecops::sub(&terms.component_scores[k], &terms.score);
            let mk = &terms.component_means[k];
            for row in 0..d {
                let s = r * mk[row];
                for col in 0..d {
                    jac[row * d + col] += s * dg[col];
                }
            }
        }
        jac
    }

    /// `J^T v` without forming `J`.
    pub fn jacobian_transpose_apply(&self, terms: &PosteriorTerms, v: &[f64]) -> Vec<f64> {
        let ab = terms.alpha_bar;
        let sa = ab.sqrt();
        let mut out = vec![0.0; self.dim];
        for (k, c) in self.components.iter().enumerate() {
            let r = terms.responsibilities[k];
            let linear = c.covariance.apply_spectral(v, |l| sa * l / (ab * l + 1.0 - ab));
            vecops::axpy(r, &linear, &mut out);
            let proj = vecops::dot(&terms.component_means[k], v);
            let dg = vecops::sub(&terms.component_scores[k], &terms.score);
            vecops::axpy(r * proj, &dg, &mut out);
        }
        out
    }

    /// Draw `x0` from the prior.
    pub fn sample(&self, stream: &mut Stream) -> Vec<f64> {
        let u = stream.next_unit();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let c = &self.components[chosen];
        let mut z = vec![0.0; self.dim];
        stream.fill_standard_normal(&mut z);
        let scaled = c.covariance.apply_spectral(&z, f64::sqrt);
        // apply_spectral computes V sqrt(L) V^T z, which has covariance Sigma.
        c.mean.iter().zip(&scaled).map(|(m, s)| m + s).collect()
    }
}

/// `eps = -sqrt(1 - alpha_bar_t) * score`.
pub fn noise_prediction(schedule: &Schedule, t: usize, score: &[f64]) -> Vec<f64> {
    let k = -(1.0 - schedule.alpha_bar(t)).sqrt();
    vecops::scale(k, score)
}

/// DDPM mean `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)`.
pub fn ddpm_mean(schedule: &Schedule, x: &[f64], t: usize, score: &[f64]) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if score.len() != x.len() {
        return Err(Error::mismatch(x.len(), score.len()));
    }
    let eps = noise_prediction(schedule, t, score);
    let coeff = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    Ok(x.iter().zip(&eps).map(|(xi, ei)| inv * (xi - coeff * ei)).collect())
}

/// `mu(x_t, t) + sigma_t * noise`; the last step (`t = 1`) ignores `noise`.
pub fn ddpm_step(schedule: &Schedule, x: &[f64], t: usize, score: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    let mut mean = ddpm_mean(schedule, x, t, score)?;
    if noise.len() != x.len() {
        return Err(Error::mismatch(x.len(), noise.len()));
    }
    if t >= 2 {
        vecops::axpy(schedule.sigma(t), noise, &mut mean);
    }
    Ok(mean)
}

pub fn init_latent(seed: u64, schedule: &Schedule, d: usize) -> Result<Vec<f64>> {
    keyed_normal(StreamKey::new(seed, Domain::InitLatent, schedule.steps() as u32, 0), d)
}

pub fn fresh_noise(seed: u64, t: usize, d: usize) -> Result<Vec<f64>> {
    keyed_normal(StreamKey::new(seed, Domain::FreshNoise, t as u32, 0), d)
}

pub fn unconditional_sample(prior: &GaussianMixturePrior, schedule: &Schedule, seed: u64) -> Result<Vec<f64>> {
    let d = prior.dim();
    let mut x = init_latent(seed, schedule, d)?;
    for t in (1..=schedule.steps()).rev() {
        let score = prior.score(schedule, &x, t)?;
        let noise = if t >= 2 { fresh_noise(seed, t, d)? } else { vec![0.0; d] };
        x = ddpm_step(schedule, &x, t, &score, &noise)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture_1d() -> GaussianMixturePrior {
        GaussianMixturePrior::new(vec![
            Component { weight: 0.3, mean: vec![-2.0], covariance: Covariance::Diagonal(vec![0.5]) },
            Component { weight: 0.7, mean: vec![1.0], covariance: Covariance::Diagonal(vec![2.0]) },
        ])
        .unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = Schedule::linear(1, 0.02, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.98).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn thousand_step_terminal_alpha_bar() {
        // Independent product evaluation: 4.035829765375676e-05.
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1000) - 4.035829765375676e-05).abs() < 1e-12);
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            assert!((s.sigma(t).powi(2) - s.beta(t)).abs() <= 4.0 * f64::EPSILON * s.beta(t));
        }
    }

    #[test]
    fn schedule_bounds_rejected() {
        assert!(Schedule::linear(0, 0.1, 0.2).is_err());
        assert!(Schedule::linear(10, 0.0, 0.2).is_err());
        assert!(Schedule::linear(10, 0.3, 0.2).is_err());
        assert!(Schedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn marginal_of_two_component_mixture() {
        // Pick t so that alpha_bar = 0.25 exactly: one step with beta = 0.75.
        let s = Schedule::linear(1, 0.75, 0.75).unwrap();
        let m = mixture_1d().marginal(&s, 1).unwrap();
        assert!((m[0].mean[0] + 1.0).abs() < 1e-15);
        assert!((m[1].mean[0] - 0.5).abs() < 1e-15);
        assert!((m[0].covariance.eigenvalues()[0] - (0.25 * 0.5 + 0.75)).abs() < 1e-15);
        assert!((m[1].covariance.eigenvalues()[0] - (0.25 * 2.0 + 0.75)).abs() < 1e-15);
    }

    #[test]
    fn standard_normal_is_variance_preserving() {
        let s = Schedule::linear(50, 1e-3, 0.2).unwrap();
        let p = GaussianMixturePrior::standard_normal(3).unwrap();
        for t in 1..=50 {
            let m = p.marginal(&s, t).unwrap();
            for &l in m[0].covariance.eigenvalues() {
                assert!((l - 1.0).abs() < 1e-15);
            }
            let x = [0.3, -1.2, 2.0];
            let score = p.score(&s, &x, t).unwrap();
            for (si, xi) in score.iter().zip(&x) {
                assert!((si + xi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn near_point_mass_score() {
        let s = Schedule::linear(10, 1e-3, 0.05).unwrap();
        let eps = 1e-6;
        let mu = vec![0.5, -1.0];
        let p = GaussianMixturePrior::gaussian(mu.clone(), Covariance::isotropic(2, eps)).unwrap();
        let t = 4;
        let ab = s.alpha_bar(t);
        let x = [1.0, 2.0];
        let score = p.score(&s, &x, t).unwrap();
        for j in 0..2 {
            let expected = -(x[j] - ab.sqrt() * mu[j]) / (1.0 - ab + ab * eps);
            assert!((score[j] - expected).abs() <= 1e-10 * expected.abs());
        }
    }

    #[test]
    fn point_mass_tweedie_and_jacobian() {
        let s = Schedule::linear(20, 1e-3, 0.1).unwrap();
        let p = GaussianMixturePrior::point_mass(vec![1.5, -0.5]).unwrap();
        let x = [3.0, 4.0];
        assert_eq!(p.tweedie_estimate(&s, &x, 7).unwrap(), vec![1.5, -0.5]);
        assert!(p.tweedie_jacobian(&s, &x, 7).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tweedie_equals_score_route() {
        let s = Schedule::linear(100, 1e-4, 0.05).unwrap();
        let p = mixture_1d();
        for &x in &[-3.0, -0.4, 0.0, 1.7, 5.0] {
            for t in [1usize, 10, 60, 100] {
                let ab = s.alpha_bar(t);
                let score = p.score(&s, &[x], t).unwrap()[0];
                let via_score = (x + (1.0 - ab) * score) / ab.sqrt();
                let direct = p.tweedie_estimate(&s, &[x], t).unwrap()[0];
                assert!((via_score - direct).abs() < 1e-9 * (1.0 + direct.abs()), "x={x} t={t}");
            }
        }
    }

    #[test]
    fn tweedie_nearly_identity_without_noise() {
        let s = Schedule::linear(1, 1e-9, 1e-9).unwrap();
        let p = mixture_1d();
        let x = [0.42];
        assert!((p.tweedie_estimate(&s, &x, 1).unwrap()[0] - 0.42).abs() < 1e-6);
    }

    #[test]
    fn non_finite_state_rejected() {
        let s = Schedule::linear(5, 1e-3, 0.1).unwrap();
        let p = mixture_1d();
        assert!(matches!(p.score(&s, &[f64::NAN], 2), Err(Error::InvalidInput(_))));
        assert!(matches!(p.score(&s, &[0.0], 6), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn ddpm_mean_hand_values() {
        let s = Schedule::linear(1, 0.02, 0.02).unwrap();
        let zero = ddpm_mean(&s, &[1.0], 1, &[0.0]).unwrap();
        assert!((zero[0] - 1.0 / 0.98f64.sqrt()).abs() < 1e-15);
        // eps = 1 corresponds to score = -1 / sqrt(1 - alpha_bar).
        let ab = s.alpha_bar(1);
        let score = -1.0 / (1.0 - ab).sqrt();
        let mu = ddpm_mean(&s, &[1.0], 1, &[score]).unwrap();
        let expected = (1.0 - 0.02 / (1.0 - ab).sqrt()) / 0.98f64.sqrt();
        assert!((mu[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn ddpm_mean_matches_forward_posterior_identity() {
        let s = Schedule::linear(30, 1e-3, 0.1).unwrap();
        let p = mixture_1d();
        for t in 2..=30 {
            let x = [0.7 - t as f64 * 0.05];
            let terms = p.evaluate(&s, &x, t).unwrap();
            let mu = ddpm_mean(&s, &x, t, &terms.score).unwrap()[0];
            let (a, b) = s.posterior_mean_coefficients(t);
            let identity = a * terms.posterior_mean[0] + b * x[0];
            assert!((mu - identity).abs() < 1e-10, "t={t}: {mu} vs {identity}");
        }
    }

    #[test]
    fn final_step_ignores_noise() {
        let s = Schedule::linear(4, 1e-3, 0.1).unwrap();
        let a = ddpm_step(&s, &[0.3, 0.1], 1, &[0.2, 0.0], &[5.0, 5.0]).unwrap();
        let b = ddpm_step(&s, &[0.3, 0.1], 1, &[0.2, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(a, b);
        let m = ddpm_mean(&s, &[0.3, 0.1], 3, &[0.2, 0.0]).unwrap();
        assert_eq!(ddpm_step(&s, &[0.3, 0.1], 3, &[0.2, 0.0], &[0.0, 0.0]).unwrap(), m);
        assert!(ddpm_step(&s, &[0.3, 0.1], 3, &[0.2, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn unconditional_sample_is_deterministic() {
        let s = Schedule::linear(50, 1e-3, 0.2).unwrap();
        let p = mixture_1d();
        assert_eq!(unconditional_sample(&p, &s, 9).unwrap(), unconditional_sample(&p, &s, 9).unwrap());
        assert_ne!(unconditional_sample(&p, &s, 9).unwrap(), unconditional_sample(&p, &s, 10).unwrap());
    }

    #[test]
    fn full_covariance_matches_diagonal_when_axis_aligned() {
        let s = Schedule::linear(10, 1e-3, 0.1).unwrap();
        let diag = GaussianMixturePrior::gaussian(vec![0.1, 0.2], Covariance::Diagonal(vec![0.5, 2.0])).unwrap();
        let full =
            GaussianMixturePrior::gaussian(vec![0.1, 0.2], Covariance::full(2, &[0.5, 0.0, 0.0, 2.0]).unwrap())
                .unwrap();
        let x = [0.9, -0.3];
        let a = diag.tweedie_estimate(&s, &x, 5).unwrap();
        let b = full.tweedie_estimate(&s, &x, 5).unwrap();
        for j in 0..2 {
            assert!((a[j] - b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_priors_rejected() {
        assert!(GaussianMixturePrior::new(vec![]).is_err());
        let bad_weights = vec![
            Component { weight: 0.5, mean: vec![0.0], covariance: Covariance::Diagonal(vec![1.0]) },
            Component { weight: 0.6, mean: vec![0.0], covariance: Covariance::Diagonal(vec![1.0]) },
        ];
        assert!(GaussianMixturePrior::new(bad_weights).is_err());
        assert!(Covariance::full(2, &[1.0, 2.0, 0.0, 1.0]).is_err());
        assert!(Covariance::full(2, &[1.0, 2.0, 2.0, 1.0]).is_err());
    }
}
