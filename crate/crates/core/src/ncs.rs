//! Noise combination sampling.
//!
//! The measurement guidance of every NCS solver enters the reverse chain
//! only through the noise term: each step is `ddpm_step(x_t, score, eps*)`
//! with `eps* = E_t gamma*`, and the DDPM mean is never modified.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddpm_step, fresh_noise, init_latent, GaussianMixturePrior, Schedule};
use crate::error::{Error, Result};
use crate::inverse::{dps_direction_from_terms, ddcm_direction, mpgd_direction, MeasurementDirection, Observation};
use crate::rng::{Codebook, NoiseCodebook};
use crate::vecops;

/// Relative tolerance on `||c^T E||` below which a direction is degenerate.
pub const DEGENERATE_TOLERANCE: f64 = 1e-12;

/// Unit-norm weights over all `K` atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationWeights(Vec<f64>);

impl CombinationWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `m` atoms in descending order of their inner products with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TopMSelection {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Inner products of the selected atoms, same order as `indices`.
    pub inner: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SignRule {
    /// Rank by signed inner product, clamp negative weights to zero.
    #[default]
    NonNegative,
    /// Rank by magnitude and flip atoms with negative inner products.
    AlignSigns,
}

fn is_degenerate(v: &[f64], c_norm: f64, k: usize, d: usize) -> bool {
    let v_norm = vecops::norm(v);
    c_norm == 0.0 || v_norm == 0.0 || v_norm <= DEGENERATE_TOLERANCE * ((k * d) as f64).sqrt() * c_norm
}

/// `gamma* = c^T E / ||c^T E||` from precomputed inner products.
pub fn optimal_weights_from_inner(inner: &[f64], c_norm: f64, d: usize) -> Result<CombinationWeights> {
    if is_degenerate(inner, c_norm, inner.len(), d) {
        return Err(Error::Degenerate);
    }
    let n = vecops::norm(inner);
    Ok(CombinationWeights(inner.iter().map(|v| v / n).collect()))
}

pub fn optimal_weights(c: &[f64], codebook: &impl Codebook) -> Result<CombinationWeights> {
    let inner = codebook.inner_products(c)?;
    optimal_weights_from_inner(&inner, vecops::norm(c), codebook.dim())
}

/// Indices of the `m` largest values, descending; ties keep the smaller index first.
pub fn top_m_indices(values: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if m < order.len() {
        order.select_nth_unstable_by(m, cmp);
        order.truncate(m);
    }
    order.sort_by(cmp);
    order
}

pub fn top_m_from_inner(inner: &[f64], m: usize, rule: SignRule, c_norm: f64, d: usize) -> Result<TopMSelection> {
    if m == 0 || m > inner.len() {
        return Err(Error::InvalidArgument(format!("need 1 <= m <= {}, got {m}", inner.len())));
    }
    if c_norm == 0.0 {
        return Err(Error::Degenerate);
    }
    match rule {
        // A single atom is the one-hot argmax regardless of the sign of its inner product.
        SignRule::NonNegative if m == 1 => {
            if is_degenerate(inner, c_norm, inner.len(), d) {
                return Err(Error::Degenerate);
            }
            let best = top_m_indices(inner, 1)[0];
            Ok(TopMSelection { indices: vec![best], weights: vec![1.0], inner: vec![inner[best]] })
        }
        SignRule::NonNegative => {
            let indices = top_m_indices(inner, m);
            let selected: Vec<f64> = indices.iter().map(|&i| inner[i]).collect();
            let clipped: Vec<f64> = selected.iter().map(|&b| b.max(0.0)).collect();
            if is_degenerate(&clipped, c_norm, inner.len(), d) {
                return Err(Error::Degenerate);
            }
            let n = vecops::norm(&clipped);
            Ok(TopMSelection { indices, weights: clipped.iter().map(|b| b / n).collect(), inner: selected })
        }
        SignRule::AlignSigns => {
            let magnitude: Vec<f64> = inner.iter().map(|b| b.abs()).collect();
            let indices = top_m_indices(&magnitude, m);
            let selected: Vec<f64> = indices.iter().map(|&i| inner[i]).collect();
            if is_degenerate(&selected, c_norm, inner.len(), d) {
                return Err(Error::Degenerate);
            }
            let n = vecops::norm(&selected);
            Ok(TopMSelection { indices, weights: selected.iter().map(|b| b / n).collect(), inner: selected })
        }
    }
}

pub fn top_m_weights(c: &[f64], codebook: &impl Codebook, m: usize) -> Result<TopMSelection> {
    let inner = codebook.inner_products(c)?;
    top_m_from_inner(&inner, m, SignRule::NonNegative, vecops::norm(c), codebook.dim())
}

pub fn synthesize_noise(codebook: &impl Codebook, weights: &CombinationWeights) -> Result<Vec<f64>> {
    codebook.combine(weights.as_slice())
}

pub fn synthesize_selection(codebook: &impl Codebook, selection: &TopMSelection) -> Result<Vec<f64>> {
    codebook.combine_indexed(&selection.indices, &selection.weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "DPS")]
    Dps,
    #[serde(rename = "NCS-DPS")]
    NcsDps,
    #[serde(rename = "MPGD")]
    Mpgd,
    #[serde(rename = "NCS-MPGD")]
    NcsMpgd,
    #[serde(rename = "DDCM")]
    Ddcm,
    #[serde(rename = "NCS-DDCM")]
    NcsDdcm,
}

impl SolverKind {
    pub const ALL: [SolverKind; 6] = [
        SolverKind::Dps,
        SolverKind::NcsDps,
        SolverKind::Mpgd,
        SolverKind::NcsMpgd,
        SolverKind::Ddcm,
        SolverKind::NcsDdcm,
    ];

    pub fn is_ncs(self) -> bool {
        matches!(self, SolverKind::NcsDps | SolverKind::NcsMpgd | SolverKind::NcsDdcm)
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dps => "DPS",
            SolverKind::NcsDps => "NCS-DPS",
            SolverKind::Mpgd => "MPGD",
            SolverKind::NcsMpgd => "NCS-MPGD",
            SolverKind::Ddcm => "DDCM",
            SolverKind::NcsDdcm => "NCS-DDCM",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown solver {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Fallback {
    #[default]
    FreshNoise,
    FirstAtom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub solver: SolverKind,
    /// Atoms per codebook.
    pub k: usize,
    /// Restricted support for NCS-DDCM; `None` uses all `K` atoms.
    pub m: Option<usize>,
    pub seed: u64,
    /// DPS step scale; the per-step size is `zeta / ||y - A x0_hat||`.
    pub zeta: f64,
    /// MPGD step size; the per-step size is `lambda * sqrt(alpha_bar_t)`.
    pub lambda: f64,
    pub fallback: Fallback,
}

impl SolverConfig {
    pub fn new(solver: SolverKind, seed: u64) -> Self {
        Self { solver, k: 64, m: None, seed, zeta: 1.0, lambda: 0.1, fallback: Fallback::FreshNoise }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if let Some(m) = self.m {
            if m == 0 || m > self.k {
                return Err(Error::InvalidArgument(format!("need 1 <= m <= K, got m = {m}")));
            }
        }
        if !(self.zeta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument("step sizes must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub x0: Vec<f64>,
    /// Steps where the direction was degenerate and the fallback noise was used.
    pub degenerate_steps: usize,
}

fn check_inputs(prior: &GaussianMixturePrior, obs: &Observation, config: &SolverConfig) -> Result<()> {
    config.validate()?;
    if obs.operator.input_dim() != prior.dim() {
        return Err(Error::mismatch(prior.dim(), obs.operator.input_dim()));
    }
    Ok(())
}

fn fallback_noise(config: &SolverConfig, codebook: &NoiseCodebook, t: usize, d: usize) -> Result<Vec<f64>> {
    match config.fallback {
        Fallback::FreshNoise => fresh_noise(config.seed, t, d),
        Fallback::FirstAtom => Ok(codebook.atom(0).to_vec()),
    }
}

/// NCS reverse chain for the NCS-DPS, NCS-MPGD and NCS-DDCM variants.
pub fn ncs_solve(
    prior: &GaussianMixturePrior,
    schedule: &Schedule,
    obs: &Observation,
    config: &SolverConfig,
) -> Result<SolveOutcome> {
    check_inputs(prior, obs, config)?;
    if !config.solver.is_ncs() {
        return Err(Error::InvalidArgument(format!("{} is not an NCS solver", config.solver)));
    }
    let d = prior.dim();
    let mut x = init_latent(config.seed, schedule, d)?;
    let mut degenerate_steps = 0;
    for t in (1..=schedule.steps()).rev() {
        let terms = prior.evaluate(schedule, &x, t)?;
        if t == 1 {
            x = ddpm_step(schedule, &x, t, &terms.score, &vec![0.0; d])?;
            break;
        }
        let direction: MeasurementDirection = match config.solver {
            SolverKind::NcsDps => dps_direction_from_terms(prior, &terms, obs)?,
            SolverKind::NcsMpgd => mpgd_direction(obs, &terms.posterior_mean)?,
            _ => ddcm_direction(obs, &terms.posterior_mean)?,
        };
        let codebook = NoiseCodebook::build(config.seed, t as u32, config.k, d)?;
        let inner = codebook.inner_products(&direction.c)?;
        let c_norm = vecops::norm(&direction.c);
        let noise = match (config.solver, config.m) {
            (SolverKind::NcsDdcm, Some(m)) => top_m_from_inner(&inner, m, SignRule::NonNegative, c_norm, d)
                .and_then(|sel| synthesize_selection(&codebook, &sel)),
            _ => optimal_weights_from_inner(&inner, c_norm, d).and_then(|w| synthesize_noise(&codebook, &w)),
        };
        let noise = match noise {
            Ok(n) => n,
            Err(Error::Degenerate) => {
                degenerate_steps += 1;
                fallback_noise(config, &codebook, t, d)?
            }
            Err(e) => return Err(e),
        };
        x = ddpm_step(schedule, &x, t, &terms.score, &noise)?;
    }
    Ok(SolveOutcome { x0: x, degenerate_steps })
}

/// DPS, MPGD and DDCM reference solvers.
pub fn baseline_solve(
    prior: &GaussianMixturePrior,
    schedule: &Schedule,
    obs: &Observation,
    config: &SolverConfig,
) -> Result<SolveOutcome> {
    check_inputs(prior, obs, config)?;
    if config.solver.is_ncs() {
        return Err(Error::InvalidArgument(format!("{} is not a baseline solver", config.solver)));
    }
    let d = prior.dim();
    let mut x = init_latent(config.seed, schedule, d)?;
    let mut degenerate_steps = 0;
    for t in (1..=schedule.steps()).rev() {
        let terms = prior.evaluate(schedule, &x, t)?;
        x = match config.solver {
            SolverKind::Dps => {
                let noise = if t >= 2 { fresh_noise(config.seed, t, d)? } else { vec![0.0; d] };
                let mut next = ddpm_step(schedule, &x, t, &terms.score, &noise)?;
                let resid = obs.residual(&terms.posterior_mean)?;
                let resid_norm = vecops::norm(&resid);
                if config.zeta > 0.0 && resid_norm > 0.0 {
                    // grad ||y - A x0_hat||^2 = -2 J^T A^T (y - A x0_hat)
                    let back = obs.operator.adjoint(&resid)?;
                    let grad = prior.jacobian_transpose_apply(&terms, &back);
                    vecops::axpy(2.0 * config.zeta / resid_norm, &grad, &mut next);
                }
                next
            }
            SolverKind::Mpgd => {
                let noise = if t >= 2 { fresh_noise(config.seed, t, d)? } else { vec![0.0; d] };
                let step = config.lambda * schedule.alpha_bar(t).sqrt();
                if step > 0.0 {
                    // x0_hat <- x0_hat - step * grad ||y - A x0_hat||^2, then fold the
                    // corrected estimate back through the forward-posterior mean.
                    let mut x0 = terms.posterior_mean.clone();
                    let back = obs.operator.adjoint(&obs.residual(&x0)?)?;
                    vecops::axpy(2.0 * step, &back, &mut x0);
                    let (a, b) = schedule.posterior_mean_coefficients(t);
                    let mut next: Vec<f64> = x0.iter().zip(&x).map(|(x0i, xi)| a * x0i + b * xi).collect();
                    if t >= 2 {
                        vecops::axpy(schedule.sigma(t), &noise, &mut next);
                    }
                    next
                } else {
                    ddpm_step(schedule, &x, t, &terms.score, &noise)?
                }
            }
            _ => {
                if t >= 2 {
                    let codebook = NoiseCodebook::build(config.seed, t as u32, config.k, d)?;
                    let c = ddcm_direction(obs, &terms.posterior_mean)?.c;
                    if c.iter().all(|&v| v == 0.0) {
                        degenerate_steps += 1;
                    }
                    let inner = codebook.inner_products(&c)?;
                    let best = top_m_indices(&inner, 1)[0];
                    ddpm_step(schedule, &x, t, &terms.score, codebook.atom(best))?
                } else {
                    ddpm_step(schedule, &x, t, &terms.score, &vec![0.0; d])?
                }
            }
        };
    }
    Ok(SolveOutcome { x0: x, degenerate_steps })
}

pub fn solve(
    prior: &GaussianMixturePrior,
    schedule: &Schedule,
    obs: &Observation,
    config: &SolverConfig,
) -> Result<SolveOutcome> {
    if config.solver.is_ncs() {
        ncs_solve(prior, schedule, obs, config)
    } else {
        baseline_solve(prior, schedule, obs, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::unconditional_sample;
    use crate::inverse::LinearOperator;

    /// Codebook with orthogonal atoms, for hand-checkable inner products.
    struct Fixed {
        atoms: Vec<Vec<f64>>,
    }

    impl Codebook for Fixed {
        fn len(&self) -> usize {
            self.atoms.len()
        }
        fn dim(&self) -> usize {
            self.atoms[0].len()
        }
        fn inner_products(&self, c: &[f64]) -> Result<Vec<f64>> {
            Ok(self.atoms.iter().map(|a| vecops::dot(a, c)).collect())
        }
        fn combine_indexed(&self, indices: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
            let mut out = vec![0.0; self.dim()];
            for (&i, &w) in indices.iter().zip(weights) {
                vecops::axpy(w, &self.atoms[i], &mut out);
            }
            Ok(out)
        }
    }

    #[test]
    fn single_positive_atom_gets_unit_weight() {
        let cb = NoiseCodebook::build(1, 1, 1, 8).unwrap();
        let c = cb.atom(0).to_vec();
        assert_eq!(optimal_weights(&c, &cb).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn weights_normalize_inner_products() {
        let cb = Fixed { atoms: vec![vec![1.0, 0.0], vec![0.0, 1.0]] };
        let w = optimal_weights(&[3.0, 4.0], &cb).unwrap();
        assert_eq!(w.as_slice(), &[0.6, 0.8]);
        assert!(matches!(optimal_weights(&[0.0, 0.0], &cb), Err(Error::Degenerate)));
    }

    #[test]
    fn scale_invariance() {
        let cb = NoiseCodebook::build(2, 3, 10, 16).unwrap();
        let c: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let a = optimal_weights(&c, &cb).unwrap();
        let b = optimal_weights(&vecops::scale(4.0, &c), &cb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_m_hand_example() {
        let atoms = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let cb = Fixed { atoms };
        let sel = top_m_weights(&[3.0, 5.0, -2.0, 1.0], &cb, 2).unwrap();
        assert_eq!(sel.indices, vec![1, 0]);
        let n = 34f64.sqrt();
        assert_eq!(sel.weights, vec![5.0 / n, 3.0 / n]);
        let one = top_m_weights(&[3.0, 5.0, -2.0, 1.0], &cb, 1).unwrap();
        assert_eq!((one.indices, one.weights), (vec![1], vec![1.0]));
        assert!(matches!(top_m_weights(&[-1.0, -1.0, -2.0, -3.0], &cb, 2), Err(Error::Degenerate)));
        assert!(top_m_weights(&[1.0, 1.0, 1.0, 1.0], &cb, 5).is_err());
    }

    #[test]
    fn align_signs_ranks_by_magnitude() {
        let sel = top_m_from_inner(&[3.0, 5.0, -6.0, 1.0], 2, SignRule::AlignSigns, 1.0, 4).unwrap();
        assert_eq!(sel.indices, vec![2, 1]);
        assert!(sel.weights[0] < 0.0);
    }

    #[test]
    fn top_m_full_support_equals_optimal() {
        let cb = NoiseCodebook::build(5, 1, 6, 8).unwrap();
        // Pick c inside the positive cone of the atoms so every b_i > 0.
        let mut c = vec![0.0; 8];
        for a in cb.atoms() {
            vecops::axpy(1.0, a, &mut c);
        }
        let inner = cb.inner_products(&c).unwrap();
        if inner.iter().all(|&b| b > 0.0) {
            let sel = top_m_weights(&c, &cb, 6).unwrap();
            let full = optimal_weights(&c, &cb).unwrap();
            for (pos, &i) in sel.indices.iter().enumerate() {
                assert!((sel.weights[pos] - full.as_slice()[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unit_vector_weight_picks_atom() {
        let cb = NoiseCodebook::build(8, 2, 3, 5).unwrap();
        let w = CombinationWeights(vec![1.0, 0.0, 0.0]);
        assert_eq!(synthesize_noise(&cb, &w).unwrap(), cb.atom(0));
    }

    #[test]
    fn top_m_indices_ties() {
        assert_eq!(top_m_indices(&[1.0, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_m_indices(&[1.0, 2.0, 2.0, 0.5], 4), vec![1, 2, 0, 3]);
    }

    #[test]
    fn consistent_observation_reduces_to_ddpm() {
        let s = Schedule::linear(30, 1e-3, 0.2).unwrap();
        let mu = vec![0.5, -0.25];
        let prior = GaussianMixturePrior::point_mass(mu.clone()).unwrap();
        let obs = Observation::new(mu, LinearOperator::identity(2), 0.0).unwrap();
        for solver in [SolverKind::NcsMpgd, SolverKind::NcsDps, SolverKind::NcsDdcm] {
            let cfg = SolverConfig::new(solver, 4);
            let out = ncs_solve(&prior, &s, &obs, &cfg).unwrap();
            let plain = unconditional_sample(&prior, &s, 4).unwrap();
            assert_eq!(out.x0, plain, "{solver}");
            assert_eq!(out.degenerate_steps, 29);
        }
    }

    #[test]
    fn zero_step_baselines_are_unconditional() {
        let s = Schedule::linear(25, 1e-3, 0.2).unwrap();
        let prior = GaussianMixturePrior::standard_normal(3).unwrap();
        let obs = Observation::new(vec![1.0], LinearOperator::mask(3, vec![0]).unwrap(), 0.05).unwrap();
        let plain = unconditional_sample(&prior, &s, 11).unwrap();
        let mut cfg = SolverConfig::new(SolverKind::Dps, 11);
        cfg.zeta = 0.0;
        assert_eq!(baseline_solve(&prior, &s, &obs, &cfg).unwrap().x0, plain);
        cfg.solver = SolverKind::Mpgd;
        cfg.lambda = 0.0;
        assert_eq!(baseline_solve(&prior, &s, &obs, &cfg).unwrap().x0, plain);
    }

    #[test]
    fn single_atom_ddcm_uses_codebook_noise() {
        let s = Schedule::linear(25, 1e-3, 0.2).unwrap();
        let prior = GaussianMixturePrior::standard_normal(3).unwrap();
        let obs = Observation::new(vec![1.0], LinearOperator::mask(3, vec![0]).unwrap(), 0.05).unwrap();
        let mut cfg = SolverConfig::new(SolverKind::Ddcm, 2);
        cfg.k = 1;
        let out = baseline_solve(&prior, &s, &obs, &cfg).unwrap();

        let mut x = init_latent(2, &s, 3).unwrap();
        for t in (1..=25).rev() {
            let score = prior.score(&s, &x, t).unwrap();
            let noise = if t >= 2 { NoiseCodebook::build(2, t as u32, 1, 3).unwrap().atom(0).to_vec() } else { vec![0.0; 3] };
            x = ddpm_step(&s, &x, t, &score, &noise).unwrap();
        }
        assert_eq!(out.x0, x);
    }

    #[test]
    fn solvers_are_deterministic_and_typed() {
        let s = Schedule::linear(20, 5e-3, 0.3).unwrap();
        let prior = GaussianMixturePrior::standard_normal(4).unwrap();
        let obs = Observation::new(vec![1.0, -1.0], LinearOperator::mask(4, vec![0, 2]).unwrap(), 0.05).unwrap();
        for kind in SolverKind::ALL {
            let mut cfg = SolverConfig::new(kind, 3);
            cfg.k = 8;
            let a = solve(&prior, &s, &obs, &cfg).unwrap();
            let b = solve(&prior, &s, &obs, &cfg).unwrap();
            assert_eq!(a, b, "{kind}");
        }
        let cfg = SolverConfig::new(SolverKind::Dps, 0);
        assert!(ncs_solve(&prior, &s, &obs, &cfg).is_err());
        let cfg = SolverConfig::new(SolverKind::NcsDps, 0);
        assert!(baseline_solve(&prior, &s, &obs, &cfg).is_err());
    }

    #[test]
    fn solver_names_round_trip() {
        for kind in SolverKind::ALL {
            assert_eq!(kind.name().parse::<SolverKind>().unwrap(), kind);
        }
        assert!("ALD".parse::<SolverKind>().is_err());
    }
}
