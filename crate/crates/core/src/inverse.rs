//! Linear degradation operators and the measurement-score directions fed to
//! noise combination.

use serde::{Deserialize, Serialize};

use crate::diffusion::{GaussianMixturePrior, PosteriorTerms, Schedule};
use crate::error::{Error, Result};
use crate::rng::{keyed_normal, StreamKey};
use crate::vecops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinearOperator {
    Identity { dim: usize },
    /// Keeps the listed coordinates, in the listed order.
    Mask { dim: usize, indices: Vec<usize> },
    /// Averages consecutive blocks of `factor` coordinates.
    Downsample { dim: usize, factor: usize },
    /// Circular convolution; taps are normalized to sum to one and centered
    /// at `taps.len() / 2`.
    CircularBlur { dim: usize, taps: Vec<f64> },
}

impl LinearOperator {
    pub fn identity(dim: usize) -> Self {
        LinearOperator::Identity { dim }
    }

    pub fn mask(dim: usize, indices: Vec<usize>) -> Result<Self> {
        let op = LinearOperator::Mask { dim, indices };
        op.validate()?;
        Ok(op)
    }

    pub fn downsample(dim: usize, factor: usize) -> Result<Self> {
        let op = LinearOperator::Downsample { dim, factor };
        op.validate()?;
        Ok(op)
    }

    pub fn circular_blur(dim: usize, taps: Vec<f64>) -> Result<Self> {
        let sum: f64 = taps.iter().sum();
        if taps.is_empty() || !sum.is_finite() || sum == 0.0 {
            return Err(Error::InvalidArgument("blur kernel must have a nonzero finite sum".into()));
        }
        let op = LinearOperator::CircularBlur { dim, taps: taps.iter().map(|t| t / sum).collect() };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(Error::InvalidDimension("operator input dimension must be at least 1".into()));
        }
        match self {
            LinearOperator::Identity { .. } => Ok(()),
            LinearOperator::Mask { dim, indices } => {
                let mut seen = vec![false; *dim];
                for &i in indices {
                    if i >= *dim {
                        return Err(Error::InvalidArgument(format!("mask index {i} out of range")));
                    }
                    if seen[i] {
                        return Err(Error::InvalidArgument(format!("mask index {i} repeated")));
                    }
                    seen[i] = true;
                }
                Ok(())
            }
            LinearOperator::Downsample { dim, factor } => {
                if *factor == 0 || dim % factor != 0 {
                    return Err(Error::InvalidArgument(format!("factor {factor} does not divide {dim}")));
                }
                Ok(())
            }
            LinearOperator::CircularBlur { dim, taps } => {
                if taps.is_empty() || taps.len() > *dim {
                    return Err(Error::InvalidArgument("blur kernel longer than the signal".into()));
                }
                let sum: f64 = taps.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("blur taps sum to {sum}, expected 1")));
                }
                Ok(())
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            LinearOperator::Identity { dim }
            | LinearOperator::Mask { dim, .. }
            | LinearOperator::Downsample { dim, .. }
            | LinearOperator::CircularBlur { dim, .. } => dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } | LinearOperator::CircularBlur { dim, .. } => *dim,
            LinearOperator::Mask { indices, .. } => indices.len(),
            LinearOperator::Downsample { dim, factor } => dim / factor,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::mismatch(self.input_dim(), x.len()));
        }
        Ok(match self {
            LinearOperator::Identity { .. } => x.to_vec(),
            LinearOperator::Mask { indices, .. } => indices.iter().map(|&i| x[i]).collect(),
            LinearOperator::Downsample { factor, .. } => {
                x.chunks(*factor).map(|c| c.iter().sum::<f64>() / *factor as f64).collect()
            }
            LinearOperator::CircularBlur { dim, taps } => {
                let center = taps.len() / 2;
                (0..*dim)
                    .map(|i| {
                        taps.iter()
                            .enumerate()
                            .map(|(j, h)| h * x[(i + j + dim - center) % dim])
                            .sum()
                    })
                    .collect()
            }
        })
    }

    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.output_dim() {
            return Err(Error::mismatch(self.output_dim(), y.len()));
        }
        Ok(match self {
            LinearOperator::Identity { .. } => y.to_vec(),
            LinearOperator::Mask { dim, indices } => {
                let mut out = vec![0.0; *dim];
                for (&i, &v) in indices.iter().zip(y) {
                    out[i] = v;
                }
                out
            }
            LinearOperator::Downsample { factor, .. } => {
                let w = 1.0 / *factor as f64;
                y.iter().flat_map(|&v| std::iter::repeat_n(v * w, *factor)).collect()
            }
            LinearOperator::CircularBlur { dim, taps } => {
                let center = taps.len() / 2;
                let mut out = vec![0.0; *dim];
                for (i, &yi) in y.iter().enumerate() {
                    for (j, h) in taps.iter().enumerate() {
                        out[(i + j + dim - center) % dim] += h * yi;
                    }
                }
                out
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: Vec<f64>,
    pub operator: LinearOperator,
    pub sigma_obs: f64,
}

impl Observation {
    pub fn new(y: Vec<f64>, operator: LinearOperator, sigma_obs: f64) -> Result<Self> {
        if y.len() != operator.output_dim() {
            return Err(Error::mismatch(operator.output_dim(), y.len()));
        }
        if !(sigma_obs >= 0.0) {
            return Err(Error::InvalidArgument("observation noise must be non-negative".into()));
        }
        Ok(Self { y, operator, sigma_obs })
    }

    /// `y - A x`
    pub fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ax = self.operator.apply(x)?;
        Ok(vecops::sub(&self.y, &ax))
    }

    /// Likelihood scale used by the DPS gradient; a noiseless observation uses 1.
    pub fn likelihood_scale(&self) -> f64 {
        if self.sigma_obs > 0.0 {
            self.sigma_obs
        } else {
            1.0
        }
    }
}

/// `y = A x0 + sigma * z` with `z` drawn from the keyed stream.
pub fn make_observation(x0: &[f64], operator: &LinearOperator, sigma_obs: f64, key: StreamKey) -> Result<Observation> {
    let mut y = operator.apply(x0)?;
    if sigma_obs > 0.0 {
        let z = keyed_normal(key, y.len())?;
        vecops::axpy(sigma_obs, &z, &mut y);
    }
    Observation::new(y, operator.clone(), sigma_obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionKind {
    Dps,
    Mpgd,
    Ddcm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementDirection {
    pub c: Vec<f64>,
    pub kind: DirectionKind,
}

impl MeasurementDirection {
    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|&v| v == 0.0)
    }
}

/// DPS direction from already-evaluated posterior terms: `J^T A^T (y - A x0_hat) / s^2`.
pub fn dps_direction_from_terms(
    prior: &GaussianMixturePrior,
    terms: &PosteriorTerms,
    obs: &Observation,
) -> Result<MeasurementDirection> {
    let resid = obs.residual(&terms.posterior_mean)?;
    let back = obs.operator.adjoint(&resid)?;
    let scale = obs.likelihood_scale();
    let c = vecops::scale(1.0 / (scale * scale), &prior.jacobian_transpose_apply(terms, &back));
    Ok(MeasurementDirection { c, kind: DirectionKind::Dps })
}

pub fn dps_direction(
    prior: &GaussianMixturePrior,
    schedule: &Schedule,
    obs: &Observation,
    x_t: &[f64],
    t: usize,
) -> Result<MeasurementDirection> {
    let terms = prior.evaluate(schedule, x_t, t)?;
    dps_direction_from_terms(prior, &terms, obs)
}

/// `A^T (y - A x0_hat)`, with the scalar step-size prefactor dropped.
pub fn mpgd_direction(obs: &Observation, x_tilde0: &[f64]) -> Result<MeasurementDirection> {
    let c = obs.operator.adjoint(&obs.residual(x_tilde0)?)?;
    Ok(MeasurementDirection { c, kind: DirectionKind::Mpgd })
}

/// Residual-to-signal direction. For compression (`A = I`, `y = x0`) this is
/// `x0 - x0_hat`; the `sqrt(alpha_bar) / (1 - alpha_bar)` factor is dropped.
pub fn ddcm_direction(obs: &Observation, x_tilde0: &[f64]) -> Result<MeasurementDirection> {
    let c = obs.operator.adjoint(&obs.residual(x_tilde0)?)?;
    Ok(MeasurementDirection { c, kind: DirectionKind::Ddcm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, Stream};

    fn random_vec(stream: &mut Stream, n: usize) -> Vec<f64> {
        stream.sample_standard_normal(n).unwrap()
    }

    #[test]
    fn identity_is_its_own_adjoint() {
        let op = LinearOperator::identity(3);
        assert_eq!(op.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(op.adjoint(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn mask_apply_and_adjoint() {
        let op = LinearOperator::mask(4, vec![0, 2]).unwrap();
        assert_eq!(op.apply(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(op.adjoint(&[5.0, 6.0]).unwrap(), vec![5.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn adjoint_identity_holds_for_every_kind() {
        let ops = vec![
            LinearOperator::identity(12),
            LinearOperator::mask(12, vec![11, 0, 5, 3]).unwrap(),
            LinearOperator::downsample(12, 3).unwrap(),
            LinearOperator::circular_blur(12, vec![1.0, 2.0, 4.0, 2.0, 1.0]).unwrap(),
            LinearOperator::circular_blur(12, vec![0.2, 0.8]).unwrap(),
        ];
        let mut s = Stream::new(StreamKey::new(1, Domain::PriorSample, 0, 0));
        for op in ops {
            for _ in 0..20 {
                let x = random_vec(&mut s, op.input_dim());
                let y = random_vec(&mut s, op.output_dim());
                let lhs = vecops::dot(&op.apply(&x).unwrap(), &y);
                let rhs = vecops::dot(&x, &op.adjoint(&y).unwrap());
                assert!((lhs - rhs).abs() < 1e-10, "{op:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn operator_shape_errors() {
        assert!(LinearOperator::mask(3, vec![3]).is_err());
        assert!(LinearOperator::mask(3, vec![1, 1]).is_err());
        assert!(LinearOperator::downsample(10, 3).is_err());
        assert!(LinearOperator::circular_blur(3, vec![1.0, -1.0]).is_err());
        let op = LinearOperator::identity(2);
        assert!(op.apply(&[1.0]).is_err());
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let op = LinearOperator::downsample(4, 2).unwrap();
        let key = StreamKey::new(0, Domain::ObservationNoise, 0, 0);
        let obs = make_observation(&[1.0, 3.0, 5.0, 7.0], &op, 0.0, key).unwrap();
        assert_eq!(obs.y, vec![2.0, 6.0]);
        let noisy_a = make_observation(&[1.0, 3.0, 5.0, 7.0], &op, 0.05, key).unwrap();
        let noisy_b = make_observation(&[1.0, 3.0, 5.0, 7.0], &op, 0.05, key).unwrap();
        assert_eq!(noisy_a, noisy_b);
        assert_ne!(noisy_a.y, obs.y);
    }

    #[test]
    fn mpgd_hand_values() {
        let op = LinearOperator::mask(2, vec![0]).unwrap();
        let obs = Observation::new(vec![3.0], op, 0.0).unwrap();
        assert_eq!(mpgd_direction(&obs, &[1.0, 7.0]).unwrap().c, vec![2.0, 0.0]);

        let obs = Observation::new(vec![1.0, 2.0], LinearOperator::identity(2), 0.0).unwrap();
        assert_eq!(mpgd_direction(&obs, &[0.5, 0.5]).unwrap().c, vec![0.5, 1.5]);
        assert!(mpgd_direction(&obs, &[1.0, 2.0]).unwrap().is_zero());
    }

    #[test]
    fn ddcm_compression_direction() {
        let obs = Observation::new(vec![2.0], LinearOperator::identity(1), 0.0).unwrap();
        assert_eq!(ddcm_direction(&obs, &[0.5]).unwrap().c, vec![1.5]);
        assert!(ddcm_direction(&obs, &[2.0]).unwrap().is_zero());
    }

    #[test]
    fn dps_zero_cases() {
        let s = Schedule::linear(10, 1e-3, 0.1).unwrap();
        let op = LinearOperator::mask(2, vec![1]).unwrap();
        let point = GaussianMixturePrior::point_mass(vec![0.5, 0.5]).unwrap();
        let obs = Observation::new(vec![9.0], op.clone(), 0.05).unwrap();
        assert!(dps_direction(&point, &s, &obs, &[1.0, -1.0], 3).unwrap().is_zero());

        let p = GaussianMixturePrior::standard_normal(2).unwrap();
        let x = [0.4, -0.2];
        let xt = p.tweedie_estimate(&s, &x, 3).unwrap();
        let consistent = Observation::new(op.apply(&xt).unwrap(), op, 0.05).unwrap();
        assert!(dps_direction(&p, &s, &consistent, &x, 3).unwrap().is_zero());
    }
}
