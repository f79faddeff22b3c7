//! ℓ2 stick-breaking quantization of unit-norm combination weights.
//!
//! A nonnegative unit vector `gamma` of length `m` is written as `m - 1`
//! fractions `u_i` of the remaining squared stick:
//!
//! ```text
//! gamma_i = sqrt(u_i * prod_{j<i} (1 - u_j)),   gamma_m = sqrt(prod_{j<m} (1 - u_j))
//! ```
//!
//! so every assignment of fractions reconstructs an exactly unit-norm vector.
//! With `C >= 1` bits per stage the grid is `{j / (2^C - 1) : j = 1..2^C-1}`
//! and code 0 is reserved for `u = 0`. With `C = 0` nothing is stored and the
//! fractions are fixed to `1 / (m - i + 1)`, i.e. equal weights.

use crate::error::{Error, Result};
use crate::vecops;

/// Largest supported number of bits per stage.
pub const MAX_BITS: u8 = 24;

/// Default cap on exhaustive evaluations.
pub const DEFAULT_BUDGET: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    bits: u8,
    m: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(bits: u8, m: usize) -> Result<Self> {
        if bits > MAX_BITS {
            return Err(Error::InvalidArgument(format!("at most {MAX_BITS} bits per stage, got {bits}")));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("need at least one atom".into()));
        }
        let values = if bits == 0 {
            Vec::new()
        } else {
            let levels = (1u32 << bits) - 1;
            (1..=levels).map(|j| j as f64 / levels as f64).collect()
        };
        Ok(Self { bits, m, values })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn atoms(&self) -> usize {
        self.m
    }

    /// Nonzero grid values, ascending.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn reserve_zero(&self) -> bool {
        self.bits > 0
    }

    /// Codes available per stage, `2^C`.
    pub fn num_codes(&self) -> u32 {
        1u32 << self.bits
    }

    /// Fraction encoded by `code` at zero-based `stage`.
    pub fn fraction(&self, code: u32, stage: usize) -> f64 {
        if self.bits == 0 {
            1.0 / (self.m - stage) as f64
        } else if code == 0 {
            0.0
        } else {
            self.values[code as usize - 1]
        }
    }

    fn full_code(&self) -> Option<u32> {
        (self.bits > 0).then(|| self.num_codes() - 1)
    }

    fn candidates(&self, stage: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        (0..self.num_codes()).map(move |c| (c, self.fraction(c, stage)))
    }
}

pub fn make_grid(bits: u8, m: usize) -> Result<Grid> {
    Grid::new(bits, m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StickCode {
    pub m: usize,
    pub codes: Vec<u32>,
}

impl StickCode {
    pub fn fractions(&self, grid: &Grid) -> Vec<f64> {
        self.codes.iter().enumerate().map(|(i, &c)| grid.fraction(c, i)).collect()
    }

    pub fn weights(&self, grid: &Grid) -> Vec<f64> {
        forward_unchecked(&self.fractions(grid))
    }
}

/// A quantized weight vector together with its alignment `<b, gamma>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub code: StickCode,
    pub gamma: Vec<f64>,
    pub objective: f64,
}

fn forward_unchecked(u: &[f64]) -> Vec<f64> {
    let mut gamma = Vec::with_capacity(u.len() + 1);
    let mut rem = 1.0;
    for &ui in u {
        gamma.push((rem * ui).sqrt());
        rem *= 1.0 - ui;
    }
    gamma.push(rem.sqrt());
    gamma
}

pub fn stick_forward(u: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = u.iter().position(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::InvalidInput(format!("fraction {} at stage {i} is outside [0, 1]", u[i])));
    }
    Ok(forward_unchecked(u))
}

pub fn stick_inverse(gamma: &[f64]) -> Result<Vec<f64>> {
    if gamma.is_empty() {
        return Err(Error::InvalidDimension("weight vector is empty".into()));
    }
    if gamma.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
    }
    let total = vecops::norm_sq(gamma);
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput(format!("weights have squared norm {total}, expected 1")));
    }
    let m = gamma.len();
    // Remaining stick as a tail sum avoids the cancellation of 1 - sum(head).
    let mut tails = vec![0.0; m + 1];
    for i in (0..m).rev() {
        tails[i] = tails[i + 1] + gamma[i] * gamma[i];
    }
    let mut u = Vec::with_capacity(m - 1);
    for i in 0..m - 1 {
        let g2 = gamma[i] * gamma[i];
        // An empty tail (every remaining weight zero or underflowed) encodes as 0.
        if tails[i] == 0.0 {
            u.push(0.0);
        } else {
            u.push((g2 / tails[i]).clamp(0.0, 1.0));
        }
    }
    Ok(u)
}

/// After a stage takes the whole remaining stick, later stages are 0.
fn canonicalize(codes: &mut [u32], grid: &Grid) {
    if let Some(full) = grid.full_code() {
        if let Some(p) = codes.iter().position(|&c| c == full) {
            for c in &mut codes[p + 1..] {
                *c = 0;
            }
        }
    }
}

fn finish(b: &[f64], mut codes: Vec<u32>, grid: &Grid) -> Quantized {
    canonicalize(&mut codes, grid);
    let code = StickCode { m: b.len(), codes };
    let gamma = code.weights(grid);
    let objective = vecops::dot(b, &gamma);
    Quantized { code, gamma, objective }
}

fn nearest_code(u: f64, grid: &Grid, stage: usize) -> u32 {
    if grid.bits == 0 {
        return 0;
    }
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (code, v) in grid.candidates(stage) {
        let dist = (u - v).abs();
        if dist < best_dist {
            best = code;
            best_dist = dist;
        }
    }
    best
}

/// Independent nearest-neighbor rounding of each fraction; ties go to the smaller code.
pub fn quantize_nn(u_star: &[f64], grid: &Grid) -> Result<StickCode> {
    if u_star.len() + 1 != grid.m {
        return Err(Error::mismatch(grid.m - 1, u_star.len()));
    }
    if u_star.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::InvalidInput("fractions must lie in [0, 1]".into()));
    }
    let mut codes: Vec<u32> = u_star.iter().enumerate().map(|(i, &u)| nearest_code(u, grid, i)).collect();
    canonicalize(&mut codes, grid);
    Ok(StickCode { m: grid.m, codes })
}

fn check_sorted(b: &[f64], grid: &Grid) -> Result<()> {
    if b.is_empty() {
        return Err(Error::InvalidDimension("no inner products".into()));
    }
    if b.len() != grid.m {
        return Err(Error::mismatch(grid.m, b.len()));
    }
    if !vecops::all_finite(b) {
        return Err(Error::InvalidInput("inner products must be finite".into()));
    }
    if let Some(i) = b.windows(2).position(|w| w[0] < w[1]) {
        return Err(Error::NotSorted(i + 1));
    }
    Ok(())
}

fn equal_split(b: &[f64], grid: &Grid) -> Quantized {
    let m = b.len();
    let u: Vec<f64> = (0..m - 1).map(|i| 1.0 / (m - i) as f64).collect();
    let codes = u.iter().enumerate().map(|(i, &x)| nearest_code(x, grid, i)).collect();
    finish(b, codes, grid)
}

/// Continuous stick-breaking optimum of the inner products, rounded stage by stage.
pub fn quantize_nn_weights(b: &[f64], grid: &Grid) -> Result<Quantized> {
    check_sorted(b, grid)?;
    let clipped: Vec<f64> = b.iter().map(|&v| v.max(0.0)).collect();
    let n = vecops::norm(&clipped);
    if n == 0.0 {
        return Ok(equal_split(b, grid));
    }
    let gamma: Vec<f64> = clipped.iter().map(|v| v / n).collect();
    let u = stick_inverse(&gamma)?;
    let code = quantize_nn(&u, grid)?;
    Ok(finish(b, code.codes, grid))
}

/// Maximizer of `b sqrt(u) + v sqrt(1 - u)` over `u` in `[0, 1]`.
fn stage_optimum(b: f64, v: f64) -> f64 {
    match (b > 0.0, v > 0.0) {
        (true, true) => b * b / (b * b + v * v),
        (false, true) => 0.0,
        (true, false) => 1.0,
        (false, false) => {
            if b >= v {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Backward closed-form recursion where each stage's optimal fraction is
/// replaced by its nearest grid point before the tail value is propagated.
pub fn quantize_stagewise(b: &[f64], grid: &Grid) -> Result<Quantized> {
    check_sorted(b, grid)?;
    let m = b.len();
    if b.iter().all(|&v| v == 0.0) {
        return Ok(equal_split(b, grid));
    }
    let mut codes = vec![0u32; m - 1];
    let mut v = b[m - 1];
    for i in (0..m - 1).rev() {
        let code = nearest_code(stage_optimum(b[i], v), grid, i);
        let u = grid.fraction(code, i);
        codes[i] = code;
        v = b[i] * u.sqrt() + v * (1.0 - u).sqrt();
    }
    Ok(finish(b, codes, grid))
}

/// Exact discrete optimum via the backward dynamic program in `O(m 2^C)`.
pub fn quantize_dp(b: &[f64], grid: &Grid) -> Result<Quantized> {
    check_sorted(b, grid)?;
    let m = b.len();
    if b.iter().all(|&v| v == 0.0) {
        return Ok(equal_split(b, grid));
    }
    let mut codes = vec![0u32; m - 1];
    let mut v = b[m - 1];
    for i in (0..m - 1).rev() {
        let mut best_code = 0;
        let mut best = f64::NEG_INFINITY;
        for (code, u) in grid.candidates(i) {
            let value = b[i] * u.sqrt() + v * (1.0 - u).sqrt();
            if value > best {
                best = value;
                best_code = code;
            }
        }
        codes[i] = best_code;
        v = best;
    }
    Ok(finish(b, codes, grid))
}

/// Number of joint assignments the exhaustive search visits.
pub fn exhaustive_cost(grid: &Grid) -> u128 {
    (grid.num_codes() as u128).saturating_pow(grid.m.saturating_sub(1) as u32)
}

/// Brute force over every code assignment. Reference oracle for the DP.
pub fn quantize_greedy_exponential(b: &[f64], grid: &Grid, budget: u128) -> Result<Quantized> {
    check_sorted(b, grid)?;
    let cost = exhaustive_cost(grid);
    if cost > budget {
        return Err(Error::BudgetExceeded { cost, budget });
    }
    let m = b.len();
    if b.iter().all(|&v| v == 0.0) {
        return Ok(equal_split(b, grid));
    }
    let mut current = vec![0u32; m - 1];
    let mut best_codes = current.clone();
    let mut best = f64::NEG_INFINITY;
    search(b, grid, 0, 1.0, 0.0, &mut current, &mut best, &mut best_codes);
    Ok(finish(b, best_codes, grid))
}

#[allow(clippy::too_many_arguments)]
fn search(
    b: &[f64],
    grid: &Grid,
    stage: usize,
    rem: f64,
    acc: f64,
    current: &mut [u32],
    best: &mut f64,
    best_codes: &mut Vec<u32>,
) {
    if stage == b.len() - 1 {
        let value = acc + rem.sqrt() * b[stage];
        if value > *best {
            *best = value;
            best_codes.copy_from_slice(current);
        }
        return;
    }
    for (code, u) in grid.candidates(stage) {
        current[stage] = code;
        let gamma = (rem * u).sqrt();
        search(b, grid, stage + 1, rem * (1.0 - u), acc + gamma * b[stage], current, best, best_codes);
    }
}

/// Payload bits `(T - 1)(m log2 K + C (m - 1))`.
pub fn payload_bits(steps: usize, k: u64, m: usize, bits: u8) -> Result<u64> {
    if k == 0 || !k.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("codebook size {k} is not a power of two")));
    }
    if m == 0 || steps == 0 {
        return Err(Error::InvalidArgument("need T >= 1 and m >= 1".into()));
    }
    let index_bits = k.trailing_zeros() as u64;
    let per_step = index_bits * m as u64 + bits as u64 * (m as u64 - 1);
    Ok((steps as u64 - 1) * per_step)
}

pub fn bpp(steps: usize, k: u64, m: usize, bits: u8, n_side: usize) -> Result<f64> {
    if n_side == 0 {
        return Err(Error::InvalidArgument("pixel side must be at least 1".into()));
    }
    let total = payload_bits(steps, k, m, bits)?;
    Ok(total as f64 / (n_side as f64 * n_side as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_grid_matches_worked_example() {
        let g = make_grid(2, 3).unwrap();
        assert_eq!(g.values(), &[1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(g.reserve_zero());
        assert_eq!(g.num_codes(), 4);
        assert_eq!(make_grid(1, 3).unwrap().values(), &[1.0]);
    }

    #[test]
    fn zero_bits_means_equal_weights() {
        let g = make_grid(0, 3).unwrap();
        assert!(g.values().is_empty());
        let code = StickCode { m: 3, codes: vec![0, 0] };
        let w = code.weights(&g);
        for v in w {
            assert!((v - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_examples() {
        assert_eq!(stick_forward(&[1.0]).unwrap(), vec![1.0, 0.0]);
        let g = stick_forward(&[1.0 / 3.0, 0.5]).unwrap();
        for v in g {
            assert!((v - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        }
        assert!(stick_forward(&[1.2]).is_err());
        assert!(stick_forward(&[-0.1]).is_err());
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(stick_inverse(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let s = 1.0 / 3f64.sqrt();
        let u = stick_inverse(&[s, s, s]).unwrap();
        assert!((u[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((u[1] - 0.5).abs() < 1e-15);
        assert!(stick_inverse(&[0.5, 0.5]).is_err());
        assert!(stick_inverse(&[-1.0, 0.0]).is_err());
    }

    #[test]
    fn nearest_neighbor_examples() {
        let g = make_grid(2, 2).unwrap();
        assert_eq!(quantize_nn(&[0.30], &g).unwrap().codes, vec![1]);
        assert_eq!(quantize_nn(&[2.0 / 3.0], &g).unwrap().codes, vec![2]);
        assert_eq!(quantize_nn(&[0.001], &g).unwrap().codes, vec![0]);
        // Exactly between 0 and 1/3 goes to the smaller code.
        assert_eq!(quantize_nn(&[1.0 / 6.0], &g).unwrap().codes, vec![0]);
    }

    #[test]
    fn stagewise_continuous_two_atoms() {
        // u* = 16/25 with a fine grid approaches gamma = (0.8, 0.6).
        let g = make_grid(16, 2).unwrap();
        let q = quantize_stagewise(&[4.0, 3.0], &g).unwrap();
        assert!((q.gamma[0] - 0.8).abs() < 1e-4);
        assert!((q.gamma[1] - 0.6).abs() < 1e-4);
        assert!(matches!(quantize_stagewise(&[3.0, 4.0], &g), Err(Error::NotSorted(1))));
    }

    #[test]
    fn single_atom_has_no_codes() {
        let g = make_grid(3, 1).unwrap();
        let q = quantize_dp(&[2.5], &g).unwrap();
        assert!(q.code.codes.is_empty());
        assert_eq!(q.gamma, vec![1.0]);
        assert_eq!(quantize_stagewise(&[2.5], &g).unwrap().gamma, vec![1.0]);
    }

    #[test]
    fn zero_tail_takes_whole_stick() {
        let g = make_grid(3, 3).unwrap();
        let q = quantize_stagewise(&[2.0, 1.0, 0.0], &g).unwrap();
        assert_eq!(*q.gamma.last().unwrap(), 0.0);
        // The unquantized last stage would be u = 1.
        assert_eq!(stage_optimum(1.0, 0.0), 1.0);
    }

    #[test]
    fn all_zero_inner_products_split_evenly() {
        let g = make_grid(0, 4).unwrap();
        let q = quantize_dp(&[0.0; 4], &g).unwrap();
        for v in &q.gamma {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let g = make_grid(4, 4).unwrap();
        assert_eq!(quantize_dp(&[0.0; 4], &g).unwrap(), quantize_stagewise(&[0.0; 4], &g).unwrap());
    }

    #[test]
    fn one_bit_grid_picks_the_leading_atom() {
        let g = make_grid(1, 3).unwrap();
        let b = [1.0, 0.9, 0.9];
        let dp = quantize_dp(&b, &g).unwrap();
        let sw = quantize_stagewise(&b, &g).unwrap();
        assert_eq!(dp.objective, 1.0);
        assert_eq!(sw.objective, dp.objective);
        // Nearest-neighbor rounding of (0.38, 0.5) sends both stages to zero.
        assert_eq!(quantize_nn_weights(&b, &g).unwrap().objective, 0.9);
    }

    #[test]
    fn exhaustive_budget() {
        let g = make_grid(4, 8).unwrap();
        assert_eq!(exhaustive_cost(&g), 16u128.pow(7));
        let b = [8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        match quantize_greedy_exponential(&b, &g, DEFAULT_BUDGET) {
            Err(Error::BudgetExceeded { cost, .. }) => assert_eq!(cost, 268_435_456),
            other => panic!("expected refusal, got {other:?}"),
        }
        let g = make_grid(3, 2).unwrap();
        assert_eq!(exhaustive_cost(&g), 8);
    }

    #[test]
    fn bpp_values() {
        // 999 * (15 * 12 + 8 * 11) / 512^2 = 267732 / 262144
        assert_eq!(bpp(1000, 32768, 12, 8, 512).unwrap(), 267732.0 / 262144.0);
        assert_eq!(bpp(100, 32768, 2, 0, 512).unwrap(), 2970.0 / 262144.0);
        assert_eq!(bpp(10, 1024, 1, 7, 4).unwrap(), 9.0 * 10.0 / 16.0);
        assert!(bpp(10, 1000, 1, 0, 4).is_err());
    }
}
