//! Small entry points for the browser page in `www/`. Everything returns flat
//! `f64` buffers so the JavaScript side only deals with `Float64Array`s.

use ncs_core::diffusion::{Component, Covariance, GaussianMixturePrior, Schedule};
use ncs_core::inverse::{LinearOperator, Observation};
use ncs_core::ncs::{solve, SolverConfig, SolverKind};
use ncs_core::quantizer::{self, Grid};
use ncs_core::rng::{Codebook, Domain, NoiseCodebook, Stream, StreamKey};
use ncs_core::vecops;

/// Atom counts swept by [`inner_product_growth`].
pub const GROWTH_K: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];

/// Means of the two-mode prior used by [`posterior_cloud`].
pub const MODES: [[f64; 2]; 2] = [[1.0, -1.5], [1.0, 1.5]];
pub const MODE_VARIANCE: f64 = 0.1;

fn err(e: ncs_core::Error) -> String {
    e.to_string()
}

pub fn demo_prior() -> GaussianMixturePrior {
    let components = MODES
        .iter()
        .map(|m| Component { weight: 0.5, mean: m.to_vec(), covariance: Covariance::isotropic(2, MODE_VARIANCE) })
        .collect();
    GaussianMixturePrior::new(components).expect("valid mixture")
}

/// Observe the first coordinate as `y` and draw `count` reconstructions.
/// Returns interleaved `(x, y)` pairs.
pub fn posterior_cloud(solver: &str, k: usize, steps: usize, y: f64, sigma: f64, count: usize) -> Result<Vec<f64>, String> {
    let solver: SolverKind = solver.parse().map_err(err)?;
    let prior = demo_prior();
    let schedule = Schedule::linear_rescaled(steps, 1e-4, 0.02, 1000).map_err(err)?;
    let obs = Observation::new(vec![y], LinearOperator::mask(2, vec![0]).map_err(err)?, sigma).map_err(err)?;
    let mut out = Vec::with_capacity(2 * count);
    for seed in 0..count as u64 {
        let mut cfg = SolverConfig::new(solver, seed);
        cfg.k = k;
        out.extend(solve(&prior, &schedule, &obs, &cfg).map_err(err)?.x0);
    }
    Ok(out)
}

/// Objectives `<b, gamma>` of DP, stagewise, NN and exhaustive search (NaN
/// when over budget), followed by the unquantized bound `||max(b, 0)||`.
pub fn quantizer_objectives(b: &[f64], bits: u8) -> Result<Vec<f64>, String> {
    let b = sorted(b);
    let grid = Grid::new(bits, b.len()).map_err(err)?;
    let mut out = vec![
        quantizer::quantize_dp(&b, &grid).map_err(err)?.objective,
        quantizer::quantize_stagewise(&b, &grid).map_err(err)?.objective,
        quantizer::quantize_nn_weights(&b, &grid).map_err(err)?.objective,
    ];
    out.push(match quantizer::quantize_greedy_exponential(&b, &grid, 1 << 20) {
        Ok(q) => q.objective,
        Err(ncs_core::Error::BudgetExceeded { .. }) => f64::NAN,
        Err(e) => return Err(err(e)),
    });
    out.push(b.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt());
    Ok(out)
}

/// Quantized weights for `b` sorted in descending order.
pub fn quantized_weights(method: &str, b: &[f64], bits: u8) -> Result<Vec<f64>, String> {
    let b = sorted(b);
    let grid = Grid::new(bits, b.len()).map_err(err)?;
    let q = match method {
        "dp" => quantizer::quantize_dp(&b, &grid),
        "stagewise" => quantizer::quantize_stagewise(&b, &grid),
        "nn" => quantizer::quantize_nn_weights(&b, &grid),
        other => return Err(format!("unknown quantizer {other:?}")),
    };
    Ok(q.map_err(err)?.gamma)
}

fn sorted(b: &[f64]) -> Vec<f64> {
    let mut b = b.to_vec();
    b.sort_by(|x, y| y.total_cmp(x));
    b
}

/// For each `K` in [`GROWTH_K`], the mean over `trials` of the best single
/// atom's `<c, e>/||c||` and of the optimally combined `||E^T c||/||c||`.
/// Returns interleaved `(single, combined)` pairs.
pub fn inner_product_growth(d: usize, trials: usize, seed: u64) -> Result<Vec<f64>, String> {
    let mut out = Vec::with_capacity(2 * GROWTH_K.len());
    for (i, &k) in GROWTH_K.iter().enumerate() {
        let (mut single, mut combined) = (0.0, 0.0);
        for trial in 0..trials as u32 {
            let c = Stream::new(StreamKey::new(seed, Domain::PriorSample, i as u32, trial))
                .sample_standard_normal(d)
                .map_err(err)?;
            let c_norm = vecops::norm(&c);
            let e = NoiseCodebook::build(seed, 1 + trial, k, d).map_err(err)?;
            let b = e.inner_products(&c).map_err(err)?;
            single += b.iter().copied().fold(f64::MIN, f64::max) / c_norm;
            combined += vecops::norm(&b) / c_norm;
        }
        out.push(single / trials as f64);
        out.push(combined / trials as f64);
    }
    Ok(out)
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
        r.map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = posteriorCloud)]
    pub fn posterior_cloud(solver: &str, k: usize, steps: usize, y: f64, sigma: f64, count: usize) -> Result<Vec<f64>, JsError> {
        js(super::posterior_cloud(solver, k, steps, y, sigma, count))
    }

    #[wasm_bindgen(js_name = quantizerObjectives)]
    pub fn quantizer_objectives(b: &[f64], bits: u8) -> Result<Vec<f64>, JsError> {
        js(super::quantizer_objectives(b, bits))
    }

    #[wasm_bindgen(js_name = quantizedWeights)]
    pub fn quantized_weights(method: &str, b: &[f64], bits: u8) -> Result<Vec<f64>, JsError> {
        js(super::quantized_weights(method, b, bits))
    }

    #[wasm_bindgen(js_name = innerProductGrowth)]
    pub fn inner_product_growth(d: usize, trials: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        js(super::inner_product_growth(d, trials, seed))
    }

    #[wasm_bindgen(js_name = growthK)]
    pub fn growth_k() -> Vec<u32> {
        super::GROWTH_K.iter().map(|&k| k as u32).collect()
    }
}
