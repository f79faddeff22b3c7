use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ncs_core::codec::{self, CodecParams, PriorRegistry};
use ncs_core::inverse::make_observation;
use ncs_core::ncs::{solve, SolverKind};
use ncs_core::quantizer::{self, Grid};
use ncs_core::rng::{Domain, Stream, StreamKey};
use ncs_core::{vecops, GaussianMixturePrior};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BenchConfig, ExperimentConfig};
use crate::error::CliError;
use crate::io;

/// Bumped whenever a CSV column is added, removed or reinterpreted.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub seed: u64,
    pub solver: SolverKind,
    pub task: String,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: Option<usize>,
    pub mse: f64,
    pub psnr: f64,
    pub wall_ms: f64,
    pub degenerate_steps: usize,
}

pub fn psnr(mse: f64, range: f64) -> f64 {
    10.0 * (range * range / mse).log10()
}

/// Ground-truth signal for a seed; shared by every solver so runs are paired.
pub fn ground_truth(prior: &GaussianMixturePrior, seed: u64) -> Vec<f64> {
    prior.sample(&mut Stream::new(StreamKey::new(seed, Domain::PriorSample, 0, 0)))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => io::write_bytes(path, bytes),
        None => std::io::stdout().write_all(bytes).map_err(|e| CliError::Io(e.to_string())),
    }
}

fn output_path<'a>(flag: Option<&'a Path>, config: &'a ExperimentConfig) -> Option<&'a Path> {
    flag.or(config.output.as_deref().map(Path::new))
}

#[derive(Debug, Serialize)]
struct Moments {
    #[serde(rename = "T")]
    steps: usize,
    count: usize,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

/// Unconditional samples as CSV (`seed,T,x0,...`); per-T moments go to stderr as JSON lines.
pub fn sample(config: &ExperimentConfig, out: Option<&Path>, seed_offset: u64) -> Result<(), CliError> {
    let prior = config.prior.build()?;
    let d = prior.dim();
    let seeds = config.seeds.expand(seed_offset);
    let mut text = String::from("seed,T");
    for i in 0..d {
        text.push_str(&format!(",x{i}"));
    }
    text.push('\n');
    for &steps in &config.steps {
        let schedule = config.schedule.build(steps)?;
        let samples = seeds
            .par_iter()
            .map(|&seed| ncs_core::diffusion::unconditional_sample(&prior, &schedule, seed))
            .collect::<Result<Vec<_>, _>>()?;
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in &samples {
            vecops::axpy(1.0 / n, s, &mut mean);
        }
        let variance: Vec<f64> =
            (0..d).map(|i| samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / n).collect();
        for (seed, s) in seeds.iter().zip(&samples) {
            text.push_str(&format!("{seed},{steps}"));
            for v in s {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        let summary = Moments { steps, count: samples.len(), mean, variance };
        eprintln!("{}", serde_json::to_string(&summary).expect("plain data"));
    }
    emit(output_path(out, config), text.as_bytes())
}

pub fn solve_rows(config: &ExperimentConfig, seed_offset: u64) -> Result<Vec<MetricRow>, CliError> {
    let task = config.task.as_ref().ok_or_else(|| CliError::Config("solve needs a task".into()))?;
    if config.solvers.is_empty() {
        return Err(CliError::Config("solve needs at least one solver".into()));
    }
    let prior = config.prior.build()?;
    let op = task.operator.build(prior.dim())?;
    let seeds = config.seeds.expand(seed_offset);
    let schedules = config.steps.iter().map(|&t| config.schedule.build(t)).collect::<Result<Vec<_>, _>>()?;

    let (n_solvers, n_steps) = (config.solvers.len(), schedules.len());
    let jobs: Vec<(u64, usize, usize)> = seeds
        .iter()
        .flat_map(|&seed| (0..n_solvers).flat_map(move |si| (0..n_steps).map(move |ti| (seed, si, ti))))
        .collect();
    jobs.par_iter()
        .map(|&(seed, si, ti)| {
            let x0 = ground_truth(&prior, seed);
            let obs = make_observation(&x0, &op, task.sigma_obs, StreamKey::new(seed, Domain::ObservationNoise, 0, 0))?;
            let solver = config.solvers[si];
            let cfg = config.solver_config(solver, seed);
            let start = Instant::now();
            let outcome = solve(&prior, &schedules[ti], &obs, &cfg)?;
            let wall_ms = if config.record_wall_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
            let mse = vecops::mse(&outcome.x0, &x0);
            Ok(MetricRow {
                seed,
                solver,
                task: task.name.clone(),
                steps: schedules[ti].steps(),
                k: cfg.k,
                m: cfg.m,
                mse,
                psnr: psnr(mse, config.psnr_range),
                wall_ms,
                degenerate_steps: outcome.degenerate_steps,
            })
        })
        .collect()
}

pub fn solve_cmd(config: &ExperimentConfig, out: Option<&Path>, seed_offset: u64) -> Result<(), CliError> {
    let rows = solve_rows(config, seed_offset)?;
    emit(output_path(out, config), &csv_bytes(&rows)?)
}

pub fn compress(
    params: &CodecParams,
    input: &Path,
    out: &Path,
    recon: Option<&Path>,
    registry: &PriorRegistry,
) -> Result<String, CliError> {
    let x = io::read_signal(input)?;
    let prior = registry.resolve(params.prior_id, x.len()).map_err(|e| CliError::Config(e.to_string()))?;
    let start = Instant::now();
    let compressed = codec::compress(&x, &prior, params)?;
    let wall = start.elapsed();
    io::write_bytes(out, &compressed.stream.to_bytes())?;
    if let Some(path) = recon {
        io::write_signal(path, &compressed.reconstruction)?;
    }
    Ok(format!(
        "bpp={} payload_bits={} mse={} degenerate_steps={} wall_ms={:.3}",
        compressed.stream.bpp(),
        compressed.payload_bits,
        vecops::mse(&compressed.reconstruction, &x),
        compressed.degenerate_steps,
        wall.as_secs_f64() * 1e3
    ))
}

pub fn decompress(input: &Path, out: &Path, registry: &PriorRegistry) -> Result<String, CliError> {
    let bytes = io::read_bytes(input)?;
    let stream = codec::Bitstream::from_bytes(&bytes)?;
    let start = Instant::now();
    let x = codec::decompress(&stream, registry)?;
    let wall = start.elapsed();
    io::write_signal(out, &x)?;
    Ok(format!("bpp={} wall_ms={:.3}", stream.bpp(), wall.as_secs_f64() * 1e3))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: &'static str,
    pub m: usize,
    #[serde(rename = "C")]
    pub bits: u8,
    /// Mean per instance.
    pub wall_ns: f64,
    /// Mean `<b, gamma>` over the batch.
    pub objective: f64,
}

type Quantizer = fn(&[f64], &Grid) -> ncs_core::Result<quantizer::Quantized>;

pub fn bench_rows(config: &BenchConfig) -> Result<Vec<BenchRow>, CliError> {
    let mut rows = Vec::new();
    for &m in &config.m {
        for &bits in &config.c {
            let grid = Grid::new(bits, m)?;
            let mut s = Stream::new(StreamKey::new(config.seed, Domain::PriorSample, m as u32, bits as u32));
            let batch: Vec<Vec<f64>> = (0..config.batch)
                .map(|_| {
                    let mut b = s.sample_standard_normal(m).expect("m >= 1");
                    b.sort_by(|a, b| b.total_cmp(a));
                    b
                })
                .collect();
            let budget = config.budget;
            let mut methods: Vec<(&'static str, Quantizer)> = vec![
                ("dp", quantizer::quantize_dp),
                ("stagewise", quantizer::quantize_stagewise),
                ("nn", quantizer::quantize_nn_weights),
            ];
            if quantizer::exhaustive_cost(&grid) <= budget {
                methods.push(("exhaustive", |b, g| quantizer::quantize_greedy_exponential(b, g, u128::MAX)));
            }
            for (method, f) in methods {
                let start = Instant::now();
                let mut total = 0.0;
                for b in &batch {
                    total += std::hint::black_box(f(b, &grid)?).objective;
                }
                let n = batch.len() as f64;
                rows.push(BenchRow {
                    method,
                    m,
                    bits,
                    wall_ns: start.elapsed().as_nanos() as f64 / n,
                    objective: total / n,
                });
            }
        }
    }
    Ok(rows)
}

pub fn bench_quant(config: &BenchConfig, out: Option<&Path>) -> Result<(), CliError> {
    emit(out, &csv_bytes(&bench_rows(config)?)?)
}
