//! Generative compression: a signal is stored as, per reverse step, the
//! top-`m` codebook indices and the stick-breaking codes of their weights.
//! The decoder regenerates every codebook from the header seed and replays
//! the same synthesis, so its output equals the encoder-side reconstruction
//! bit for bit.
//!
//! File layout, all integers big-endian:
//!
//! ```text
//! offset size field
//!      0    4 magic "NCSB"
//!      4    1 format version
//!      5    1 generator version
//!      6    8 seed
//!     14    2 T
//!     16    4 K (power of two)
//!     20    1 m
//!     21    1 C
//!     22    4 d
//!     26    2 n_side
//!     28    8 beta_min (IEEE 754)
//!     36    8 beta_max (IEEE 754)
//!     44    4 prior id
//!     48      payload
//! ```
//!
//! The payload holds, for `t = T, ..., 2`, `m` index fields of `log2 K` bits
//! followed by `m - 1` code fields of `C` bits, packed MSB-first with the
//! last byte zero-padded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bits::{BitReader, BitWriter};
use crate::diffusion::{ddpm_step, init_latent, Component, Covariance, GaussianMixturePrior, Schedule};
use crate::error::{Error, Result};
use crate::inverse::{ddcm_direction, LinearOperator, Observation};
use crate::ncs::{top_m_from_inner, SignRule};
use crate::quantizer::{self, Grid, StickCode};
use crate::rng::{keyed_normal, Codebook, Domain, LazyCodebook, StreamKey, GENERATOR_VERSION};
use crate::vecops;

pub const MAGIC: [u8; 4] = *b"NCSB";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 48;

/// Largest `K * d` for which the encoder keeps a step's codebook in memory
/// instead of regenerating the selected atoms.
const DENSE_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    #[default]
    Dp,
    Stagewise,
    NearestNeighbor,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecHeader {
    pub version: u8,
    pub rng_version: u8,
    pub seed: u64,
    pub steps: u16,
    pub k: u32,
    pub m: u8,
    pub bits: u8,
    pub dim: u32,
    pub n_side: u16,
    pub beta_min: f64,
    pub beta_max: f64,
    pub prior_id: u32,
}

impl CodecHeader {
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", self.version)));
        }
        if self.rng_version != GENERATOR_VERSION {
            return Err(Error::Format(format!("unsupported generator version {}", self.rng_version)));
        }
        if self.k == 0 || !self.k.is_power_of_two() {
            return Err(Error::Format(format!("K = {} is not a power of two", self.k)));
        }
        if self.m == 0 || self.m as u32 > self.k {
            return Err(Error::Format(format!("need 1 <= m <= K, got m = {}", self.m)));
        }
        if self.bits > quantizer::MAX_BITS {
            return Err(Error::Format(format!("C = {} exceeds {}", self.bits, quantizer::MAX_BITS)));
        }
        if self.steps == 0 || self.dim == 0 {
            return Err(Error::Format("T and d must be at least 1".into()));
        }
        Schedule::linear(self.steps as usize, self.beta_min, self.beta_max)
            .map_err(|e| Error::Format(format!("invalid schedule: {e}")))?;
        Ok(())
    }

    pub fn index_bits(&self) -> u32 {
        self.k.trailing_zeros()
    }

    pub fn payload_bits(&self) -> u64 {
        quantizer::payload_bits(self.steps as usize, self.k as u64, self.m as usize, self.bits)
            .expect("validated header")
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload_bits().div_ceil(8) as usize
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.steps as usize, self.beta_min, self.beta_max)
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = self.version;
        out[5] = self.rng_version;
        out[6..14].copy_from_slice(&self.seed.to_be_bytes());
        out[14..16].copy_from_slice(&self.steps.to_be_bytes());
        out[16..20].copy_from_slice(&self.k.to_be_bytes());
        out[20] = self.m;
        out[21] = self.bits;
        out[22..26].copy_from_slice(&self.dim.to_be_bytes());
        out[26..28].copy_from_slice(&self.n_side.to_be_bytes());
        out[28..36].copy_from_slice(&self.beta_min.to_bits().to_be_bytes());
        out[36..44].copy_from_slice(&self.beta_max.to_bits().to_be_bytes());
        out[44..48].copy_from_slice(&self.prior_id.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length { expected: HEADER_LEN, actual: bytes.len() });
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let be_u16 = |o: usize| u16::from_be_bytes([bytes[o], bytes[o + 1]]);
        let be_u32 = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
        let be_u64 = |o: usize| u64::from_be_bytes(bytes[o..o + 8].try_into().unwrap());
        let header = CodecHeader {
            version: bytes[4],
            rng_version: bytes[5],
            seed: be_u64(6),
            steps: be_u16(14),
            k: be_u32(16),
            m: bytes[20],
            bits: bytes[21],
            dim: be_u32(22),
            n_side: be_u16(26),
            beta_min: f64::from_bits(be_u64(28)),
            beta_max: f64::from_bits(be_u64(36)),
            prior_id: be_u32(44),
        };
        header.validate()?;
        Ok(header)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: CodecHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = CodecHeader::from_bytes(bytes)?;
        let expected = HEADER_LEN + header.payload_bytes();
        if bytes.len() != expected {
            return Err(Error::Length { expected, actual: bytes.len() });
        }
        Ok(Self { header, payload: bytes[HEADER_LEN..].to_vec() })
    }

    pub fn bpp(&self) -> f64 {
        report_bpp(&self.header)
    }
}

pub fn report_bpp(header: &CodecHeader) -> f64 {
    quantizer::bpp(header.steps as usize, header.k as u64, header.m as usize, header.bits, header.n_side as usize)
        .expect("validated header")
}

/// Everything the encoder needs beyond the signal and prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    pub seed: u64,
    pub steps: u16,
    pub k: u32,
    pub m: u8,
    pub bits: u8,
    pub n_side: u16,
    pub beta_min: f64,
    pub beta_max: f64,
    pub prior_id: u32,
    #[serde(default)]
    pub quantizer: QuantizerKind,
}

impl CodecParams {
    pub fn header(&self, dim: usize) -> Result<CodecHeader> {
        let dim = u32::try_from(dim).map_err(|_| Error::InvalidArgument("signal too long".into()))?;
        let header = CodecHeader {
            version: FORMAT_VERSION,
            rng_version: GENERATOR_VERSION,
            seed: self.seed,
            steps: self.steps,
            k: self.k,
            m: self.m,
            bits: self.bits,
            dim,
            n_side: self.n_side,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            prior_id: self.prior_id,
        };
        header.validate().map_err(|e| match e {
            Error::Format(msg) => Error::InvalidArgument(msg),
            other => other,
        })?;
        Ok(header)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub stream: Bitstream,
    /// Encoder-side reconstruction, identical to what the decoder produces.
    pub reconstruction: Vec<f64>,
    pub degenerate_steps: usize,
    /// Bits written before padding.
    pub payload_bits: u64,
    /// `<b, gamma>` of the quantized weights, one entry per step `t = T..2`.
    pub objectives: Vec<f64>,
}

/// Indices and codes for one reverse step.
#[derive(Debug, Clone, PartialEq, Eq)]
struct StepCode {
    indices: Vec<usize>,
    code: StickCode,
}

fn first_atom_code(m: usize, grid: &Grid) -> StepCode {
    let mut codes = vec![0u32; m - 1];
    if grid.bits() > 0 && m > 1 {
        codes[0] = grid.num_codes() - 1;
    }
    StepCode { indices: (0..m).collect(), code: StickCode { m, codes } }
}

fn synthesize(codebook: &dyn Codebook, step: &StepCode, grid: &Grid) -> Result<Vec<f64>> {
    let weights = step.code.weights(grid);
    codebook.combine_indexed(&step.indices, &weights)
}

fn quantize(kind: QuantizerKind, b: &[f64], grid: &Grid) -> Result<quantizer::Quantized> {
    match kind {
        QuantizerKind::Dp => quantizer::quantize_dp(b, grid),
        QuantizerKind::Stagewise => quantizer::quantize_stagewise(b, grid),
        QuantizerKind::NearestNeighbor => quantizer::quantize_nn_weights(b, grid),
        QuantizerKind::Exhaustive => quantizer::quantize_greedy_exponential(b, grid, quantizer::DEFAULT_BUDGET),
    }
}

pub fn compress(x0: &[f64], prior: &GaussianMixturePrior, params: &CodecParams) -> Result<Compressed> {
    let header = params.header(x0.len())?;
    if prior.dim() != x0.len() {
        return Err(Error::mismatch(prior.dim(), x0.len()));
    }
    if !vecops::all_finite(x0) {
        return Err(Error::InvalidInput("signal contains non-finite values".into()));
    }
    let schedule = header.schedule()?;
    let d = x0.len();
    let m = header.m as usize;
    let grid = Grid::new(header.bits, m)?;
    let target = Observation::new(x0.to_vec(), LinearOperator::identity(d), 0.0)?;

    let mut writer = BitWriter::new();
    let mut x = init_latent(header.seed, &schedule, d)?;
    let mut degenerate_steps = 0;
    let mut objectives = Vec::with_capacity(schedule.steps().saturating_sub(1));
    for t in (2..=schedule.steps()).rev() {
        let terms = prior.evaluate(&schedule, &x, t)?;
        let c = ddcm_direction(&target, &terms.posterior_mean)?.c;
        let lazy = LazyCodebook::new(header.seed, t as u32, header.k as usize, d)?;
        let codebook: Box<dyn Codebook> =
            if lazy.len() * d <= DENSE_LIMIT { Box::new(lazy.materialize()) } else { Box::new(lazy) };
        let inner = codebook.inner_products(&c)?;
        let step = match top_m_from_inner(&inner, m, SignRule::NonNegative, vecops::norm(&c), d) {
            Ok(sel) => {
                let q = quantize(params.quantizer, &sel.inner, &grid)?;
                objectives.push(q.objective);
                StepCode { indices: sel.indices, code: q.code }
            }
            Err(Error::Degenerate) => {
                degenerate_steps += 1;
                let step = first_atom_code(m, &grid);
                let b: Vec<f64> = step.indices.iter().map(|&i| inner[i]).collect();
                objectives.push(vecops::dot(&b, &step.code.weights(&grid)));
                step
            }
            Err(e) => return Err(e),
        };
        for &i in &step.indices {
            writer.write(i as u64, header.index_bits());
        }
        for &code in &step.code.codes {
            writer.write(code as u64, header.bits as u32);
        }
        let noise = synthesize(codebook.as_ref(), &step, &grid)?;
        x = ddpm_step(&schedule, &x, t, &terms.score, &noise)?;
    }
    x = final_step(prior, &schedule, &x)?;
    let payload_bits = writer.bits_written();
    debug_assert_eq!(payload_bits, header.payload_bits());
    Ok(Compressed {
        payload_bits,
        stream: Bitstream { header, payload: writer.finish() },
        reconstruction: x,
        degenerate_steps,
        objectives,
    })
}

fn final_step(prior: &GaussianMixturePrior, schedule: &Schedule, x: &[f64]) -> Result<Vec<f64>> {
    let score = prior.score(schedule, x, 1)?;
    ddpm_step(schedule, x, 1, &score, &vec![0.0; x.len()])
}

pub fn decompress(stream: &Bitstream, registry: &PriorRegistry) -> Result<Vec<f64>> {
    let header = stream.header;
    header.validate()?;
    if stream.payload.len() != header.payload_bytes() {
        return Err(Error::Length { expected: header.payload_bytes(), actual: stream.payload.len() });
    }
    let d = header.dim as usize;
    let prior = registry.resolve(header.prior_id, d)?;
    let schedule = header.schedule()?;
    let m = header.m as usize;
    let grid = Grid::new(header.bits, m)?;

    let mut reader = BitReader::new(&stream.payload);
    let truncated = || Error::Length { expected: header.payload_bytes(), actual: stream.payload.len() };
    let mut x = init_latent(header.seed, &schedule, d)?;
    for t in (2..=schedule.steps()).rev() {
        let mut indices = Vec::with_capacity(m);
        for _ in 0..m {
            indices.push(reader.read(header.index_bits()).ok_or_else(truncated)? as usize);
        }
        let mut codes = Vec::with_capacity(m - 1);
        for _ in 1..m {
            codes.push(reader.read(header.bits as u32).ok_or_else(truncated)? as u32);
        }
        let step = StepCode { indices, code: StickCode { m, codes } };
        let codebook = LazyCodebook::new(header.seed, t as u32, header.k as usize, d)?;
        let score = prior.score(&schedule, &x, t)?;
        let noise = synthesize(&codebook, &step, &grid)?;
        x = ddpm_step(&schedule, &x, t, &score, &noise)?;
    }
    final_step(&prior, &schedule, &x)
}

pub fn decompress_bytes(bytes: &[u8], registry: &PriorRegistry) -> Result<Vec<f64>> {
    decompress(&Bitstream::from_bytes(bytes)?, registry)
}

/// N(0, I_d).
pub const PRIOR_STANDARD_NORMAL: u32 = 0;
/// Equal mixture of N(+0.5, 0.1 I) and N(-0.5, 0.1 I).
pub const PRIOR_TWO_MODE: u32 = 1;
/// Eight equally weighted clusters with seeded means and variance 0.05.
pub const PRIOR_CLUSTERED: u32 = 2;

const CLUSTER_SEED: u64 = 0x6e63_735f_7072_696f;

/// Priors shared out of band between encoder and decoder, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct PriorRegistry {
    custom: BTreeMap<u32, GaussianMixturePrior>,
}

impl PriorRegistry {
    pub fn builtin() -> Self {
        Self::default()
    }

    /// Registers a fixed-dimension prior; built-in ids cannot be shadowed.
    pub fn register(&mut self, id: u32, prior: GaussianMixturePrior) -> Result<()> {
        if id <= PRIOR_CLUSTERED {
            return Err(Error::InvalidArgument(format!("prior id {id} is reserved")));
        }
        self.custom.insert(id, prior);
        Ok(())
    }

    pub fn resolve(&self, id: u32, d: usize) -> Result<GaussianMixturePrior> {
        let prior = match id {
            PRIOR_STANDARD_NORMAL => GaussianMixturePrior::standard_normal(d)?,
            PRIOR_TWO_MODE => GaussianMixturePrior::new(vec![
                Component { weight: 0.5, mean: vec![0.5; d], covariance: Covariance::isotropic(d, 0.1) },
                Component { weight: 0.5, mean: vec![-0.5; d], covariance: Covariance::isotropic(d, 0.1) },
            ])?,
            PRIOR_CLUSTERED => {
                let components = (0..8u32)
                    .map(|k| {
                        let z = keyed_normal(StreamKey::new(CLUSTER_SEED, Domain::PriorSample, d as u32, k), d)?;
                        Ok(Component {
                            weight: 0.125,
                            mean: z.iter().map(|v| 0.5 * v).collect(),
                            covariance: Covariance::isotropic(d, 0.05),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                GaussianMixturePrior::new(components)?
            }
            other => self.custom.get(&other).cloned().ok_or(Error::UnknownPrior(other))?,
        };
        if prior.dim() != d {
            return Err(Error::mismatch(prior.dim(), d));
        }
        Ok(prior)
    }
}
