//! Keyed random streams and per-timestep noise codebooks.
//!
//! Every stream is addressed by a [`StreamKey`]. The key is mapped onto a
//! ChaCha8 counter-mode generator: the 256-bit ChaCha key holds the seed
//! (little-endian, bytes 0..8) and the domain tag (byte 8), the 64-bit
//! ChaCha stream id is `(t << 32) | index`. Output words are consumed
//! exactly as `rand_chacha` emits them, so any ChaCha8 implementation with
//! the same block layout reproduces the uniform stream.
//!
//! Standard normals use the Box–Muller transform on pairs of 64-bit words
//! `(w1, w2)`:
//!
//! ```text
//! u1 = ((w1 >> 11) + 1) * 2^-53        in (0, 1]
//! u2 =  (w2 >> 11)      * 2^-53        in [0, 1)
//! r  = sqrt(-2 ln u1),  theta = 2 pi u2
//! z0 = r cos(theta),    z1 = r sin(theta)
//! ```
//!
//! `z0` is returned first, `z1` is held for the next request. The
//! transcendental functions come from `libm` so results do not depend on
//! the platform math library.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops;

/// Generator family written into codec headers.
pub const GENERATOR_NAME: &str = "chacha8-boxmuller";
/// Bumped whenever the key layout or the normal transform changes.
pub const GENERATOR_VERSION: u8 = 1;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Domain {
    Codebook = 1,
    InitLatent = 2,
    FreshNoise = 3,
    PriorSample = 4,
    ObservationNoise = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: Domain,
    pub t: u32,
    pub index: u32,
}

impl StreamKey {
    pub fn new(seed: u64, domain: Domain, t: u32, index: u32) -> Self {
        Self { seed, domain, t, index }
    }

    fn chacha_key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8] = self.domain as u8;
        key
    }

    fn stream_id(&self) -> u64 {
        ((self.t as u64) << 32) | self.index as u64
    }
}

/// A value-like handle onto one keyed stream.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(key: StreamKey) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key.chacha_key());
        rng.set_stream(key.stream_id());
        Self { rng, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        self.rng.fill_bytes(out);
    }

    /// Position in 32-bit words from the start of the stream.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Jump to an absolute word position. Any held Box–Muller value is dropped.
    pub fn seek(&mut self, word_pos: u128) {
        self.rng.set_word_pos(word_pos);
        self.spare = None;
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53;
        let u2 = (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53;
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.standard_normal();
        }
    }

    pub fn sample_standard_normal(&mut self, d: usize) -> Result<Vec<f64>> {
        if d == 0 {
            return Err(Error::InvalidDimension("sample dimension must be at least 1".into()));
        }
        let mut out = vec![0.0; d];
        self.fill_standard_normal(&mut out);
        Ok(out)
    }
}

pub fn derive_stream(key: StreamKey) -> Stream {
    Stream::new(key)
}

/// `d` standard normals drawn from the start of the keyed stream.
pub fn keyed_normal(key: StreamKey, d: usize) -> Result<Vec<f64>> {
    Stream::new(key).sample_standard_normal(d)
}

/// Atom `i` of codebook `(seed, t)`.
pub fn codebook_atom(seed: u64, t: u32, index: u32, d: usize) -> Result<Vec<f64>> {
    keyed_normal(StreamKey::new(seed, Domain::Codebook, t, index), d)
}

fn fill_atom(seed: u64, t: u32, index: u32, out: &mut [f64]) {
    Stream::new(StreamKey::new(seed, Domain::Codebook, t, index)).fill_standard_normal(out);
}

fn check_shape(k: usize, d: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("codebook needs at least one atom".into()));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("codebook dimension must be at least 1".into()));
    }
    if k as u64 > u32::MAX as u64 + 1 {
        return Err(Error::InvalidArgument(format!("codebook size {k} exceeds the index space")));
    }
    Ok(())
}

/// Anything that can act as the matrix `E_t`.
pub trait Codebook: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `c^T E_t`, one inner product per atom.
    fn inner_products(&self, c: &[f64]) -> Result<Vec<f64>>;

    /// `sum_j weights[j] * atom(indices[j])`, accumulated in the given order.
    fn combine_indexed(&self, indices: &[usize], weights: &[f64]) -> Result<Vec<f64>>;

    fn combine(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.len() {
            return Err(Error::mismatch(self.len(), weights.len()));
        }
        let indices: Vec<usize> = (0..self.len()).collect();
        self.combine_indexed(&indices, weights)
    }
}

/// A fully materialized codebook. Atoms are stored contiguously, atom-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCodebook {
    seed: u64,
    t: u32,
    k: usize,
    d: usize,
    atoms: Vec<f64>,
}

impl NoiseCodebook {
    pub fn build(seed: u64, t: u32, k: usize, d: usize) -> Result<Self> {
        check_shape(k, d)?;
        let mut atoms = vec![0.0; k * d];
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            atoms
                .par_chunks_mut(d)
                .enumerate()
                .for_each(|(i, chunk)| fill_atom(seed, t, i as u32, chunk));
        }
        #[cfg(not(feature = "parallel"))]
        for (i, chunk) in atoms.chunks_mut(d).enumerate() {
            fill_atom(seed, t, i as u32, chunk);
        }
        Ok(Self { seed, t, k, d, atoms })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.d..(i + 1) * self.d]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks(self.d)
    }

    pub fn key(&self, i: usize) -> StreamKey {
        StreamKey::new(self.seed, Domain::Codebook, self.t, i as u32)
    }
}

impl Codebook for NoiseCodebook {
    fn len(&self) -> usize {
        self.k
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn inner_products(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.d {
            return Err(Error::mismatch(self.d, c.len()));
        }
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            Ok(self.atoms.par_chunks(self.d).map(|a| vecops::dot(c, a)).collect())
        }
        #[cfg(not(feature = "parallel"))]
        Ok(self.atoms().map(|a| vecops::dot(c, a)).collect())
    }

    fn combine_indexed(&self, indices: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
        if indices.len() != weights.len() {
            return Err(Error::mismatch(indices.len(), weights.len()));
        }
        let mut out = vec![0.0; self.d];
        for (&i, &w) in indices.iter().zip(weights) {
            if i >= self.k {
                return Err(Error::InvalidArgument(format!("atom index {i} out of range")));
            }
            vecops::axpy(w, self.atom(i), &mut out);
        }
        Ok(out)
    }
}

/// A codebook whose atoms are regenerated on demand instead of stored.
///
/// Used by the codec for large `K`, where `K * d` floats do not fit in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LazyCodebook {
    pub seed: u64,
    pub t: u32,
    k: usize,
    d: usize,
}

impl LazyCodebook {
    pub fn new(seed: u64, t: u32, k: usize, d: usize) -> Result<Self> {
        check_shape(k, d)?;
        Ok(Self { seed, t, k, d })
    }

    pub fn atom(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        fill_atom(self.seed, self.t, i as u32, &mut out);
        out
    }

    pub fn materialize(&self) -> NoiseCodebook {
        NoiseCodebook::build(self.seed, self.t, self.k, self.d).expect("shape already validated")
    }
}

impl Codebook for LazyCodebook {
    fn len(&self) -> usize {
        self.k
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn inner_products(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.d {
            return Err(Error::mismatch(self.d, c.len()));
        }
        let one = |i: usize| {
            let mut buf = vec![0.0; self.d];
            fill_atom(self.seed, self.t, i as u32, &mut buf);
            vecops::dot(c, &buf)
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            Ok((0..self.k).into_par_iter().map(one).collect())
        }
        #[cfg(not(feature = "parallel"))]
        Ok((0..self.k).map(one).collect())
    }

    fn combine_indexed(&self, indices: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
        if indices.len() != weights.len() {
            return Err(Error::mismatch(indices.len(), weights.len()));
        }
        let mut out = vec![0.0; self.d];
        let mut buf = vec![0.0; self.d];
        for (&i, &w) in indices.iter().zip(weights) {
            if i >= self.k {
                return Err(Error::InvalidArgument(format!("atom index {i} out of range")));
            }
            fill_atom(self.seed, self.t, i as u32, &mut buf);
            vecops::axpy(w, &buf, &mut out);
        }
        Ok(out)
    }
}

pub fn build_codebook(seed: u64, t: u32, k: usize, d: usize) -> Result<NoiseCodebook> {
    NoiseCodebook::build(seed, t, k, d)
}
