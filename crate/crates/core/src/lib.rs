//! Noise combination sampling for diffusion-based inverse problems and
//! generative compression.
//!
//! The reverse diffusion noise at every step is drawn as a weighted
//! combination of atoms from a seeded Gaussian codebook, with the weights
//! chosen to align the noise with a measurement-driven direction. Because
//! the codebooks are reproducible from a seed, the chosen indices and
//! quantized weights also form a compact bitstream.

pub mod bits;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod inverse;
pub mod ncs;
pub mod quantizer;
pub mod rng;
pub mod vecops;

pub use codec::{compress, decompress, decompress_bytes, report_bpp, Bitstream, CodecHeader, CodecParams, PriorRegistry};
pub use diffusion::{GaussianMixturePrior, Schedule};
pub use error::{Error, Result};
pub use inverse::{LinearOperator, Observation};
pub use ncs::{optimal_weights, solve, SolverConfig, SolverKind};
pub use quantizer::{quantize_dp, Grid, StickCode};
pub use rng::{Codebook, LazyCodebook, NoiseCodebook, StreamKey};
