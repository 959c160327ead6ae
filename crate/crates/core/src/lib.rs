//! Genetically encoded spiking neural networks.
//!
//! Layer weights are never stored directly. Each layer owns a neuronal
//! encoding tensor, and a single gene interaction matrix shared by the whole
//! network turns pairs of adjacent encodings into weights. The initial wiring
//! distribution and the interaction matrix are searched with CMA-ES under a
//! generation-scheduled fitness, then the materialized network is fine-tuned
//! with surrogate gradients.
//!
//! Module map:
//!
//! - [`genome`]: encodings, interaction matrix, genotype, weight materialization
//! - [`snn`]: LIF dynamics, forward simulation, spike and energy accounting
//! - [`training`]: loss, reverse-mode gradients through the factorization, SGD
//! - [`evolution`]: CMA-ES over flattened genotypes
//! - [`fitness`]: temporal-difference and spatial-entropy regularized fitness
//! - [`data`]: synthetic blobs, IDX/CSV ingestion, input coding, noise
//! - [`experiment`]: config schema, ablation presets and the command pipeline

pub mod data;
pub mod error;
pub mod evolution;
pub mod experiment;
pub mod fitness;
pub mod genome;
pub mod snn;
pub mod training;

mod textfmt;

pub use error::{GeeError, Result};

/// Derives an independent 64-bit seed from a base seed and a stream index.
///
/// SplitMix64 finalizer; distinct `(base, stream)` pairs give well-mixed seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
