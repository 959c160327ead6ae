//! Scheduled fitness: held-out loss minus decaying temporal and spatial regularizers.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{InputCoding, Samples};
use crate::derive_seed;
use crate::error::{GeeError, Result};
use crate::genome::{GeneInteraction, Genotype};
use crate::snn::NetworkSpec;
use crate::training::{evaluate, train, TrainConfig};

/// Fitness assigned to candidates whose evaluation diverged or failed.
pub const WORST_FITNESS: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitnessConfig {
    /// Per-generation exponent of the temporal-difference weight.
    pub lambda1: f64,
    /// Per-generation exponent of the spatial-entropy weight.
    pub lambda2: f64,
    pub use_temporal: bool,
    pub use_entropy: bool,
    /// Training epochs spent on each candidate before scoring.
    pub n_eval: usize,
    pub entropy_epsilon: f64,
    /// Fraction of the training split held out to score candidates.
    pub held_out_fraction: f64,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        Self {
            lambda1: -0.2,
            lambda2: -0.2,
            use_temporal: true,
            use_entropy: true,
            n_eval: 3,
            entropy_epsilon: 1e-12,
            held_out_fraction: 0.2,
        }
    }
}

impl FitnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 <= 0.0 && self.lambda2 <= 0.0) {
            return Err(GeeError::invalid("lambda1 and lambda2 must be <= 0"));
        }
        if !(self.entropy_epsilon > 0.0) {
            return Err(GeeError::invalid("entropy_epsilon must be > 0"));
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return Err(GeeError::invalid("held_out_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Sum of squared Frobenius changes between consecutive readout steps.
pub fn temporal_diff_reg(outputs: &[Vec<f64>]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(GeeError::invalid("temporal regularizer needs at least one step"));
    }
    let len = outputs[0].len();
    if outputs.iter().any(|y| y.len() != len) {
        return Err(GeeError::shape("readout steps differ in shape"));
    }
    Ok(outputs
        .windows(2)
        .map(|pair| pair[1].iter().zip(&pair[0]).map(|(b, a)| (b - a) * (b - a)).sum::<f64>())
        .sum())
}

/// Shannon entropy of the normalized magnitudes of the interaction matrix.
/// An all-zero matrix has no distribution and scores 0.
pub fn spatial_entropy_reg(interaction: &GeneInteraction, eps: f64) -> f64 {
    let total: f64 = interaction.matrix().iter().map(|v| v.abs()).sum();
    if total == 0.0 || !total.is_finite() {
        warn!("interaction matrix has no usable magnitude; spatial entropy set to 0");
        return 0.0;
    }
    -interaction
        .matrix()
        .iter()
        .map(|v| {
            let p = v.abs() / total;
            p * (p + eps).ln()
        })
        .sum::<f64>()
}

/// `L − e^(λ1·t)·r1 − e^(λ2·t)·r2`, with disabled terms dropped entirely.
pub fn fitness(loss: f64, r1: f64, r2: f64, generation: usize, cfg: &FitnessConfig) -> f64 {
    let t = generation as f64;
    let mut f = loss;
    if cfg.use_temporal {
        f -= (cfg.lambda1 * t).exp() * r1;
    }
    if cfg.use_entropy {
        f -= (cfg.lambda2 * t).exp() * r2;
    }
    f
}

/// Score and diagnostics of one candidate genotype.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub fitness: f64,
    pub loss: f64,
    pub r1: f64,
    pub r2: f64,
    pub seed: u64,
    /// Set when training or evaluation produced non-finite values.
    pub diverged: bool,
}

impl CandidateScore {
    pub fn failed(seed: u64) -> Self {
        Self {
            fitness: WORST_FITNESS,
            loss: f64::NAN,
            r1: f64::NAN,
            r2: f64::NAN,
            seed,
            diverged: true,
        }
    }
}

/// Everything a candidate evaluation needs besides the genotype.
#[derive(Debug, Clone)]
pub struct EvaluationContext<'a> {
    pub net: &'a NetworkSpec,
    pub fit: &'a Samples,
    pub held_out: &'a Samples,
    pub train: TrainConfig,
    pub fitness: FitnessConfig,
    pub coding: InputCoding,
}

/// Samples encodings from the genotype, trains for `n_eval` epochs on the fit
/// split, and scores the result on the held-out split.
///
/// The spatial term is computed from the genotype's own interaction matrix.
pub fn evaluate_candidate(genotype: &Genotype, generation: usize, seed: u64, ctx: &EvaluationContext<'_>) -> Result<CandidateScore> {
    let genome = ctx.net.sample_genome(genotype, derive_seed(seed, 0))?;
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, 1),
        ..ctx.train
    };
    let outcome = match train(ctx.net, &genome, ctx.fit, &train_cfg, ctx.fitness.n_eval, ctx.coding) {
        Ok(o) => o,
        Err(GeeError::Numerical(msg)) => {
            warn!("candidate with seed {seed} diverged: {msg}");
            return Ok(CandidateScore::failed(seed));
        }
        Err(e) => return Err(e),
    };
    let eval = match evaluate(ctx.net, &outcome.genome, ctx.held_out, ctx.train.batch_size, ctx.coding, derive_seed(seed, 2)) {
        Ok(e) => e,
        Err(GeeError::Numerical(msg)) => {
            warn!("candidate with seed {seed} failed evaluation: {msg}");
            return Ok(CandidateScore::failed(seed));
        }
        Err(e) => return Err(e),
    };
    let r2 = spatial_entropy_reg(&genotype.interaction, ctx.fitness.entropy_epsilon);
    let f = fitness(eval.loss, eval.temporal_diff, r2, generation, &ctx.fitness);
    if !f.is_finite() {
        warn!("candidate with seed {seed} produced non-finite fitness");
        return Ok(CandidateScore {
            fitness: WORST_FITNESS,
            loss: eval.loss,
            r1: eval.temporal_diff,
            r2,
            seed,
            diverged: true,
        });
    }
    Ok(CandidateScore {
        fitness: f,
        loss: eval.loss,
        r1: eval.temporal_diff,
        r2,
        seed,
        diverged: false,
    })
}
