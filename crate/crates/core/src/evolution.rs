//! Covariance matrix adaptation evolution strategy over flattened genotypes.
//!
//! The strategy minimizes. One generation is an [`CmaState::ask`] for λ
//! candidates followed by exactly one [`CmaState::tell`] with their fitnesses.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{GeeError, Result};
use crate::fitness::{CandidateScore, WORST_FITNESS};
use crate::genome::Genotype;
use crate::textfmt;

/// Largest condition number tolerated before the covariance is reconditioned.
pub const MAX_CONDITION: f64 = 1e14;

/// Strategy constants derived from the dimension and population size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaParams {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    /// Expected norm of an n-dimensional standard normal vector.
    pub chi_n: f64,
    /// Generations between eigendecompositions.
    pub eigen_interval: usize,
}

impl CmaParams {
    pub fn default_lambda(dim: usize) -> usize {
        4 + (3.0 * (dim as f64).ln()).floor() as usize
    }

    pub fn new(dim: usize, lambda: Option<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(GeeError::invalid("dimension must be >= 1"));
        }
        let lambda = lambda.unwrap_or_else(|| Self::default_lambda(dim));
        if lambda < 2 {
            return Err(GeeError::invalid("population size must be >= 2"));
        }
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        let eigen_interval = (1.0 / (10.0 * n * (c_1 + c_mu))).ceil().max(1.0) as usize;
        Ok(Self {
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            eigen_interval,
        })
    }
}

/// Full strategy state.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaState {
    pub params: CmaParams,
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    /// Eigenvectors of `cov` as columns.
    pub basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`.
    pub scales: DVector<f64>,
    pub generation: usize,
    eigen_generation: usize,
    pending: Option<Vec<DVector<f64>>>,
}

impl CmaState {
    pub fn new(mean: &[f64], sigma0: f64, lambda: Option<usize>) -> Result<Self> {
        let dim = mean.len();
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(GeeError::invalid("initial step size must be positive and finite"));
        }
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(GeeError::invalid("initial mean must be finite"));
        }
        let params = CmaParams::new(dim, lambda)?;
        Ok(Self {
            params,
            mean: DVector::from_column_slice(mean),
            sigma: sigma0,
            cov: DMatrix::identity(dim, dim),
            p_sigma: DVector::zeros(dim),
            p_c: DVector::zeros(dim),
            basis: DMatrix::identity(dim, dim),
            scales: DVector::from_element(dim, 1.0),
            generation: 0,
            eigen_generation: 0,
            pending: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn lambda(&self) -> usize {
        self.params.lambda
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Draws λ candidates `m + σ·B·D·z` with `z ~ N(0, I)`.
    pub fn ask<R: Rng>(&mut self, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if self.pending.is_some() {
            return Err(GeeError::State("ask called twice without tell".into()));
        }
        let n = self.dim();
        let mut out = Vec::with_capacity(self.params.lambda);
        for _ in 0..self.params.lambda {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &self.basis * z.component_mul(&self.scales);
            out.push(&self.mean + y * self.sigma);
        }
        let cands = out.iter().map(|v| v.iter().copied().collect()).collect();
        self.pending = Some(out);
        Ok(cands)
    }

    /// Ranks the asked candidates by fitness and adapts mean, paths,
    /// covariance, and step size.
    ///
    /// `candidates` may come in any order; each is matched to the asked
    /// candidate it equals so ties are broken by ask order. NaN fitnesses
    /// rank last.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) -> Result<()> {
        let pending = self
            .pending
            .as_ref()
            .ok_or_else(|| GeeError::State("tell called without a matching ask".into()))?;
        let lambda = self.params.lambda;
        if candidates.len() != lambda || fitnesses.len() != lambda {
            return Err(GeeError::shape(format!(
                "tell needs {lambda} candidates and fitnesses, got {} and {}",
                candidates.len(),
                fitnesses.len()
            )));
        }
        let mut used = vec![false; lambda];
        let mut ask_index = Vec::with_capacity(lambda);
        for cand in candidates {
            let slot = (0..lambda)
                .find(|&j| !used[j] && pending[j].iter().eq(cand.iter()))
                .ok_or_else(|| GeeError::State("tell received a candidate that was not asked".into()))?;
            used[slot] = true;
            ask_index.push(slot);
        }
        if fitnesses.iter().any(|f| f.is_nan()) {
            warn!("NaN fitness ranked worst at generation {}", self.generation);
        }
        let mut order: Vec<usize> = (0..lambda).collect();
        order.sort_by(|&a, &b| {
            let key = |i: usize| if fitnesses[i].is_nan() { f64::INFINITY } else { fitnesses[i] };
            key(a)
                .partial_cmp(&key(b))
                .expect("NaN mapped away")
                .then(fitnesses[a].is_nan().cmp(&fitnesses[b].is_nan()))
                .then(ask_index[a].cmp(&ask_index[b]))
        });

        let n = self.dim();
        let p = &self.params;
        let old_mean = self.mean.clone();
        let selected: Vec<DVector<f64>> = order[..p.mu]
            .iter()
            .map(|&i| pending[ask_index[i]].clone())
            .collect();
        let mut new_mean = DVector::zeros(n);
        for (w, x) in p.weights.iter().zip(&selected) {
            new_mean += x * *w;
        }
        let ys: Vec<DVector<f64>> = selected.iter().map(|x| (x - &old_mean) / self.sigma).collect();
        let y_w = (&new_mean - &old_mean) / self.sigma;

        let inv_sqrt = &self.basis * DMatrix::from_diagonal(&self.scales.map(|d| 1.0 / d)) * self.basis.transpose();
        self.p_sigma = &self.p_sigma * (1.0 - p.c_sigma) + (&inv_sqrt * &y_w) * (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        let ps_norm = self.p_sigma.norm();
        let t = self.generation as f64;
        let h_sigma = ps_norm / (1.0 - (1.0 - p.c_sigma).powf(2.0 * (t + 1.0))).sqrt() < (1.4 + 2.0 / (n as f64 + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - p.c_c) + &y_w * (h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, y) in p.weights.iter().zip(&ys) {
            rank_mu += y * y.transpose() * *w;
        }
        let rank_one = &self.p_c * self.p_c.transpose() + &self.cov * ((1.0 - h) * p.c_c * (2.0 - p.c_c));
        self.cov = &self.cov * (1.0 - p.c_1 - p.c_mu) + rank_one * p.c_1 + rank_mu * p.c_mu;
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;

        self.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(GeeError::numerical(format!("step size became {}", self.sigma)));
        }
        self.mean = new_mean;
        self.generation += 1;
        self.pending = None;

        if self.cov.clone().cholesky().is_none() {
            warn!("covariance lost positive definiteness; reconditioning");
            self.update_eigen()?;
        } else if self.generation - self.eigen_generation >= self.params.eigen_interval {
            self.update_eigen()?;
        }
        if self.cov.clone().cholesky().is_none() {
            return Err(GeeError::numerical("covariance is not positive definite after update"));
        }
        Ok(())
    }

    /// Refreshes the eigenbasis, reconditioning when eigenvalues are
    /// non-positive or too spread.
    fn update_eigen(&mut self) -> Result<()> {
        let n = self.dim();
        let eig = self.cov.clone().symmetric_eigen();
        let mut values = eig.eigenvalues.clone();
        let max = values.max();
        if !max.is_finite() || max <= 0.0 {
            return Err(GeeError::numerical("covariance has no positive eigenvalue"));
        }
        let min = values.min();
        if min <= 0.0 || max / min > MAX_CONDITION {
            let shift = max / MAX_CONDITION - min;
            values.iter_mut().for_each(|v| *v += shift);
            self.cov += DMatrix::identity(n, n) * shift;
        }
        self.basis = eig.eigenvectors;
        self.scales = values.map(f64::sqrt);
        let rebuilt = &self.basis * DMatrix::from_diagonal(&values) * self.basis.transpose();
        let rel = (&rebuilt - &self.cov).norm() / self.cov.norm();
        if rel > 1e-8 {
            return Err(GeeError::numerical(format!("eigendecomposition residual {rel:.3e}")));
        }
        self.eigen_generation = self.generation;
        Ok(())
    }

    /// Smallest and largest eigenvalue of the current covariance.
    pub fn eigen_range(&self) -> (f64, f64) {
        let e = self.cov.clone().symmetric_eigen().eigenvalues;
        (e.min(), e.max())
    }

    /// Resume document with every real written to 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        if self.pending.is_some() {
            return Err(GeeError::State("cannot save between ask and tell".into()));
        }
        let n = self.dim();
        let matrix = |m: &DMatrix<f64>| {
            serde_json::Value::Array((0..n).map(|r| textfmt::reals((0..n).map(|c| m[(r, c)]))).collect())
        };
        let doc = serde_json::json!({
            "dim": n,
            "lambda": self.params.lambda,
            "generation": self.generation,
            "eigen_generation": self.eigen_generation,
            "sigma": textfmt::real(self.sigma),
            "mean": textfmt::reals(self.mean.iter().copied()),
            "p_sigma": textfmt::reals(self.p_sigma.iter().copied()),
            "p_c": textfmt::reals(self.p_c.iter().copied()),
            "scales": textfmt::reals(self.scales.iter().copied()),
            "cov": matrix(&self.cov),
            "basis": matrix(&self.basis),
        });
        Ok(textfmt::to_pretty(&doc))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            dim: usize,
            lambda: usize,
            generation: usize,
            eigen_generation: usize,
            sigma: f64,
            mean: Vec<f64>,
            p_sigma: Vec<f64>,
            p_c: Vec<f64>,
            scales: Vec<f64>,
            cov: Vec<Vec<f64>>,
            basis: Vec<Vec<f64>>,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| GeeError::parse("strategy state", e.to_string()))?;
        let n = doc.dim;
        let square = |rows: &[Vec<f64>], what: &str| -> Result<DMatrix<f64>> {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(GeeError::parse("strategy state", format!("{what} is not {n}x{n}")));
            }
            Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
        };
        let vector = |v: &[f64], what: &str| -> Result<DVector<f64>> {
            if v.len() != n {
                return Err(GeeError::parse("strategy state", format!("{what} has length {}, expected {n}", v.len())));
            }
            Ok(DVector::from_column_slice(v))
        };
        let mut state = CmaState::new(&doc.mean, doc.sigma, Some(doc.lambda))?;
        state.generation = doc.generation;
        state.eigen_generation = doc.eigen_generation;
        state.p_sigma = vector(&doc.p_sigma, "p_sigma")?;
        state.p_c = vector(&doc.p_c, "p_c")?;
        state.scales = vector(&doc.scales, "scales")?;
        state.cov = square(&doc.cov, "cov")?;
        state.basis = square(&doc.basis, "basis")?;
        Ok(state)
    }
}

/// Convenience constructor matching `cma_init(dim, m0, sigma0)`.
pub fn cma_init(dim: usize, m0: &[f64], sigma0: f64) -> Result<CmaState> {
    if m0.len() != dim {
        return Err(GeeError::shape(format!("mean has length {}, expected {dim}", m0.len())));
    }
    CmaState::new(m0, sigma0, None)
}

/// Evolution run settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub generations: usize,
    /// Population size; the standard default for the dimension when absent.
    pub population: Option<usize>,
    pub sigma0: f64,
    /// Seeds the candidate sampling of the strategy.
    pub seed: u64,
    /// Seeds each candidate's encoding sample and training run.
    pub candidate_seed: u64,
    /// Concurrent candidate evaluations.
    pub workers: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            generations: 20,
            population: None,
            sigma0: 0.3,
            seed: 0,
            candidate_seed: 1,
            workers: 1,
        }
    }
}

/// Where a candidate sits in the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateInfo {
    pub generation: usize,
    pub index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub info: CandidateInfo,
    pub genotype: Genotype,
    pub score: CandidateScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Best fitness seen so far, across all generations.
    pub best_f: f64,
    pub median_f: f64,
    /// Step size used to sample this generation.
    pub sigma: f64,
    pub min_eig: f64,
    pub max_eig: f64,
    pub beta1_mean: f64,
    pub beta2_mean: f64,
    pub candidates: Vec<CandidateRecord>,
}

pub const EVOLUTION_CSV_HEADER: &str = "generation,best_f,median_f,sigma,min_eig_C,max_eig_C,beta1_mean,beta2_mean";
pub const CANDIDATES_CSV_HEADER: &str = "generation,candidate,L,r1,r2,f,seed";

#[derive(Debug, Clone)]
pub struct EvolutionOutcome {
    pub best: Genotype,
    pub best_score: CandidateScore,
    pub history: Vec<GenerationRecord>,
    pub state: CmaState,
}

impl EvolutionOutcome {
    pub fn evolution_csv(&self) -> String {
        let mut s = format!("{EVOLUTION_CSV_HEADER}\n");
        for r in &self.history {
            let cells = [r.best_f, r.median_f, r.sigma, r.min_eig, r.max_eig, r.beta1_mean, r.beta2_mean];
            let cells: Vec<String> = cells.iter().map(|v| textfmt::real_text(*v)).collect();
            s.push_str(&format!("{},{}\n", r.generation, cells.join(",")));
        }
        s
    }

    pub fn candidates_csv(&self) -> String {
        let mut s = format!("{CANDIDATES_CSV_HEADER}\n");
        for r in &self.history {
            for c in &r.candidates {
                let sc = &c.score;
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    c.info.generation,
                    c.info.index,
                    textfmt::real_text(sc.loss),
                    textfmt::real_text(sc.r1),
                    textfmt::real_text(sc.r2),
                    textfmt::real_text(sc.fitness),
                    sc.seed
                ));
            }
        }
        s
    }

    pub fn best_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.best_f).collect()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs ask → repair → evaluate → tell for the configured generations.
///
/// `evaluate` receives the repaired genotype and its [`CandidateInfo`]. An
/// error from it scores the candidate [`WORST_FITNESS`] and the run goes on.
pub fn run_evolution<F>(initial: &Genotype, cfg: &EvolutionConfig, evaluate: F) -> Result<EvolutionOutcome>
where
    F: Fn(&Genotype, CandidateInfo) -> Result<CandidateScore> + Sync,
{
    if cfg.generations == 0 {
        return Err(GeeError::invalid("generations must be >= 1"));
    }
    let g = initial.g();
    let state = CmaState::new(&initial.flatten(), cfg.sigma0, cfg.population)?;
    continue_evolution(state, g, cfg, evaluate)
}

/// Continues a run from a saved strategy state.
pub fn continue_evolution<F>(mut state: CmaState, g: usize, cfg: &EvolutionConfig, evaluate: F) -> Result<EvolutionOutcome>
where
    F: Fn(&Genotype, CandidateInfo) -> Result<CandidateScore> + Sync,
{
    if state.dim() != Genotype::flat_dim(g) {
        return Err(GeeError::shape("strategy dimension does not match g"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| GeeError::invalid(format!("cannot start worker pool: {e}")))?;
    let mut best: Option<(Genotype, CandidateScore)> = None;
    let mut history = Vec::with_capacity(cfg.generations);
    let start = state.generation;
    for generation in start..start + cfg.generations {
        let gen_seed = derive_seed(cfg.seed, generation as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(gen_seed);
        let sigma = state.sigma;
        let (min_eig, max_eig) = state.eigen_range();
        let raw = state.ask(&mut rng)?;
        let genotypes = raw
            .iter()
            .map(|v| Genotype::unflatten(v, g))
            .collect::<Result<Vec<_>>>()?;
        let records: Vec<CandidateRecord> = pool.install(|| {
            genotypes
                .par_iter()
                .enumerate()
                .map(|(index, genotype)| {
                    let info = CandidateInfo {
                        generation,
                        index,
                        seed: derive_seed(derive_seed(cfg.candidate_seed, generation as u64), index as u64),
                    };
                    let score = match evaluate(genotype, info) {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("candidate {index} of generation {generation} failed: {e}");
                            CandidateScore::failed(info.seed)
                        }
                    };
                    CandidateRecord {
                        info,
                        genotype: genotype.clone(),
                        score,
                    }
                })
                .collect()
        });
        let fits: Vec<f64> = records.iter().map(|r| r.score.fitness).collect();
        for r in &records {
            let better = match &best {
                None => true,
                Some((_, b)) => r.score.fitness < b.fitness,
            };
            if better && !r.score.fitness.is_nan() {
                best = Some((r.genotype.clone(), r.score.clone()));
            }
        }
        if best.is_none() {
            best = Some((records[0].genotype.clone(), CandidateScore::failed(records[0].info.seed)));
        }
        let lam = records.len() as f64;
        let record = GenerationRecord {
            generation,
            best_f: best.as_ref().map_or(WORST_FITNESS, |(_, s)| s.fitness),
            median_f: median(&fits),
            sigma,
            min_eig,
            max_eig,
            beta1_mean: genotypes.iter().map(|s| s.beta1).sum::<f64>() / lam,
            beta2_mean: genotypes.iter().map(|s| s.beta2).sum::<f64>() / lam,
            candidates: records,
        };
        state.tell(&raw, &fits)?;
        log::info!(
            "generation {generation}: best f {:.6e}, median f {:.6e}, sigma {:.4e}",
            record.best_f,
            record.median_f,
            record.sigma
        );
        history.push(record);
    }
    let (best, best_score) = best.expect("at least one generation ran");
    Ok(EvolutionOutcome {
        best,
        best_score,
        history,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{materialize_weights, GeneInteraction, NeuronalEncoding};
    use proptest::prelude::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn rosenbrock(x: &[f64]) -> f64 {
        x.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum()
    }

    /// Minimizes `f` and returns (best value, evaluations used).
    fn minimize(f: impl Fn(&[f64]) -> f64, m0: &[f64], sigma0: f64, budget: usize, target: f64, seed: u64) -> (f64, usize) {
        let mut state = CmaState::new(m0, sigma0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = f64::INFINITY;
        let mut evals = 0;
        while evals < budget && best >= target {
            let cands = state.ask(&mut rng).unwrap();
            let fits: Vec<f64> = cands.iter().map(|c| f(c)).collect();
            evals += fits.len();
            best = fits.iter().copied().fold(best, f64::min);
            state.tell(&cands, &fits).unwrap();
            assert!(state.cov.clone().cholesky().is_some());
        }
        (best, evals)
    }

    #[test]
    fn default_population_for_dim_six() {
        let p = CmaParams::new(6, None).unwrap();
        assert_eq!((p.lambda, p.mu), (9, 4));
    }

    #[test]
    fn fresh_state_is_isotropic() {
        let s = cma_init(5, &[0.0; 5], 1.0).unwrap();
        assert_eq!(s.eigen_range(), (1.0, 1.0));
        assert_eq!(s.p_sigma.norm(), 0.0);
        assert_eq!(s.p_c.norm(), 0.0);
        assert!(cma_init(0, &[], 1.0).is_err());
        assert!(cma_init(2, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn weights_are_normalized_and_decreasing() {
        for n in [1, 2, 6, 18, 50] {
            let p = CmaParams::new(n, None).unwrap();
            assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(p.weights.windows(2).all(|w| w[0] >= w[1]));
            assert!(p.weights.iter().all(|&w| w > 0.0));
            assert!(p.mu_eff >= 1.0 && p.mu_eff <= p.mu as f64);
        }
    }

    #[test]
    fn tiny_sigma_candidates_equal_mean() {
        let m = [0.3, -1.0, 2.0];
        let mut s = CmaState::new(&m, 1e-300, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in s.ask(&mut rng).unwrap() {
            for (a, b) in c.iter().zip(&m) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isotropic_samples_have_sigma_squared_covariance() {
        let n = 4;
        let sigma = 0.7;
        let mut s = CmaState::new(&vec![1.0; n], sigma, Some(100_000)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cands = s.ask(&mut rng).unwrap();
        let count = cands.len() as f64;
        for i in 0..n {
            for j in 0..n {
                let cov: f64 = cands.iter().map(|c| (c[i] - 1.0) * (c[j] - 1.0)).sum::<f64>() / count;
                let expect = if i == j { sigma * sigma } else { 0.0 };
                assert!((cov - expect).abs() < 0.05 * sigma * sigma, "({i},{j}) {cov}");
            }
        }
    }

    #[test]
    fn same_seed_same_candidates() {
        let mut a = CmaState::new(&[0.0; 3], 1.0, None).unwrap();
        let mut b = a.clone();
        let ca = a.ask(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let cb = b.ask(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn ask_twice_is_a_state_error() {
        let mut s = CmaState::new(&[0.0; 3], 1.0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        s.ask(&mut rng).unwrap();
        assert!(matches!(s.ask(&mut rng), Err(GeeError::State(_))));
        let mut fresh = CmaState::new(&[0.0; 3], 1.0, None).unwrap();
        assert!(matches!(fresh.tell(&[], &[]), Err(GeeError::State(_))));
    }

    #[test]
    fn equal_fitness_recombines_in_ask_order() {
        let mut s = CmaState::new(&[0.0; 4], 1.0, None).unwrap();
        let cands = s.ask(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let w = s.params.weights.clone();
        s.tell(&cands, &vec![1.0; cands.len()]).unwrap();
        for d in 0..4 {
            let expect: f64 = w.iter().zip(&cands).map(|(wi, c)| wi * c[d]).sum();
            assert!((s.mean[d] - expect).abs() < 1e-15);
        }
        assert!(s.cov.clone().cholesky().is_some());
    }

    #[test]
    fn nan_fitness_ranks_last() {
        let mut s = CmaState::new(&[0.0; 4], 1.0, None).unwrap();
        let cands = s.ask(&mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut fits: Vec<f64> = (0..cands.len()).map(|i| i as f64).collect();
        fits[0] = f64::NAN;
        let mut t = s.clone();
        s.tell(&cands, &fits).unwrap();
        fits[0] = 1e9;
        t.tell(&cands, &fits).unwrap();
        assert_eq!(s.mean, t.mean);
    }

    #[test]
    fn frozen_learning_rates_give_plain_recombination() {
        let mut s = CmaState::new(&[0.5; 3], 0.2, None).unwrap();
        s.params.c_1 = 0.0;
        s.params.c_mu = 0.0;
        s.params.c_sigma = 0.0;
        let cands = s.ask(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let fits: Vec<f64> = cands.iter().map(|c| sphere(c)).collect();
        let mut order: Vec<usize> = (0..fits.len()).collect();
        order.sort_by(|&a, &b| fits[a].total_cmp(&fits[b]));
        let w = s.params.weights.clone();
        s.tell(&cands, &fits).unwrap();
        for d in 0..3 {
            let expect: f64 = w.iter().zip(&order).map(|(wi, &i)| wi * cands[i][d]).sum();
            assert!((s.mean[d] - expect).abs() < 1e-15);
        }
        assert_eq!(s.cov, DMatrix::identity(3, 3));
        assert_eq!(s.sigma, 0.2);
    }

    #[test]
    fn sphere_converges_within_budget() {
        let (best, evals) = minimize(sphere, &[1.0; 10], 0.5, 5000, 1e-10, 11);
        assert!(best < 1e-10, "best {best} after {evals}");
    }

    #[test]
    fn rosenbrock_converges_within_budget() {
        let (best, evals) = minimize(rosenbrock, &[0.0; 5], 0.5, 50_000, 1e-6, 12);
        assert!(best < 1e-6, "best {best} after {evals}");
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut s = CmaState::new(&[0.1, 0.2, 0.3], 0.4, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let c = s.ask(&mut rng).unwrap();
            let f: Vec<f64> = c.iter().map(|x| rosenbrock(x)).collect();
            s.tell(&c, &f).unwrap();
        }
        let back = CmaState::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back.mean, s.mean);
        assert_eq!(back.cov, s.cov);
        assert_eq!(back.sigma.to_bits(), s.sigma.to_bits());
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let mut a = s.clone();
        let mut b = back;
        assert_eq!(a.ask(&mut r1).unwrap(), b.ask(&mut r2).unwrap());
    }

    #[test]
    fn single_generation_returns_best_initial_candidate() {
        let init = Genotype::new(0.5, 1.0, GeneInteraction::identity(2)).unwrap();
        let cfg = EvolutionConfig {
            generations: 1,
            ..EvolutionConfig::default()
        };
        let out = run_evolution(&init, &cfg, |s, info| {
            let f = sphere(&s.flatten());
            Ok(CandidateScore {
                fitness: f,
                loss: f,
                r1: 0.0,
                r2: 0.0,
                seed: info.seed,
                diverged: false,
            })
        })
        .unwrap();
        let min = out.history[0]
            .candidates
            .iter()
            .map(|c| c.score.fitness)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_score.fitness, min);
    }

    #[test]
    fn failed_candidates_do_not_stop_the_run() {
        let init = Genotype::new(0.5, 1.0, GeneInteraction::identity(2)).unwrap();
        let cfg = EvolutionConfig {
            generations: 3,
            ..EvolutionConfig::default()
        };
        let out = run_evolution(&init, &cfg, |s, info| {
            if info.index == 0 {
                return Err(GeeError::numerical("boom"));
            }
            let f = sphere(&s.flatten());
            Ok(CandidateScore {
                fitness: f,
                loss: f,
                r1: 0.0,
                r2: 0.0,
                seed: info.seed,
                diverged: false,
            })
        })
        .unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(out.history.iter().all(|h| h.candidates[0].score.fitness == WORST_FITNESS));
    }

    /// Squared Frobenius distance between a materialized 4×4 weight and `target`.
    fn weight_distance(s: &Genotype, target: &DMatrix<f64>) -> f64 {
        let g = s.g();
        let e_in = NeuronalEncoding::sample(s.beta1, s.beta2, 4, 1, g, 17).unwrap();
        let e_out = NeuronalEncoding::sample(s.beta1, s.beta2, 4, 1, g, 18).unwrap();
        let w = materialize_weights(&e_in, &s.interaction, &e_out).unwrap();
        (w.position(0, 0) - target).norm_squared()
    }

    fn toy_run(g: usize, seed: u64, gens: usize, population: Option<usize>) -> Vec<f64> {
        // The target is the weight of a hidden genotype, so distance 0 is reachable.
        let hidden_g: Vec<f64> = (0..g * g).map(|i| ((i as f64) * 0.77).cos()).collect();
        let hidden = Genotype::new(0.8, 10.0, GeneInteraction::from_row_major(g, &hidden_g).unwrap()).unwrap();
        let e_in = NeuronalEncoding::sample(hidden.beta1, hidden.beta2, 4, 1, g, 17).unwrap();
        let e_out = NeuronalEncoding::sample(hidden.beta1, hidden.beta2, 4, 1, g, 18).unwrap();
        let target = materialize_weights(&e_in, &hidden.interaction, &e_out).unwrap().position(0, 0);
        let init = Genotype::new(0.5, 10.0, GeneInteraction::identity(g)).unwrap();
        let cfg = EvolutionConfig {
            generations: gens,
            population,
            sigma0: 0.3,
            seed,
            ..EvolutionConfig::default()
        };
        let out = run_evolution(&init, &cfg, |s, info| {
            let f = weight_distance(s, &target);
            Ok(CandidateScore {
                fitness: f,
                loss: f,
                r1: 0.0,
                r2: 0.0,
                seed: info.seed,
                diverged: false,
            })
        })
        .unwrap();
        out.best_history()
    }

    #[test]
    fn toy_weight_matching_improves_hundredfold() {
        for seed in 0..4 {
            let h = toy_run(2, seed, 50, Some(16));
            assert!(h[0] / h[49] >= 100.0, "seed {seed}: {} -> {}", h[0], h[49]);
            assert!(h.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tell_is_invariant_to_pair_order(seed in any::<u64>(), shuffle_seed in any::<u64>(), ties in any::<bool>()) {
            let mut a = CmaState::new(&[0.2; 5], 0.5, None).unwrap();
            let cands = a.ask(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut b = a.clone();
            let fits: Vec<f64> = cands.iter().map(|c| if ties { (sphere(c) * 2.0).round() } else { sphere(c) }).collect();
            let mut perm: Vec<usize> = (0..cands.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let pc: Vec<Vec<f64>> = perm.iter().map(|&i| cands[i].clone()).collect();
            let pf: Vec<f64> = perm.iter().map(|&i| fits[i]).collect();
            a.tell(&cands, &fits).unwrap();
            b.tell(&pc, &pf).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn covariance_stays_positive_definite(seed in any::<u64>()) {
            let mut s = CmaState::new(&[0.0; 6], 1.0, None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..40 {
                let c = s.ask(&mut rng).unwrap();
                let f: Vec<f64> = c.iter().map(|x| rosenbrock(x)).collect();
                s.tell(&c, &f).unwrap();
                let (lo, _) = s.eigen_range();
                prop_assert!(lo > 0.0);
                prop_assert!((&s.cov - s.cov.transpose()).norm() == 0.0);
            }
        }
    }
}
