//! Command pipeline: evolve, train, report, and gradient check.
//!
//! Every runner works in memory and, when given an output directory, also
//! writes its artifacts there. Artifacts embed the SHA-256 hash of the
//! config that produced them.

mod checkpoint;
mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

pub use checkpoint::Checkpoint;
pub use config::{
    Ablation, BlobsConfig, CsvConfig, DataConfig, DataSource, EvolutionBlock, ExperimentConfig, GradCheckBlock, IdxConfig,
    LayerConfig, NetworkConfig, SeedConfig, Seeds, TrainingBlock,
};

use crate::data::{add_gaussian_noise, load_csv, load_idx, make_blobs, Dataset, InputCoding, Samples};
use crate::derive_seed;
use crate::error::{GeeError, Result};
use crate::evolution::{continue_evolution, run_evolution, CmaState, EvolutionConfig, EvolutionOutcome, CANDIDATES_CSV_HEADER, EVOLUTION_CSV_HEADER};
use crate::fitness::{evaluate_candidate, fitness, CandidateScore, EvaluationContext, FitnessConfig};
use crate::genome::{dense_param_count, param_count, GeneInteraction, Genome, Genotype};
use crate::snn::{energy_report, EnergyReport, InputSequence, NetworkSpec};
use crate::textfmt::{self, real_text};
use crate::training::{
    evaluate, grad_check, BackwardOptions, EpochMetrics, Evaluation, GradCheckConfig, GradCheckReport, Trainer,
    METRICS_CSV_HEADER,
};

pub const GENOTYPE_FILE: &str = "best_genotype.json";
pub const EVOLUTION_CSV: &str = "evolution.csv";
pub const CANDIDATES_CSV: &str = "candidates.csv";
pub const STRATEGY_FILE: &str = "cma_state.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const ENERGY_CSV: &str = "energy.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes through a temporary sibling so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| GeeError::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| GeeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| GeeError::io(path, e))
}

/// A validated config with its network, data, and resolved seeds.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub net: NetworkSpec,
    pub data: Dataset,
    pub hash: String,
}

fn load_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    match cfg.source()? {
        DataSource::Blobs(b) => make_blobs(b.classes, b.per_class, b.dim, b.separation, seed),
        DataSource::Idx(i) => Ok(Dataset::split(&load_idx(&i.images, &i.labels)?, seed)),
        DataSource::Csv(c) => Ok(Dataset::split(&load_csv(&c.path)?, seed)),
    }
}

fn noisy(samples: &Samples, relative_l2: f64, coding: InputCoding, seed: u64) -> Result<Samples> {
    let mut x = add_gaussian_noise(samples.x(), samples.features(), relative_l2, seed)?;
    if coding == InputCoding::Poisson {
        x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    samples.with_values(x)
}

impl Prepared {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seeds = config.seeds.resolve();
        let net = config.network.build()?;
        let mut data = load_dataset(&config.data, seeds.data)?;
        let input_len = net.input_shape().len();
        if data.features() != input_len {
            return Err(GeeError::Config {
                field: "network.input".into(),
                message: format!("network takes {input_len} inputs, data has {} features", data.features()),
            });
        }
        if data.num_classes() > net.num_classes() {
            return Err(GeeError::Config {
                field: "network.layers".into(),
                message: format!("readout has {} outputs, data has {} classes", net.num_classes(), data.num_classes()),
            });
        }
        if data.train.is_empty() || data.validation.is_empty() {
            return Err(GeeError::invalid("dataset too small for a train/validation split"));
        }
        if config.data.noise > 0.0 {
            let coding = config.data.coding;
            data.validation = noisy(&data.validation, config.data.noise, coding, derive_seed(seeds.data, 11))?;
            data.test = noisy(&data.test, config.data.noise, coding, derive_seed(seeds.data, 12))?;
        }
        let hash = config.hash();
        Ok(Self {
            config,
            seeds,
            net,
            data,
            hash,
        })
    }

    pub fn coding(&self) -> InputCoding {
        self.config.data.coding
    }

    /// Mean of the search distribution: configured betas and `G = I`.
    pub fn initial_genotype(&self) -> Result<Genotype> {
        let e = &self.config.evolution;
        Genotype::new(e.init_beta1, e.init_beta2, GeneInteraction::identity(self.net.genes()))
    }

    /// Unit-variance unclamped encodings with a standard normal interaction matrix.
    pub fn random_genotype(&self) -> Result<Genotype> {
        let g = self.net.genes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.evolution);
        let vals: Vec<f64> = (0..g * g).map(|_| StandardNormal.sample(&mut rng)).collect();
        Genotype::new(1.0, f64::MAX, GeneInteraction::from_row_major(g, &vals)?)
    }

    fn manifest(&self, command: &str, artifacts: &[&str], extra: serde_json::Value) -> String {
        let doc = json!({
            "command": command,
            "config_hash": self.hash,
            "seeds": {
                "data": self.seeds.data,
                "evolution": self.seeds.evolution,
                "candidate": self.seeds.candidate,
                "training": self.seeds.training,
            },
            "artifacts": artifacts,
            "details": extra,
        });
        textfmt::to_pretty(&doc)
    }

    fn write_config_copy(&self, out: &Path) -> Result<()> {
        write_atomic(&out.join("config.toml"), &self.config.to_toml())
    }
}

/// Result of the evolve command.
#[derive(Debug, Clone)]
pub struct EvolveResult {
    pub best: Genotype,
    /// Score of `best` under the final generation's schedule.
    pub score: Option<CandidateScore>,
    pub outcome: Option<EvolutionOutcome>,
    pub evolution_csv: String,
    pub candidates_csv: String,
}

/// Picks the returned genotype. Raw fitness values from different
/// generations weigh the regularizers differently, so every evaluated
/// candidate is re-scored with the last generation's weights and the minimum
/// wins; ties go to the earliest candidate.
pub fn select_final(outcome: &EvolutionOutcome, cfg: &FitnessConfig) -> Result<(Genotype, CandidateScore)> {
    let last = outcome
        .history
        .last()
        .ok_or_else(|| GeeError::State("evolution ran no generations".into()))?
        .generation;
    let mut best: Option<(&Genotype, CandidateScore)> = None;
    for rec in outcome.history.iter().flat_map(|g| &g.candidates) {
        if rec.score.diverged {
            continue;
        }
        let f = fitness(rec.score.loss, rec.score.r1, rec.score.r2, last, cfg);
        if best.as_ref().is_none_or(|(_, s)| f < s.fitness) {
            best = Some((&rec.genotype, CandidateScore { fitness: f, ..rec.score.clone() }));
        }
    }
    match best {
        Some((g, s)) => Ok((g.clone(), s)),
        None => Ok((outcome.best.clone(), outcome.best_score.clone())),
    }
}

/// Runs the configured ablation preset. `resume` continues from a saved
/// strategy state for another `generations` generations.
pub fn run_evolve(prep: &Prepared, out: Option<&Path>, resume: Option<&Path>) -> Result<EvolveResult> {
    let ecfg = &prep.config.evolution;
    let result = if !ecfg.ablation.evolves() {
        EvolveResult {
            best: prep.random_genotype()?,
            score: None,
            outcome: None,
            evolution_csv: format!("{EVOLUTION_CSV_HEADER}\n"),
            candidates_csv: format!("{CANDIDATES_CSV_HEADER}\n"),
        }
    } else {
        let (fit, held_out) = prep
            .data
            .train
            .holdout(ecfg.held_out_fraction, derive_seed(prep.seeds.data, 7));
        let ctx = EvaluationContext {
            net: &prep.net,
            fit: &fit,
            held_out: &held_out,
            train: prep.config.training.train_config(ecfg.n_eval, 0),
            fitness: ecfg.fitness_config(),
            coding: prep.coding(),
        };
        let evo = EvolutionConfig {
            generations: ecfg.generations,
            population: ecfg.population,
            sigma0: ecfg.sigma0,
            seed: prep.seeds.evolution,
            candidate_seed: prep.seeds.candidate,
            workers: ecfg.workers,
        };
        let evaluate = |s: &Genotype, info: crate::evolution::CandidateInfo| evaluate_candidate(s, info.generation, info.seed, &ctx);
        let outcome = match resume {
            None => run_evolution(&prep.initial_genotype()?, &evo, evaluate)?,
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| GeeError::io(path, e))?;
                let state = CmaState::from_json(&text)?;
                continue_evolution(state, prep.net.genes(), &evo, evaluate)?
            }
        };
        let (best, score) = select_final(&outcome, &ctx.fitness)?;
        info!(
            "selected fitness {:.6e} (loss {:.6e}, r1 {:.6e}, r2 {:.6e})",
            score.fitness, score.loss, score.r1, score.r2
        );
        EvolveResult {
            best,
            score: Some(score),
            evolution_csv: outcome.evolution_csv(),
            candidates_csv: outcome.candidates_csv(),
            outcome: Some(outcome),
        }
    };
    if let Some(dir) = out {
        write_atomic(&dir.join(GENOTYPE_FILE), &result.best.to_text())?;
        write_atomic(&dir.join(EVOLUTION_CSV), &result.evolution_csv)?;
        write_atomic(&dir.join(CANDIDATES_CSV), &result.candidates_csv)?;
        let mut artifacts = vec![GENOTYPE_FILE, EVOLUTION_CSV, CANDIDATES_CSV, "config.toml"];
        if let Some(o) = &result.outcome {
            write_atomic(&dir.join(STRATEGY_FILE), &o.state.to_json()?)?;
            artifacts.push(STRATEGY_FILE);
        }
        prep.write_config_copy(dir)?;
        let extra = json!({"ablation": prep.config.evolution.ablation.name()});
        write_atomic(&dir.join(MANIFEST_FILE), &prep.manifest("evolve", &artifacts, extra))?;
    }
    Ok(result)
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for m in history {
        let _ = writeln!(s, "{},{},{}", m.epoch, real_text(m.loss), real_text(m.accuracy));
    }
    s
}

/// Result of the train command.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub genome: Genome,
    pub history: Vec<EpochMetrics>,
    pub validation: Evaluation,
    pub test: Evaluation,
    pub metrics_csv: String,
}

impl TrainResult {
    pub fn evaluation_csv(&self) -> String {
        format!(
            "split,loss,accuracy\nvalidation,{},{}\ntest,{},{}\n",
            real_text(self.validation.loss),
            real_text(self.validation.accuracy),
            real_text(self.test.loss),
            real_text(self.test.accuracy)
        )
    }
}

/// Samples encodings from `genotype`, trains up to `epochs` total epochs, and
/// evaluates on the validation and test splits. With `resume`, training
/// continues from a checkpoint written by an earlier run of the same config.
pub fn run_train(prep: &Prepared, genotype: &Genotype, epochs: usize, out: Option<&Path>, resume: Option<&Path>) -> Result<TrainResult> {
    if genotype.g() != prep.net.genes() {
        return Err(GeeError::shape(format!(
            "genotype has g = {}, network expects {}",
            genotype.g(),
            prep.net.genes()
        )));
    }
    let train_cfg = prep
        .config
        .training
        .train_config(prep.config.evolution.n_eval, derive_seed(prep.seeds.training, 1));
    let (mut trainer, mut history) = match resume {
        None => {
            let genome = prep.net.sample_genome(genotype, derive_seed(prep.seeds.training, 0))?;
            (Trainer::new(genome, train_cfg, prep.coding())?, Vec::new())
        }
        Some(path) => {
            let cp = Checkpoint::load(path)?;
            if cp.config_hash != prep.hash {
                return Err(GeeError::invalid(format!(
                    "checkpoint {} was written under config {}, current config is {}",
                    path.display(),
                    cp.config_hash,
                    prep.hash
                )));
            }
            prep.net.check_genome(&cp.genome)?;
            let mut t = Trainer::new(cp.genome, train_cfg, prep.coding())?;
            t.optimizer = cp.optimizer;
            t.epoch = cp.history.len();
            (t, cp.history)
        }
    };
    if trainer.epoch > epochs {
        return Err(GeeError::invalid(format!(
            "checkpoint is at epoch {}, beyond the requested {epochs}",
            trainer.epoch
        )));
    }
    let save = |trainer: &Trainer, history: &[EpochMetrics]| -> Result<()> {
        if let Some(dir) = out {
            let cp = Checkpoint {
                config_hash: prep.hash.clone(),
                genotype: genotype.clone(),
                genome: trainer.genome.clone(),
                optimizer: trainer.optimizer.clone(),
                history: history.to_vec(),
            };
            cp.save(&dir.join(CHECKPOINT_FILE))?;
            write_atomic(&dir.join(METRICS_CSV), &metrics_csv(history))?;
        }
        Ok(())
    };
    save(&trainer, &history)?;
    while trainer.epoch < epochs {
        let m = trainer.run_epoch(&prep.net, &prep.data.train)?;
        info!("epoch {}: loss {:.6}, accuracy {:.4}", m.epoch, m.loss, m.accuracy);
        history.push(m);
        save(&trainer, &history)?;
    }
    let batch = prep.config.training.batch_size;
    let validation = evaluate(&prep.net, &trainer.genome, &prep.data.validation, batch, prep.coding(), derive_seed(prep.seeds.training, 2))?;
    let test = evaluate(&prep.net, &trainer.genome, &prep.data.test, batch, prep.coding(), derive_seed(prep.seeds.training, 3))?;
    let result = TrainResult {
        genome: trainer.genome,
        metrics_csv: metrics_csv(&history),
        history,
        validation,
        test,
    };
    if let Some(dir) = out {
        write_atomic(&dir.join(EVALUATION_CSV), &result.evaluation_csv())?;
        prep.write_config_copy(dir)?;
        let extra = json!({"epochs": epochs});
        write_atomic(
            &dir.join(MANIFEST_FILE),
            &prep.manifest("train", &[CHECKPOINT_FILE, METRICS_CSV, EVALUATION_CSV, "config.toml"], extra),
        )?;
    }
    Ok(result)
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub layer: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub genetic: u64,
    pub dense: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub layers: Vec<LayerParams>,
    /// Reals actually stored: every encoding once plus `G`.
    pub stored: u64,
    pub dense_total: u64,
    pub energy: EnergyReport,
    pub test_accuracy: f64,
    pub text: String,
}

/// Parameter, spike, and energy report for a trained checkpoint, measured on
/// the test split.
pub fn run_report(prep: &Prepared, cp: &Checkpoint, out: Option<&Path>) -> Result<Report> {
    if cp.config_hash != prep.hash {
        warn!("checkpoint config hash {} differs from current config {}", cp.config_hash, prep.hash);
    }
    prep.net.check_genome(&cp.genome)?;
    let g = prep.net.genes();
    let mut layers = Vec::new();
    for (l, geo) in prep.net.geometry().iter().enumerate() {
        layers.push(LayerParams {
            layer: l,
            c_in: geo.c_in(),
            c_out: geo.c_out(),
            kernel: geo.kernel,
            genetic: param_count(g, geo.c_in(), geo.c_out(), geo.kernel)?,
            dense: dense_param_count(geo.c_in(), geo.c_out(), geo.kernel)?,
        });
    }
    let stored = cp.genome.num_params() as u64;
    let dense_total: u64 = layers.iter().map(|l| l.dense).sum();
    let eval = evaluate(
        &prep.net,
        &cp.genome,
        &prep.data.test,
        prep.config.training.batch_size,
        prep.coding(),
        derive_seed(prep.seeds.training, 3),
    )?;
    let energy = energy_report(&prep.net, &eval.spikes, &prep.config.energy)?;

    let mut t = String::new();
    let _ = writeln!(t, "config hash: {}", prep.hash);
    let _ = writeln!(t, "genes: {g}  time steps: {}", prep.net.time_steps());
    let _ = writeln!(t);
    let _ = writeln!(t, "{:>5} {:>8} {:>8} {:>6} {:>14} {:>14}", "layer", "c_in", "c_out", "kernel", "genetic", "dense");
    for p in &layers {
        let _ = writeln!(t, "{:>5} {:>8} {:>8} {:>6} {:>14} {:>14}", p.layer, p.c_in, p.c_out, p.kernel, p.genetic, p.dense);
    }
    let per_layer_sum: u64 = layers.iter().map(|l| l.genetic).sum();
    let _ = writeln!(t);
    let _ = writeln!(t, "per-layer genetic sum: {per_layer_sum}");
    let _ = writeln!(t, "stored reals (shared encodings counted once): {stored}");
    let _ = writeln!(t, "dense equivalent: {dense_total}");
    let _ = writeln!(t, "compression ratio (dense / stored): {:.6}", dense_total as f64 / stored as f64);
    let _ = writeln!(t);
    let _ = writeln!(t, "test samples: {}  test accuracy: {:.6}", prep.data.test.len(), eval.accuracy);
    let _ = writeln!(t, "{:>5} {:>14} {:>14} {:>12}", "layer", "flops", "spikes", "rate");
    for l in &energy.layers {
        let _ = writeln!(t, "{:>5} {:>14} {:>14} {:>12.8}", l.layer, l.flops, l.spikes, l.rate);
    }
    let _ = writeln!(t, "total spikes: {}", energy.spike_total);
    let _ = writeln!(t, "first-layer flops: {}", energy.flops_first_layer);
    let _ = writeln!(t, "synaptic operations per step: {}", real_text(energy.sops));
    let _ = writeln!(t, "energy per sample: {} pJ ({} mJ)", real_text(energy.energy_pj), real_text(energy.energy_mj()));

    let report = Report {
        layers,
        stored,
        dense_total,
        test_accuracy: eval.accuracy,
        energy,
        text: t,
    };
    if let Some(dir) = out {
        write_atomic(&dir.join(REPORT_FILE), &report.text)?;
        write_atomic(&dir.join(ENERGY_CSV), &report.energy.to_csv())?;
    }
    Ok(report)
}

/// Finite-difference check of the backward pass on a few training samples.
pub fn run_gradcheck(prep: &Prepared, inject_fault: bool) -> Result<GradCheckReport> {
    let gc = &prep.config.gradcheck;
    let n = gc.samples.min(prep.data.train.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, y) = prep.data.train.gather(&idx);
    let input = InputSequence::constant(&x, n, prep.net.time_steps())?;
    // Start of the search, with `G` pushed off symmetry so that transpose
    // mistakes in the backward pass show up.
    let start = prep.initial_genotype()?;
    let g = prep.net.genes();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(prep.seeds.training, 6));
    let mut vals = start.interaction.to_row_major();
    for v in &mut vals {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.5 * z;
    }
    let genotype = Genotype::new(start.beta1, start.beta2, GeneInteraction::from_row_major(g, &vals)?)?;
    let genome = prep.net.sample_genome(&genotype, derive_seed(prep.seeds.training, 0))?;
    let cfg = GradCheckConfig {
        step: gc.step,
        tolerance: gc.tolerance,
        max_coords: gc.max_coords,
        denom_floor: gc.denom_floor,
        seed: derive_seed(prep.seeds.training, 5),
    };
    grad_check(
        &prep.net,
        &genome,
        &input,
        &y,
        &cfg,
        BackwardOptions {
            transpose_interaction_fault: inject_fault,
        },
    )
}

/// Evolution under one preset followed by final training of its best genotype.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub best: Genotype,
    pub validation: Evaluation,
    pub evolution_csv: String,
    pub candidates_csv: String,
    pub metrics_csv: String,
}

pub fn run_ablation(config: &ExperimentConfig, ablation: Ablation, final_epochs: usize) -> Result<AblationResult> {
    let mut cfg = config.clone();
    cfg.evolution.ablation = ablation;
    let prep = Prepared::new(cfg)?;
    let evolved = run_evolve(&prep, None, None)?;
    let trained = run_train(&prep, &evolved.best, final_epochs, None, None)?;
    Ok(AblationResult {
        ablation,
        best: evolved.best,
        validation: trained.validation,
        evolution_csv: evolved.evolution_csv,
        candidates_csv: evolved.candidates_csv,
        metrics_csv: trained.metrics_csv,
    })
}

/// Reads a genotype file.
pub fn load_genotype(path: &Path) -> Result<Genotype> {
    let text = fs::read_to_string(path).map_err(|e| GeeError::io(path, e))?;
    Genotype::from_text(&text).map_err(|e| match e {
        GeeError::Parse { message, .. } => GeeError::parse(path.display().to_string(), message),
        other => other,
    })
}

/// Resolves the output directory: an explicit override, else the config's.
pub fn output_dir(prep: &Prepared, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| prep.config.output_dir.clone(), Path::to_path_buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.blobs = Some(BlobsConfig {
            classes: 3,
            per_class: 20,
            dim: 4,
            separation: 5.0,
        });
        cfg.network.input = vec![4];
        cfg.network.genes = 2;
        cfg.network.layers = vec![LayerConfig::Linear { out_features: 8 }, LayerConfig::Linear { out_features: 3 }];
        cfg.evolution.generations = 2;
        cfg.evolution.population = Some(4);
        cfg.evolution.n_eval = 1;
        cfg.training.batch_size = 8;
        cfg.training.epochs = 3;
        cfg
    }

    #[test]
    fn mismatched_input_width_is_a_config_error() {
        let mut cfg = small_config();
        cfg.network.input = vec![5];
        assert!(matches!(Prepared::new(cfg), Err(GeeError::Config { field, .. }) if field == "network.input"));
    }

    #[test]
    fn evolve_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let prep = Prepared::new(small_config()).unwrap();
        let res = run_evolve(&prep, Some(dir.path()), None).unwrap();
        for f in [GENOTYPE_FILE, EVOLUTION_CSV, CANDIDATES_CSV, STRATEGY_FILE, MANIFEST_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(load_genotype(&dir.path().join(GENOTYPE_FILE)).unwrap(), res.best);
        let csv = fs::read_to_string(dir.path().join(EVOLUTION_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(manifest.contains(&prep.hash));
    }

    #[test]
    fn evolution_resumes_from_saved_state() {
        let dir = tempfile::tempdir().unwrap();
        let prep = Prepared::new(small_config()).unwrap();
        run_evolve(&prep, Some(dir.path()), None).unwrap();
        let more = run_evolve(&prep, None, Some(&dir.path().join(STRATEGY_FILE))).unwrap();
        let first_gen: usize = more.evolution_csv.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
        assert_eq!(first_gen, 2);

        let mut longer = small_config();
        longer.evolution.generations = 4;
        let straight = run_evolve(&Prepared::new(longer).unwrap(), None, None).unwrap();
        let tail: Vec<&str> = straight.candidates_csv.lines().skip(1 + 2 * 4).collect();
        let resumed: Vec<&str> = more.candidates_csv.lines().skip(1).collect();
        assert_eq!(tail, resumed);
    }

    #[test]
    fn random_preset_skips_evolution() {
        let mut cfg = small_config();
        cfg.evolution.ablation = Ablation::Random;
        let prep = Prepared::new(cfg).unwrap();
        let res = run_evolve(&prep, None, None).unwrap();
        assert!(res.outcome.is_none());
        assert_eq!(res.best.beta1, 1.0);
        assert_eq!(res.evolution_csv.lines().count(), 1);
    }

    #[test]
    fn zero_epochs_only_evaluates() {
        let prep = Prepared::new(small_config()).unwrap();
        let g = prep.initial_genotype().unwrap();
        let res = run_train(&prep, &g, 0, None, None).unwrap();
        assert!(res.history.is_empty());
        assert_eq!(res.metrics_csv, format!("{METRICS_CSV_HEADER}\n"));
        assert!(res.validation.loss.is_finite());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let prep = Prepared::new(small_config()).unwrap();
        let g = prep.initial_genotype().unwrap();
        let straight = run_train(&prep, &g, 3, None, None).unwrap();
        run_train(&prep, &g, 2, Some(dir.path()), None).unwrap();
        let resumed = run_train(&prep, &g, 3, Some(dir.path()), Some(&dir.path().join(CHECKPOINT_FILE))).unwrap();
        assert_eq!(resumed.metrics_csv, straight.metrics_csv);
        assert_eq!(resumed.genome, straight.genome);
        assert_eq!(fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap(), straight.metrics_csv);
    }

    #[test]
    fn resume_rejects_foreign_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let prep = Prepared::new(small_config()).unwrap();
        let g = prep.initial_genotype().unwrap();
        run_train(&prep, &g, 1, Some(dir.path()), None).unwrap();
        let mut other = small_config();
        other.training.learning_rate = 0.02;
        let other = Prepared::new(other).unwrap();
        assert!(run_train(&other, &g, 2, None, Some(&dir.path().join(CHECKPOINT_FILE))).is_err());
    }

    #[test]
    fn report_counts_and_repeatability() {
        let dir = tempfile::tempdir().unwrap();
        let prep = Prepared::new(small_config()).unwrap();
        let g = prep.initial_genotype().unwrap();
        run_train(&prep, &g, 1, Some(dir.path()), None).unwrap();
        let cp = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        let a = run_report(&prep, &cp, None).unwrap();
        let b = run_report(&prep, &cp, None).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.layers[0].genetic, param_count(2, 4, 8, 1).unwrap());
        assert_eq!(a.layers[1].dense, 24);
        // Encodings 4×2, 8×2, 3×2 plus G.
        assert_eq!(a.stored, 8 + 16 + 6 + 4);
    }

    #[test]
    fn gradcheck_runner_passes_and_detects_fault() {
        let prep = Prepared::new(small_config()).unwrap();
        assert!(run_gradcheck(&prep, false).unwrap().passed);
        assert!(!run_gradcheck(&prep, true).unwrap().passed);
    }

    #[test]
    fn noise_touches_only_evaluation_splits() {
        let clean = Prepared::new(small_config()).unwrap();
        let mut cfg = small_config();
        cfg.data.noise = 0.5;
        let noisy = Prepared::new(cfg).unwrap();
        assert_eq!(clean.data.train, noisy.data.train);
        assert_ne!(clean.data.test, noisy.data.test);
    }
}
