use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use gee_core::error::{GeeError, Result};
use gee_core::experiment::{
    load_genotype, output_dir, run_ablation, run_evolve, run_gradcheck, run_report, run_train, Ablation, Checkpoint, ExperimentConfig,
    Prepared, CHECKPOINT_FILE, GENOTYPE_FILE,
};

/// Genetically encoded spiking networks: evolve encodings, train, and report.
#[derive(Debug, Parser)]
#[command(name = "gee", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search genotype space with CMA-ES and write the best genotype.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        evo: EvolveFlags,
        /// Continue from a saved strategy state (cma_state.json).
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Train a network whose encodings are sampled from a genotype.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Genotype file; defaults to <out>/best_genotype.json.
        #[arg(long, value_name = "FILE")]
        genotype: Option<PathBuf>,
        /// Continue from a checkpoint written under the same config.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Run the gradient check before training and stop if it fails.
        #[arg(long)]
        gradcheck: bool,
    },
    /// Print parameter counts, spike statistics, and energy for a checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; defaults to <out>/checkpoint.json.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare backward-pass gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Deliberately transpose the interaction matrix in the backward pass.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Evolve and train under every ablation preset and tabulate validation loss.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        evo: EvolveFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed from which unset named seeds are derived.
    #[arg(long)]
    seed: Option<u64>,
    /// Relative L2 Gaussian noise added to validation and test inputs.
    #[arg(long)]
    noise: Option<f64>,
    /// Output directory, overriding the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvolveFlags {
    /// Number of generations.
    #[arg(long)]
    generations: Option<usize>,
    /// Population size per generation.
    #[arg(long)]
    pop: Option<usize>,
    /// Maximum concurrent candidate evaluations.
    #[arg(long)]
    workers: Option<usize>,
    /// Preset: random, baseline, baseline_r1, baseline_r2, or ste.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Total training epochs; 0 evaluates without training.
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Global gradient-norm limit per minibatch; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds.base = seed;
        }
        if let Some(noise) = self.noise {
            cfg.data.noise = noise;
        }
        if let Some(out) = &self.out {
            cfg.output_dir.clone_from(out);
        }
        Ok(cfg)
    }
}

impl EvolveFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(g) = self.generations {
            cfg.evolution.generations = g;
        }
        if let Some(p) = self.pop {
            cfg.evolution.population = Some(p);
        }
        if let Some(w) = self.workers {
            cfg.evolution.workers = w;
        }
        if let Some(name) = &self.ablation {
            cfg.evolution.ablation = Ablation::parse(name)?;
        }
        Ok(())
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(lr) = self.lr {
            cfg.training.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.training.batch_size = b;
        }
        if let Some(c) = self.grad_clip {
            cfg.training.grad_clip = c;
        }
    }
}

enum Outcome {
    Success,
    CheckFailed,
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GeeError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| GeeError::Io { path, source: e })
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Evolve { common, evo, resume } => {
            let mut cfg = common.load()?;
            evo.apply(&mut cfg)?;
            let prep = Prepared::new(cfg)?;
            let dir = output_dir(&prep, None);
            let res = run_evolve(&prep, Some(&dir), resume.as_deref())?;
            println!("best genotype: {}", dir.join(GENOTYPE_FILE).display());
            if let Some(s) = &res.score {
                println!("fitness {:.9e}  loss {:.9e}  r1 {:.9e}  r2 {:.9e}", s.fitness, s.loss, s.r1, s.r2);
            }
            println!("config hash: {}", prep.hash);
            Ok(Outcome::Success)
        }
        Command::Train {
            common,
            train,
            genotype,
            resume,
            gradcheck,
        } => {
            let mut cfg = common.load()?;
            train.apply(&mut cfg);
            let prep = Prepared::new(cfg)?;
            let dir = output_dir(&prep, None);
            if gradcheck {
                let report = run_gradcheck(&prep, false)?;
                println!("{}", report.summary());
                if !report.passed {
                    return Ok(Outcome::CheckFailed);
                }
            }
            let genotype_path = genotype.unwrap_or_else(|| dir.join(GENOTYPE_FILE));
            let genotype = load_genotype(&genotype_path)?;
            let res = run_train(&prep, &genotype, prep.config.training.epochs, Some(&dir), resume.as_deref())?;
            print!("{}", res.evaluation_csv());
            println!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
            Ok(Outcome::Success)
        }
        Command::Report { common, checkpoint } => {
            let prep = Prepared::new(common.load()?)?;
            let dir = output_dir(&prep, None);
            let cp = Checkpoint::load(&checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE)))?;
            let report = run_report(&prep, &cp, Some(&dir))?;
            print!("{}", report.text);
            Ok(Outcome::Success)
        }
        Command::Gradcheck { common, inject_fault } => {
            let prep = Prepared::new(common.load()?)?;
            let report = run_gradcheck(&prep, inject_fault)?;
            println!("{}", report.summary());
            Ok(if report.passed { Outcome::Success } else { Outcome::CheckFailed })
        }
        Command::Ablate { common, evo, train } => {
            let mut cfg = common.load()?;
            evo.apply(&mut cfg)?;
            train.apply(&mut cfg);
            Prepared::new(cfg.clone())?;
            let dir = cfg.output_dir.clone();
            let mut table = String::from("ablation,validation_loss,validation_accuracy\n");
            for preset in Ablation::ALL {
                let res = run_ablation(&cfg, preset, cfg.training.epochs)?;
                let sub = dir.join(preset.name());
                write_out(&sub, GENOTYPE_FILE, &res.best.to_text())?;
                write_out(&sub, "evolution.csv", &res.evolution_csv)?;
                write_out(&sub, "candidates.csv", &res.candidates_csv)?;
                write_out(&sub, "metrics.csv", &res.metrics_csv)?;
                let row = format!("{},{:.16e},{:.16e}\n", preset.name(), res.validation.loss, res.validation.accuracy);
                print!("{row}");
                table.push_str(&row);
            }
            write_out(&dir, "ablation.csv", &table)?;
            Ok(Outcome::Success)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            if e.is_input_error() || matches!(e, GeeError::Io { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
