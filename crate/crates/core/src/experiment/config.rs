//! TOML experiment schema.
//!
//! Every table rejects unknown keys. Load errors carry the dotted path of the
//! offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::InputCoding;
use crate::derive_seed;
use crate::error::{GeeError, Result};
use crate::fitness::FitnessConfig;
use crate::snn::{EnergyConstants, LayerSpec, LifConfig, NetworkSpec, Shape3};
use crate::training::{GradCheckConfig, OptimizerKind, TrainConfig};

fn config_error(field: impl Into<String>, message: impl Into<String>) -> GeeError {
    GeeError::Config {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: SeedConfig,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub evolution: EvolutionBlock,
    pub training: TrainingBlock,
    pub energy: EnergyConstants,
    pub gradcheck: GradCheckBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: SeedConfig::default(),
            network: NetworkConfig::default(),
            data: DataConfig::default(),
            evolution: EvolutionBlock::default(),
            training: TrainingBlock::default(),
            energy: EnergyConstants::default(),
            gradcheck: GradCheckBlock::default(),
        }
    }
}

/// Named seeds. Any seed left out is derived from `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub base: u64,
    pub data: Option<u64>,
    pub evolution: Option<u64>,
    pub candidate: Option<u64>,
    pub training: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub evolution: u64,
    pub candidate: u64,
    pub training: u64,
}

impl SeedConfig {
    pub fn resolve(&self) -> Seeds {
        Seeds {
            data: self.data.unwrap_or_else(|| derive_seed(self.base, 1)),
            evolution: self.evolution.unwrap_or_else(|| derive_seed(self.base, 2)),
            candidate: self.candidate.unwrap_or_else(|| derive_seed(self.base, 3)),
            training: self.training.unwrap_or_else(|| derive_seed(self.base, 4)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// `[features]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    pub genes: usize,
    pub time_steps: usize,
    pub layers: Vec<LayerConfig>,
    pub lif: LifConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input: vec![16],
            genes: 4,
            time_steps: 4,
            layers: vec![
                LayerConfig::Linear { out_features: 128 },
                LayerConfig::Linear { out_features: 10 },
            ],
            lif: LifConfig::default(),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
}

impl NetworkConfig {
    pub fn input_shape(&self) -> Result<Shape3> {
        match self.input.as_slice() {
            [f] => Ok(Shape3::flat(*f)),
            [c, h, w] => Ok(Shape3::new(*c, *h, *w)),
            other => Err(config_error(
                "network.input",
                format!("expected [features] or [channels, height, width], got {other:?}"),
            )),
        }
    }

    pub fn build(&self) -> Result<NetworkSpec> {
        let input = self.input_shape()?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let spec = match *l {
                    LayerConfig::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    } => LayerSpec::conv(out_channels, kernel, stride, padding),
                    LayerConfig::Linear { out_features } => LayerSpec::linear(out_features),
                };
                spec.with_lif(self.lif)
            })
            .collect();
        NetworkSpec::new(input, layers, self.genes, self.time_steps).map_err(|e| config_error("network", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub coding: InputCoding,
    /// Relative L2 norm of Gaussian noise added to evaluation inputs.
    pub noise: f64,
    pub blobs: Option<BlobsConfig>,
    pub idx: Option<IdxConfig>,
    pub csv: Option<CsvConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            coding: InputCoding::Constant,
            noise: 0.0,
            blobs: None,
            idx: None,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            dim: 16,
            separation: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub path: PathBuf,
}

/// Which dataset the config selects.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs(BlobsConfig),
    Idx(IdxConfig),
    Csv(CsvConfig),
}

impl DataConfig {
    pub fn source(&self) -> Result<DataSource> {
        let chosen = [self.blobs.is_some(), self.idx.is_some(), self.csv.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if chosen > 1 {
            return Err(config_error("data", "choose at most one of data.blobs, data.idx, data.csv"));
        }
        Ok(if let Some(i) = &self.idx {
            DataSource::Idx(i.clone())
        } else if let Some(c) = &self.csv {
            DataSource::Csv(c.clone())
        } else {
            DataSource::Blobs(self.blobs.unwrap_or_default())
        })
    }
}

/// Ablation presets over the fitness definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Unit-variance encodings and a standard normal interaction matrix, no evolution.
    Random,
    /// Fitness is the held-out loss alone.
    Baseline,
    /// Loss with the temporal-difference term.
    BaselineR1,
    /// Loss with the spatial-entropy term.
    BaselineR2,
    /// Loss with both scheduled terms.
    #[default]
    Ste,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Random,
        Ablation::Baseline,
        Ablation::BaselineR1,
        Ablation::BaselineR2,
        Ablation::Ste,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Random => "random",
            Ablation::Baseline => "baseline",
            Ablation::BaselineR1 => "baseline_r1",
            Ablation::BaselineR2 => "baseline_r2",
            Ablation::Ste => "ste",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| config_error("evolution.ablation", format!("unknown preset `{name}`")))
    }

    pub fn evolves(self) -> bool {
        self != Ablation::Random
    }

    /// Whether the temporal and spatial terms enter the fitness.
    pub fn terms(self) -> (bool, bool) {
        match self {
            Ablation::Random | Ablation::Baseline => (false, false),
            Ablation::BaselineR1 => (true, false),
            Ablation::BaselineR2 => (false, true),
            Ablation::Ste => (true, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionBlock {
    pub ablation: Ablation,
    pub generations: usize,
    pub population: Option<usize>,
    pub sigma0: f64,
    pub init_beta1: f64,
    pub init_beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_eval: usize,
    pub held_out_fraction: f64,
    pub workers: usize,
}

impl Default for EvolutionBlock {
    fn default() -> Self {
        let f = FitnessConfig::default();
        Self {
            ablation: Ablation::Ste,
            generations: 20,
            population: None,
            sigma0: 0.3,
            init_beta1: 0.5,
            init_beta2: 1.0,
            lambda1: f.lambda1,
            lambda2: f.lambda2,
            n_eval: f.n_eval,
            held_out_fraction: f.held_out_fraction,
            workers: 1,
        }
    }
}

impl EvolutionBlock {
    pub fn fitness_config(&self) -> FitnessConfig {
        let (use_temporal, use_entropy) = self.ablation.terms();
        FitnessConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            use_temporal,
            use_entropy,
            n_eval: self.n_eval,
            held_out_fraction: self.held_out_fraction,
            ..FitnessConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingBlock {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm limit per minibatch; 0 turns clipping off.
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            grad_clip: t.clip_norm.unwrap_or(0.0),
            optimizer: t.optimizer,
        }
    }
}

impl TrainingBlock {
    pub fn train_config(&self, n_eval: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            n_eval,
            seed,
            optimizer: self.optimizer,
            clip_norm: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckBlock {
    /// Training samples in the checked batch.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_coords: usize,
    pub denom_floor: f64,
}

impl Default for GradCheckBlock {
    fn default() -> Self {
        let d = GradCheckConfig::default();
        Self {
            samples: 4,
            step: d.step,
            tolerance: d.tolerance,
            max_coords: d.max_coords,
            denom_floor: d.denom_floor,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_error("<document>", e.to_string().trim().to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<document>".to_string() } else { path };
            config_error(field, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GeeError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized config, hex encoded. Fields that
    /// only say where to stop or where to write are left out, so extending a
    /// run keeps its hash.
    pub fn hash(&self) -> String {
        let mut trajectory = self.clone();
        trajectory.output_dir = PathBuf::new();
        trajectory.training.epochs = 0;
        trajectory.evolution.generations = 0;
        trajectory.evolution.workers = 1;
        let canonical = serde_json::to_vec(&trajectory).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<()> {
        let net = &self.network;
        if net.genes == 0 {
            return Err(config_error("network.genes", "must be >= 1"));
        }
        if net.time_steps == 0 {
            return Err(config_error("network.time_steps", "must be >= 1"));
        }
        if net.layers.is_empty() {
            return Err(config_error("network.layers", "at least one layer is required"));
        }
        for (i, l) in net.layers.iter().enumerate() {
            let bad = match *l {
                LayerConfig::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => out_channels == 0 || kernel == 0 || stride == 0,
                LayerConfig::Linear { out_features } => out_features == 0,
            };
            if bad {
                return Err(config_error(format!("network.layers[{i}]"), "sizes must be >= 1"));
            }
        }
        net.lif.validate().map_err(|e| config_error("network.lif", e.to_string()))?;
        net.build()?;

        let d = &self.data;
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(config_error("data.noise", "must be a finite value >= 0"));
        }
        if let DataSource::Blobs(b) = d.source()? {
            if b.classes == 0 || b.per_class == 0 || b.dim == 0 {
                return Err(config_error("data.blobs", "classes, per_class and dim must be >= 1"));
            }
            if !b.separation.is_finite() {
                return Err(config_error("data.blobs.separation", "must be finite"));
            }
        }

        let e = &self.evolution;
        if e.generations == 0 {
            return Err(config_error("evolution.generations", "must be >= 1"));
        }
        if e.population.is_some_and(|p| p < 2) {
            return Err(config_error("evolution.population", "must be >= 2"));
        }
        if !(e.sigma0 > 0.0 && e.sigma0.is_finite()) {
            return Err(config_error("evolution.sigma0", "must be positive"));
        }
        if !(e.init_beta1 > 0.0 && e.init_beta2 > 0.0) {
            return Err(config_error("evolution.init_beta1", "initial betas must be positive"));
        }
        if e.lambda1 > 0.0 {
            return Err(config_error("evolution.lambda1", "must be <= 0 so the term decays"));
        }
        if e.lambda2 > 0.0 {
            return Err(config_error("evolution.lambda2", "must be <= 0 so the term decays"));
        }
        if !(e.held_out_fraction > 0.0 && e.held_out_fraction < 1.0) {
            return Err(config_error("evolution.held_out_fraction", "must lie in (0, 1)"));
        }
        if e.workers == 0 {
            return Err(config_error("evolution.workers", "must be >= 1"));
        }

        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(config_error("training.learning_rate", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(config_error("training.batch_size", "must be >= 1"));
        }
        if !(t.grad_clip >= 0.0 && t.grad_clip.is_finite()) {
            return Err(config_error("training.grad_clip", "must be a finite number >= 0"));
        }

        let g = &self.gradcheck;
        if g.samples == 0 {
            return Err(config_error("gradcheck.samples", "must be >= 1"));
        }
        if !(g.step > 0.0 && g.tolerance > 0.0 && g.denom_floor > 0.0) {
            return Err(config_error("gradcheck", "step, tolerance and denom_floor must be positive"));
        }
        Ok(())
    }
}
