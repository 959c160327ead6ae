use std::path::Path;

use serde::Deserialize;
use serde_json::json;

use crate::error::{GeeError, Result};
use crate::genome::{GeneInteraction, Genome, Genotype, NeuronalEncoding};
use crate::textfmt;
use crate::training::{EpochMetrics, Optimizer, OptimizerKind};

/// Training state saved after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub genotype: Genotype,
    pub genome: Genome,
    pub optimizer: Optimizer,
    /// Completed epochs, oldest first; its length is the epoch counter.
    pub history: Vec<EpochMetrics>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodingDoc {
    channels: usize,
    kernel: usize,
    genes: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerDoc {
    kind: String,
    beta: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpochDoc {
    epoch: usize,
    loss: f64,
    accuracy: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    config_hash: String,
    genotype: serde_json::Value,
    encodings: Vec<EncodingDoc>,
    interaction: Vec<f64>,
    optimizer: OptimizerDoc,
    history: Vec<EpochDoc>,
}

// Optimizer settings are written flat because internally tagged enums
// cannot read exact-precision numbers back.
fn optimizer_json(opt: &Optimizer) -> serde_json::Value {
    let mut doc = json!({
        "first": textfmt::reals(opt.first.iter().copied()),
        "second": textfmt::reals(opt.second.iter().copied()),
        "steps": opt.steps,
    });
    let map = doc.as_object_mut().expect("object literal");
    match opt.kind {
        OptimizerKind::Sgd => {
            map.insert("kind".into(), json!("sgd"));
        }
        OptimizerKind::Momentum { beta } => {
            map.insert("kind".into(), json!("momentum"));
            map.insert("beta".into(), textfmt::real(beta));
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            map.insert("kind".into(), json!("adam"));
            map.insert("beta1".into(), textfmt::real(beta1));
            map.insert("beta2".into(), textfmt::real(beta2));
            map.insert("eps".into(), textfmt::real(eps));
        }
    }
    doc
}

fn optimizer_kind(doc: &OptimizerDoc) -> std::result::Result<OptimizerKind, String> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| format!("optimizer \"{}\" needs \"{name}\"", doc.kind));
    match doc.kind.as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "momentum" => Ok(OptimizerKind::Momentum { beta: need(doc.beta, "beta")? }),
        "adam" => Ok(OptimizerKind::Adam {
            beta1: need(doc.beta1, "beta1")?,
            beta2: need(doc.beta2, "beta2")?,
            eps: need(doc.eps, "eps")?,
        }),
        other => Err(format!("unknown optimizer kind \"{other}\"")),
    }
}

impl Checkpoint {
    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    pub fn to_json(&self) -> String {
        let encodings: Vec<serde_json::Value> = self
            .genome
            .encodings
            .iter()
            .map(|e| {
                json!({
                    "channels": e.channels(),
                    "kernel": e.kernel(),
                    "genes": e.genes(),
                    "data": textfmt::reals(e.data().iter().copied()),
                })
            })
            .collect();
        let history: Vec<serde_json::Value> = self
            .history
            .iter()
            .map(|m| json!({"epoch": m.epoch, "loss": textfmt::real(m.loss), "accuracy": textfmt::real(m.accuracy)}))
            .collect();
        let genotype: serde_json::Value = serde_json::from_str(&self.genotype.to_text()).expect("genotype text is JSON");
        let doc = json!({
            "config_hash": self.config_hash,
            "genotype": genotype,
            "encodings": encodings,
            "interaction": textfmt::reals(self.genome.interaction.to_row_major()),
            "optimizer": optimizer_json(&self.optimizer),
            "history": history,
        });
        textfmt::to_pretty(&doc)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| GeeError::parse(origin, e.to_string()))?;
        let genotype = Genotype::from_text(&doc.genotype.to_string())?;
        let g = genotype.g();
        let kind = optimizer_kind(&doc.optimizer).map_err(|m| GeeError::parse(origin, m))?;
        let encodings = doc
            .encodings
            .into_iter()
            .map(|e| NeuronalEncoding::from_vec(e.channels, e.kernel, e.genes, e.data))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| GeeError::parse(origin, e.to_string()))?;
        let interaction = GeneInteraction::from_row_major(g, &doc.interaction).map_err(|e| GeeError::parse(origin, e.to_string()))?;
        Ok(Self {
            config_hash: doc.config_hash,
            genotype,
            genome: Genome { encodings, interaction },
            optimizer: Optimizer {
                kind,
                first: doc.optimizer.first,
                second: doc.optimizer.second,
                steps: doc.optimizer.steps,
            },
            history: doc
                .history
                .into_iter()
                .map(|m| EpochMetrics {
                    epoch: m.epoch,
                    loss: m.loss,
                    accuracy: m.accuracy,
                })
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GeeError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_json())
    }
}
