//! Surrogate-gradient training through the genetic factorization.
//!
//! Backpropagation runs through time and layers with the rectangular
//! surrogate standing in for the spike derivative, producing a dense weight
//! gradient `dW` per layer. Each `dW` is then pushed into the factors at every
//! kernel position `p`:
//!
//! ```text
//! dE_in,p  = dW_pᵀ · E_out,p · Gᵀ
//! dE_out,p = dW_p  · E_in,p  · G
//! dG      += E_in,pᵀ · dW_pᵀ · E_out,p
//! ```
//!
//! Encodings shared by two adjacent layers accumulate both contributions.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_spikes, InputCoding, Samples};
use crate::derive_seed;
use crate::error::{GeeError, Result};
use crate::genome::{GeneInteraction, Genome, NeuronalEncoding, WeightTensor};
use crate::snn::{forward, ForwardOptions, ForwardOutput, InputSequence, NetworkSpec, SpikeFunction, SpikeStats};

/// Mean cross-entropy of `batch × classes` logits against class labels.
pub fn loss(logits: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    Ok(loss_and_grad(logits, classes, labels)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn loss_and_grad(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let batch = labels.len();
    if classes == 0 || logits.len() != batch * classes {
        return Err(GeeError::shape(format!(
            "logits hold {} values, expected {batch} rows of {classes}",
            logits.len()
        )));
    }
    if batch == 0 {
        return Err(GeeError::invalid("empty batch"));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(GeeError::Range(format!("label {label} out of range for {classes} classes")));
        }
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += sum.ln() + (max - row[label]);
        for c in 0..classes {
            let p = (row[c] - log_norm).exp();
            grad[b * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((total / batch as f64, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gradients for every encoding tensor and the interaction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_encodings: Vec<NeuronalEncoding>,
    pub d_interaction: DMatrix<f64>,
}

impl GradientBundle {
    pub fn zeros_like(genome: &Genome) -> Self {
        Self {
            d_encodings: genome
                .encodings
                .iter()
                .map(|e| NeuronalEncoding::zeros(e.channels(), e.kernel(), e.genes()))
                .collect(),
            d_interaction: DMatrix::zeros(genome.g(), genome.g()),
        }
    }

    pub fn norm(&self) -> f64 {
        let enc: f64 = self.d_encodings.iter().flat_map(|e| e.data()).map(|v| v * v).sum();
        (enc + self.d_interaction.norm_squared()).sqrt()
    }

    /// Scales the whole bundle down so its L2 norm is at most `limit`.
    pub fn clip_norm(&mut self, limit: f64) {
        let norm = self.norm();
        if norm > limit {
            let k = limit / norm;
            for e in &mut self.d_encodings {
                e.data_mut().iter_mut().for_each(|v| *v *= k);
            }
            self.d_interaction *= k;
        }
    }

    /// Same layout as [`Genome::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.d_encodings.iter().flat_map(|e| e.data().iter().copied()).collect();
        let g = self.d_interaction.nrows();
        for a in 0..g {
            for b in 0..g {
                out.push(self.d_interaction[(a, b)]);
            }
        }
        out
    }
}

/// Switches for backward-pass fault injection, used by mutation tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Uses `G` where `Gᵀ` belongs in the input-encoding gradient.
    pub transpose_interaction_fault: bool,
}

/// Factor gradients of one layer given its dense weight gradient.
pub fn factor_gradients(
    e_in: &NeuronalEncoding,
    interaction: &GeneInteraction,
    e_out: &NeuronalEncoding,
    d_weight: &WeightTensor,
    opts: BackwardOptions,
) -> (NeuronalEncoding, DMatrix<f64>, NeuronalEncoding) {
    let k = e_in.kernel();
    let g = interaction.g();
    let gm = interaction.matrix();
    let gt = gm.transpose();
    let g_for_in = if opts.transpose_interaction_fault { gm } else { &gt };
    let mut d_in = NeuronalEncoding::zeros(e_in.channels(), k, g);
    let mut d_out = NeuronalEncoding::zeros(e_out.channels(), k, g);
    let mut d_g = DMatrix::zeros(g, g);
    for u in 0..k {
        for v in 0..k {
            let dw = d_weight.position(u, v);
            let ein = e_in.position(u, v);
            let eout = e_out.position(u, v);
            d_in.add_position(u, v, &(dw.transpose() * &eout * g_for_in));
            d_out.add_position(u, v, &(&dw * &ein * gm));
            d_g += ein.transpose() * dw.transpose() * eout;
        }
    }
    (d_in, d_g, d_out)
}

/// Dense weight gradients of every layer by backpropagation through time.
///
/// `d_logits` is the gradient of the objective with respect to the
/// time-averaged logits; `d_outputs`, when given, adds a direct gradient on
/// each per-step readout `Y^(t)`.
pub fn weight_gradients(
    net: &NetworkSpec,
    out: &ForwardOutput,
    d_logits: &[f64],
    d_outputs: Option<&[Vec<f64>]>,
) -> Result<Vec<WeightTensor>> {
    let cache = &out.cache;
    let t_steps = net.time_steps();
    let n_layers = net.num_layers();
    let readout = n_layers - 1;
    let batch = out.batch;
    if d_logits.len() != batch * out.classes {
        return Err(GeeError::shape("logit gradient does not match forward output"));
    }

    let mut dws: Vec<WeightTensor> = cache
        .weights
        .iter()
        .map(|w| WeightTensor::zeros(w.c_out(), w.c_in(), w.kernel()))
        .collect();

    // Gradient reaching the input of the layer being processed, per step.
    let mut upstream: Vec<Vec<f64>> = vec![Vec::new(); t_steps];

    let mut running = vec![0.0; d_logits.len()];
    for t in (0..t_steps).rev() {
        for (r, d) in running.iter_mut().zip(d_logits) {
            *r += d / t_steps as f64;
        }
        if let Some(extra) = d_outputs {
            for (r, d) in running.iter_mut().zip(&extra[t]) {
                *r += d;
            }
        }
        let geo = &net.geometry()[readout];
        let dx = crate::snn::conv_backward(
            geo,
            &cache.weights[readout],
            &cache.layer_inputs[readout][t],
            &running,
            batch,
            dws[readout].data_mut(),
            readout > 0,
        );
        if let Some(dx) = dx {
            upstream[t] = dx;
        }
    }

    for l in (0..readout).rev() {
        let geo = &net.geometry()[l];
        let cfg = &net.layers()[l].lif;
        let n = batch * geo.out_shape.len();
        let mut du_next = vec![0.0; n];
        let mut next_upstream: Vec<Vec<f64>> = vec![Vec::new(); t_steps];
        for t in (0..t_steps).rev() {
            let ds = &upstream[t];
            let u_pre = &cache.u_pre[l][t];
            let mut d_current = vec![0.0; n];
            for j in 0..n {
                let up = u_pre[j];
                let sg = cfg.surrogate(up);
                let s = match cache.spike_fn {
                    SpikeFunction::Heaviside => {
                        if up >= cfg.v_threshold {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    SpikeFunction::Ramp => {
                        let w = cfg.surrogate_width;
                        ((up - cfg.v_threshold + w) / (2.0 * w)).clamp(0.0, 1.0)
                    }
                };
                let d_up = ds[j] * sg + du_next[j] * ((1.0 - s) + (cfg.v_reset - up) * sg);
                d_current[j] = d_up;
                du_next[j] = cfg.tau * d_up;
            }
            let dx = crate::snn::conv_backward(
                geo,
                &cache.weights[l],
                &cache.layer_inputs[l][t],
                &d_current,
                batch,
                dws[l].data_mut(),
                l > 0,
            );
            if let Some(dx) = dx {
                next_upstream[t] = dx;
            }
        }
        upstream = next_upstream;
    }

    for (l, dw) in dws.iter().enumerate() {
        if dw.data().iter().any(|x| !x.is_finite()) {
            return Err(GeeError::numerical(format!("non-finite weight gradient in layer {l}")));
        }
    }
    Ok(dws)
}

/// Loss and factor gradients for one forward pass.
pub fn backward(
    net: &NetworkSpec,
    genome: &Genome,
    out: &ForwardOutput,
    labels: &[usize],
    opts: BackwardOptions,
) -> Result<(f64, GradientBundle)> {
    let (loss_value, d_logits) = loss_and_grad(&out.logits, out.classes, labels)?;
    let dws = weight_gradients(net, out, &d_logits, None)?;
    Ok((loss_value, push_into_factors(net, genome, &dws, opts)?))
}

/// Maps per-layer weight gradients onto the genome's factors.
pub fn push_into_factors(
    net: &NetworkSpec,
    genome: &Genome,
    d_weights: &[WeightTensor],
    opts: BackwardOptions,
) -> Result<GradientBundle> {
    let mut grads = GradientBundle::zeros_like(genome);
    for (l, dw) in d_weights.iter().enumerate() {
        let (ei, eo) = net.layer_encodings(l);
        let (d_in, d_g, d_out) = factor_gradients(
            &genome.encodings[ei],
            &genome.interaction,
            &genome.encodings[eo],
            dw,
            opts,
        );
        for (acc, x) in grads.d_encodings[ei].data_mut().iter_mut().zip(d_in.data()) {
            *acc += x;
        }
        for (acc, x) in grads.d_encodings[eo].data_mut().iter_mut().zip(d_out.data()) {
            *acc += x;
        }
        grads.d_interaction += d_g;
        if grads.d_interaction.iter().any(|x| !x.is_finite()) {
            return Err(GeeError::numerical(format!("non-finite factor gradient in layer {l}")));
        }
    }
    Ok(grads)
}

/// `E_i ← E_i − η·dE_i` for every encoding and `G ← G − η·dG`.
pub fn sgd_step(genome: &Genome, grads: &GradientBundle, lr: f64) -> Result<Genome> {
    if grads.d_encodings.len() != genome.encodings.len()
        || grads
            .d_encodings
            .iter()
            .zip(&genome.encodings)
            .any(|(d, e)| !d.same_shape(e))
        || grads.d_interaction.shape() != genome.interaction.matrix().shape()
    {
        return Err(GeeError::shape("gradient bundle does not match genome"));
    }
    let mut next = genome.clone();
    for (e, d) in next.encodings.iter_mut().zip(&grads.d_encodings) {
        for (x, dx) in e.data_mut().iter_mut().zip(d.data()) {
            *x -= lr * dx;
        }
    }
    next.interaction.descend(&grads.d_interaction, lr);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum {
        beta: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

/// First-order optimizer over the flat genome parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Momentum velocity or Adam first moment.
    pub first: Vec<f64>,
    /// Adam second moment.
    pub second: Vec<f64>,
    pub steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, genome: &Genome, grads: &GradientBundle, lr: f64) -> Result<Genome> {
        match self.kind {
            OptimizerKind::Sgd => {
                self.steps += 1;
                sgd_step(genome, grads, lr)
            }
            OptimizerKind::Momentum { beta } => {
                let g = grads.flatten();
                if self.first.len() != g.len() {
                    self.first = vec![0.0; g.len()];
                }
                for (v, gi) in self.first.iter_mut().zip(&g) {
                    *v = beta * *v + gi;
                }
                self.steps += 1;
                apply_flat(genome, &self.first, lr)
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let g = grads.flatten();
                if self.first.len() != g.len() {
                    self.first = vec![0.0; g.len()];
                    self.second = vec![0.0; g.len()];
                }
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                let mut update = vec![0.0; g.len()];
                for i in 0..g.len() {
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g[i];
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g[i] * g[i];
                    update[i] = (self.first[i] / c1) / ((self.second[i] / c2).sqrt() + eps);
                }
                apply_flat(genome, &update, lr)
            }
        }
    }
}

fn apply_flat(genome: &Genome, direction: &[f64], lr: f64) -> Result<Genome> {
    let mut next = genome.clone();
    if direction.len() != next.num_params() {
        return Err(GeeError::shape("update length does not match genome"));
    }
    for (i, d) in direction.iter().enumerate() {
        *next.param_mut(i) -= lr * d;
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs used when a candidate is trained inside fitness evaluation.
    pub n_eval: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Rescales each minibatch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 32,
            n_eval: 3,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            clip_norm: Some(CLIP_NORM),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GeeError::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(GeeError::invalid("batch_size must be >= 1"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(GeeError::invalid("clip_norm must be positive"));
        }
        Ok(())
    }
}

pub const CLIP_NORM: f64 = 5.0;

/// Per-epoch training metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,loss,accuracy";

/// Resumable mini-batch training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub genome: Genome,
    pub optimizer: Optimizer,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub coding: InputCoding,
}

impl Trainer {
    pub fn new(genome: Genome, config: TrainConfig, coding: InputCoding) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            genome,
            optimizer: Optimizer::new(config.optimizer),
            epoch: 0,
            config,
            coding,
        })
    }

    /// Runs one epoch. Sample order is drawn from `(seed, epoch)`, so a
    /// resumed trainer sees the same batches as an uninterrupted one.
    pub fn run_epoch(&mut self, net: &NetworkSpec, data: &Samples) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(GeeError::invalid("training data is empty"));
        }
        net.check_genome(&self.genome)?;
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let (x, y) = data.gather(chunk);
            let coding_seed = derive_seed(derive_seed(self.config.seed ^ 0xC0D1_4600, epoch as u64), b as u64);
            let input = encode_spikes(&x, chunk.len(), net.time_steps(), self.coding, coding_seed)?;
            let out = forward(net, &self.genome, &input, ForwardOptions::default())?;
            let (batch_loss, mut grads) = backward(net, &self.genome, &out, &y, BackwardOptions::default())?;
            if !batch_loss.is_finite() {
                return Err(GeeError::numerical(format!(
                    "training diverged: loss is {batch_loss} at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += batch_loss * chunk.len() as f64;
            correct += count_correct(&out.logits, out.classes, &y);
            if let Some(limit) = self.config.clip_norm {
                grads.clip_norm(limit);
            }
            self.genome = self.optimizer.step(&self.genome, &grads, self.config.learning_rate)?;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        })
    }
}

pub fn count_correct(logits: &[f64], classes: usize, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| argmax(&logits[b * classes..(b + 1) * classes]) == y)
        .count()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub genome: Genome,
    pub history: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|m| m.loss).collect()
    }

    pub fn accuracy_history(&self) -> Vec<f64> {
        self.history.iter().map(|m| m.accuracy).collect()
    }
}

/// Runs `epochs` of mini-batch training from `genome`.
pub fn train(
    net: &NetworkSpec,
    genome: &Genome,
    data: &Samples,
    cfg: &TrainConfig,
    epochs: usize,
    coding: InputCoding,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(genome.clone(), *cfg, coding)?;
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        history.push(trainer.run_epoch(net, data)?);
    }
    Ok(TrainOutcome {
        genome: trainer.genome,
        history,
    })
}

/// Held-out evaluation of a genome.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Temporal-difference regularizer of the readout, averaged per sample.
    pub temporal_diff: f64,
    pub spikes: SpikeStats,
}

pub fn evaluate(
    net: &NetworkSpec,
    genome: &Genome,
    data: &Samples,
    batch_size: usize,
    coding: InputCoding,
    seed: u64,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(GeeError::invalid("evaluation data is empty"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut r1_sum = 0.0;
    let mut spikes = SpikeStats::empty(net);
    let order: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in order.chunks(batch_size.max(1)).enumerate() {
        let (x, y) = data.gather(chunk);
        let input = encode_spikes(&x, chunk.len(), net.time_steps(), coding, derive_seed(seed, b as u64))?;
        let out = forward(net, genome, &input, ForwardOptions::default())?;
        loss_sum += loss(&out.logits, out.classes, &y)? * chunk.len() as f64;
        correct += count_correct(&out.logits, out.classes, &y);
        r1_sum += crate::fitness::temporal_diff_reg(&out.outputs)?;
        spikes.merge(&out.spikes)?;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        temporal_diff: r1_sum / n,
        spikes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Check at most this many coordinates (sampled without replacement).
    pub max_coords: usize,
    /// Floor on the relative-error denominator `max(|analytic|, |numeric|, floor * max(1, |L|))`.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 400,
            denom_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    /// Coordinates dropped because a perturbation moved some membrane across
    /// a kink of the ramp nonlinearity, where finite differences are invalid.
    pub coords_skipped: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<CoordinateError>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let worst = match &self.worst {
            Some(w) => format!(
                "worst coordinate {} (analytic {:.6e}, numeric {:.6e}, rel {:.3e})",
                w.index, w.analytic, w.numeric, w.rel_error
            ),
            None => "no coordinates".to_string(),
        };
        format!(
            "{}: checked {} coordinates ({} skipped at kinks), max rel error {:.3e}, mean rel error {:.3e}, max abs error {:.3e}; {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.coords_checked,
            self.coords_skipped,
            self.max_rel_error,
            self.mean_rel_error,
            self.max_abs_error,
            worst
        )
    }
}

fn ramp_forward(net: &NetworkSpec, genome: &Genome, input: &InputSequence) -> Result<ForwardOutput> {
    forward(
        net,
        genome,
        input,
        ForwardOptions {
            spike_fn: SpikeFunction::Ramp,
        },
    )
}

/// Region of every pre-activation relative to the two ramp kinks.
fn kink_regions(net: &NetworkSpec, out: &ForwardOutput) -> Vec<u8> {
    let mut regions = Vec::new();
    for (l, steps) in out.cache.u_pre.iter().enumerate() {
        if steps.is_empty() {
            continue;
        }
        let cfg = &net.layers()[l].lif;
        for step in steps {
            regions.extend(step.iter().map(|&u| {
                let d = u - cfg.v_threshold;
                if d <= -cfg.surrogate_width {
                    0
                } else if d >= cfg.surrogate_width {
                    2
                } else {
                    1
                }
            }));
        }
    }
    regions
}

/// Compares analytic gradients with central finite differences of the loss.
///
/// Runs the forward pass with the ramp spike function, whose derivative is
/// the rectangular surrogate, so the analytic gradient is the true gradient.
pub fn grad_check(
    net: &NetworkSpec,
    genome: &Genome,
    input: &InputSequence,
    labels: &[usize],
    cfg: &GradCheckConfig,
    opts: BackwardOptions,
) -> Result<GradCheckReport> {
    let base = ramp_forward(net, genome, input)?;
    let (base_loss, grads) = backward(net, genome, &base, labels, opts)?;
    let analytic = grads.flatten();
    // The loss is only known to a few ulps, so derivatives much smaller than
    // |L| · ulp / step are noise. The floor follows the loss scale.
    let floor = cfg.denom_floor * base_loss.abs().max(1.0);
    let base_regions = kink_regions(net, &base);

    let n = genome.num_params();
    let mut coords: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    coords.shuffle(&mut rng);

    let mut checked = Vec::new();
    let mut skipped = 0;
    let mut probe = genome.clone();
    for &idx in &coords {
        if checked.len() >= cfg.max_coords {
            break;
        }
        let orig = *probe.param_mut(idx);
        *probe.param_mut(idx) = orig + cfg.step;
        let plus = ramp_forward(net, &probe, input)?;
        *probe.param_mut(idx) = orig - cfg.step;
        let minus = ramp_forward(net, &probe, input)?;
        *probe.param_mut(idx) = orig;
        if kink_regions(net, &plus) != base_regions || kink_regions(net, &minus) != base_regions {
            skipped += 1;
            continue;
        }
        let lp = loss(&plus.logits, plus.classes, labels)?;
        let lm = loss(&minus.logits, minus.classes, labels)?;
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let a = analytic[idx];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(floor);
        checked.push(CoordinateError {
            index: idx,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }

    let max_rel = checked.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let max_abs = checked
        .iter()
        .map(|c| (c.analytic - c.numeric).abs())
        .fold(0.0, f64::max);
    let mean_rel = if checked.is_empty() {
        0.0
    } else {
        checked.iter().map(|c| c.rel_error).sum::<f64>() / checked.len() as f64
    };
    let worst = checked
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    Ok(GradCheckReport {
        coords_checked: checked.len(),
        coords_skipped: skipped,
        max_rel_error: max_rel,
        mean_rel_error: mean_rel,
        max_abs_error: max_abs,
        worst,
        passed: !checked.is_empty() && max_rel < cfg.tolerance,
    })
}
