//! Leaky integrate-and-fire dynamics and the genetically encoded network.
//!
//! Discrete hard-reset LIF per step:
//!
//! ```text
//! u_pre = τ·u + I
//! s     = 1 if u_pre ≥ V_th else 0
//! u     = v_reset if s = 1 else u_pre
//! ```
//!
//! The last layer of every network is a non-spiking readout that accumulates
//! its input current without leak or reset; its membrane `Y^(t)` is read at
//! every step and the classification logits are the mean over steps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};
use crate::genome::{materialize_weights, Genome, NeuronalEncoding, WeightTensor};

/// Default number of simulation steps.
pub const DEFAULT_TIME_STEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    /// Membrane leak factor per step, in (0, 1].
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    /// Half-width of the rectangular surrogate derivative window.
    pub surrogate_width: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_width: 0.5,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(GeeError::invalid(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.v_threshold > 0.0 && self.v_threshold.is_finite()) {
            return Err(GeeError::invalid("v_threshold must be positive"));
        }
        if !self.v_reset.is_finite() {
            return Err(GeeError::invalid("v_reset must be finite"));
        }
        if !(self.surrogate_width > 0.0 && self.surrogate_width.is_finite()) {
            return Err(GeeError::invalid("surrogate_width must be positive"));
        }
        Ok(())
    }

    /// Rectangular pseudo-derivative of the spike function at `u_pre`.
    #[inline]
    pub fn surrogate(&self, u_pre: f64) -> f64 {
        if (u_pre - self.v_threshold).abs() < self.surrogate_width {
            0.5 / self.surrogate_width
        } else {
            0.0
        }
    }
}

/// Membrane potentials of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub membrane: Vec<f64>,
}

impl LifState {
    pub fn reset(len: usize, cfg: &LifConfig) -> Self {
        Self {
            membrane: vec![cfg.v_reset; len],
        }
    }
}

/// Advances one LIF step, returning the binary spikes and the new state.
pub fn lif_step(state: &LifState, input: &[f64], cfg: &LifConfig) -> Result<(Vec<f64>, LifState)> {
    if state.membrane.len() != input.len() {
        return Err(GeeError::shape(format!(
            "membrane has {} neurons, input current has {}",
            state.membrane.len(),
            input.len()
        )));
    }
    let mut spikes = Vec::with_capacity(input.len());
    let mut membrane = Vec::with_capacity(input.len());
    for (&u, &i) in state.membrane.iter().zip(input) {
        let u_pre = cfg.tau * u + i;
        if u_pre >= cfg.v_threshold {
            spikes.push(1.0);
            membrane.push(cfg.v_reset);
        } else {
            spikes.push(0.0);
            membrane.push(u_pre);
        }
    }
    Ok((spikes, LifState { membrane }))
}

/// Elementwise rectangular surrogate derivative.
pub fn surrogate_grad(u_pre: &[f64], cfg: &LifConfig) -> Vec<f64> {
    u_pre.iter().map(|&u| cfg.surrogate(u)).collect()
}

/// Forward nonlinearity used for the spike function.
///
/// `Ramp` is the clipped linear function whose derivative is exactly the
/// rectangular surrogate. Gradient checks run in this mode so that finite
/// differences see the same function the backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeFunction {
    #[default]
    Heaviside,
    Ramp,
}

impl SpikeFunction {
    #[inline]
    fn fire(self, u_pre: f64, cfg: &LifConfig) -> f64 {
        match self {
            SpikeFunction::Heaviside => {
                if u_pre >= cfg.v_threshold {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFunction::Ramp => {
                let w = cfg.surrogate_width;
                ((u_pre - cfg.v_threshold + w) / (2.0 * w)).clamp(0.0, 1.0)
            }
        }
    }
}

/// `T` binary tensors of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    neurons: usize,
    steps: Vec<Vec<u8>>,
}

impl SpikeTrain {
    pub fn new(steps: Vec<Vec<u8>>) -> Result<Self> {
        let neurons = steps
            .first()
            .map(|s| s.len())
            .ok_or_else(|| GeeError::invalid("spike train needs T >= 1"))?;
        if steps.iter().any(|s| s.len() != neurons) {
            return Err(GeeError::shape("spike train steps differ in length"));
        }
        if steps.iter().flatten().any(|&x| x > 1) {
            return Err(GeeError::invalid("spike train entries must be 0 or 1"));
        }
        Ok(Self { neurons, steps })
    }

    /// Converts real tensors holding only 0.0 / 1.0.
    pub fn from_real(steps: &[Vec<f64>]) -> Result<Self> {
        let mut out = Vec::with_capacity(steps.len());
        for s in steps {
            let mut row = Vec::with_capacity(s.len());
            for &x in s {
                if x == 0.0 {
                    row.push(0);
                } else if x == 1.0 {
                    row.push(1);
                } else {
                    return Err(GeeError::invalid(format!("non-binary spike value {x}")));
                }
            }
            out.push(row);
        }
        Self::new(out)
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn time_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[Vec<u8>] {
        &self.steps
    }
}

pub fn count_spikes(train: &SpikeTrain) -> u64 {
    train
        .steps
        .iter()
        .map(|s| s.iter().map(|&x| u64::from(x)).sum::<u64>())
        .sum()
}

/// Fraction of neuron-steps that spiked.
pub fn firing_rate(train: &SpikeTrain) -> f64 {
    let total = (train.neurons * train.time_steps()) as f64;
    if total == 0.0 {
        0.0
    } else {
        count_spikes(train) as f64 / total
    }
}

/// Channel-height-width shape of one sample's activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(features: usize) -> Self {
        Self::new(features, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub lif: LifConfig,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            },
            lif: LifConfig::default(),
        }
    }

    pub fn linear(out_features: usize) -> Self {
        Self {
            kind: LayerKind::Linear { out_features },
            lif: LifConfig::default(),
        }
    }

    pub fn with_lif(mut self, lif: LifConfig) -> Self {
        self.lif = lif;
        self
    }
}

/// Static geometry of one layer, derived from the network description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub in_shape: Shape3,
    pub out_shape: Shape3,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub is_conv: bool,
    /// Index of the encoding used as `E_in`.
    pub enc_in: usize,
    /// Index of the encoding used as `E_out`.
    pub enc_out: usize,
}

impl LayerGeometry {
    pub fn c_in(&self) -> usize {
        self.in_shape.c
    }

    pub fn c_out(&self) -> usize {
        self.out_shape.c
    }

    /// Multiply-accumulates per sample: output elements times fan-in.
    pub fn flops(&self) -> u64 {
        (self.out_shape.len() * self.c_in() * self.kernel * self.kernel) as u64
    }
}

/// A validated network: layers, per-layer LIF constants, gene count and `T`.
///
/// Linear layers flatten their input and act as `k = 1` convolutions. Layer
/// `i` reads encoding `enc_in` and writes encoding `enc_out`; a layer's output
/// encoding is reused as the next layer's input encoding whenever the channel
/// count and kernel size agree. Where they do not (flattening into a linear
/// layer, or a kernel-size change) the next layer gets its own input encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input: Shape3,
    layers: Vec<LayerSpec>,
    genes: usize,
    time_steps: usize,
    geometry: Vec<LayerGeometry>,
    encoding_shapes: Vec<(usize, usize)>,
}

impl NetworkSpec {
    pub fn new(input: Shape3, layers: Vec<LayerSpec>, genes: usize, time_steps: usize) -> Result<Self> {
        if input.is_empty() {
            return Err(GeeError::invalid("input shape must be non-empty"));
        }
        if layers.is_empty() {
            return Err(GeeError::invalid("network needs at least one layer"));
        }
        if genes == 0 {
            return Err(GeeError::invalid("gene count must be >= 1"));
        }
        if time_steps == 0 {
            return Err(GeeError::invalid("time steps must be >= 1"));
        }
        if !matches!(layers.last().map(|l| l.kind), Some(LayerKind::Linear { .. })) {
            return Err(GeeError::invalid("the readout (last) layer must be linear"));
        }

        let mut geometry = Vec::with_capacity(layers.len());
        let mut encoding_shapes: Vec<(usize, usize)> = Vec::new();
        let mut shape = input;
        for (idx, layer) in layers.iter().enumerate() {
            layer
                .lif
                .validate()
                .map_err(|e| GeeError::invalid(format!("layer {idx}: {e}")))?;
            let (in_shape, out_shape, kernel, stride, padding, is_conv) = match layer.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(GeeError::invalid(format!(
                            "layer {idx}: conv channels, kernel and stride must be >= 1"
                        )));
                    }
                    let span_h = shape.h + 2 * padding;
                    let span_w = shape.w + 2 * padding;
                    if span_h < kernel || span_w < kernel {
                        return Err(GeeError::shape(format!(
                            "layer {idx}: kernel {kernel} larger than padded input {span_h}x{span_w}"
                        )));
                    }
                    let out = Shape3::new(
                        out_channels,
                        (span_h - kernel) / stride + 1,
                        (span_w - kernel) / stride + 1,
                    );
                    (shape, out, kernel, stride, padding, true)
                }
                LayerKind::Linear { out_features } => {
                    if out_features == 0 {
                        return Err(GeeError::invalid(format!(
                            "layer {idx}: linear out_features must be >= 1"
                        )));
                    }
                    (Shape3::flat(shape.len()), Shape3::flat(out_features), 1, 1, 0, false)
                }
            };
            let want_in = (in_shape.c, kernel);
            if encoding_shapes.last() != Some(&want_in) {
                encoding_shapes.push(want_in);
            }
            let enc_in = encoding_shapes.len() - 1;
            encoding_shapes.push((out_shape.c, kernel));
            let enc_out = encoding_shapes.len() - 1;
            geometry.push(LayerGeometry {
                in_shape,
                out_shape,
                kernel,
                stride,
                padding,
                is_conv,
                enc_in,
                enc_out,
            });
            shape = out_shape;
        }

        Ok(Self {
            input,
            layers,
            genes,
            time_steps,
            geometry,
            encoding_shapes,
        })
    }

    /// A stack of linear layers over flat features; the last size is the class count.
    pub fn mlp(features: usize, sizes: &[usize], genes: usize, time_steps: usize) -> Result<Self> {
        let layers = sizes.iter().map(|&n| LayerSpec::linear(n)).collect();
        Self::new(Shape3::flat(features), layers, genes, time_steps)
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn geometry(&self) -> &[LayerGeometry] {
        &self.geometry
    }

    pub fn genes(&self) -> usize {
        self.genes
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.geometry.last().expect("non-empty").out_shape.len()
    }

    /// `(channels, kernel)` of every encoding tensor.
    pub fn encoding_shapes(&self) -> &[(usize, usize)] {
        &self.encoding_shapes
    }

    pub fn layer_encodings(&self, layer: usize) -> (usize, usize) {
        let geo = &self.geometry[layer];
        (geo.enc_in, geo.enc_out)
    }

    /// Returns a copy with a different number of simulation steps.
    pub fn with_time_steps(&self, time_steps: usize) -> Result<Self> {
        Self::new(self.input, self.layers.clone(), self.genes, time_steps)
    }

    /// Samples every encoding from `(β1, β2)`; encoding `i` uses `derive_seed(seed, i)`.
    pub fn sample_genome(
        &self,
        genotype: &crate::genome::Genotype,
        seed: u64,
    ) -> Result<Genome> {
        if genotype.g() != self.genes {
            return Err(GeeError::shape(format!(
                "genotype has g = {}, network expects {}",
                genotype.g(),
                self.genes
            )));
        }
        let encodings = self
            .encoding_shapes
            .iter()
            .enumerate()
            .map(|(i, &(c, k))| {
                NeuronalEncoding::sample(
                    genotype.beta1,
                    genotype.beta2,
                    c,
                    k,
                    self.genes,
                    crate::derive_seed(seed, i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Genome {
            encodings,
            interaction: genotype.interaction.clone(),
        })
    }

    /// Checks that `genome` has exactly the encodings this network expects.
    pub fn check_genome(&self, genome: &Genome) -> Result<()> {
        if genome.g() != self.genes {
            return Err(GeeError::shape(format!(
                "genome has g = {}, network expects {}",
                genome.g(),
                self.genes
            )));
        }
        if genome.encodings.len() != self.encoding_shapes.len() {
            return Err(GeeError::shape(format!(
                "genome has {} encodings, network expects {}",
                genome.encodings.len(),
                self.encoding_shapes.len()
            )));
        }
        for (i, (e, &(c, k))) in genome.encodings.iter().zip(&self.encoding_shapes).enumerate() {
            if e.channels() != c || e.kernel() != k || e.genes() != self.genes {
                return Err(GeeError::shape(format!(
                    "encoding {i} has shape ({}, {}, {}, {}), expected ({c}, {k}, {k}, {})",
                    e.channels(),
                    e.kernel(),
                    e.kernel(),
                    e.genes(),
                    self.genes
                )));
            }
        }
        Ok(())
    }

    /// Materializes every layer's weights from the genome.
    pub fn materialize(&self, genome: &Genome) -> Result<Vec<WeightTensor>> {
        self.check_genome(genome)?;
        self.geometry
            .iter()
            .map(|geo| {
                materialize_weights(
                    &genome.encodings[geo.enc_in],
                    &genome.interaction,
                    &genome.encodings[geo.enc_out],
                )
            })
            .collect()
    }
}

/// Real-valued input currents, one `batch × features` tensor per step.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub batch: usize,
    pub features: usize,
    pub steps: Vec<Vec<f64>>,
}

impl InputSequence {
    pub fn new(batch: usize, features: usize, steps: Vec<Vec<f64>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(GeeError::invalid("input sequence needs T >= 1"));
        }
        if steps.iter().any(|s| s.len() != batch * features) {
            return Err(GeeError::shape(format!(
                "every input step must hold batch·features = {} values",
                batch * features
            )));
        }
        Ok(Self {
            batch,
            features,
            steps,
        })
    }

    /// Injects the same samples at each of `time_steps` steps.
    pub fn constant(samples: &[f64], batch: usize, time_steps: usize) -> Result<Self> {
        if batch == 0 || !samples.len().is_multiple_of(batch) {
            return Err(GeeError::shape("sample buffer is not a whole number of rows"));
        }
        Self::new(batch, samples.len() / batch, vec![samples.to_vec(); time_steps])
    }

    pub fn time_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Choice of forward nonlinearity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub spike_fn: SpikeFunction,
}

/// Intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) weights: Vec<WeightTensor>,
    /// `[layer][t]`: the `batch × in_len` input of each layer at each step.
    pub(crate) layer_inputs: Vec<Vec<Vec<f64>>>,
    /// `[layer][t]`: pre-activation membrane potentials of spiking layers.
    pub(crate) u_pre: Vec<Vec<Vec<f64>>>,
    pub(crate) spike_fn: SpikeFunction,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub batch: usize,
    pub classes: usize,
    /// Readout membrane `Y^(t)` at each step, each `batch × classes`.
    pub outputs: Vec<Vec<f64>>,
    /// Mean of `Y^(t)` over steps, `batch × classes`.
    pub logits: Vec<f64>,
    pub spikes: SpikeStats,
    pub cache: ForwardCache,
}

/// Spike totals per layer accumulated over samples and steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeStats {
    /// Spikes emitted per layer; the readout never spikes and records 0.
    pub per_layer: Vec<u64>,
    /// Neurons per layer (per sample).
    pub neurons: Vec<usize>,
    pub samples: usize,
    pub time_steps: usize,
}

impl SpikeStats {
    pub fn empty(net: &NetworkSpec) -> Self {
        Self {
            per_layer: vec![0; net.num_layers()],
            neurons: net.geometry().iter().map(|g| g.out_shape.len()).collect(),
            samples: 0,
            time_steps: net.time_steps(),
        }
    }

    pub fn merge(&mut self, other: &SpikeStats) -> Result<()> {
        if self.neurons != other.neurons || self.time_steps != other.time_steps {
            return Err(GeeError::shape("cannot merge spike statistics of different networks"));
        }
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            *a += b;
        }
        self.samples += other.samples;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.per_layer.iter().sum()
    }

    /// Output firing rate of each layer, `spikes / (neurons · T · samples)`.
    pub fn firing_rates(&self) -> Vec<f64> {
        self.per_layer
            .iter()
            .zip(&self.neurons)
            .map(|(&s, &n)| {
                let denom = (n * self.time_steps * self.samples) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    s as f64 / denom
                }
            })
            .collect()
    }
}

/// Direct convolution of a batch; linear layers are the `k = 1`, `1 × 1` case.
pub(crate) fn conv_forward(geo: &LayerGeometry, w: &WeightTensor, x: &[f64], batch: usize) -> Vec<f64> {
    let (ins, outs) = (geo.in_shape, geo.out_shape);
    let (k, s, p) = (geo.kernel, geo.stride, geo.padding as isize);
    let in_len = ins.len();
    let out_len = outs.len();
    let mut y = vec![0.0; batch * out_len];
    if !geo.is_conv {
        let wd = w.data();
        for b in 0..batch {
            let xb = &x[b * in_len..(b + 1) * in_len];
            for o in 0..out_len {
                let row = &wd[o * in_len..(o + 1) * in_len];
                y[b * out_len + o] = row.iter().zip(xb).map(|(a, c)| a * c).sum();
            }
        }
        return y;
    }
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        for o in 0..outs.c {
            for oy in 0..outs.h {
                for ox in 0..outs.w {
                    let mut acc = 0.0;
                    for i in 0..ins.c {
                        for u in 0..k {
                            let iy = (oy * s + u) as isize - p;
                            if iy < 0 || iy >= ins.h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let ix = (ox * s + v) as isize - p;
                                if ix < 0 || ix >= ins.w as isize {
                                    continue;
                                }
                                acc += w.get(o, i, u, v)
                                    * xb[(i * ins.h + iy as usize) * ins.w + ix as usize];
                            }
                        }
                    }
                    y[b * out_len + (o * outs.h + oy) * outs.w + ox] = acc;
                }
            }
        }
    }
    y
}

/// Accumulates `dW += ∂/∂W` and, when requested, returns `∂/∂x` for upstream `dy`.
pub(crate) fn conv_backward(
    geo: &LayerGeometry,
    w: &WeightTensor,
    x: &[f64],
    dy: &[f64],
    batch: usize,
    dw: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (ins, outs) = (geo.in_shape, geo.out_shape);
    let (k, s, p) = (geo.kernel, geo.stride, geo.padding as isize);
    let in_len = ins.len();
    let out_len = outs.len();
    let mut dx = if want_dx { vec![0.0; batch * in_len] } else { Vec::new() };
    if !geo.is_conv {
        let wd = w.data();
        for b in 0..batch {
            let xb = &x[b * in_len..(b + 1) * in_len];
            for o in 0..out_len {
                let g = dy[b * out_len + o];
                if g == 0.0 {
                    continue;
                }
                let drow = &mut dw[o * in_len..(o + 1) * in_len];
                for (d, xv) in drow.iter_mut().zip(xb) {
                    *d += g * xv;
                }
                if want_dx {
                    let row = &wd[o * in_len..(o + 1) * in_len];
                    let dxb = &mut dx[b * in_len..(b + 1) * in_len];
                    for (d, wv) in dxb.iter_mut().zip(row) {
                        *d += g * wv;
                    }
                }
            }
        }
        return want_dx.then_some(dx);
    }
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        for o in 0..outs.c {
            for oy in 0..outs.h {
                for ox in 0..outs.w {
                    let g = dy[b * out_len + (o * outs.h + oy) * outs.w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..ins.c {
                        for u in 0..k {
                            let iy = (oy * s + u) as isize - p;
                            if iy < 0 || iy >= ins.h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let ix = (ox * s + v) as isize - p;
                                if ix < 0 || ix >= ins.w as isize {
                                    continue;
                                }
                                let xi = (i * ins.h + iy as usize) * ins.w + ix as usize;
                                dw[w.index(o, i, u, v)] += g * xb[xi];
                                if want_dx {
                                    dx[b * in_len + xi] += g * w.get(o, i, u, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    want_dx.then_some(dx)
}

/// Simulates the network for `T` steps from reset membranes.
///
/// Weights are materialized once from the genome at the start of the call.
pub fn forward(
    net: &NetworkSpec,
    genome: &Genome,
    input: &InputSequence,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let weights = net.materialize(genome)?;
    forward_with_weights(net, weights, input, opts)
}

pub(crate) fn forward_with_weights(
    net: &NetworkSpec,
    weights: Vec<WeightTensor>,
    input: &InputSequence,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let t_steps = net.time_steps();
    if input.time_steps() != t_steps {
        return Err(GeeError::shape(format!(
            "input has {} steps, network simulates {t_steps}",
            input.time_steps()
        )));
    }
    if input.features != net.input_shape().len() {
        return Err(GeeError::shape(format!(
            "input has {} features per sample, network expects {}",
            input.features,
            net.input_shape().len()
        )));
    }
    let batch = input.batch;
    let n_layers = net.num_layers();
    let readout = n_layers - 1;
    let classes = net.num_classes();

    let mut layer_inputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(t_steps); n_layers];
    let mut u_pre_cache: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(t_steps); n_layers];
    let mut membranes: Vec<Vec<f64>> = net
        .geometry()
        .iter()
        .zip(net.layers())
        .enumerate()
        .map(|(l, (geo, spec))| {
            let reset = if l == readout { 0.0 } else { spec.lif.v_reset };
            vec![reset; batch * geo.out_shape.len()]
        })
        .collect();
    let mut per_layer = vec![0u64; n_layers];
    let mut outputs = Vec::with_capacity(t_steps);

    for t in 0..t_steps {
        let mut x = input.steps[t].clone();
        for l in 0..n_layers {
            let geo = &net.geometry()[l];
            let current = conv_forward(geo, &weights[l], &x, batch);
            layer_inputs[l].push(x);
            if l == readout {
                let y = &mut membranes[l];
                for (m, c) in y.iter_mut().zip(&current) {
                    *m += c;
                }
                if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
                    return Err(GeeError::numerical(format!(
                        "non-finite readout value at layer {l}, step {t}, index {bad}"
                    )));
                }
                outputs.push(y.clone());
                break;
            }
            let cfg = &net.layers()[l].lif;
            let mem = &mut membranes[l];
            let mut u_pre = Vec::with_capacity(current.len());
            let mut spikes = Vec::with_capacity(current.len());
            for (m, c) in mem.iter_mut().zip(&current) {
                let up = cfg.tau * *m + c;
                if !up.is_finite() {
                    return Err(GeeError::numerical(format!(
                        "non-finite membrane potential at layer {l}, step {t}"
                    )));
                }
                let s = opts.spike_fn.fire(up, cfg);
                *m = up * (1.0 - s) + cfg.v_reset * s;
                if s >= 0.5 {
                    per_layer[l] += 1;
                }
                u_pre.push(up);
                spikes.push(s);
            }
            u_pre_cache[l].push(u_pre);
            x = spikes;
        }
    }

    let mut logits = vec![0.0; batch * classes];
    for y in &outputs {
        for (a, b) in logits.iter_mut().zip(y) {
            *a += b;
        }
    }
    for a in &mut logits {
        *a /= t_steps as f64;
    }

    Ok(ForwardOutput {
        batch,
        classes,
        outputs,
        logits,
        spikes: SpikeStats {
            per_layer,
            neurons: net.geometry().iter().map(|g| g.out_shape.len()).collect(),
            samples: batch,
            time_steps: t_steps,
        },
        cache: ForwardCache {
            weights,
            layer_inputs,
            u_pre: u_pre_cache,
            spike_fn: opts.spike_fn,
        },
    })
}

/// Energy per operation, in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            e_mac_pj: 4.6,
            e_ac_pj: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub layer: usize,
    pub flops: u64,
    pub spikes: u64,
    /// Output firing rate of this layer.
    pub rate: f64,
    pub energy_pj: f64,
}

/// Theoretical per-sample inference energy.
///
/// The first layer sees real-valued input and is billed `E_MAC` per
/// multiply-accumulate. Every later layer is billed `E_AC · T` per synaptic
/// operation, where its synaptic operations are its MACs scaled by the firing
/// rate of the spikes it receives.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub flops_first_layer: u64,
    pub sops: f64,
    pub firing_rates: Vec<f64>,
    pub energy_pj: f64,
    pub spike_total: u64,
    pub time_steps: usize,
    pub layers: Vec<LayerEnergy>,
}

pub const ENERGY_CSV_HEADER: &str = "layer,flops,spikes,rate,energy_pj";

impl EnergyReport {
    pub fn energy_mj(&self) -> f64 {
        self.energy_pj * 1e-9
    }

    /// One row per layer plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ENERGY_CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{},{},{}", l.layer, l.flops, l.spikes, l.rate, l.energy_pj);
        }
        let total_flops: u64 = self.layers.iter().map(|l| l.flops).sum();
        let _ = writeln!(
            out,
            "total,{},{},{},{}",
            total_flops,
            self.spike_total,
            overall_rate(&self.layers, &self.firing_rates),
            self.energy_pj
        );
        out
    }
}

fn overall_rate(layers: &[LayerEnergy], rates: &[f64]) -> f64 {
    // Unweighted mean over spiking layers.
    let spiking = layers.len().saturating_sub(1);
    if spiking == 0 {
        0.0
    } else {
        rates[..spiking].iter().sum::<f64>() / spiking as f64
    }
}

/// Per-layer multiply-accumulates per sample.
pub fn layer_flops(net: &NetworkSpec) -> Vec<u64> {
    net.geometry().iter().map(LayerGeometry::flops).collect()
}

pub fn energy_report(
    net: &NetworkSpec,
    stats: &SpikeStats,
    constants: &EnergyConstants,
) -> Result<EnergyReport> {
    if stats.samples == 0 {
        return Err(GeeError::State(
            "no spike statistics collected; run a forward pass first".into(),
        ));
    }
    if stats.per_layer.len() != net.num_layers() || stats.time_steps != net.time_steps() {
        return Err(GeeError::State(
            "spike statistics do not belong to this network".into(),
        ));
    }
    let flops = layer_flops(net);
    let rates = stats.firing_rates();
    let t = net.time_steps() as f64;
    let mut layers = Vec::with_capacity(flops.len());
    let mut sops = 0.0;
    for (l, &fl) in flops.iter().enumerate() {
        let energy_pj = if l == 0 {
            constants.e_mac_pj * fl as f64
        } else {
            let layer_sops = fl as f64 * rates[l - 1];
            sops += layer_sops;
            constants.e_ac_pj * t * layer_sops
        };
        layers.push(LayerEnergy {
            layer: l,
            flops: fl,
            spikes: stats.per_layer[l],
            rate: rates[l],
            energy_pj,
        });
    }
    let energy_pj = constants.e_mac_pj * flops[0] as f64 + constants.e_ac_pj * t * sops;
    Ok(EnergyReport {
        flops_first_layer: flops[0],
        sops,
        firing_rates: rates,
        energy_pj,
        spike_total: stats.total(),
        time_steps: net.time_steps(),
        layers,
    })
}
