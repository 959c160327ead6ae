//! Gene encodings, the shared interaction matrix and weight materialization.
//!
//! A layer with `C_in` input channels, `C_out` output channels and a `k × k`
//! kernel is described by an input encoding of shape `(C_in, k, k, g)`, an
//! output encoding of shape `(C_out, k, k, g)` and the network-wide `g × g`
//! interaction matrix. The weight at kernel position `(u, v)` is the bilinear
//! form of the two gene vectors through the interaction matrix:
//!
//! ```text
//! W[o, i, u, v] = Σ_a Σ_b E_in[i, u, v, a] · G[a, b] · E_out[o, u, v, b]
//! ```
//!
//! Only the gene axis is contracted, so the stored parameter count is
//! `g · (C_in k² + g + C_out k²)`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use serde_json::json;

use crate::error::{GeeError, Result};
use crate::textfmt;

/// Lower bound applied to repaired β values.
pub const BETA_FLOOR: f64 = 1e-6;

/// The globally shared `g × g` gene interaction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneInteraction {
    matrix: DMatrix<f64>,
}

impl GeneInteraction {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.nrows() != matrix.ncols() {
            return Err(GeeError::shape(format!(
                "gene interaction matrix must be square with g >= 1, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(GeeError::numerical(
                "gene interaction matrix has non-finite entries",
            ));
        }
        Ok(Self { matrix })
    }

    /// Builds `G` from `g²` reals in row-major order.
    pub fn from_row_major(g: usize, values: &[f64]) -> Result<Self> {
        if values.len() != g * g {
            return Err(GeeError::shape(format!(
                "expected {} entries for g = {g}, got {}",
                g * g,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(g, g, values))
    }

    pub fn identity(g: usize) -> Self {
        assert!(g >= 1, "gene count must be positive");
        Self {
            matrix: DMatrix::identity(g, g),
        }
    }

    pub fn zeros(g: usize) -> Self {
        assert!(g >= 1, "gene count must be positive");
        Self {
            matrix: DMatrix::zeros(g, g),
        }
    }

    /// Gene count.
    pub fn g(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.matrix[(a, b)]
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let g = self.g();
        let mut out = Vec::with_capacity(g * g);
        for a in 0..g {
            for b in 0..g {
                out.push(self.matrix[(a, b)]);
            }
        }
        out
    }

    /// Applies `G ← G − lr · grad`.
    pub(crate) fn descend(&mut self, grad: &DMatrix<f64>, lr: f64) {
        self.matrix -= grad * lr;
    }
}

/// Per-layer neuronal encoding, shape `(channels, k, k, g)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronalEncoding {
    channels: usize,
    kernel: usize,
    genes: usize,
    data: Vec<f64>,
}

impl NeuronalEncoding {
    pub fn zeros(channels: usize, kernel: usize, genes: usize) -> Self {
        Self {
            channels,
            kernel,
            genes,
            data: vec![0.0; channels * kernel * kernel * genes],
        }
    }

    pub fn from_vec(channels: usize, kernel: usize, genes: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || kernel == 0 || genes == 0 {
            return Err(GeeError::invalid("encoding dimensions must be >= 1"));
        }
        let expected = channels * kernel * kernel * genes;
        if data.len() != expected {
            return Err(GeeError::shape(format!(
                "encoding ({channels}, {kernel}, {kernel}, {genes}) needs {expected} reals, got {}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(GeeError::numerical("encoding has non-finite entries"));
        }
        Ok(Self {
            channels,
            kernel,
            genes,
            data,
        })
    }

    /// Samples every entry as `clamp(A, −β2, β2)` with `A ~ N(0, β1²)`.
    ///
    /// Out-of-range draws land on the boundary; nothing is resampled.
    pub fn sample(
        beta1: f64,
        beta2: f64,
        channels: usize,
        kernel: usize,
        genes: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(beta1 > 0.0 && beta1.is_finite()) || !(beta2 > 0.0) {
            return Err(GeeError::invalid(format!(
                "beta1 and beta2 must be positive, got beta1 = {beta1}, beta2 = {beta2}"
            )));
        }
        if channels == 0 || kernel == 0 || genes == 0 {
            return Err(GeeError::invalid("encoding dimensions must be >= 1"));
        }
        let normal = Normal::new(0.0, beta1).map_err(|e| GeeError::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = channels * kernel * kernel * genes;
        let data = (0..len)
            .map(|_| normal.sample(&mut rng).clamp(-beta2, beta2))
            .collect();
        Ok(Self {
            channels,
            kernel,
            genes,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn genes(&self) -> usize {
        self.genes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, u: usize, v: usize, a: usize) -> usize {
        ((c * self.kernel + u) * self.kernel + v) * self.genes + a
    }

    pub fn get(&self, c: usize, u: usize, v: usize, a: usize) -> f64 {
        self.data[self.index(c, u, v, a)]
    }

    /// The `(channels × g)` slice of gene vectors at kernel position `(u, v)`.
    pub fn position(&self, u: usize, v: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.channels, self.genes, |c, a| self.get(c, u, v, a))
    }

    pub(crate) fn add_position(&mut self, u: usize, v: usize, slice: &DMatrix<f64>) {
        for c in 0..self.channels {
            for a in 0..self.genes {
                let idx = self.index(c, u, v, a);
                self.data[idx] += slice[(c, a)];
            }
        }
    }

    pub(crate) fn same_shape(&self, other: &NeuronalEncoding) -> bool {
        self.channels == other.channels && self.kernel == other.kernel && self.genes == other.genes
    }
}

/// Materialized layer weights, shape `(C_out, C_in, k, k)`.
///
/// Fully connected layers use `k = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    c_out: usize,
    c_in: usize,
    kernel: usize,
    data: Vec<f64>,
}

impl WeightTensor {
    pub fn zeros(c_out: usize, c_in: usize, kernel: usize) -> Self {
        Self {
            c_out,
            c_in,
            kernel,
            data: vec![0.0; c_out * c_in * kernel * kernel],
        }
    }

    pub fn from_vec(c_out: usize, c_in: usize, kernel: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c_out * c_in * kernel * kernel {
            return Err(GeeError::shape(format!(
                "weight ({c_out}, {c_in}, {kernel}, {kernel}) needs {} reals, got {}",
                c_out * c_in * kernel * kernel,
                data.len()
            )));
        }
        Ok(Self {
            c_out,
            c_in,
            kernel,
            data,
        })
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, u: usize, v: usize) -> usize {
        ((o * self.c_in + i) * self.kernel + u) * self.kernel + v
    }

    pub fn get(&self, o: usize, i: usize, u: usize, v: usize) -> f64 {
        self.data[self.index(o, i, u, v)]
    }

    /// The `(C_out × C_in)` weight slice at kernel position `(u, v)`.
    pub fn position(&self, u: usize, v: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.c_out, self.c_in, |o, i| self.get(o, i, u, v))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Contracts the gene axis of two encodings through `G` at each kernel position.
pub fn materialize_weights(
    e_in: &NeuronalEncoding,
    interaction: &GeneInteraction,
    e_out: &NeuronalEncoding,
) -> Result<WeightTensor> {
    let g = interaction.g();
    if e_in.genes != g || e_out.genes != g {
        return Err(GeeError::shape(format!(
            "gene counts differ: E_in has {}, G has {g}, E_out has {}",
            e_in.genes, e_out.genes
        )));
    }
    if e_in.kernel != e_out.kernel {
        return Err(GeeError::shape(format!(
            "kernel sizes differ: E_in has {}, E_out has {}",
            e_in.kernel, e_out.kernel
        )));
    }
    let k = e_in.kernel;
    let mut w = WeightTensor::zeros(e_out.channels, e_in.channels, k);
    let gt = interaction.matrix().transpose();
    for u in 0..k {
        for v in 0..k {
            // W_p = E_out,p · Gᵀ · E_in,pᵀ  (C_out × C_in)
            let slice = e_out.position(u, v) * &gt * e_in.position(u, v).transpose();
            for o in 0..w.c_out {
                for i in 0..w.c_in {
                    let idx = w.index(o, i, u, v);
                    w.data[idx] = slice[(o, i)];
                }
            }
        }
    }
    Ok(w)
}

/// Stored reals of a genetically encoded layer: `g · (C_in k² + g + C_out k²)`.
pub fn param_count(g: usize, c_in: usize, c_out: usize, k: usize) -> Result<u64> {
    if g == 0 || c_in == 0 || c_out == 0 || k == 0 {
        return Err(GeeError::invalid("param_count arguments must be >= 1"));
    }
    let (g, c_in, c_out, k2) = (g as u64, c_in as u64, c_out as u64, (k * k) as u64);
    Ok(g * (c_in * k2 + g + c_out * k2))
}

/// Stored reals of the equivalent dense layer: `C_out · C_in · k²`.
pub fn dense_param_count(c_in: usize, c_out: usize, k: usize) -> Result<u64> {
    if c_in == 0 || c_out == 0 || k == 0 {
        return Err(GeeError::invalid("dense_param_count arguments must be >= 1"));
    }
    Ok((c_out * c_in * k * k) as u64)
}

/// Low-rank factors `E1 · G · E2ᵀ ≈ W` built from a truncated SVD.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub e1: DMatrix<f64>,
    pub interaction: GeneInteraction,
    pub e2: DMatrix<f64>,
    /// All singular values of `W`, descending.
    pub singular_values: Vec<f64>,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.e1 * self.interaction.matrix() * self.e2.transpose()
    }
}

/// Factors `W (m × n)` as `E1 = U'Σ'^{1/2}`, `G = I`, `E2 = V'Σ'^{1/2}` from
/// the top `g` singular triplets, the best rank-`g` Frobenius approximation.
pub fn svd_construct(w: &DMatrix<f64>, g: usize) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    if g == 0 || g > m.min(n) {
        return Err(GeeError::invalid(format!(
            "gene count {g} must lie in 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(GeeError::numerical("matrix has non-finite entries"));
    }
    // Eigenpairs of the symmetric embedding [[0, W], [Wᵀ, 0]] are (±σ, (u; ±v)/√2).
    // The symmetric solver stays accurate on rank-deficient W, where the
    // bidiagonal SVD can return non-orthogonal singular vectors.
    let mut embed = DMatrix::zeros(m + n, m + n);
    embed.view_mut((0, m), (m, n)).copy_from(w);
    embed.view_mut((m, 0), (n, m)).copy_from(&w.transpose());
    let eig = embed
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| GeeError::numerical("symmetric eigensolver did not converge"))?;

    let mut order: Vec<usize> = (0..m + n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order.truncate(m.min(n));

    let mut e1 = DMatrix::zeros(m, g);
    let mut e2 = DMatrix::zeros(n, g);
    for (col, &idx) in order.iter().take(g).enumerate() {
        let sigma = eig.eigenvalues[idx].max(0.0);
        let x = eig.eigenvectors.column(idx);
        let (u, v) = (x.rows(0, m), x.rows(m, n));
        let (nu, nv) = (u.norm(), v.norm());
        if sigma == 0.0 || nu == 0.0 || nv == 0.0 {
            continue;
        }
        let root = sigma.sqrt();
        e1.set_column(col, &(u * (root / nu)));
        e2.set_column(col, &(v * (root / nv)));
    }
    Ok(SvdFactors {
        e1,
        interaction: GeneInteraction::identity(g),
        e2,
        singular_values: order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
    })
}

/// The evolvable genotype `{β1, β2, G}`.
///
/// β1 is the standard deviation of the pre-clamp normal and β2 the clamp bound
/// used when sampling initial encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct Genotype {
    pub beta1: f64,
    pub beta2: f64,
    pub interaction: GeneInteraction,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeDoc {
    g: usize,
    beta1: f64,
    beta2: f64,
    #[serde(rename = "G")]
    interaction: Vec<f64>,
}

impl Genotype {
    pub fn new(beta1: f64, beta2: f64, interaction: GeneInteraction) -> Result<Self> {
        if !(beta1 > 0.0 && beta1.is_finite() && beta2 > 0.0 && beta2.is_finite()) {
            return Err(GeeError::invalid(format!(
                "beta1 and beta2 must be positive and finite, got {beta1}, {beta2}"
            )));
        }
        Ok(Self {
            beta1,
            beta2,
            interaction,
        })
    }

    pub fn g(&self) -> usize {
        self.interaction.g()
    }

    /// Flat dimension `2 + g²` of a genotype with `g` genes.
    pub fn flat_dim(g: usize) -> usize {
        2 + g * g
    }

    /// Layout `[β1, β2, row-major G]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::flat_dim(self.g()));
        v.push(self.beta1);
        v.push(self.beta2);
        v.extend(self.interaction.to_row_major());
        v
    }

    /// Inverse of [`Genotype::flatten`], repairing the β slots with
    /// [`repair_beta`] so that unconstrained search proposals stay valid.
    pub fn unflatten(v: &[f64], g: usize) -> Result<Self> {
        if g == 0 || v.len() != Self::flat_dim(g) {
            return Err(GeeError::shape(format!(
                "genotype vector for g = {g} must have length {}, got {}",
                Self::flat_dim(g),
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GeeError::numerical("genotype vector has non-finite entries"));
        }
        Ok(Self {
            beta1: repair_beta(v[0]),
            beta2: repair_beta(v[1]),
            interaction: GeneInteraction::from_row_major(g, &v[2..])?,
        })
    }

    /// Serializes as a JSON document `{g, beta1, beta2, G}` with 17 significant digits.
    pub fn to_text(&self) -> String {
        let doc = json!({
            "g": self.g(),
            "beta1": textfmt::real(self.beta1),
            "beta2": textfmt::real(self.beta2),
            "G": textfmt::reals(self.interaction.to_row_major()),
        });
        textfmt::to_pretty(&doc)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: GenotypeDoc =
            serde_json::from_str(text).map_err(|e| GeeError::parse("genotype", e.to_string()))?;
        let interaction = GeneInteraction::from_row_major(doc.g, &doc.interaction)?;
        Self::new(doc.beta1, doc.beta2, interaction)
    }
}

/// Maps an unconstrained β proposal to a valid one: `max(|x|, 1e−6)`.
pub fn repair_beta(x: f64) -> f64 {
    x.abs().max(BETA_FLOOR)
}

/// Every encoding of a network plus the shared interaction matrix.
///
/// Encoding `i` may feed several layers; see `NetworkSpec::layer_encodings`.
#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub encodings: Vec<NeuronalEncoding>,
    pub interaction: GeneInteraction,
}

impl Genome {
    pub fn g(&self) -> usize {
        self.interaction.g()
    }

    /// Total stored reals.
    pub fn num_params(&self) -> usize {
        self.encodings.iter().map(|e| e.len()).sum::<usize>() + self.g() * self.g()
    }

    /// Flat parameter view, encodings in order followed by row-major `G`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for e in &self.encodings {
            out.extend_from_slice(e.data());
        }
        out.extend(self.interaction.to_row_major());
        out
    }

    /// Mutable access to the `idx`-th coordinate of [`Genome::flat_params`].
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        let mut slot = None;
        for (i, e) in self.encodings.iter().enumerate() {
            if idx < e.len() {
                slot = Some(i);
                break;
            }
            idx -= e.len();
        }
        if let Some(i) = slot {
            return &mut self.encodings[i].data[idx];
        }
        let g = self.g();
        assert!(idx < g * g, "parameter index out of range");
        &mut self.interaction.matrix[(idx / g, idx % g)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_encoding(rng: &mut ChaCha8Rng, c: usize, k: usize, g: usize) -> NeuronalEncoding {
        let data = (0..c * k * k * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        NeuronalEncoding::from_vec(c, k, g, data).unwrap()
    }

    fn random_interaction(rng: &mut ChaCha8Rng, g: usize) -> GeneInteraction {
        let vals: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        GeneInteraction::from_row_major(g, &vals).unwrap()
    }

    /// Brute-force quintuple loop over (o, i, u, v) and the two gene indices.
    fn brute_force_weights(
        e_in: &NeuronalEncoding,
        gm: &GeneInteraction,
        e_out: &NeuronalEncoding,
    ) -> Vec<f64> {
        let k = e_in.kernel();
        let g = gm.g();
        let mut out = Vec::new();
        for o in 0..e_out.channels() {
            for i in 0..e_in.channels() {
                for u in 0..k {
                    for v in 0..k {
                        let mut s = 0.0;
                        for a in 0..g {
                            for b in 0..g {
                                s += e_in.get(i, u, v, a) * gm.get(a, b) * e_out.get(o, u, v, b);
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sample_respects_tiny_clamp_bound() {
        let e = NeuronalEncoding::sample(1.0, 1e-4, 8, 3, 5, 7).unwrap();
        assert!(e.data().iter().all(|x| x.abs() <= 1e-4));
    }

    #[test]
    fn sample_std_matches_beta1_when_clamp_is_loose() {
        // 10⁵ draws; std of the sample std is ≈ 0.5 / sqrt(2·10⁵) ≈ 0.0011.
        let e = NeuronalEncoding::sample(0.5, 10.0, 100_000, 1, 1, 11).unwrap();
        let n = e.len() as f64;
        let mean = e.data().iter().sum::<f64>() / n;
        let var = e.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.5).abs() / 0.5 < 0.02, "std = {}", var.sqrt());
    }

    #[test]
    fn sample_is_deterministic() {
        let a = NeuronalEncoding::sample(0.3, 0.5, 4, 3, 2, 99).unwrap();
        let b = NeuronalEncoding::sample(0.3, 0.5, 4, 3, 2, 99).unwrap();
        assert_eq!(a, b);
        let c = NeuronalEncoding::sample(0.3, 0.5, 4, 3, 2, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_rejects_bad_arguments() {
        assert!(NeuronalEncoding::sample(0.0, 1.0, 1, 1, 1, 0).is_err());
        assert!(NeuronalEncoding::sample(1.0, -1.0, 1, 1, 1, 0).is_err());
        assert!(NeuronalEncoding::sample(1.0, 1.0, 0, 1, 1, 0).is_err());
    }

    #[test]
    fn materialize_identity_contraction() {
        let ones_in = NeuronalEncoding::from_vec(3, 2, 1, vec![1.0; 12]).unwrap();
        let ones_out = NeuronalEncoding::from_vec(2, 2, 1, vec![1.0; 8]).unwrap();
        let g = GeneInteraction::from_row_major(1, &[2.5]).unwrap();
        let w = materialize_weights(&ones_in, &g, &ones_out).unwrap();
        assert_eq!((w.c_out(), w.c_in(), w.kernel()), (2, 3, 2));
        assert!(w.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn materialize_zero_interaction_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e_in = random_encoding(&mut rng, 3, 3, 4);
        let e_out = random_encoding(&mut rng, 5, 3, 4);
        let w = materialize_weights(&e_in, &GeneInteraction::zeros(4), &e_out).unwrap();
        assert!(w.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn materialize_matches_triple_loop_on_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e_in = random_encoding(&mut rng, 2, 1, 3);
        let gm = random_interaction(&mut rng, 3);
        let e_out = random_encoding(&mut rng, 2, 1, 3);
        let w = materialize_weights(&e_in, &gm, &e_out).unwrap();
        let oracle = brute_force_weights(&e_in, &gm, &e_out);
        for (a, b) in w.data().iter().zip(&oracle) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn materialize_rejects_mismatches() {
        let a = NeuronalEncoding::zeros(2, 3, 2);
        let b = NeuronalEncoding::zeros(2, 1, 2);
        let c = NeuronalEncoding::zeros(2, 3, 3);
        let g2 = GeneInteraction::identity(2);
        assert!(matches!(
            materialize_weights(&a, &g2, &b),
            Err(GeeError::ShapeMismatch(_))
        ));
        assert!(matches!(
            materialize_weights(&a, &g2, &c),
            Err(GeeError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(150, 64, 128, 3).unwrap(), 281_700);
        assert_eq!(param_count(1, 1, 1, 1).unwrap(), 3);
        assert_eq!(dense_param_count(64, 128, 3).unwrap(), 73_728);
        // g = 150 exceeds C_in·k² = 576 / 4, so this layer is larger than dense.
        assert!(param_count(150, 64, 128, 3).unwrap() > dense_param_count(64, 128, 3).unwrap());
        assert!(param_count(0, 1, 1, 1).is_err());
    }

    #[test]
    fn svd_exact_for_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
        let w = &a * &b;
        let f = svd_construct(&w, 2).unwrap();
        assert!((f.reconstruct() - &w).norm() < 1e-8);
        assert_eq!(f.interaction, GeneInteraction::identity(2));
    }

    #[test]
    fn svd_exact_for_identity() {
        let w = DMatrix::<f64>::identity(3, 3);
        let f = svd_construct(&w, 3).unwrap();
        assert!((f.reconstruct() - &w).norm() < 1e-12);
    }

    #[test]
    fn svd_tail_energy_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        // Independent route: σ² are the eigenvalues of WᵀW.
        let mut eig: Vec<f64> = (w.transpose() * &w)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let tail: f64 = eig[2..].iter().map(|x| x.max(0.0)).sum::<f64>().sqrt();
        let f = svd_construct(&w, 2).unwrap();
        let err = (f.reconstruct() - &w).norm();
        assert!((err - tail).abs() < 1e-8, "err {err} vs tail {tail}");
    }

    #[test]
    fn svd_rejects_too_many_genes() {
        let w = DMatrix::<f64>::zeros(3, 4);
        assert!(matches!(svd_construct(&w, 4), Err(GeeError::InvalidArgument(_))));
    }

    #[test]
    fn genotype_length_checks_and_repair() {
        let g = Genotype::unflatten(&[0.1, 0.2, 1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(g.interaction.get(0, 1), 2.0);
        assert!(matches!(
            Genotype::unflatten(&[0.0; 7], 2),
            Err(GeeError::ShapeMismatch(_))
        ));
        let repaired = Genotype::unflatten(&[-0.3, 0.0, 1.0], 1).unwrap();
        assert_eq!(repaired.beta1, 0.3);
        assert_eq!(repaired.beta2, BETA_FLOOR);
    }

    #[test]
    fn genotype_text_rejects_unknown_fields() {
        let text = r#"{"g": 1, "beta1": 1.0, "beta2": 1.0, "G": [1.0], "extra": 0}"#;
        assert!(Genotype::from_text(text).is_err());
        let text = r#"{"g": 2, "beta1": 1.0, "beta2": 1.0, "G": [1.0]}"#;
        assert!(Genotype::from_text(text).is_err());
    }

    #[test]
    fn genome_param_mut_addresses_flat_layout() {
        let mut genome = Genome {
            encodings: vec![NeuronalEncoding::zeros(2, 1, 2), NeuronalEncoding::zeros(1, 1, 2)],
            interaction: GeneInteraction::zeros(2),
        };
        for i in 0..genome.num_params() {
            *genome.param_mut(i) = i as f64;
        }
        let flat = genome.flat_params();
        assert_eq!(flat, (0..genome.num_params()).map(|i| i as f64).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn materialize_equals_brute_force(
            c_in in 1usize..5, c_out in 1usize..5, k in 1usize..4, g in 1usize..5, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e_in = random_encoding(&mut rng, c_in, k, g);
            let gm = random_interaction(&mut rng, g);
            let e_out = random_encoding(&mut rng, c_out, k, g);
            let w = materialize_weights(&e_in, &gm, &e_out).unwrap();
            let oracle = brute_force_weights(&e_in, &gm, &e_out);
            let diff: f64 = w.data().iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = oracle.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-10 * norm.max(1e-300));
        }

        #[test]
        fn param_count_matches_stored_reals(g in 1usize..20, c_in in 1usize..40, c_out in 1usize..40, k in 1usize..6) {
            let stored = NeuronalEncoding::zeros(c_in, k, g).len()
                + g * g
                + NeuronalEncoding::zeros(c_out, k, g).len();
            prop_assert_eq!(param_count(g, c_in, c_out, k).unwrap(), stored as u64);
        }

        #[test]
        fn sampled_entries_bounded(beta1 in 0.01f64..5.0, beta2 in 0.01f64..2.0, seed in any::<u64>()) {
            let e = NeuronalEncoding::sample(beta1, beta2, 7, 3, 3, seed).unwrap();
            prop_assert!(e.data().iter().all(|x| x.abs() <= beta2));
        }

        #[test]
        fn svd_error_non_increasing_in_g(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
            let errs: Vec<f64> = (1..=4)
                .map(|g| (svd_construct(&w, g).unwrap().reconstruct() - &w).norm())
                .collect();
            for pair in errs.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12);
            }
        }

        #[test]
        fn genotype_round_trips(
            beta1 in 1e-3f64..10.0, beta2 in 1e-3f64..10.0, g in 1usize..5, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Genotype::new(beta1, beta2, random_interaction(&mut rng, g)).unwrap();
            prop_assert_eq!(Genotype::unflatten(&s.flatten(), g).unwrap(), s.clone());
            prop_assert_eq!(Genotype::from_text(&s.to_text()).unwrap(), s);
        }
    }
}
