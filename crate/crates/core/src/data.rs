//! Datasets, file loaders, and input coding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};
use crate::snn::InputSequence;

/// Row-major samples with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    features: usize,
    num_classes: usize,
    x: Vec<f64>,
    y: Vec<usize>,
}

impl Samples {
    pub fn new(features: usize, num_classes: usize, x: Vec<f64>, y: Vec<usize>) -> Result<Self> {
        if features == 0 || num_classes == 0 {
            return Err(GeeError::invalid("features and num_classes must be >= 1"));
        }
        if x.len() != y.len() * features {
            return Err(GeeError::shape(format!(
                "{} values cannot form {} samples of {features} features",
                x.len(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
            return Err(GeeError::Range(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            features,
            num_classes,
            x,
            y,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    /// Copies the listed samples, in the listed order, into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.features);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.sample(i));
            y.push(self.y[i]);
        }
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        let (x, y) = self.gather(indices);
        Samples {
            features: self.features,
            num_classes: self.num_classes,
            x,
            y,
        }
    }

    pub fn with_values(&self, x: Vec<f64>) -> Result<Samples> {
        Samples::new(self.features, self.num_classes, x, self.y.clone())
    }

    /// Splits indices per class by the given fractions after a seeded shuffle.
    /// The final part takes whatever each class has left.
    pub fn stratified_indices(&self, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.y.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parts = vec![Vec::new(); fractions.len() + 1];
        for idx in by_class.values_mut() {
            idx.shuffle(&mut rng);
            let n = idx.len();
            let mut start = 0;
            for (p, f) in fractions.iter().enumerate() {
                let take = ((n as f64) * f).round() as usize;
                let end = (start + take).min(n);
                parts[p].extend_from_slice(&idx[start..end]);
                start = end;
            }
            parts[fractions.len()].extend_from_slice(&idx[start..]);
        }
        for p in &mut parts {
            p.sort_unstable();
        }
        parts
    }

    /// Stratified fit/held-out division used inside fitness evaluation.
    pub fn holdout(&self, held_out: f64, seed: u64) -> (Samples, Samples) {
        let parts = self.stratified_indices(&[1.0 - held_out], seed);
        (self.subset(&parts[0]), self.subset(&parts[1]))
    }
}

/// Train, validation, and test splits of one labelled collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub validation: Samples,
    pub test: Samples,
    /// Original sample indices of each split.
    pub split_indices: [Vec<usize>; 3],
}

pub const SPLIT_FRACTIONS: [f64; 2] = [0.8, 0.1];

impl Dataset {
    /// Stratified 80/10/10 split.
    pub fn split(all: &Samples, seed: u64) -> Self {
        let parts = all.stratified_indices(&SPLIT_FRACTIONS, seed);
        Self {
            train: all.subset(&parts[0]),
            validation: all.subset(&parts[1]),
            test: all.subset(&parts[2]),
            split_indices: [parts[0].clone(), parts[1].clone(), parts[2].clone()],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }

    pub fn features(&self) -> usize {
        self.train.features()
    }
}

/// Per-feature min-max scaling to [0, 1]; constant features map to 0.
pub fn normalize_unit(x: &mut [f64], features: usize) {
    if x.is_empty() {
        return;
    }
    for f in 0..features {
        let col = x.iter().skip(f).step_by(features);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in x.iter_mut().skip(f).step_by(features) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}

/// Gaussian clusters with unit spread around class means of norm `separation`.
///
/// With `n_classes <= dim` the means sit on the coordinate axes; otherwise
/// they point in seeded random directions. Features are min-max normalized
/// over the whole collection before the stratified 80/10/10 split.
pub fn make_blobs(n_classes: usize, n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || n_per_class == 0 || dim == 0 {
        return Err(GeeError::invalid("make_blobs needs n_classes, n_per_class, dim >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            if n_classes <= dim {
                let mut m = vec![0.0; dim];
                m[c] = separation;
                m
            } else {
                let d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                d.iter().map(|v| v / norm * separation).collect()
            }
        })
        .collect();
    let mut x = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut y = Vec::with_capacity(n_classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for m in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                x.push(m + noise);
            }
            y.push(c);
        }
    }
    normalize_unit(&mut x, dim);
    let all = Samples::new(dim, n_classes, x, y)?;
    Ok(Dataset::split(&all, crate::derive_seed(seed, 1)))
}

/// Element type of an IDX file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I8 => 0x09,
            IdxType::I16 => 0x0B,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// An n-dimensional array read from or written to an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub kind: IdxType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn parse_idx(bytes: &[u8], origin: &str) -> Result<IdxArray> {
    let err = |offset: usize, msg: String| GeeError::parse(origin, format!("byte {offset}: {msg}"));
    if bytes.len() < 4 {
        return Err(err(0, format!("file is {} bytes, shorter than the 4-byte magic", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("magic must start with two zero bytes, found {:#04x} {:#04x}", bytes[0], bytes[1])));
    }
    let kind = IdxType::from_code(bytes[2]).ok_or_else(|| err(2, format!("unknown element type {:#04x}", bytes[2])))?;
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(err(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("truncated header: need {header} bytes for {rank} dimensions")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(4, "dimension product overflows".into()))?;
    let width = kind.width();
    let expected = count
        .checked_mul(width)
        .and_then(|b| b.checked_add(header))
        .ok_or_else(|| err(4, "dimension product overflows".into()))?;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("expected {expected} bytes for dims {dims:?}, file has {}", bytes.len()),
        ));
    }
    let body = &bytes[header..];
    let data = body
        .chunks_exact(width)
        .map(|c| match kind {
            IdxType::U8 => c[0] as f64,
            IdxType::I8 => c[0] as i8 as f64,
            IdxType::I16 => i16::from_be_bytes([c[0], c[1]]) as f64,
            IdxType::I32 => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            IdxType::F32 => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            IdxType::F64 => f64::from_be_bytes(c.try_into().expect("8-byte chunk")),
        })
        .collect();
    Ok(IdxArray { kind, dims, data })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| GeeError::io(path, e))?;
    parse_idx(&bytes, &path.display().to_string())
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    let count: usize = array.dims.iter().product();
    if count != array.data.len() || array.dims.is_empty() || array.dims.len() > 255 {
        return Err(GeeError::shape(format!(
            "{} values do not fill dims {:?}",
            array.data.len(),
            array.dims
        )));
    }
    let mut out = vec![0, 0, array.kind.code(), array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| GeeError::Range(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    for &v in &array.data {
        match array.kind {
            IdxType::U8 => out.push(v as u8),
            IdxType::I8 => out.push(v as i8 as u8),
            IdxType::I16 => out.extend_from_slice(&(v as i16).to_be_bytes()),
            IdxType::I32 => out.extend_from_slice(&(v as i32).to_be_bytes()),
            IdxType::F32 => out.extend_from_slice(&(v as f32).to_be_bytes()),
            IdxType::F64 => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    Ok(out)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    let bytes = encode_idx(array)?;
    fs::write(path, bytes).map_err(|e| GeeError::io(path, e))
}

/// Loads an image file and a label file in IDX format.
///
/// Unsigned-byte pixels are divided by 255; other element types are
/// min-max normalized per feature.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Samples> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(GeeError::parse(
            labels.display().to_string(),
            format!("label dims {:?} do not match {} images", lab.dims, img.dims[0]),
        ));
    }
    let n = img.dims[0];
    let features: usize = img.dims[1..].iter().product::<usize>().max(1);
    let mut x = img.data;
    if img.kind == IdxType::U8 {
        x.iter_mut().for_each(|v| *v /= 255.0);
    } else {
        normalize_unit(&mut x, features);
    }
    let mut y = Vec::with_capacity(n);
    for (i, &v) in lab.data.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(GeeError::parse(
                labels.display().to_string(),
                format!("label {i} is {v}, not a class index"),
            ));
        }
        y.push(v as usize);
    }
    let classes = y.iter().max().map_or(1, |m| m + 1);
    Samples::new(features, classes, x, y)
}

/// Loads a headered CSV whose `label` column holds class indices and whose
/// other columns are features. Features already inside [0, 1] are kept;
/// otherwise every feature is min-max normalized.
pub fn load_csv(path: &Path) -> Result<Samples> {
    let origin = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| GeeError::parse(&origin, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| GeeError::parse(&origin, format!("line 1: {e}")))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| GeeError::parse(&origin, "line 1: no column named `label`"))?;
    let width = headers.len();
    let features = width - 1;
    if features == 0 {
        return Err(GeeError::parse(&origin, "line 1: no feature columns"));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| GeeError::parse(&origin, format!("line {line}: {e}")))?;
        if rec.len() != width {
            return Err(GeeError::parse(
                &origin,
                format!("line {line}: {} fields, header has {width}", rec.len()),
            ));
        }
        for (c, field) in rec.iter().enumerate() {
            let field = field.trim();
            if c == label_col {
                let l: usize = field
                    .parse()
                    .map_err(|_| GeeError::parse(&origin, format!("line {line}: label `{field}` is not a class index")))?;
                y.push(l);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| GeeError::parse(&origin, format!("line {line}: `{field}` is not a number")))?;
                if !v.is_finite() {
                    return Err(GeeError::parse(&origin, format!("line {line}: non-finite value")));
                }
                x.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(GeeError::parse(&origin, "no data rows"));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        normalize_unit(&mut x, features);
    }
    let classes = y.iter().max().map_or(1, |m| m + 1);
    Samples::new(features, classes, x, y)
}

/// Writes samples as a headered CSV (`f0,…,label`).
pub fn write_csv(path: &Path, samples: &Samples) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| GeeError::io(path, std::io::Error::other(e)))?;
    let mut header: Vec<String> = (0..samples.features()).map(|f| format!("f{f}")).collect();
    header.push("label".into());
    let io = |e: csv::Error| GeeError::io(path, std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for i in 0..samples.len() {
        let mut rec: Vec<String> = samples.sample(i).iter().map(|v| crate::textfmt::real_text(*v)).collect();
        rec.push(samples.labels()[i].to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| GeeError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputCoding {
    /// The sample value is injected as current at every step.
    #[default]
    Constant,
    /// Each value fires a Bernoulli spike with probability equal to the value.
    Poisson,
}

/// Turns a `batch × features` block into a `T`-step input sequence.
pub fn encode_spikes(samples: &[f64], batch: usize, time_steps: usize, coding: InputCoding, seed: u64) -> Result<InputSequence> {
    match coding {
        InputCoding::Constant => InputSequence::constant(samples, batch, time_steps),
        InputCoding::Poisson => {
            if let Some(v) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(GeeError::Range(format!("poisson coding needs values in [0, 1], found {v}")));
            }
            if batch == 0 || !samples.len().is_multiple_of(batch) {
                return Err(GeeError::shape("sample block does not divide into the batch"));
            }
            if time_steps == 0 {
                return Err(GeeError::invalid("time_steps must be >= 1"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let steps = (0..time_steps)
                .map(|_| {
                    samples
                        .iter()
                        .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect();
            InputSequence::new(batch, samples.len() / batch, steps)
        }
    }
}

/// Adds per-sample Gaussian noise whose L2 norm is `relative_l2` times the
/// sample's own L2 norm.
pub fn add_gaussian_noise(samples: &[f64], features: usize, relative_l2: f64, seed: u64) -> Result<Vec<f64>> {
    if !(relative_l2 >= 0.0 && relative_l2.is_finite()) {
        return Err(GeeError::invalid("relative_l2 must be a finite value >= 0"));
    }
    if features == 0 || !samples.len().is_multiple_of(features) {
        return Err(GeeError::shape("samples do not divide into rows of the given width"));
    }
    if relative_l2 == 0.0 {
        return Ok(samples.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len());
    for row in samples.chunks(features) {
        let noise: Vec<f64> = (0..features).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n_norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if n_norm > 0.0 { relative_l2 * x_norm / n_norm } else { 0.0 };
        out.extend(row.iter().zip(&noise).map(|(v, n)| v + scale * n));
    }
    Ok(out)
}
