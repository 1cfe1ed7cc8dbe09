//! Synthetic Gaussian-mixture data, parametric corruptions that simulate
//! distribution shift, and the dataset file formats.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "ACDS" | version u32 = 1 | dims u32 | classes u32 | count u32
//! features f64[count·dims] (row-major) | labels u32[count]
//! ```
//!
//! CSV layout: header `y,x0,...,x{D-1}`, one sample per row, floats in
//! shortest round-trip decimal form.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ShiftError {
    #[error("invalid dataset.{field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("unknown corruption kind `{0}`")]
    UnknownKind(String),
    #[error("severity must be in 1..=5, got {0}")]
    Severity(u8),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("dataset file truncated")]
    Truncated,
    #[error("dataset inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ShiftError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub dims: usize,
    pub n_classes: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// The reference task: 16 dimensions, 5 well-separated classes.
    pub fn reference(seed: u64) -> Self {
        Self {
            n_samples: 4000,
            dims: 16,
            n_classes: 5,
            class_separation: 10.0,
            noise_sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(ShiftError::InvalidSpec { field, reason: reason.into() });
        if self.dims < 1 {
            return bad("dims", "must be at least 1");
        }
        if self.n_classes < 2 {
            return bad("n_classes", "must be at least 2");
        }
        if self.n_samples < 5 {
            return bad("n_samples", "must be at least 5 to fill both splits");
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return bad("class_separation", "must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma", "must be non-negative");
        }
        Ok(())
    }
}

/// Features with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl LabeledBatch {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(ShiftError::Inconsistent(format!(
                "features {:?} vs {} labels",
                x.shape(),
                y.len()
            )));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= classes) {
            return Err(ShiftError::Inconsistent(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> LabeledBatch {
        let d = self.dims();
        let data: Vec<f64> = idx.iter().flat_map(|&i| self.x.row(i).iter().copied()).collect();
        LabeledBatch {
            x: Tensor::new(vec![idx.len(), d], data).expect("non-empty selection"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Class means with pairwise distance `class_separation`: centered one-hot
/// simplex vertices when `dims ≥ n_classes`, otherwise a regular polygon in
/// the first two dimensions (or evenly spaced points on a line when
/// `dims = 1`).
pub fn class_means(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let (c, d, sep) = (spec.n_classes, spec.dims, spec.class_separation);
    (0..c)
        .map(|k| {
            let mut m = vec![0.0; d];
            if d >= c {
                let scale = sep / std::f64::consts::SQRT_2;
                for (j, v) in m.iter_mut().take(c).enumerate() {
                    let onehot = if j == k { 1.0 } else { 0.0 };
                    *v = (onehot - 1.0 / c as f64) * scale;
                }
            } else if d >= 2 {
                let radius = sep / (2.0 * (std::f64::consts::PI / c as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            } else {
                m[0] = (k as f64 - (c - 1) as f64 / 2.0) * sep;
            }
            m
        })
        .collect()
}

/// Draws the mixture and splits it 80/20 into (train, test).
pub fn generate(spec: &DatasetSpec) -> Result<(LabeledBatch, LabeledBatch)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec);
    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(spec.n_samples * spec.dims);
    for &y in &labels {
        for &mu in &means[y] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + spec.noise_sigma * z);
        }
    }
    let all = LabeledBatch::new(
        Tensor::new(vec![spec.n_samples, spec.dims], data).expect("sized above"),
        labels,
        spec.n_classes,
    )?;
    let n_train = spec.n_samples * 4 / 5;
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..spec.n_samples).collect();
    Ok((all.select(&train), all.select(&test)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    AdditiveGaussian,
    MeanShift,
    Scale,
    Contrast,
    Impulse,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        Self::AdditiveGaussian,
        Self::MeanShift,
        Self::Scale,
        Self::Contrast,
        Self::Impulse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::AdditiveGaussian => "additive_gaussian",
            Self::MeanShift => "mean_shift",
            Self::Scale => "scale",
            Self::Contrast => "contrast",
            Self::Impulse => "impulse",
        }
    }

    /// Magnitude at severity `1..=5`; see [`MAGNITUDES`].
    pub fn magnitude(self, severity: u8) -> f64 {
        MAGNITUDES[self as usize][usize::from(severity) - 1]
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = ShiftError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ShiftError::UnknownKind(s.to_string()))
    }
}

/// Severity tables, indexed `[kind][severity − 1]`, in feature units.
///
/// | kind              | meaning                                        |
/// |-------------------|------------------------------------------------|
/// | additive_gaussian | std of added i.i.d. noise                      |
/// | mean_shift        | L2 norm of the fixed offset vector             |
/// | scale             | multiplicative factor on every feature         |
/// | contrast          | factor toward the batch mean (smaller = harder)|
/// | impulse           | fraction of entries replaced by ±IMPULSE_VALUE |
pub const MAGNITUDES: [[f64; 5]; 5] = [
    [1.0, 2.0, 3.0, 4.0, 5.0],
    [2.0, 4.0, 6.0, 8.0, 10.0],
    [1.5, 2.0, 3.0, 4.0, 5.0],
    [0.5, 0.35, 0.25, 0.15, 0.08],
    [0.03, 0.06, 0.09, 0.17, 0.27],
];

/// Value written by impulse corruption (sign chosen at random).
pub const IMPULSE_VALUE: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if (1..=5).contains(&self.severity) {
            Ok(())
        } else {
            Err(ShiftError::Severity(self.severity))
        }
    }
}

/// The offset vector MeanShift adds: a seeded unit direction times the
/// severity magnitude.
pub fn mean_shift_offset(dims: usize, severity: u8, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_616e_7368_6966);
    let dir: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mag = CorruptionKind::MeanShift.magnitude(severity);
    dir.iter().map(|v| v / norm * mag).collect()
}

/// Number of entries impulse corruption overwrites in a batch of `entries`.
pub fn impulse_count(entries: usize, severity: u8) -> usize {
    (CorruptionKind::Impulse.magnitude(severity) * entries as f64).round() as usize
}

pub fn corrupt(batch: &LabeledBatch, spec: &CorruptionSpec) -> Result<LabeledBatch> {
    corrupt_indexed(batch, spec, 0)
}

/// Corrupts one batch of a stream. Structural choices (the MeanShift
/// direction) depend only on `spec.seed`; random draws also mix in
/// `batch_index` so successive batches see fresh noise.
pub fn corrupt_indexed(batch: &LabeledBatch, spec: &CorruptionSpec, batch_index: u64) -> Result<LabeledBatch> {
    spec.validate()?;
    let (n, d) = (batch.len(), batch.dims());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ batch_index);
    let mag = spec.kind.magnitude(spec.severity);
    let mut x = batch.x.clone().into_data();
    match spec.kind {
        CorruptionKind::AdditiveGaussian => {
            for v in &mut x {
                let z: f64 = rng.sample(StandardNormal);
                *v += mag * z;
            }
        }
        CorruptionKind::MeanShift => {
            let offset = mean_shift_offset(d, spec.severity, spec.seed);
            for row in x.chunks_mut(d) {
                for (v, o) in row.iter_mut().zip(&offset) {
                    *v += o;
                }
            }
        }
        CorruptionKind::Scale => x.iter_mut().for_each(|v| *v *= mag),
        CorruptionKind::Contrast => {
            let mut mean = vec![0.0; d];
            for row in x.chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n as f64;
                }
            }
            for row in x.chunks_mut(d) {
                for (v, m) in row.iter_mut().zip(&mean) {
                    *v = m + mag * (*v - m);
                }
            }
        }
        CorruptionKind::Impulse => {
            let count = impulse_count(x.len(), spec.severity);
            for i in index::sample(&mut rng, x.len(), count) {
                x[i] = if rng.random::<bool>() { IMPULSE_VALUE } else { -IMPULSE_VALUE };
            }
        }
    }
    Ok(LabeledBatch {
        x: Tensor::new(vec![n, d], x).expect("shape preserved"),
        y: batch.y.clone(),
        classes: batch.classes,
    })
}

/// `n_batches` batches drawn from `pool` in seeded shuffled order, cycling
/// with a fresh permutation whenever the pool is exhausted. Batch `b` is
/// corrupted with `corrupt_indexed(.., b)` when a corruption is given.
pub fn build_stream(
    pool: &LabeledBatch,
    corruption: Option<&CorruptionSpec>,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<LabeledBatch>> {
    if batch_size == 0 || pool.is_empty() {
        return Err(ShiftError::Inconsistent("stream needs a non-empty pool and batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut stream = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut idx = Vec::with_capacity(batch_size);
        while idx.len() < batch_size {
            if order.is_empty() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            idx.push(order.pop().expect("refilled"));
        }
        let batch = pool.select(&idx);
        stream.push(match corruption {
            Some(spec) => corrupt_indexed(&batch, spec, b as u64)?,
            None => batch,
        });
    }
    Ok(stream)
}

pub const DATASET_MAGIC: &[u8; 4] = b"ACDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode(batch: &LabeledBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + batch.x.len() * 8 + batch.len() * 4);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, batch.dims() as u32, batch.classes as u32, batch.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in batch.x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &batch.y {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<LabeledBatch> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(ShiftError::Format("bad magic, expected ACDS".into()));
    }
    if bytes.len() < 20 {
        return Err(ShiftError::Truncated);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, dims, classes, count) = (word(0), word(1), word(2), word(3));
    if version != DATASET_VERSION as usize {
        return Err(ShiftError::Format(format!("unsupported version {version}")));
    }
    if dims == 0 || count == 0 || classes < 2 {
        return Err(ShiftError::Inconsistent(format!(
            "header dims={dims} classes={classes} count={count}"
        )));
    }
    let feat_bytes = count
        .checked_mul(dims)
        .and_then(|v| v.checked_mul(8))
        .ok_or(ShiftError::Truncated)?;
    let expected = 20 + feat_bytes + count * 4;
    if bytes.len() < expected {
        return Err(ShiftError::Truncated);
    }
    if bytes.len() > expected {
        return Err(ShiftError::Inconsistent(format!(
            "{} trailing bytes after labels",
            bytes.len() - expected
        )));
    }
    let feats = &bytes[20..20 + feat_bytes];
    let data: Vec<f64> = feats
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels: Vec<usize> = bytes[20 + feat_bytes..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    LabeledBatch::new(Tensor::new(vec![count, dims], data).expect("sized"), labels, classes)
}

pub fn save(batch: &LabeledBatch, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(batch))?;
    Ok(())
}

/// Reads the whole file before parsing; nothing is returned on any error.
pub fn load(path: impl AsRef<Path>) -> Result<LabeledBatch> {
    decode(&fs::read(path)?)
}

pub fn write_csv<W: Write>(batch: &LabeledBatch, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["y".to_string()];
    header.extend((0..batch.dims()).map(|j| format!("x{j}")));
    out.write_record(&header)?;
    for i in 0..batch.len() {
        let mut rec = vec![batch.y[i].to_string()];
        rec.extend(batch.x.row(i).iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_csv(batch: &LabeledBatch, path: impl AsRef<Path>) -> Result<()> {
    write_csv(batch, fs::File::create(path)?)
}

pub fn read_csv(text: &str, classes: usize) -> Result<LabeledBatch> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let dims = header.len().saturating_sub(1);
    let well_formed = header.get(0) == Some("y")
        && dims > 0
        && (0..dims).all(|j| header.get(j + 1) == Some(format!("x{j}").as_str()));
    if !well_formed {
        return Err(ShiftError::Format("CSV header must be y,x0,...,x{D-1}".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| ShiftError::Format(format!("row {}: bad {what}", line + 1));
        labels.push(rec[0].parse::<usize>().map_err(|_| parse_err("label"))?);
        for j in 0..dims {
            data.push(rec[j + 1].parse::<f64>().map_err(|_| parse_err("feature"))?);
        }
    }
    if labels.is_empty() {
        return Err(ShiftError::Inconsistent("CSV holds no samples".into()));
    }
    let n = labels.len();
    LabeledBatch::new(Tensor::new(vec![n, dims], data).expect("sized"), labels, classes)
}
