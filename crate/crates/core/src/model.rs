//! Differentiable classifiers with analytic loss and gradient.
//!
//! Two workloads are supported: multinomial logistic regression (convex) and a
//! one-hidden-layer tanh perceptron (non-convex). Parameters live in a flat
//! [`ParamVector`]; [`ModelSpec::layout`] describes where each weight block sits.
//! Losses are the mean cross-entropy over a batch.

use std::ops::{Deref, DerefMut};

use byteorder::{ByteOrder, LittleEndian};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("malformed parameter encoding: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Flat parameter vector `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        for (s, v) in self.0.iter_mut().zip(x) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.0 {
            *v *= alpha;
        }
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &[f64]) -> ParamVector {
        ParamVector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Length-prefixed little-endian encoding: `u64 len` then `len` f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; 8 + 8 * self.0.len()];
        LittleEndian::write_u64(&mut out[..8], self.0.len() as u64);
        LittleEndian::write_f64_into(&self.0, &mut out[8..]);
        out
    }

    /// Decode from the front of `bytes`; returns the vector and bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamVector, usize)> {
        if bytes.len() < 8 {
            return Err(ModelError::Decode("missing length prefix".into()));
        }
        let len = LittleEndian::read_u64(&bytes[..8]);
        let body = len
            .checked_mul(8)
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| ModelError::Decode(format!("length {len} overflows")))?;
        if bytes.len() - 8 < body {
            return Err(ModelError::Decode(format!(
                "truncated: need {body} bytes for {len} values, have {}",
                bytes.len() - 8
            )));
        }
        let mut values = vec![0.0; len as usize];
        LittleEndian::read_f64_into(&bytes[8..8 + body], &mut values);
        Ok((ParamVector(values), 8 + body))
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Rows of one shard, selected by index.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    features: &'a [f64],
    labels: &'a [u32],
    cols: usize,
    rows: &'a [u32],
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [u32], cols: usize, rows: &'a [u32]) -> Result<Self> {
        if rows.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if features.len() != labels.len() * cols {
            return Err(ModelError::DimensionMismatch {
                what: "feature matrix",
                expected: labels.len() * cols,
                got: features.len(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r as usize >= labels.len()) {
            return Err(ModelError::DimensionMismatch {
                what: "row index",
                expected: labels.len(),
                got: bad as usize,
            });
        }
        Ok(Batch {
            features,
            labels,
            cols,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> &'a [u32] {
        self.rows
    }

    /// Same shard, different row subset.
    pub fn with_rows(&self, rows: &'a [u32]) -> Result<Self> {
        Batch::new(self.features, self.labels, self.cols, rows)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [f64], u32)> + '_ {
        let (features, labels, cols) = (self.features, self.labels, self.cols);
        self.rows.iter().map(move |&r| {
            let r = r as usize;
            (&features[r * cols..(r + 1) * cols], labels[r])
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp { hidden_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

/// Named block inside a [`ParamVector`]; `rows x cols` row-major at `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

pub const DEFAULT_HIDDEN_DIM: usize = 32;

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, num_classes: usize, hidden_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp { hidden_dim },
            input_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(ModelError::InvalidSpec(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        if let ModelKind::Mlp { hidden_dim: 0 } = self.kind {
            return Err(ModelError::InvalidSpec("hidden_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn is_convex(&self) -> bool {
        matches!(self.kind, ModelKind::Logistic)
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::Logistic => vec![
                ParamBlock { name: "W", offset: 0, rows: c, cols: d },
                ParamBlock { name: "b", offset: c * d, rows: c, cols: 1 },
            ],
            ModelKind::Mlp { hidden_dim: h } => vec![
                ParamBlock { name: "W1", offset: 0, rows: h, cols: d },
                ParamBlock { name: "b1", offset: h * d, rows: h, cols: 1 },
                ParamBlock { name: "W2", offset: h * d + h, rows: c, cols: h },
                ParamBlock { name: "b2", offset: h * d + h + c * h, rows: c, cols: 1 },
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|b| b.rows * b.cols).sum()
    }

    /// Starting point `w⁰`: zeros for logistic regression; for the perceptron
    /// weights are N(0, 1/fan_in) and biases zero (zero weights are a saddle).
    pub fn initial_params(&self, seed: u64) -> ParamVector {
        let mut w = ParamVector::zeros(self.num_params());
        if let ModelKind::Mlp { hidden_dim } = self.kind {
            let mut rng = rand_chacha::ChaCha8Rng::from_seed(rng::stream_key(
                seed,
                Purpose::ModelInit,
                0,
                0,
            ));
            let d = self.input_dim;
            let n1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
            for v in &mut w[..hidden_dim * d] {
                *v = n1.sample(&mut rng);
            }
            let off = hidden_dim * d + hidden_dim;
            let n2 = Normal::new(0.0, (1.0 / hidden_dim as f64).sqrt()).expect("valid std");
            for v in &mut w[off..off + self.num_classes * hidden_dim] {
                *v = n2.sample(&mut rng);
            }
        }
        w
    }

    /// Parameter vector has this model's length.
    pub fn check_params(&self, w: &[f64]) -> Result<()> {
        self.validate()?;
        if w.len() != self.num_params() {
            return Err(ModelError::DimensionMismatch {
                what: "parameters",
                expected: self.num_params(),
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check(&self, w: &[f64], batch: &Batch<'_>) -> Result<()> {
        self.check_params(w)?;
        if batch.cols() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                what: "input features",
                expected: self.input_dim,
                got: batch.cols(),
            });
        }
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if let Some((_, y)) = batch.iter().find(|&(_, y)| y as usize >= self.num_classes) {
            return Err(ModelError::LabelOutOfRange {
                label: y,
                num_classes: self.num_classes,
            });
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("parameters"));
        }
        Ok(())
    }

    /// Logits for one input row. `hidden` receives the tanh activations (MLP).
    fn forward(&self, w: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::Logistic => {
                let bias = &w[c * d..];
                for k in 0..c {
                    logits[k] = bias[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::Mlp { hidden_dim: h } => {
                let b1 = &w[h * d..h * d + h];
                for i in 0..h {
                    hidden[i] = (b1[i] + dot(&w[i * d..(i + 1) * d], x)).tanh();
                }
                let w2 = &w[h * d + h..h * d + h + c * h];
                let b2 = &w[h * d + h + c * h..];
                for k in 0..c {
                    logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
                }
            }
        }
    }

    fn hidden_len(&self) -> usize {
        match self.kind {
            ModelKind::Logistic => 0,
            ModelKind::Mlp { hidden_dim } => hidden_dim,
        }
    }

    /// Mean cross-entropy and (optionally) its gradient in one pass.
    pub fn loss_and_gradient(
        &self,
        w: &[f64],
        batch: &Batch<'_>,
        want_gradient: bool,
    ) -> Result<(f64, Option<ParamVector>)> {
        self.check(w, batch)?;
        let (d, c) = (self.input_dim, self.num_classes);
        let h = self.hidden_len();
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; c];
        let mut dhidden = vec![0.0; h];
        let mut grad = want_gradient.then(|| ParamVector::zeros(w.len()));
        let mut total = 0.0;

        for (x, y) in batch.iter() {
            self.forward(w, x, &mut hidden, &mut logits);
            let y = y as usize;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted_y = logits[y] - max;
            let mut sum = 0.0;
            for z in logits.iter_mut() {
                *z = (*z - max).exp();
                sum += *z;
            }
            total += sum.ln() - shifted_y;
            let Some(g) = grad.as_mut() else { continue };
            // dz = softmax - onehot, written back into `logits`
            for z in logits.iter_mut() {
                *z /= sum;
            }
            logits[y] -= 1.0;
            match self.kind {
                ModelKind::Logistic => {
                    for k in 0..c {
                        let dz = logits[k];
                        let row = &mut g[k * d..(k + 1) * d];
                        for (gj, xj) in row.iter_mut().zip(x) {
                            *gj += dz * xj;
                        }
                        g[c * d + k] += dz;
                    }
                }
                ModelKind::Mlp { .. } => {
                    let w2_off = h * d + h;
                    let b2_off = w2_off + c * h;
                    dhidden.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        let dz = logits[k];
                        for i in 0..h {
                            g[w2_off + k * h + i] += dz * hidden[i];
                            dhidden[i] += w[w2_off + k * h + i] * dz;
                        }
                        g[b2_off + k] += dz;
                    }
                    for i in 0..h {
                        let da = dhidden[i] * (1.0 - hidden[i] * hidden[i]);
                        let row = &mut g[i * d..(i + 1) * d];
                        for (gj, xj) in row.iter_mut().zip(x) {
                            *gj += da * xj;
                        }
                        g[h * d + i] += da;
                    }
                }
            }
        }

        let n = batch.len() as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        if let Some(g) = grad.as_mut() {
            g.scale(1.0 / n);
            if !g.is_finite() {
                return Err(ModelError::NonFinite("gradient"));
            }
        }
        Ok((loss, grad))
    }

    /// Predicted class for one row; ties go to the lowest index.
    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut logits = vec![0.0; self.num_classes];
        self.forward(w, x, &mut hidden, &mut logits);
        argmax(&logits)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shift-stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn local_loss(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>) -> Result<f64> {
    spec.loss_and_gradient(w, batch, false).map(|(l, _)| l)
}

pub fn local_gradient(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>) -> Result<ParamVector> {
    spec.loss_and_gradient(w, batch, true)
        .map(|(_, g)| g.expect("gradient requested"))
}

pub fn accuracy(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>) -> Result<f64> {
    spec.check(w, batch)?;
    let correct = batch
        .iter()
        .filter(|&(x, y)| spec.predict(w, x) == y as usize)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Central differences of an arbitrary scalar function.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Coordinate-wise central-difference gradient of [`local_loss`]. Test oracle.
pub fn finite_difference_gradient(
    spec: &ModelSpec,
    w: &[f64],
    batch: &Batch<'_>,
    h: f64,
) -> Result<ParamVector> {
    spec.check(w, batch)?;
    let g = central_difference(
        |p| local_loss(spec, p, batch).unwrap_or(f64::NAN),
        w,
        h,
    );
    let g = ParamVector::from_vec(g);
    if !g.is_finite() {
        return Err(ModelError::NonFinite("finite-difference gradient"));
    }
    Ok(g)
}
