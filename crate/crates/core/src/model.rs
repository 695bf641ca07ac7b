//! Softmax classifiers with analytic gradients.
//!
//! Parameter layout (flat `theta`):
//!
//! * `Mlp { hidden_width: H }` starts with the hidden layer, one block of
//!   `F + 1` values per hidden unit: `[bias, w_0 .. w_{F-1}]`.
//! * The output layer follows, one block of `h + 1` values per class:
//!   `[bias_c, w_c0 .. w_c(h-1)]`, where `h` is the penultimate width (`F`
//!   for logistic regression, `H` for the MLP).
//!
//! The output layer is stored last, so the last-layer gradient is the tail
//! slice of the full gradient and its per-class blocks are contiguous.

use std::fs;
use std::path::Path;

use ndarray::ArrayView1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    LogisticRegression,
    /// One tanh hidden layer.
    Mlp { hidden_width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    arch: Arch,
    n_features: usize,
    class_count: usize,
    theta: Vec<f64>,
}

/// Gradient of one element's loss with respect to the output layer only.
#[derive(Clone, Debug, PartialEq)]
pub struct LastLayerGradient {
    pub values: Vec<f64>,
    pub owner_index: usize,
}

fn param_count(arch: Arch, n_features: usize, class_count: usize) -> usize {
    match arch {
        Arch::LogisticRegression => class_count * (n_features + 1),
        Arch::Mlp { hidden_width } => hidden_width * (n_features + 1) + class_count * (hidden_width + 1),
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

impl ModelState {
    pub fn zeros(arch: Arch, n_features: usize, class_count: usize) -> Result<Self> {
        Self::from_theta(arch, n_features, class_count, vec![0.0; param_count(arch, n_features, class_count)])
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn init(arch: Arch, n_features: usize, class_count: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(arch, n_features, class_count)?;
        let mut rng = stream_rng(seed, Stream::ModelInit);
        let h = m.penultimate_width();
        let hidden_len = m.last_layer_offset();
        for (i, t) in m.theta.iter_mut().enumerate() {
            let fan_in = if i < hidden_len { n_features } else { h };
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            *t = rng.random_range(-bound..bound);
        }
        Ok(m)
    }

    pub fn from_theta(arch: Arch, n_features: usize, class_count: usize, theta: Vec<f64>) -> Result<Self> {
        if n_features == 0 || class_count == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if let Arch::Mlp { hidden_width: 0 } = arch {
            return Err(invalid("hidden_width must be positive"));
        }
        let expected = param_count(arch, n_features, class_count);
        if theta.len() != expected {
            return Err(invalid(format!("theta has {} entries, expected {expected}", theta.len())));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(invalid("theta has non-finite entries"));
        }
        Ok(Self { arch, n_features, class_count, theta })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// Width `h` of the representation feeding the output layer.
    pub fn penultimate_width(&self) -> usize {
        match self.arch {
            Arch::LogisticRegression => self.n_features,
            Arch::Mlp { hidden_width } => hidden_width,
        }
    }

    /// Length of one class block of the last-layer gradient, `h + 1`.
    pub fn class_block_dim(&self) -> usize {
        self.penultimate_width() + 1
    }

    /// Length of the full last-layer gradient, `C * (h + 1)`.
    pub fn last_layer_dim(&self) -> usize {
        self.class_count * self.class_block_dim()
    }

    pub fn last_layer_offset(&self) -> usize {
        self.theta.len() - self.last_layer_dim()
    }

    pub fn check_compatible(&self, d: &Dataset) -> Result<()> {
        if d.n_features() != self.n_features || d.class_count() != self.class_count {
            return Err(invalid(format!(
                "model expects {} features / {} classes, dataset has {} / {}",
                self.n_features,
                self.class_count,
                d.n_features(),
                d.class_count()
            )));
        }
        Ok(())
    }

    /// Input to the output layer: the hidden activations, or `x` itself for
    /// logistic regression.
    pub fn penultimate(&self, x: ArrayView1<f64>) -> Vec<f64> {
        match self.arch {
            Arch::LogisticRegression => x.to_vec(),
            Arch::Mlp { hidden_width } => {
                let stride = self.n_features + 1;
                (0..hidden_width)
                    .map(|j| {
                        let block = &self.theta[j * stride..(j + 1) * stride];
                        let a = block[0] + block[1..].iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>();
                        a.tanh()
                    })
                    .collect()
            }
        }
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let stride = h.len() + 1;
        let out = &self.theta[self.last_layer_offset()..];
        (0..self.class_count)
            .map(|c| {
                let block = &out[c * stride..(c + 1) * stride];
                block[0] + block[1..].iter().zip(h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn sample_loss(&self, x: ArrayView1<f64>, label: usize) -> f64 {
        cross_entropy(&self.logits(&self.penultimate(x)), label)
    }

    pub fn probabilities(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let mut z = self.logits(&self.penultimate(x));
        softmax_in_place(&mut z);
        z
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> usize {
        let z = self.logits(&self.penultimate(x));
        let mut best = 0;
        for (c, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, d: &Dataset) -> f64 {
        if d.is_empty() {
            return 0.0;
        }
        let correct = (0..d.n_samples()).filter(|&i| self.predict(d.row(i)) == d.label(i)).count();
        correct as f64 / d.n_samples() as f64
    }

    pub fn mean_loss(&self, d: &Dataset) -> f64 {
        if d.is_empty() {
            return 0.0;
        }
        (0..d.n_samples()).map(|i| self.sample_loss(d.row(i), d.label(i))).sum::<f64>() / d.n_samples() as f64
    }

    /// Cross-entropy over `indices`. The aggregate is the weighted mean with
    /// weights renormalised to sum to one (uniform when `weights` is `None`).
    pub fn forward_loss(&self, d: &Dataset, indices: &[usize], weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        if indices.is_empty() {
            return Err(invalid("forward_loss needs at least one index"));
        }
        let norm = normalized_weights(indices.len(), weights)?;
        let per_sample: Vec<f64> = indices.iter().map(|&i| self.sample_loss(d.row(i), d.label(i))).collect();
        let loss = per_sample.iter().zip(&norm).map(|(l, w)| l * w).sum();
        Ok((loss, per_sample))
    }

    /// Writes `(p - y) ⊗ (1, h)` for one sample into `out` (length
    /// `C * (h + 1)`); returns the hidden activations, probabilities and loss.
    fn last_layer_grad_into(&self, x: ArrayView1<f64>, label: usize, out: &mut [f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let h = self.penultimate(x);
        let mut p = self.logits(&h);
        let loss = cross_entropy(&p, label);
        softmax_in_place(&mut p);
        let stride = h.len() + 1;
        for c in 0..self.class_count {
            let delta = p[c] - if c == label { 1.0 } else { 0.0 };
            let block = &mut out[c * stride..(c + 1) * stride];
            block[0] = delta;
            for (b, hv) in block[1..].iter_mut().zip(&h) {
                *b = delta * hv;
            }
        }
        (h, p, loss)
    }

    pub fn per_sample_last_layer_grad(&self, d: &Dataset, i: usize) -> LastLayerGradient {
        let mut values = vec![0.0; self.last_layer_dim()];
        self.last_layer_grad_into(d.row(i), d.label(i), &mut values);
        LastLayerGradient { values, owner_index: i }
    }

    /// Last-layer gradient restricted to the block of `class`, length `h + 1`.
    pub fn class_block_grad(&self, x: ArrayView1<f64>, label: usize, class: usize) -> Vec<f64> {
        let mut full = vec![0.0; self.last_layer_dim()];
        self.last_layer_grad_into(x, label, &mut full);
        let stride = self.class_block_dim();
        full[class * stride..(class + 1) * stride].to_vec()
    }

    pub fn last_layer_grad_of(&self, x: ArrayView1<f64>, label: usize) -> Vec<f64> {
        let mut values = vec![0.0; self.last_layer_dim()];
        self.last_layer_grad_into(x, label, &mut values);
        values
    }

    /// Adds `scale * ∇θ loss(x, label)` into `grad`; returns the loss.
    pub fn accumulate_full_grad(&self, x: ArrayView1<f64>, label: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let offset = self.last_layer_offset();
        let mut last = vec![0.0; self.last_layer_dim()];
        let (h, p, loss) = self.last_layer_grad_into(x, label, &mut last);
        for (g, v) in grad[offset..].iter_mut().zip(&last) {
            *g += scale * v;
        }
        if let Arch::Mlp { hidden_width } = self.arch {
            let out = &self.theta[offset..];
            let out_stride = hidden_width + 1;
            let in_stride = self.n_features + 1;
            for j in 0..hidden_width {
                let back: f64 = (0..self.class_count)
                    .map(|c| (p[c] - if c == label { 1.0 } else { 0.0 }) * out[c * out_stride + 1 + j])
                    .sum();
                let delta = scale * back * (1.0 - h[j] * h[j]);
                let block = &mut grad[j * in_stride..(j + 1) * in_stride];
                block[0] += delta;
                for (g, xv) in block[1..].iter_mut().zip(x.iter()) {
                    *g += delta * xv;
                }
            }
        }
        loss
    }

    pub fn sample_full_grad(&self, d: &Dataset, i: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.param_count()];
        self.accumulate_full_grad(d.row(i), d.label(i), 1.0, &mut g);
        g
    }

    /// Gradient of the renormalised weighted mean loss over `indices`.
    pub fn batch_gradient(&self, d: &Dataset, indices: &[usize], weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        let norm = normalized_weights(indices.len(), weights)?;
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for (&i, &w) in indices.iter().zip(&norm) {
            if w == 0.0 {
                continue;
            }
            loss += w * self.accumulate_full_grad(d.row(i), d.label(i), w, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.to_string(), version: CHECKPOINT_VERSION, model: self.clone() };
        fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::CorruptRecord(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        let m = ck.model;
        Self::from_theta(m.arch, m.n_features, m.class_count, m.theta)
    }
}

const CHECKPOINT_FORMAT: &str = "gradmatch-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: a JSON object with a format tag and version, the
/// architecture header, and `theta` as a JSON number array.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: ModelState,
}

fn normalized_weights(len: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / len as f64; len]),
        Some(w) => {
            if w.len() != len {
                return Err(invalid(format!("{} weights for {len} indices", w.len())));
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(invalid("weights must be finite and nonnegative"));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(invalid("weights sum to zero"));
            }
            Ok(w.iter().map(|v| v / total).collect())
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v ← μ v + (g + wd θ)`, `θ ← θ − lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(param_count: usize) -> Self {
        Self::with_params(param_count, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
    }

    pub fn with_params(param_count: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: vec![0.0; param_count] }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut ModelState, grad: &[f64], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(invalid(format!("learning rate {lr} must be positive")));
        }
        if grad.len() != model.param_count() || self.velocity.len() != grad.len() {
            return Err(invalid("gradient length does not match parameters"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        for ((t, v), g) in model.theta.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *t;
            *t -= lr * *v;
        }
        Ok(())
    }
}
