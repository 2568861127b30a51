//! Dual-encoder classifier with hand-written reverse-mode gradients.
//!
//! The image side is `flatten -> dense(hidden) -> relu -> dense(embed) -> l2
//! normalize`; the label side is one learnable embedding per class. Logits are
//! temperature-scaled cosine similarities. Parameters are stored as `f32`;
//! every forward and backward pass accumulates in `f64`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::data::{ImageShape, LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::seed;

/// Norms below this are treated as zero (the normalized vector is then zero).
const NORM_FLOOR: f64 = 1e-12;

pub const DLR_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input: ImageShape,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        self.input.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() || self.hidden_dim == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return Err(Error::config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Total trainable parameter count, excluding the temperature.
    pub fn param_count(&self) -> usize {
        let Layout { total, .. } = self.layout();
        total
    }

    fn layout(&self) -> Layout {
        let (d, h, e, k) = (self.input_dim(), self.hidden_dim, self.embed_dim, self.num_classes);
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + e * h;
        let cls = b2 + e;
        Layout {
            w1,
            b1,
            w2,
            b2,
            cls,
            total: cls + k * e,
        }
    }
}

/// Offsets of each tensor in the flat parameter vector.
/// Order: `w1 (hidden x input) | b1 | w2 (embed x hidden) | b2 | class embeddings (K x embed)`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    cls: usize,
    total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Dlr,
}

/// Anything the attacks can differentiate through.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn input_dim(&self) -> usize;

    fn logits(&self, x: &[f32]) -> Result<Vec<f64>>;

    /// Forward pass, then one vector-Jacobian product per cotangent returned by
    /// `cotangents(logits)`. Returns the logits and `d(sum_k c_k z_k)/dx` for
    /// each cotangent `c`.
    fn forward_vjp(&self, x: &[f32], cotangents: &mut CotangentFn) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;

    fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

/// Maps logits to the cotangent vectors to pull back through the network.
pub type CotangentFn<'a> = dyn FnMut(&[f64]) -> Result<Vec<Vec<f64>>> + 'a;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return Err(Error::Index { label, classes: k });
    }
    Ok(())
}

/// `-log softmax(logits)[label]` with max subtraction.
pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Difference-of-logits-ratio objective, signed so that larger is more
/// adversarial: `-(z_y - max_{i != y} z_i) / (z_(1) - z_(3) + 1e-12)`.
pub fn loss_dlr(logits: &[f64], label: usize) -> Result<f64> {
    Ok(dlr_parts(logits, label)?.0)
}

fn dlr_parts(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let k = logits.len();
    if k < 3 {
        return Err(Error::config(format!("DLR loss needs at least 3 classes, got {k}")));
    }
    check_label(label, k)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let (p1, p3) = (order[0], order[2]);
    let other = order.iter().copied().find(|&i| i != label).unwrap();
    let num = logits[label] - logits[other];
    let den = logits[p1] - logits[p3] + DLR_GUARD;
    let loss = -num / den;
    let mut dz = vec![0.0; k];
    dz[label] -= 1.0 / den;
    dz[other] += 1.0 / den;
    dz[p1] += num / (den * den);
    dz[p3] -= num / (den * den);
    Ok((loss, dz))
}

/// Loss value and its gradient with respect to the logits.
pub fn loss_and_logit_grad(kind: LossKind, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::Ce => {
            let loss = loss_ce(logits, label)?;
            let mut dz = softmax(logits);
            dz[label] -= 1.0;
            Ok((loss, dz))
        }
        LossKind::Dlr => dlr_parts(logits, label),
    }
}

/// Loss and its exact input gradient for any [`Classifier`].
pub fn loss_and_input_grad<C: Classifier + ?Sized>(
    model: &C,
    x: &[f32],
    label: usize,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    check_label(label, model.num_classes())?;
    let mut loss = 0.0;
    let (_, mut grads) = model.forward_vjp(x, &mut |z| {
        let (l, dz) = loss_and_logit_grad(kind, z, label)?;
        loss = l;
        Ok(vec![dz])
    })?;
    Ok((loss, grads.pop().unwrap()))
}

pub fn grad_input<C: Classifier + ?Sized>(model: &C, x: &[f32], label: usize, kind: LossKind) -> Result<Vec<f64>> {
    Ok(loss_and_input_grad(model, x, label, kind)?.1)
}

/// Logits and the input gradient of every logit (rows of the Jacobian).
pub fn logit_jacobian<C: Classifier + ?Sized>(model: &C, x: &[f32]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let k = model.num_classes();
    model.forward_vjp(x, &mut |_| {
        Ok((0..k)
            .map(|i| {
                let mut e = vec![0.0; k];
                e[i] = 1.0;
                e
            })
            .collect())
    })
}

/// `logits = W x + b`, used as a reference model with closed-form attack
/// optima.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// Row-major `K x d`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
}

impl LinearClassifier {
    pub fn new(weights: Vec<f64>, bias: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || bias.is_empty() || weights.len() != bias.len() * dim {
            return Err(Error::Shape {
                expected: bias.len() * dim,
                got: weights.len(),
            });
        }
        Ok(LinearClassifier { weights, bias, dim })
    }

    /// Two-class model whose class-1 margin is `w . x + b`.
    pub fn binary(w: Vec<f64>, b: f64) -> Self {
        let dim = w.len();
        let mut weights = vec![0.0; dim];
        weights.extend(w);
        LinearClassifier {
            weights,
            bias: vec![0.0, b],
            dim,
        }
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }
}

impl Classifier for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn logits(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok((0..self.bias.len())
            .map(|k| self.bias[k] + self.row(k).iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>())
            .collect())
    }

    fn forward_vjp(&self, x: &[f32], cotangents: &mut CotangentFn) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let z = self.logits(x)?;
        let grads = cotangents(&z)?
            .iter()
            .map(|c| {
                let mut g = vec![0.0; self.dim];
                for (k, &ck) in c.iter().enumerate() {
                    if ck != 0.0 {
                        for (gi, w) in g.iter_mut().zip(self.row(k)) {
                            *gi += ck * w;
                        }
                    }
                }
                g
            })
            .collect();
        Ok((z, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel {
    pub arch: Arch,
    pub normalization: Normalization,
    pub class_names: Vec<String>,
    /// Flat parameters; see [`Arch::param_count`] for the layout.
    pub params: Vec<f32>,
    pub temperature: f32,
    pub train_temperature: bool,
    pub seed: u64,
}

/// Intermediate values kept for the backward pass.
struct Tape {
    u: Vec<f64>,
    a: Vec<f64>,
    h: Vec<f64>,
    e_hat: Vec<f64>,
    e_norm: f64,
    c_hat: Vec<f64>,
    c_norm: Vec<f64>,
    cos: Vec<f64>,
    logits: Vec<f64>,
}

/// Parameter gradients in `f64`, laid out like [`DualEncoderModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub params: Vec<f64>,
    pub temperature: f64,
}

impl DualEncoderModel {
    pub const INIT_TEMPERATURE: f32 = 10.0;

    /// Glorot-uniform weights per layer, zero biases, temperature 10.
    pub fn init(arch: Arch, normalization: Normalization, class_names: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        normalization.validate()?;
        if normalization.mean.len() != arch.input.channels {
            return Err(Error::config("normalization channel count does not match input shape"));
        }
        if class_names.len() != arch.num_classes {
            return Err(Error::config(format!(
                "{} class names for {} classes",
                class_names.len(),
                arch.num_classes
            )));
        }
        let lay = arch.layout();
        let mut params = vec![0.0f32; lay.total];
        let mut rng = seed::rng(seed, &[0x1417]);
        let (d, h, e, k) = (arch.input_dim(), arch.hidden_dim, arch.embed_dim, arch.num_classes);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            for p in &mut params[range] {
                *p = rng.gen_range(-a..a);
            }
        };
        fill(lay.w1..lay.b1, d, h);
        fill(lay.w2..lay.b2, h, e);
        fill(lay.cls..lay.total, e, k);
        Ok(DualEncoderModel {
            arch,
            normalization,
            class_names,
            params,
            temperature: Self::INIT_TEMPERATURE,
            train_temperature: false,
            seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::Shape {
                expected: self.arch.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward_tape(&self, x: &[f32]) -> Result<Tape> {
        self.check_input(x)?;
        let arch = &self.arch;
        let lay = arch.layout();
        let (d, h, e, k) = (arch.input_dim(), arch.hidden_dim, arch.embed_dim, arch.num_classes);
        let plane = arch.input.plane();
        let p = &self.params;
        let norm = &self.normalization;

        let u: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v as f64 - norm.mean[c] as f64) / norm.std[c] as f64
            })
            .collect();

        let w1 = &p[lay.w1..lay.b1];
        let b1 = &p[lay.b1..lay.w2];
        let a: Vec<f64> = (0..h)
            .map(|m| b1[m] as f64 + dot_f32_f64(&w1[m * d..(m + 1) * d], &u))
            .collect();
        let hid: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();

        let w2 = &p[lay.w2..lay.b2];
        let b2 = &p[lay.b2..lay.cls];
        let emb: Vec<f64> = (0..e)
            .map(|j| b2[j] as f64 + dot_f32_f64(&w2[j * h..(j + 1) * h], &hid))
            .collect();
        let e_norm = l2(&emb);
        let e_hat: Vec<f64> = if e_norm < NORM_FLOOR {
            vec![0.0; e]
        } else {
            emb.iter().map(|v| v / e_norm).collect()
        };

        let cls = &p[lay.cls..lay.total];
        let mut c_hat = vec![0.0; k * e];
        let mut c_norm = vec![0.0; k];
        let mut cos = vec![0.0; k];
        for c in 0..k {
            let row: Vec<f64> = cls[c * e..(c + 1) * e].iter().map(|&v| v as f64).collect();
            let n = l2(&row);
            c_norm[c] = n;
            if n >= NORM_FLOOR {
                for j in 0..e {
                    c_hat[c * e + j] = row[j] / n;
                }
            }
            cos[c] = (0..e).map(|j| c_hat[c * e + j] * e_hat[j]).sum();
        }
        let t = self.temperature as f64;
        let logits = cos.iter().map(|c| t * c).collect();
        Ok(Tape {
            u,
            a,
            h: hid,
            e_hat,
            e_norm,
            c_hat,
            c_norm,
            cos,
            logits,
        })
    }

    /// Backprop a logit cotangent to the pre-normalization embedding.
    fn embed_cotangent(&self, tape: &Tape, dz: &[f64]) -> Vec<f64> {
        let e = self.arch.embed_dim;
        let t = self.temperature as f64;
        if tape.e_norm < NORM_FLOOR {
            return vec![0.0; e];
        }
        let mut d_hat = vec![0.0; e];
        for (c, &g) in dz.iter().enumerate() {
            if g != 0.0 {
                for j in 0..e {
                    d_hat[j] += t * g * tape.c_hat[c * e + j];
                }
            }
        }
        let proj: f64 = d_hat.iter().zip(&tape.e_hat).map(|(a, b)| a * b).sum();
        d_hat
            .iter()
            .zip(&tape.e_hat)
            .map(|(dh, eh)| (dh - eh * proj) / tape.e_norm)
            .collect()
    }

    /// Cotangent of the hidden pre-activations.
    fn hidden_cotangent(&self, tape: &Tape, de: &[f64]) -> Vec<f64> {
        let lay = self.arch.layout();
        let h = self.arch.hidden_dim;
        let w2 = &self.params[lay.w2..lay.b2];
        let mut dh = vec![0.0; h];
        for (j, &g) in de.iter().enumerate() {
            if g != 0.0 {
                axpy_f32(g, &w2[j * h..(j + 1) * h], &mut dh);
            }
        }
        for (v, &a) in dh.iter_mut().zip(&tape.a) {
            if a <= 0.0 {
                *v = 0.0;
            }
        }
        dh
    }

    fn input_grad_from_tape(&self, tape: &Tape, dz: &[f64]) -> Vec<f64> {
        let lay = self.arch.layout();
        let d = self.arch.input_dim();
        let plane = self.arch.input.plane();
        let de = self.embed_cotangent(tape, dz);
        let da = self.hidden_cotangent(tape, &de);
        let w1 = &self.params[lay.w1..lay.b1];
        let mut du = vec![0.0; d];
        for (m, &g) in da.iter().enumerate() {
            if g != 0.0 {
                axpy_f32(g, &w1[m * d..(m + 1) * d], &mut du);
            }
        }
        for (i, v) in du.iter_mut().enumerate() {
            *v /= self.normalization.std[i / plane] as f64;
        }
        du
    }

    /// Accumulate `scale * d(sum_k dz_k z_k)/dparams` into `out`.
    fn accumulate_param_grad(&self, tape: &Tape, dz: &[f64], scale: f64, out: &mut ParamGrads) {
        let lay = self.arch.layout();
        let (d, h, e) = (self.arch.input_dim(), self.arch.hidden_dim, self.arch.embed_dim);
        let t = self.temperature as f64;
        let g = &mut out.params;

        let de = self.embed_cotangent(tape, dz);
        let da = self.hidden_cotangent(tape, &de);
        for j in 0..e {
            let s = scale * de[j];
            if s != 0.0 {
                for m in 0..h {
                    g[lay.w2 + j * h + m] += s * tape.h[m];
                }
                g[lay.b2 + j] += s;
            }
        }
        for m in 0..h {
            let s = scale * da[m];
            if s != 0.0 {
                let row = &mut g[lay.w1 + m * d..lay.w1 + (m + 1) * d];
                for (r, ui) in row.iter_mut().zip(&tape.u) {
                    *r += s * ui;
                }
                g[lay.b1 + m] += s;
            }
        }
        for (c, &gz) in dz.iter().enumerate() {
            let n = tape.c_norm[c];
            if gz == 0.0 || n < NORM_FLOOR {
                continue;
            }
            let ch = &tape.c_hat[c * e..(c + 1) * e];
            let proj: f64 = ch.iter().zip(&tape.e_hat).map(|(a, b)| a * b).sum();
            for j in 0..e {
                g[lay.cls + c * e + j] += scale * t * gz * (tape.e_hat[j] - ch[j] * proj) / n;
            }
        }
        out.temperature += scale * dz.iter().zip(&tape.cos).map(|(a, b)| a * b).sum::<f64>();
    }

    /// L2-normalized image embedding (the encoder output).
    pub fn embed(&self, x: &[f32]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(x)?.e_hat)
    }

    /// Mean cross-entropy over a batch and its parameter gradient.
    pub fn grad_params(&self, batch: &[(&[f32], usize)]) -> Result<(f64, ParamGrads)> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mut grads = ParamGrads {
            params: vec![0.0; self.params.len()],
            temperature: 0.0,
        };
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &(x, y) in batch {
            let tape = self.forward_tape(x)?;
            let (loss, dz) = loss_and_logit_grad(LossKind::Ce, &tape.logits, y)?;
            total += loss;
            self.accumulate_param_grad(&tape, &dz, scale, &mut grads);
        }
        Ok((total * scale, grads))
    }

    pub fn all_finite(&self) -> bool {
        self.temperature.is_finite() && self.params.iter().all(|p| p.is_finite())
    }

    pub fn accuracy(&self, dataset: &LabeledDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::input("accuracy of an empty dataset"));
        }
        let preds = self.predict_all(dataset)?;
        let hits = preds
            .iter()
            .zip(&dataset.samples)
            .filter(|(p, s)| **p == s.label)
            .count();
        Ok(hits as f64 / dataset.len() as f64)
    }

    pub fn predict_all(&self, dataset: &LabeledDataset) -> Result<Vec<usize>> {
        dataset.samples.par_iter().map(|s| self.predict(&s.pixels)).collect()
    }
}

impl Classifier for DualEncoderModel {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn logits(&self, x: &[f32]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(x)?.logits)
    }

    fn forward_vjp(&self, x: &[f32], cotangents: &mut CotangentFn) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let tape = self.forward_tape(x)?;
        let grads = cotangents(&tape.logits)?
            .iter()
            .map(|dz| self.input_grad_from_tape(&tape, dz))
            .collect();
        Ok((tape.logits, grads))
    }
}

fn dot_f32_f64(w: &[f32], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a as f64 * b).sum()
}

fn axpy_f32(alpha: f64, x: &[f32], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi as f64;
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` epochs (0 = never).
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            optimizer: OptimizerConfig::default(),
            lr_decay_every: 0,
            lr_decay: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::config("lr_decay must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.lr,
            n => self.lr * self.lr_decay.powi((epoch / n) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_val_acc: Option<f64>,
    pub adv_val_acc: Option<f64>,
}

/// Optimizer state bound to one model's parameter layout.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub epoch: usize,
    velocity: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Trainer {
    pub fn new(model: &DualEncoderModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = model.params.len() + 1;
        Ok(Trainer {
            config,
            epoch: 0,
            velocity: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
        })
    }

    /// One optimizer update on `batch` with learning rate `lr`; returns the
    /// batch loss before the update.
    pub fn step(&mut self, model: &mut DualEncoderModel, batch: &[(&[f32], usize)], lr: f64) -> Result<f64> {
        let (loss, grads) = model.grad_params(batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                what: "loss",
            });
        }
        if lr == 0.0 {
            return Ok(loss);
        }
        self.steps += 1;
        let n = model.params.len();
        let t_grad = if model.train_temperature {
            grads.temperature
        } else {
            0.0
        };
        let grad = |i: usize| if i < n { grads.params[i] } else { t_grad };
        match self.config.optimizer {
            OptimizerConfig::Sgd { momentum } => {
                for i in 0..=n {
                    self.velocity[i] = momentum * self.velocity[i] + grad(i);
                }
                for (p, v) in model.params.iter_mut().zip(&self.velocity) {
                    *p = (*p as f64 - lr * v) as f32;
                }
                if model.train_temperature {
                    model.temperature = (model.temperature as f64 - lr * self.velocity[n]) as f32;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                let mut delta = vec![0.0; n + 1];
                for (i, d) in delta.iter_mut().enumerate() {
                    let g = grad(i);
                    self.velocity[i] = beta1 * self.velocity[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    *d = lr * (self.velocity[i] / c1) / ((self.second[i] / c2).sqrt() + eps);
                }
                for (p, d) in model.params.iter_mut().zip(&delta) {
                    *p = (*p as f64 - d) as f32;
                }
                if model.train_temperature {
                    model.temperature = (model.temperature as f64 - delta[n]) as f32;
                }
            }
        }
        if !model.all_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                what: "parameters",
            });
        }
        if model.temperature <= 0.0 {
            return Err(Error::Divergence {
                epoch: self.epoch,
                what: "temperature (non-positive)",
            });
        }
        Ok(loss)
    }

    /// One pass over `dataset` in a seeded order; returns the mean batch loss.
    pub fn run_epoch(&mut self, model: &mut DualEncoderModel, dataset: &LabeledDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::input("cannot train on an empty dataset"));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut seed::rng(self.config.seed, &[0x7a1, self.epoch as u64]));
        let lr = self.config.lr_at(self.epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(&[f32], usize)> = chunk
                .iter()
                .map(|&i| (dataset.samples[i].pixels.as_slice(), dataset.samples[i].label))
                .collect();
            total += self.step(model, &batch, lr)?;
            batches += 1;
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                what: "loss",
            });
        }
        self.epoch += 1;
        Ok(mean)
    }
}

/// Train for `config.epochs` epochs, logging training loss and (when given)
/// clean and adversarial validation accuracy after each epoch.
pub fn train(
    mut model: DualEncoderModel,
    dataset: &LabeledDataset,
    val_clean: Option<&LabeledDataset>,
    val_adv: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<(DualEncoderModel, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(&model, config.clone())?;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let train_loss = trainer.run_epoch(&mut model, dataset)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            clean_val_acc: val_clean.map(|d| model.accuracy(d)).transpose()?,
            adv_val_acc: val_adv.map(|d| model.accuracy(d)).transpose()?,
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} clean {:?} adv {:?}",
            entry.clean_val_acc,
            entry.adv_val_acc
        );
        log.push(entry);
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AVLM";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    arch: Arch,
    num_classes: usize,
    class_names: Vec<String>,
    normalization: Normalization,
    temperature: f32,
    train_temperature: bool,
    seed: u64,
    param_layout: Vec<String>,
}

impl DualEncoderModel {
    /// Checkpoint bytes: container metadata then the `f32` parameter blob in
    /// `w1, b1, w2, b2, class_embeddings` order.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            arch: self.arch,
            num_classes: self.arch.num_classes,
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
            temperature: self.temperature,
            train_temperature: self.train_temperature,
            seed: self.seed,
            param_layout: ["w1", "b1", "w2", "b2", "class_embeddings"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        let mut blob = Vec::with_capacity(self.params.len() * 4);
        container::put_f32s(&mut blob, &self.params);
        container::encode(CHECKPOINT_MAGIC, &serde_json::to_value(meta)?, &blob)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(CHECKPOINT_MAGIC, bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta)?;
        meta.arch.validate()?;
        if meta.num_classes != meta.arch.num_classes || meta.class_names.len() != meta.num_classes {
            return Err(Error::Format("checkpoint class count is inconsistent".into()));
        }
        container::expect_len(&c.blob, meta.arch.param_count() * 4)?;
        Ok(DualEncoderModel {
            arch: meta.arch,
            normalization: meta.normalization,
            class_names: meta.class_names,
            params: container::take_f32s(&c.blob),
            temperature: meta.temperature,
            train_temperature: meta.train_temperature,
            seed: meta.seed,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_checkpoint_bytes()?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&container::read_file(path)?)
    }
}
