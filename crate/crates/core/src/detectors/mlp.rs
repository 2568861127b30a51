//! One-hidden-layer ReLU network with a softmax head, trained by minibatch
//! SGD with momentum.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_training_data, softmax_row, Matrix};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpParams {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden: 64,
            epochs: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl MlpParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.epochs == 0
            || self.batch_size == 0
            || !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::config(format!("invalid mlp parameters {self:?}")));
        }
        Ok(())
    }
}

/// Parameters are flat: `w1 (H x D) | b1 (H) | w2 (K x H) | b2 (K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub params: MlpParams,
    pub params_flat: Vec<f64>,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub num_classes: usize,
    pub num_features: usize,
}

impl MlpModel {
    pub fn param_count(d: usize, h: usize, k: usize) -> usize {
        h * d + h + k * h + k
    }

    pub fn init(d: usize, k: usize, params: &MlpParams) -> Self {
        let h = params.hidden;
        let mut rng = seed::rng(params.seed, &[0x31f]);
        let mut p = vec![0.0; Self::param_count(d, h, k)];
        let a1 = (6.0 / (d + h) as f64).sqrt();
        for v in &mut p[..h * d] {
            *v = rng.gen_range(-a1..=a1);
        }
        let a2 = (6.0 / (h + k) as f64).sqrt();
        let o = h * d + h;
        for v in &mut p[o..o + k * h] {
            *v = rng.gen_range(-a2..=a2);
        }
        MlpModel {
            params: *params,
            params_flat: p,
            train_loss: Vec::new(),
            num_classes: k,
            num_features: d,
        }
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        let (d, h) = (self.num_features, self.params.hidden);
        let p = &self.params_flat;
        (0..h)
            .map(|j| {
                let z = p[h * d + j] + p[j * d..(j + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                z.max(0.0)
            })
            .collect()
    }

    fn logits_from_hidden(&self, a: &[f64]) -> Vec<f64> {
        let (d, h, k) = (self.num_features, self.params.hidden, self.num_classes);
        let p = &self.params_flat;
        let o = h * d + h;
        (0..k)
            .map(|c| {
                p[o + k * h + c]
                    + p[o + c * h..o + (c + 1) * h]
                        .iter()
                        .zip(a)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_from_hidden(&self.hidden_act(x))
    }

    pub fn proba_row(&self, x: &[f64]) -> Vec<f64> {
        softmax_row(&self.logits(x))
    }

    /// Mean cross-entropy over `rows` and its gradient in the flat layout.
    pub fn loss_and_grad(&self, x: &Matrix, y: &[usize], rows: &[usize]) -> (f64, Vec<f64>) {
        let (d, h, k) = (self.num_features, self.params.hidden, self.num_classes);
        let p = &self.params_flat;
        let o = h * d + h;
        let mut grad = vec![0.0; p.len()];
        let mut loss = 0.0;
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let xi = x.row(i);
            let a = self.hidden_act(xi);
            let probs = softmax_row(&self.logits_from_hidden(&a));
            loss -= probs[y[i]].max(1e-300).ln();
            let mut da = vec![0.0; h];
            for c in 0..k {
                let dz = (probs[c] - (y[i] == c) as u8 as f64) * scale;
                grad[o + k * h + c] += dz;
                for j in 0..h {
                    grad[o + c * h + j] += dz * a[j];
                    da[j] += dz * p[o + c * h + j];
                }
            }
            for j in 0..h {
                if a[j] <= 0.0 {
                    continue;
                }
                grad[h * d + j] += da[j];
                for (gw, v) in grad[j * d..(j + 1) * d].iter_mut().zip(xi) {
                    *gw += da[j] * v;
                }
            }
        }
        (loss * scale, grad)
    }
}

pub fn train_mlp(x: &Matrix, y: &[usize], k: usize, params: &MlpParams) -> Result<MlpModel> {
    params.validate()?;
    check_training_data(x, y, k)?;
    let mut model = MlpModel::init(x.cols, k, params);
    let mut velocity = vec![0.0; model.params_flat.len()];
    let mut order: Vec<usize> = (0..x.rows).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut seed::rng(params.seed, &[0x31f, 1 + epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(params.batch_size) {
            let (loss, grad) = model.loss_and_grad(x, y, batch);
            total += loss * batch.len() as f64;
            for ((w, v), g) in model.params_flat.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = params.momentum * *v - params.learning_rate * g;
                *w += *v;
            }
        }
        let mean = total / x.rows as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "mlp training loss",
            });
        }
        model.train_loss.push(mean);
    }
    Ok(model)
}
