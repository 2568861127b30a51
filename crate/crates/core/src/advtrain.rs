//! Static adversarial fine-tuning: build a mixed clean / sequential / fused
//! training set against a fixed model, retrain on it while monitoring clean
//! and adversarial validation accuracy, and evaluate.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::{LabeledDataset, TaggedDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, MetricsBundle};
use crate::model::{self, DualEncoderModel, EpochLog, TrainConfig};
use crate::seed;

/// Fractions of (clean, sequential, fused) examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mix {
    pub clean: f64,
    pub sequential: f64,
    pub fused: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            clean: 1.0 / 3.0,
            sequential: 1.0 / 3.0,
            fused: 1.0 / 3.0,
        }
    }
}

impl Mix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.clean, self.sequential, self.fused];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mix fractions must be nonnegative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Split `n` items into three group sizes by largest remainder; ties in
    /// the remainder go to the earlier group.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let fr = [self.clean, self.sequential, self.fused];
        let exact: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
        let mut counts: [usize; 3] = [0; 3];
        for i in 0..3 {
            counts[i] = (exact[i] + 1e-9).floor() as usize;
        }
        let mut left = n.saturating_sub(counts.iter().sum());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = exact[a] - counts[a] as f64;
            let rb = exact[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if fr[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvTrainConfig {
    pub attack: AttackConfig,
    pub mix: Mix,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Clean,
    Sequential,
    Fused,
}

/// Per class, shuffle the class members with `seed` and assign them to the
/// clean / sequential / fused groups in `mix` proportions. Adversarial
/// examples keep their source's true label and id; an attack that errors
/// leaves the clean image in place (logged).
pub fn build_adversarial_dataset(
    model: &DualEncoderModel,
    dataset: &LabeledDataset,
    attack: &AttackConfig,
    mix: &Mix,
    seed: u64,
) -> Result<TaggedDataset> {
    mix.validate()?;
    attack.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("cannot build an adversarial set from an empty dataset"));
    }
    let mut groups = vec![Group::Clean; dataset.len()];
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.samples[i].label == class)
            .collect();
        members.shuffle(&mut seed::rng(seed, &[0xad7, class as u64]));
        let [n_clean, n_seq, _] = mix.counts(members.len());
        for (j, &i) in members.iter().enumerate() {
            groups[i] = if j < n_clean {
                Group::Clean
            } else if j < n_clean + n_seq {
                Group::Sequential
            } else {
                Group::Fused
            };
        }
    }

    let parts = dataset
        .samples
        .par_iter()
        .zip(groups.par_iter())
        .map(|(s, g)| {
            let attacked = match g {
                Group::Clean => return Ok((s.clone(), Vec::new())),
                Group::Sequential => attacks::sequential_attack(model, s, attack),
                Group::Fused => attacks::fused_attack(model, s, attack),
            };
            Ok(match attacked {
                Ok(ex) => (ex.to_sample(dataset.shape), ex.chain),
                Err(e) => {
                    log::warn!("attack on sample {} failed ({e}); keeping the clean image", s.id);
                    (s.clone(), Vec::new())
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let meta = serde_json::json!({
        "attack": attack,
        "mix": mix,
        "seed": seed,
    });
    TaggedDataset::from_parts(parts, dataset.class_names.clone(), dataset.shape, dataset.source, meta)
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome {
    pub model: DualEncoderModel,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were returned (`None` when no epoch ran).
    pub best_epoch: Option<usize>,
}

/// Fine-tune on the adversarial set, keeping the weights from the epoch with
/// the best adversarial validation accuracy (ties go to the earliest epoch).
pub fn retrain(
    model: &DualEncoderModel,
    adv_train: &LabeledDataset,
    val_clean: &LabeledDataset,
    val_adv: &LabeledDataset,
    config: &TrainConfig,
) -> Result<RetrainOutcome> {
    if adv_train.is_empty() || val_clean.is_empty() || val_adv.is_empty() {
        return Err(Error::input("retraining needs nonempty training and validation sets"));
    }
    if !(config.lr > 0.0) {
        return Err(Error::config(format!(
            "learning rate must be positive, got {}",
            config.lr
        )));
    }
    let mut current = model.clone();
    let mut trainer = model::Trainer::new(&current, config.clone())?;
    let mut best: Option<(f64, usize, DualEncoderModel)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let train_loss = trainer.run_epoch(&mut current, adv_train)?;
        let clean = current.accuracy(val_clean)?;
        let adv = current.accuracy(val_adv)?;
        log::info!("retrain epoch {epoch}: loss {train_loss:.5} clean {clean:.4} adv {adv:.4}");
        log.push(EpochLog {
            epoch,
            train_loss,
            clean_val_acc: Some(clean),
            adv_val_acc: Some(adv),
        });
        if best.as_ref().is_none_or(|(b, _, _)| adv > *b) {
            best = Some((adv, epoch, current.clone()));
        }
    }
    Ok(match best {
        Some((_, epoch, m)) => RetrainOutcome {
            model: m,
            log,
            best_epoch: Some(epoch),
        },
        None => RetrainOutcome {
            model: model.clone(),
            log,
            best_epoch: None,
        },
    })
}

/// Monitor log as `epoch,train_loss,clean_val_acc,adv_val_acc`.
pub fn monitor_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,clean_val_acc,adv_val_acc\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch,
            e.train_loss,
            opt(e.clean_val_acc),
            opt(e.adv_val_acc)
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub n_eval: usize,
    pub metrics: MetricsBundle,
}

pub fn evaluate_predictions(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<EvalReport> {
    if y_true.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let confusion = metrics::confusion_matrix(y_true, y_pred, k)?;
    let m = metrics::metrics(&confusion)?;
    Ok(EvalReport {
        accuracy: m.accuracy,
        macro_precision: m.macro_precision,
        macro_recall: m.macro_recall,
        macro_f1: m.macro_f1,
        confusion,
        n_eval: y_true.len(),
        metrics: m,
    })
}

pub fn evaluate_model(model: &DualEncoderModel, dataset: &LabeledDataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let preds = model.predict_all(dataset)?;
    evaluate_predictions(&dataset.labels(), &preds, model.arch.num_classes)
}
