//! Detectors trained on encoder features: SAMME AdaBoost, a gradient-boosted
//! tree engine with level-wise and leaf-wise growth, and a one-hidden-layer
//! network.

mod adaboost;
mod gbdt;
mod mlp;
pub mod sweep;
mod tree;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::DualEncoderModel;

pub use adaboost::{train_adaboost, AdaBoostModel, AdaBoostParams, WeakLearner};
pub use gbdt::{train_gbdt, GbdtModel, GbdtParams, GrowthPolicy, GrowthStep, RegressionTreeBuilder};
pub use mlp::{train_mlp, MlpModel, MlpParams};
pub use sweep::{sensitivity_sweep, sweep_csv, SweepGrid, SweepRow};
pub use tree::{Node, Tree};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged feature rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn select_rows(&self, range: std::ops::Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }
}

/// Per-dimension z-score statistics. Zero-variance dimensions are only centred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(m: &Matrix) -> Result<Self> {
        if m.rows == 0 {
            return Err(Error::input("normalization statistics need at least one row"));
        }
        let n = m.rows as f64;
        let mut mean = vec![0.0; m.cols];
        for i in 0..m.rows {
            for (mu, v) in mean.iter_mut().zip(m.row(i)) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m.cols];
        for i in 0..m.rows {
            for ((s, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, m: &mut Matrix) {
        for i in 0..m.rows {
            let row = &mut m.data[i * m.cols..(i + 1) * m.cols];
            for (j, v) in row.iter_mut().enumerate() {
                let s = if self.std[j] > 1e-12 { self.std[j] } else { 1.0 };
                *v = (*v - self.mean[j]) / s;
            }
        }
    }
}

/// Encoder features for a mix of clean and adversarial images. Rows
/// `0..n_train` are the training portion; normalization statistics come
/// from those rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub features: Matrix,
    /// Target labels (class labels, or clean/adversarial after [`detection_task`]).
    pub labels: Vec<usize>,
    /// True class labels, always preserved.
    pub class_labels: Vec<usize>,
    pub adv_flags: Vec<bool>,
    pub num_classes: usize,
    pub n_train: usize,
    pub norm: NormStats,
}

impl FeatureSet {
    pub fn train(&self) -> (Matrix, &[usize]) {
        (self.features.select_rows(0..self.n_train), &self.labels[..self.n_train])
    }

    pub fn test(&self) -> (Matrix, &[usize]) {
        let n = self.features.rows;
        (self.features.select_rows(self.n_train..n), &self.labels[self.n_train..])
    }
}

/// Embed every image with the model's encoder (L2-normalized output) and
/// z-score the features with statistics of the first `n_train` rows.
pub fn extract_features(
    model: &DualEncoderModel,
    images: &[ImageSample],
    adv_flags: &[bool],
    n_train: usize,
) -> Result<FeatureSet> {
    if images.is_empty() {
        return Err(Error::input("no images to extract features from"));
    }
    if adv_flags.len() != images.len() {
        return Err(Error::Shape {
            expected: images.len(),
            got: adv_flags.len(),
        });
    }
    if n_train == 0 || n_train > images.len() {
        return Err(Error::input(format!(
            "training portion must hold 1..={} rows, got {n_train}",
            images.len()
        )));
    }
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|s| model.embed(&s.pixels))
        .collect::<Result<_>>()?;
    let mut features = Matrix::from_rows(&rows)?;
    let norm = NormStats::fit(&features.select_rows(0..n_train))?;
    norm.apply(&mut features);
    let labels: Vec<usize> = images.iter().map(|s| s.label).collect();
    Ok(FeatureSet {
        features,
        class_labels: labels.clone(),
        labels,
        adv_flags: adv_flags.to_vec(),
        num_classes: model.arch.num_classes,
        n_train,
        norm,
    })
}

/// Relabel rows as clean (0) / adversarial (1). The class labels stay in
/// `class_labels`.
pub fn detection_task(fs: &FeatureSet) -> FeatureSet {
    FeatureSet {
        labels: fs.adv_flags.iter().map(|&a| a as usize).collect(),
        num_classes: 2,
        ..fs.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Adaboost,
    GbdtLevel,
    GbdtLeaf,
    Mlp,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::Adaboost,
        DetectorKind::GbdtLevel,
        DetectorKind::GbdtLeaf,
        DetectorKind::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Adaboost => "adaboost",
            DetectorKind::GbdtLevel => "gbdt_level",
            DetectorKind::GbdtLeaf => "gbdt_leaf",
            DetectorKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown detector kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Detector {
    AdaBoost(AdaBoostModel),
    Gbdt(GbdtModel),
    Mlp(MlpModel),
}

pub(crate) fn check_training_data(x: &Matrix, y: &[usize], k: usize) -> Result<()> {
    if x.rows == 0 || x.rows != y.len() {
        return Err(Error::input(format!(
            "need a nonempty feature matrix with one label per row ({} rows, {} labels)",
            x.rows,
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= k) {
        return Err(Error::Index { label: bad, classes: k });
    }
    let first = y[0];
    if y.iter().all(|&l| l == first) {
        return Err(Error::input("training labels contain a single class"));
    }
    Ok(())
}

pub(crate) fn softmax_row(scores: &[f64]) -> Vec<f64> {
    crate::model::softmax(scores)
}

impl Detector {
    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::AdaBoost(_) => DetectorKind::Adaboost,
            Detector::Gbdt(m) => match m.params.policy {
                GrowthPolicy::LevelWise => DetectorKind::GbdtLevel,
                GrowthPolicy::LeafWise => DetectorKind::GbdtLeaf,
            },
            Detector::Mlp(_) => DetectorKind::Mlp,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Detector::AdaBoost(m) => m.num_classes,
            Detector::Gbdt(m) => m.num_classes,
            Detector::Mlp(m) => m.num_classes,
        }
    }

    pub fn num_features(&self) -> usize {
        match self {
            Detector::AdaBoost(m) => m.num_features,
            Detector::Gbdt(m) => m.num_features,
            Detector::Mlp(m) => m.num_features,
        }
    }

    pub fn proba_row(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Detector::AdaBoost(m) => m.proba_row(x),
            Detector::Gbdt(m) => m.proba_row(x),
            Detector::Mlp(m) => m.proba_row(x),
        }
    }

    /// `N x K` class probabilities; every row sums to 1.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<Vec<f64>>> {
        if x.cols != self.num_features() {
            return Err(Error::Shape {
                expected: self.num_features(),
                got: x.cols,
            });
        }
        Ok((0..x.rows).into_par_iter().map(|i| self.proba_row(x.row(i))).collect())
    }

    /// Row-wise argmax of [`Detector::predict_proba`]; ties go to the lowest class.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.iter().map(|p| crate::model::argmax(p)).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (params, extra, blob) = match self {
            Detector::AdaBoost(m) => (
                serde_json::to_value(m.params)?,
                serde_json::json!({ "halt_round": m.halt_round }),
                serde_json::to_vec(&m.learners)?,
            ),
            Detector::Gbdt(m) => (
                serde_json::to_value(m.params)?,
                serde_json::json!({ "train_loss": m.train_loss }),
                serde_json::to_vec(&m.trees)?,
            ),
            Detector::Mlp(m) => {
                let mut blob = Vec::new();
                container::put_f64s(&mut blob, &m.params_flat);
                (
                    serde_json::to_value(m.params)?,
                    serde_json::json!({ "train_loss": m.train_loss }),
                    blob,
                )
            }
        };
        let meta = DetectorMeta {
            kind: self.kind(),
            num_classes: self.num_classes(),
            num_features: self.num_features(),
            hyperparams: params,
            extra,
        };
        container::encode(DETECTOR_MAGIC, &serde_json::to_value(meta)?, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(DETECTOR_MAGIC, bytes)?;
        let meta: DetectorMeta = serde_json::from_value(c.meta)?;
        let (k, d) = (meta.num_classes, meta.num_features);
        Ok(match meta.kind {
            DetectorKind::Adaboost => Detector::AdaBoost(AdaBoostModel {
                params: serde_json::from_value(meta.hyperparams)?,
                learners: serde_json::from_slice(&c.blob)?,
                halt_round: serde_json::from_value(meta.extra["halt_round"].clone())?,
                num_classes: k,
                num_features: d,
                weight_sums: Vec::new(),
            }),
            DetectorKind::GbdtLevel | DetectorKind::GbdtLeaf => Detector::Gbdt(GbdtModel {
                params: serde_json::from_value(meta.hyperparams)?,
                trees: serde_json::from_slice(&c.blob)?,
                train_loss: serde_json::from_value(meta.extra["train_loss"].clone())?,
                num_classes: k,
                num_features: d,
            }),
            DetectorKind::Mlp => {
                let params: MlpParams = serde_json::from_value(meta.hyperparams)?;
                container::expect_len(&c.blob, 8 * MlpModel::param_count(d, params.hidden, k))?;
                Detector::Mlp(MlpModel {
                    params,
                    params_flat: container::take_f64s(&c.blob),
                    train_loss: serde_json::from_value(meta.extra["train_loss"].clone())?,
                    num_classes: k,
                    num_features: d,
                })
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

pub const DETECTOR_MAGIC: [u8; 4] = *b"ADET";

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    kind: DetectorKind,
    num_classes: usize,
    num_features: usize,
    hyperparams: serde_json::Value,
    extra: serde_json::Value,
}

/// Hyperparameters for every detector family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    pub adaboost: AdaBoostParams,
    pub gbdt_level: GbdtParams,
    pub gbdt_leaf: GbdtParams,
    pub mlp: MlpParams,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            adaboost: AdaBoostParams::default(),
            gbdt_level: GbdtParams::default(),
            gbdt_leaf: GbdtParams {
                policy: GrowthPolicy::LeafWise,
                ..GbdtParams::default()
            },
            mlp: MlpParams::default(),
        }
    }
}

/// Train one detector of `kind` with the matching entry of `params`.
pub fn train_detector(
    kind: DetectorKind,
    x: &Matrix,
    y: &[usize],
    k: usize,
    params: &DetectorParams,
) -> Result<Detector> {
    Ok(match kind {
        DetectorKind::Adaboost => Detector::AdaBoost(train_adaboost(x, y, k, &params.adaboost)?),
        DetectorKind::GbdtLevel => Detector::Gbdt(train_gbdt(
            x,
            y,
            k,
            &GbdtParams {
                policy: GrowthPolicy::LevelWise,
                ..params.gbdt_level
            },
        )?),
        DetectorKind::GbdtLeaf => Detector::Gbdt(train_gbdt(
            x,
            y,
            k,
            &GbdtParams {
                policy: GrowthPolicy::LeafWise,
                ..params.gbdt_leaf
            },
        )?),
        DetectorKind::Mlp => Detector::Mlp(train_mlp(x, y, k, &params.mlp)?),
    })
}
