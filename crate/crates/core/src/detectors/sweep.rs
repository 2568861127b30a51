//! Hyperparameter sweeps over learning rate and a depth-like axis.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_detector, DetectorKind, DetectorParams, Matrix};
use crate::error::{Error, Result};
use crate::metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    /// Tree depth (level-wise GBDT, AdaBoost), leaf count (leaf-wise GBDT),
    /// or hidden width in units of 16 (MLP).
    pub depth_or_leaves: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            learning_rates: vec![0.01, 0.1, 0.5, 1.0],
            depth_or_leaves: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: DetectorKind,
    pub lr: f64,
    pub depth_or_leaves: usize,
    pub accuracy: f64,
    pub f1_macro: f64,
}

/// Parameters for one grid cell, starting from `base`.
pub fn cell_params(kind: DetectorKind, base: &DetectorParams, lr: f64, v: usize) -> DetectorParams {
    let mut p = base.clone();
    match kind {
        DetectorKind::Adaboost => {
            p.adaboost.learning_rate = lr;
            p.adaboost.max_depth = v;
        }
        DetectorKind::GbdtLevel => {
            p.gbdt_level.learning_rate = lr;
            p.gbdt_level.max_depth = v;
        }
        DetectorKind::GbdtLeaf => {
            p.gbdt_leaf.learning_rate = lr;
            p.gbdt_leaf.max_leaves = v;
        }
        DetectorKind::Mlp => {
            p.mlp.learning_rate = lr;
            p.mlp.hidden = 16 * v;
        }
    }
    p
}

/// Train one detector per grid cell (row-major: learning rate outer) and
/// score it on the validation split.
pub fn sensitivity_sweep(
    kind: DetectorKind,
    grid: &SweepGrid,
    base: &DetectorParams,
    train: (&Matrix, &[usize]),
    val: (&Matrix, &[usize]),
    k: usize,
) -> Result<Vec<SweepRow>> {
    if grid.learning_rates.is_empty() || grid.depth_or_leaves.is_empty() {
        return Err(Error::config("sweep grid must be nonempty on both axes"));
    }
    let cells: Vec<(f64, usize)> = grid
        .learning_rates
        .iter()
        .flat_map(|&lr| grid.depth_or_leaves.iter().map(move |&v| (lr, v)))
        .collect();
    cells
        .par_iter()
        .map(|&(lr, v)| {
            let det = train_detector(kind, train.0, train.1, k, &cell_params(kind, base, lr, v))?;
            let pred = det.predict(val.0)?;
            let m = metrics::metrics(&metrics::confusion_matrix(val.1, &pred, k)?)?;
            log::debug!("sweep {} lr={lr} v={v}: acc {:.4}", kind.name(), m.accuracy);
            Ok(SweepRow {
                kind,
                lr,
                depth_or_leaves: v,
                accuracy: m.accuracy,
                f1_macro: m.macro_f1,
            })
        })
        .collect()
}

/// CSV with an extra `accuracy_range` column: max minus min accuracy over
/// all rows of the same kind.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut range: BTreeMap<DetectorKind, (f64, f64)> = BTreeMap::new();
    for r in rows {
        let e = range.entry(r.kind).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(r.accuracy);
        e.1 = e.1.max(r.accuracy);
    }
    let mut s = String::from("kind,lr,depth_or_leaves,accuracy,f1_macro,accuracy_range\n");
    for r in rows {
        let (lo, hi) = range[&r.kind];
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.kind.name(),
            r.lr,
            r.depth_or_leaves,
            r.accuracy,
            r.f1_macro,
            hi - lo
        ));
    }
    s
}
