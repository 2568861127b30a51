//! Multi-class AdaBoost (SAMME) over shallow weighted-error trees.

use serde::{Deserialize, Serialize};

use super::tree::{midpoint, partition, presort, Node, Tree};
use super::{check_training_data, softmax_row, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaBoostParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
}

impl Default for AdaBoostParams {
    fn default() -> Self {
        AdaBoostParams {
            rounds: 100,
            max_depth: 1,
            learning_rate: 1.0,
        }
    }
}

impl AdaBoostParams {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.max_depth == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "adaboost needs rounds >= 1, max_depth >= 1 and learning_rate > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLearner {
    pub alpha: f64,
    pub tree: Tree<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaBoostModel {
    pub params: AdaBoostParams,
    pub learners: Vec<WeakLearner>,
    /// Round at which boosting stopped early, if it did.
    pub halt_round: Option<usize>,
    pub num_classes: usize,
    pub num_features: usize,
    /// Sum of sample weights after each round's renormalization (training only).
    pub weight_sums: Vec<f64>,
}

impl AdaBoostModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.num_classes];
        for l in &self.learners {
            s[*l.tree.predict(x)] += l.alpha;
        }
        s
    }

    pub fn proba_row(&self, x: &[f64]) -> Vec<f64> {
        let denom = (self.num_classes - 1).max(1) as f64;
        let s: Vec<f64> = self.scores(x).iter().map(|v| v / denom).collect();
        softmax_row(&s)
    }
}

fn argmax_weights(w: &[f64]) -> usize {
    crate::model::argmax(w)
}

/// Fit a tree of depth at most `max_depth` minimizing weighted training error.
pub(crate) fn fit_weighted_tree(
    x: &Matrix,
    sorted: Vec<Vec<u32>>,
    y: &[usize],
    w: &[f64],
    k: usize,
    max_depth: usize,
) -> Tree<usize> {
    let mut nodes = Vec::new();
    grow(x, sorted, y, w, k, max_depth, &mut nodes);
    Tree { nodes }
}

fn grow(
    x: &Matrix,
    sorted: Vec<Vec<u32>>,
    y: &[usize],
    w: &[f64],
    k: usize,
    depth_left: usize,
    nodes: &mut Vec<Node<usize>>,
) -> usize {
    let id = nodes.len();
    let rows: &[u32] = sorted.first().map_or(&[], |c| c.as_slice());
    let mut total = vec![0.0; k];
    for &r in rows {
        total[y[r as usize]] += w[r as usize];
    }
    let node_class = argmax_weights(&total);
    let node_err = total.iter().sum::<f64>() - total[node_class];
    nodes.push(Node::Leaf(node_class));
    if depth_left == 0 || rows.len() < 2 || node_err <= 0.0 {
        return id;
    }

    let mut best: Option<(f64, usize, f64)> = None;
    let mut left = vec![0.0; k];
    for (j, col) in sorted.iter().enumerate() {
        left.iter_mut().for_each(|v| *v = 0.0);
        for pos in 0..col.len() - 1 {
            let r = col[pos] as usize;
            left[y[r]] += w[r];
            let (a, b) = (x.get(r, j), x.get(col[pos + 1] as usize, j));
            if a == b {
                continue;
            }
            let mut wl = 0.0;
            let mut ml = f64::NEG_INFINITY;
            let mut wr = 0.0;
            let mut mr = f64::NEG_INFINITY;
            for c in 0..k {
                let r_c = total[c] - left[c];
                wl += left[c];
                wr += r_c;
                ml = ml.max(left[c]);
                mr = mr.max(r_c);
            }
            let err = (wl - ml) + (wr - mr);
            if best.is_none_or(|(e, _, _)| err < e) {
                best = Some((err, j, midpoint(a, b)));
            }
        }
    }
    let Some((err, feature, threshold)) = best else {
        return id;
    };
    if err >= node_err - 1e-15 {
        return id;
    }
    let mut go_left = vec![false; x.rows];
    for &r in rows {
        go_left[r as usize] = x.get(r as usize, feature) <= threshold;
    }
    let (ls, rs) = partition(&sorted, &go_left);
    drop(sorted);
    let l = grow(x, ls, y, w, k, depth_left - 1, nodes);
    let r = grow(x, rs, y, w, k, depth_left - 1, nodes);
    nodes[id] = Node::Split {
        feature,
        threshold,
        left: l,
        right: r,
    };
    id
}

/// SAMME boosting. Stops early when a weak learner's weighted error reaches
/// `1 - 1/K` or when a learner fits the weighted data perfectly.
pub fn train_adaboost(x: &Matrix, y: &[usize], k: usize, params: &AdaBoostParams) -> Result<AdaBoostModel> {
    params.validate()?;
    check_training_data(x, y, k)?;
    let n = x.rows;
    let sorted = presort(x);
    let mut w = vec![1.0 / n as f64; n];
    let mut model = AdaBoostModel {
        params: *params,
        learners: Vec::new(),
        halt_round: None,
        num_classes: k,
        num_features: x.cols,
        weight_sums: Vec::new(),
    };
    let chance = 1.0 - 1.0 / k as f64;
    for round in 0..params.rounds {
        let tree = fit_weighted_tree(x, sorted.clone(), y, &w, k, params.max_depth);
        let miss: Vec<bool> = (0..n).map(|i| *tree.predict(x.row(i)) != y[i]).collect();
        let err: f64 = miss.iter().zip(&w).filter(|(m, _)| **m).map(|(_, wi)| wi).sum();
        if err >= chance {
            log::debug!("adaboost halted at round {round}: weighted error {err}");
            model.halt_round = Some(round);
            break;
        }
        let e = err.max(1e-10);
        let alpha = params.learning_rate * (((1.0 - e) / e).ln() + ((k - 1) as f64).ln());
        model.learners.push(WeakLearner { alpha, tree });
        if err <= 0.0 {
            model.halt_round = Some(round + 1);
            model.weight_sums.push(1.0);
            break;
        }
        for (wi, m) in w.iter_mut().zip(&miss) {
            if *m {
                *wi *= alpha.exp();
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        model.weight_sums.push(w.iter().sum());
    }
    Ok(model)
}
