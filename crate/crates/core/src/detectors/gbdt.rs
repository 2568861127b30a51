//! Gradient-boosted regression trees with a softmax objective. One tree per
//! class per round, exact split search over presorted columns, and either
//! level-wise (depth-bounded) or leaf-wise (leaf-count-bounded) growth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{midpoint, partition, presort, Node, Tree};
use super::{check_training_data, softmax_row, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthPolicy {
    LevelWise,
    LeafWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtParams {
    pub policy: GrowthPolicy,
    pub trees: usize,
    pub learning_rate: f64,
    /// Depth bound for level-wise growth.
    pub max_depth: usize,
    /// Leaf bound for leaf-wise growth.
    pub max_leaves: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Minimum rows on each side of a split.
    pub min_samples: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            policy: GrowthPolicy::LevelWise,
            trees: 100,
            learning_rate: 0.1,
            max_depth: 4,
            max_leaves: 16,
            lambda: 1.0,
            gamma: 0.0,
            min_samples: 2,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.trees >= 1
            && self.learning_rate > 0.0
            && self.max_depth >= 1
            && self.max_leaves >= 1
            && self.lambda >= 0.0
            && self.gamma >= 0.0
            && self.min_samples >= 1;
        if !ok {
            return Err(Error::config(format!("invalid gradient boosting parameters {self:?}")));
        }
        Ok(())
    }
}

/// One split taken during leaf-wise growth: its gain and the best gains of
/// every other splittable leaf at that moment.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthStep {
    pub node: usize,
    pub gain: f64,
    pub frontier_gains: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Builds single regression trees from per-row gradients and hessians.
pub struct RegressionTreeBuilder<'a> {
    x: &'a Matrix,
    sorted: Vec<Vec<u32>>,
    params: GbdtParams,
}

impl<'a> RegressionTreeBuilder<'a> {
    pub fn new(x: &'a Matrix, params: &GbdtParams) -> Result<Self> {
        params.validate()?;
        Ok(RegressionTreeBuilder {
            x,
            sorted: presort(x),
            params: *params,
        })
    }

    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.params.lambda) * self.params.learning_rate
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn sums(rows: &[u32], g: &[f64], h: &[f64]) -> (f64, f64) {
        rows.iter()
            .fold((0.0, 0.0), |(a, b), &r| (a + g[r as usize], b + h[r as usize]))
    }

    fn best_split(&self, sorted: &[Vec<u32>], g: &[f64], h: &[f64]) -> Option<Candidate> {
        let rows = sorted.first()?;
        let n = rows.len();
        let ms = self.params.min_samples;
        if n < 2 * ms {
            return None;
        }
        let (gt, ht) = Self::sums(rows, g, h);
        let parent = self.score(gt, ht);
        let mut best: Option<Candidate> = None;
        for (j, col) in sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for pos in 0..n - 1 {
                let r = col[pos] as usize;
                gl += g[r];
                hl += h[r];
                let nl = pos + 1;
                if nl < ms {
                    continue;
                }
                if n - nl < ms {
                    break;
                }
                let (a, b) = (self.x.get(r, j), self.x.get(col[pos + 1] as usize, j));
                if a == b {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(gt - gl, ht - hl) - parent) - self.params.gamma;
                if best.is_none_or(|c| gain > c.gain) {
                    best = Some(Candidate {
                        gain,
                        feature: j,
                        threshold: midpoint(a, b),
                    });
                }
            }
        }
        best.filter(|c| c.gain > 0.0)
    }

    fn split(
        &self,
        nodes: &mut Vec<Node<f64>>,
        id: usize,
        sorted: &[Vec<u32>],
        c: Candidate,
        g: &[f64],
        h: &[f64],
    ) -> (usize, Vec<Vec<u32>>, usize, Vec<Vec<u32>>) {
        let mut go_left = vec![false; self.x.rows];
        for &r in &sorted[0] {
            go_left[r as usize] = self.x.get(r as usize, c.feature) <= c.threshold;
        }
        let (ls, rs) = partition(sorted, &go_left);
        let (lg, lh) = Self::sums(&ls[0], g, h);
        let (rg, rh) = Self::sums(&rs[0], g, h);
        let l = nodes.len();
        nodes.push(Node::Leaf(self.leaf_value(lg, lh)));
        nodes.push(Node::Leaf(self.leaf_value(rg, rh)));
        nodes[id] = Node::Split {
            feature: c.feature,
            threshold: c.threshold,
            left: l,
            right: l + 1,
        };
        (l, ls, l + 1, rs)
    }

    /// Fit one tree; leaf values already include the learning rate. The trace
    /// is filled for leaf-wise growth.
    pub fn fit(&self, g: &[f64], h: &[f64]) -> (Tree<f64>, Vec<GrowthStep>) {
        let (gt, ht) = Self::sums(&self.sorted[0], g, h);
        let mut nodes = vec![Node::Leaf(self.leaf_value(gt, ht))];
        let mut trace = Vec::new();
        match self.params.policy {
            GrowthPolicy::LevelWise => {
                let mut frontier = vec![(0usize, self.sorted.clone())];
                for _ in 0..self.params.max_depth {
                    let mut next = Vec::new();
                    for (id, s) in frontier {
                        if let Some(c) = self.best_split(&s, g, h) {
                            let (l, ls, r, rs) = self.split(&mut nodes, id, &s, c, g, h);
                            next.push((l, ls));
                            next.push((r, rs));
                        }
                    }
                    if next.is_empty() {
                        break;
                    }
                    frontier = next;
                }
            }
            GrowthPolicy::LeafWise => {
                let root = self.best_split(&self.sorted, g, h);
                let mut pending: Vec<(usize, Vec<Vec<u32>>, Option<Candidate>)> = vec![(0, self.sorted.clone(), root)];
                let mut leaves = 1;
                while leaves < self.params.max_leaves {
                    let mut pick: Option<usize> = None;
                    for (i, (id, _, c)) in pending.iter().enumerate() {
                        let Some(c) = c else { continue };
                        let better = match pick {
                            None => true,
                            Some(p) => {
                                let (pid, _, pc) = &pending[p];
                                let pg = pc.unwrap().gain;
                                c.gain > pg || (c.gain == pg && id < pid)
                            }
                        };
                        if better {
                            pick = Some(i);
                        }
                    }
                    let Some(p) = pick else { break };
                    let (id, s, c) = pending.swap_remove(p);
                    let c = c.unwrap();
                    trace.push(GrowthStep {
                        node: id,
                        gain: c.gain,
                        frontier_gains: pending.iter().filter_map(|(_, _, c)| c.map(|c| c.gain)).collect(),
                    });
                    let (l, ls, r, rs) = self.split(&mut nodes, id, &s, c, g, h);
                    let lc = self.best_split(&ls, g, h);
                    let rc = self.best_split(&rs, g, h);
                    pending.push((l, ls, lc));
                    pending.push((r, rs, rc));
                    leaves += 1;
                }
            }
        }
        (Tree { nodes }, trace)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub params: GbdtParams,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree<f64>>>,
    /// Mean training cross-entropy after each round.
    pub train_loss: Vec<f64>,
    pub num_classes: usize,
    pub num_features: usize,
}

impl GbdtModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.num_classes];
        for round in &self.trees {
            for (c, t) in round.iter().enumerate() {
                s[c] += *t.predict(x);
            }
        }
        s
    }

    pub fn proba_row(&self, x: &[f64]) -> Vec<f64> {
        softmax_row(&self.scores(x))
    }
}

pub fn train_gbdt(x: &Matrix, y: &[usize], k: usize, params: &GbdtParams) -> Result<GbdtModel> {
    check_training_data(x, y, k)?;
    let builder = RegressionTreeBuilder::new(x, params)?;
    let n = x.rows;
    let mut f = vec![0.0; n * k];
    let mut model = GbdtModel {
        params: *params,
        trees: Vec::with_capacity(params.trees),
        train_loss: Vec::with_capacity(params.trees),
        num_classes: k,
        num_features: x.cols,
    };
    for round in 0..params.trees {
        let p: Vec<Vec<f64>> = (0..n).map(|i| softmax_row(&f[i * k..(i + 1) * k])).collect();
        let trees: Vec<Tree<f64>> = (0..k)
            .into_par_iter()
            .map(|c| {
                let g: Vec<f64> = (0..n).map(|i| p[i][c] - (y[i] == c) as u8 as f64).collect();
                let h: Vec<f64> = (0..n).map(|i| (p[i][c] * (1.0 - p[i][c])).max(1e-16)).collect();
                builder.fit(&g, &h).0
            })
            .collect();
        for i in 0..n {
            for (c, t) in trees.iter().enumerate() {
                f[i * k + c] += *t.predict(x.row(i));
            }
        }
        let loss = (0..n)
            .map(|i| -softmax_row(&f[i * k..(i + 1) * k])[y[i]].max(1e-300).ln())
            .sum::<f64>()
            / n as f64;
        log::debug!("gbdt round {round}: loss {loss:.6}");
        model.trees.push(trees);
        model.train_loss.push(loss);
    }
    Ok(model)
}
