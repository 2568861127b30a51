use serde::{Deserialize, Serialize};

/// Binary tree node. `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node<L> {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(L),
}

/// Flat tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<L> {
    pub nodes: Vec<Node<L>>,
}

impl<L> Tree<L> {
    pub fn leaf(value: L) -> Self {
        Tree {
            nodes: vec![Node::Leaf(value)],
        }
    }

    pub fn predict(&self, x: &[f64]) -> &L {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf(v) => return v,
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }

    pub fn depth(&self) -> usize {
        fn walk<L>(t: &Tree<L>, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
                Node::Leaf(_) => 0,
            }
        }
        walk(self, 0)
    }
}

/// Row indices of every feature column, sorted by value (ties by row).
pub(crate) fn presort(x: &super::Matrix) -> Vec<Vec<u32>> {
    (0..x.cols)
        .map(|j| {
            let mut idx: Vec<u32> = (0..x.rows as u32).collect();
            idx.sort_by(|&a, &b| x.get(a as usize, j).total_cmp(&x.get(b as usize, j)).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Split every sorted column list by the `go_left` mask, keeping order.
pub(crate) fn partition(sorted: &[Vec<u32>], go_left: &[bool]) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    sorted
        .iter()
        .map(|col| col.iter().partition(|&&r| go_left[r as usize]))
        .unzip()
}

pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    // Guard against the midpoint rounding up onto `b`.
    if m < b {
        m
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_routes_left_on_equal() {
        let t = Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                Node::Leaf(1usize),
                Node::Leaf(2usize),
            ],
        };
        assert_eq!(*t.predict(&[0.5]), 1);
        assert_eq!(*t.predict(&[0.6]), 2);
        assert_eq!(t.num_leaves(), 2);
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn midpoint_stays_below_upper() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        assert!(midpoint(a, b) < b);
        assert_eq!(midpoint(0.0, 1.0), 0.5);
    }
}
