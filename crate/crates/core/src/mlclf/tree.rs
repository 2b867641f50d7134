//! CART decision tree with Gini impurity and midpoint thresholds.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Class fractions over training rows that reached this leaf.
    Leaf { fractions: Vec<f64> },
    Split {
        feature: usize,
        threshold: f64,
        /// Index of the child taking rows with value < threshold.
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub classes: Vec<usize>,
    pub input_dim: usize,
    pub nodes: Vec<Node>,
}

impl TreeModel {
    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.classes.len()));
        for (r, row) in x.rows().into_iter().enumerate() {
            let mut idx = 0;
            loop {
                match &self.nodes[idx] {
                    Node::Leaf { fractions } => {
                        for (c, &f) in fractions.iter().enumerate() {
                            out[[r, c]] = f;
                        }
                        break;
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        idx = if row[*feature] < *threshold { *left } else { *right };
                    }
                }
            }
        }
        out
    }
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            p * p
        })
        .sum::<f64>()
}

struct Builder<'a> {
    x: &'a Array2<f64>,
    targets: &'a [usize],
    k: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let mut counts = vec![0usize; self.k];
        for &r in rows {
            counts[self.targets[r]] += 1;
        }
        let n = rows.len().max(1) as f64;
        self.nodes.push(Node::Leaf {
            fractions: counts.iter().map(|&c| c as f64 / n).collect(),
        });
        self.nodes.len() - 1
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let mut counts = vec![0usize; self.k];
        for &r in rows {
            counts[self.targets[r]] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || rows.len() < 2 * self.min_leaf {
            return self.leaf(rows);
        }

        // Best split: lowest weighted child impurity; ties break on the
        // lowest feature index, then the lowest threshold.
        let mut best: Option<(f64, usize, f64)> = None;
        let d = self.x.ncols();
        for feature in 0..d {
            let mut vals: Vec<(f64, usize)> = rows
                .iter()
                .map(|&r| (self.x[[r, feature]], self.targets[r]))
                .collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_counts = vec![0usize; self.k];
            let mut right_counts = counts.clone();
            for i in 0..vals.len() - 1 {
                left_counts[vals[i].1] += 1;
                right_counts[vals[i].1] -= 1;
                let n_left = i + 1;
                let n_right = vals.len() - n_left;
                if vals[i].0 == vals[i + 1].0 {
                    continue;
                }
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let impurity = (n_left as f64 * gini(&left_counts, n_left)
                    + n_right as f64 * gini(&right_counts, n_right))
                    / vals.len() as f64;
                let threshold = (vals[i].0 + vals[i + 1].0) / 2.0;
                let better = match best {
                    None => true,
                    Some((bi, bf, bt)) => {
                        impurity < bi - 1e-12
                            || ((impurity - bi).abs() <= 1e-12
                                && (feature < bf || (feature == bf && threshold < bt)))
                    }
                };
                if better {
                    best = Some((impurity, feature, threshold));
                }
            }
        }

        let Some((impurity, feature, threshold)) = best else {
            return self.leaf(rows);
        };
        let parent_impurity = gini(&counts, rows.len());
        if impurity >= parent_impurity - 1e-12 {
            return self.leaf(rows);
        }

        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| self.x[[r, feature]] < threshold);
        // Reserve the split slot before recursing so node order is stable.
        self.nodes.push(Node::Leaf { fractions: vec![] });
        let slot = self.nodes.len() - 1;
        let left = self.build(&left_rows, depth + 1);
        let right = self.build(&right_rows, depth + 1);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

pub fn fit(
    max_depth: Option<usize>,
    min_leaf: usize,
    x: &Array2<f64>,
    y: &[usize],
    classes: Vec<usize>,
) -> TreeModel {
    let targets: Vec<usize> = y
        .iter()
        .map(|label| classes.iter().position(|&c| c == *label).unwrap())
        .collect();
    let mut builder = Builder {
        x,
        targets: &targets,
        k: classes.len(),
        max_depth,
        min_leaf,
        nodes: Vec::new(),
    };
    let rows: Vec<usize> = (0..x.nrows()).collect();
    builder.build(&rows, 0);
    TreeModel {
        classes,
        input_dim: x.ncols(),
        nodes: builder.nodes,
    }
}
