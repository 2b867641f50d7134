//! k-nearest-neighbour classifier (Euclidean distance, vote-fraction scores).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub classes: Vec<usize>,
}

impl KnnModel {
    pub fn input_dim(&self) -> usize {
        self.train_x.ncols()
    }

    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.classes.len()));
        for (r, query) in x.rows().into_iter().enumerate() {
            // Distances to every training point; ties break on index.
            let mut dist: Vec<(f64, usize)> = self
                .train_x
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, row)| {
                    let d: f64 = row
                        .iter()
                        .zip(query.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, i)
                })
                .collect();
            dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let k = self.k.min(dist.len());
            for &(_, i) in &dist[..k] {
                let class_idx = self
                    .classes
                    .iter()
                    .position(|&c| c == self.train_y[i])
                    .unwrap();
                out[[r, class_idx]] += 1.0 / k as f64;
            }
            // Deterministic vote tie-break: nudge the class owning the
            // nearest neighbour among tied top classes.
            let max = out.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = (0..self.classes.len())
                .filter(|&c| (out[[r, c]] - max).abs() < 1e-12)
                .collect();
            if tied.len() > 1 {
                for &(_, i) in &dist[..k] {
                    let class_idx = self
                        .classes
                        .iter()
                        .position(|&c| c == self.train_y[i])
                        .unwrap();
                    if tied.contains(&class_idx) {
                        out[[r, class_idx]] += 1e-9;
                        break;
                    }
                }
            }
        }
        out
    }
}

pub fn fit(k: usize, x: &Array2<f64>, y: &[usize], classes: Vec<usize>) -> KnnModel {
    KnnModel {
        k,
        train_x: x.to_owned(),
        train_y: y.to_vec(),
        classes,
    }
}
