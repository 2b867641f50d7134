//! Linear discriminant analysis with a pooled covariance matrix.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

const SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub classes: Vec<usize>,
    /// Linear discriminant weights, one row per class.
    pub weights: Array2<f64>,
    /// Per-class offsets: -0.5 mu' Sigma^-1 mu + ln prior.
    pub biases: Vec<f64>,
}

impl LdaModel {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.classes.len()));
        for (r, row) in x.rows().into_iter().enumerate() {
            for c in 0..self.classes.len() {
                let dot: f64 = self
                    .weights
                    .row(c)
                    .iter()
                    .zip(row.iter())
                    .map(|(w, v)| w * v)
                    .sum();
                out[[r, c]] = dot + self.biases[c];
            }
        }
        out
    }
}

pub fn fit(x: &Array2<f64>, y: &[usize], classes: Vec<usize>) -> LdaModel {
    let n = x.nrows();
    let d = x.ncols();
    let k = classes.len();

    let mut means = Array2::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &label) in x.rows().into_iter().zip(y) {
        let c = classes.iter().position(|&cl| cl == label).unwrap();
        counts[c] += 1;
        for j in 0..d {
            means[[c, j]] += row[j];
        }
    }
    for c in 0..k {
        for j in 0..d {
            means[[c, j]] /= counts[c] as f64;
        }
    }

    // Pooled within-class covariance (population normalization).
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (row, &label) in x.rows().into_iter().zip(y) {
        let c = classes.iter().position(|&cl| cl == label).unwrap();
        for a in 0..d {
            let da = row[a] - means[[c, a]];
            for b in 0..d {
                let db = row[b] - means[[c, b]];
                cov[(a, b)] += da * db;
            }
        }
    }
    cov /= n as f64;
    let trace = cov.trace().max(f64::MIN_POSITIVE);
    for i in 0..d {
        cov[(i, i)] += SHRINKAGE * trace;
    }
    let inv = cov
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::identity(d, d));

    let mut weights = Array2::zeros((k, d));
    let mut biases = Vec::with_capacity(k);
    for c in 0..k {
        let mu = DMatrix::from_fn(d, 1, |i, _| means[[c, i]]);
        let w = &inv * &mu;
        for j in 0..d {
            weights[[c, j]] = w[(j, 0)];
        }
        let quad = (mu.transpose() * &w)[(0, 0)];
        let prior = counts[c] as f64 / n as f64;
        biases.push(-0.5 * quad + prior.ln());
    }
    LdaModel {
        classes,
        weights,
        biases,
    }
}
