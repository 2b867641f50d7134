//! Multinomial logistic regression trained with full-batch gradient descent.

use super::MlError;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

const MAX_ITERS: usize = 10_000;
const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrModel {
    pub classes: Vec<usize>,
    /// Softmax weights, one row per class.
    pub weights: Array2<f64>,
    pub biases: Vec<f64>,
    pub l2: f64,
}

impl LrModel {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        let k = self.classes.len();
        let mut out = Array2::zeros((x.nrows(), k));
        for (r, row) in x.rows().into_iter().enumerate() {
            for c in 0..k {
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

    /// Softmax probabilities per class.
    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = self.logits(x);
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }
}

pub fn fit(l2: f64, x: &Array2<f64>, y: &[usize], classes: Vec<usize>) -> Result<LrModel, MlError> {
    let n = x.nrows();
    let d = x.ncols();
    let k = classes.len();
    let targets: Vec<usize> = y
        .iter()
        .map(|label| classes.iter().position(|&c| c == *label).unwrap())
        .collect();

    let mut model = LrModel {
        classes,
        weights: Array2::zeros((k, d)),
        biases: vec![0.0; k],
        l2,
    };

    let loss = |m: &LrModel| -> f64 {
        let probs = m.scores(x);
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            nll -= probs[[r, t]].max(1e-300).ln();
        }
        let reg: f64 = m.weights.iter().map(|w| w * w).sum();
        nll / n as f64 + 0.5 * l2 * reg
    };

    let mut step = 1.0;
    let mut prev_loss = loss(&model);
    for _ in 0..MAX_ITERS {
        let probs = model.scores(x);
        let mut gw = Array2::<f64>::zeros((k, d));
        let mut gb = vec![0.0f64; k];
        for (r, row) in x.rows().into_iter().enumerate() {
            for c in 0..k {
                let err = probs[[r, c]] - if targets[r] == c { 1.0 } else { 0.0 };
                gb[c] += err;
                for j in 0..d {
                    gw[[c, j]] += err * row[j];
                }
            }
        }
        let mut grad_norm = 0.0f64;
        for c in 0..k {
            gb[c] /= n as f64;
            grad_norm += gb[c] * gb[c];
            for j in 0..d {
                gw[[c, j]] = gw[[c, j]] / n as f64 + l2 * model.weights[[c, j]];
                grad_norm += gw[[c, j]] * gw[[c, j]];
            }
        }
        if grad_norm.sqrt() < GRAD_TOL {
            return Ok(model);
        }
        // Backtracking: halve the step until the loss decreases.
        loop {
            let mut trial = model.clone();
            for c in 0..k {
                trial.biases[c] -= step * gb[c];
                for j in 0..d {
                    trial.weights[[c, j]] -= step * gw[[c, j]];
                }
            }
            let trial_loss = loss(&trial);
            if trial_loss <= prev_loss || step < 1e-12 {
                model = trial;
                prev_loss = trial_loss;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
    }
    Ok(model)
}
