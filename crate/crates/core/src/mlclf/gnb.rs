//! Gaussian naive Bayes (per-class feature means/variances, log-posterior scores).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnbModel {
    pub classes: Vec<usize>,
    /// Per-class feature means, one row per class.
    pub means: Array2<f64>,
    /// Per-class feature variances (population), floored at `VAR_FLOOR`.
    pub variances: Array2<f64>,
    pub log_priors: Vec<f64>,
}

impl GnbModel {
    pub fn input_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let d = self.input_dim();
        let mut out = Array2::zeros((x.nrows(), self.classes.len()));
        for (r, row) in x.rows().into_iter().enumerate() {
            for c in 0..self.classes.len() {
                let mut log_like = self.log_priors[c];
                for j in 0..d {
                    let var = self.variances[[c, j]];
                    let diff = row[j] - self.means[[c, j]];
                    log_like -= 0.5 * ((std::f64::consts::TAU * var).ln() + diff * diff / var);
                }
                out[[r, c]] = log_like;
            }
        }
        out
    }
}

pub fn fit(x: &Array2<f64>, y: &[usize], classes: Vec<usize>) -> GnbModel {
    let d = x.ncols();
    let k = classes.len();
    let mut means = Array2::<f64>::zeros((k, d));
    let mut variances = Array2::<f64>::zeros((k, d));
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
    for (row, &label) in x.rows().into_iter().zip(y) {
        let c = classes.iter().position(|&cl| cl == label).unwrap();
        for j in 0..d {
            let diff = row[j] - means[[c, j]];
            variances[[c, j]] += diff * diff;
        }
    }
    for c in 0..k {
        for j in 0..d {
            variances[[c, j]] = (variances[[c, j]] / counts[c] as f64).max(VAR_FLOOR);
        }
    }
    let n = y.len() as f64;
    let log_priors = counts.iter().map(|&c| (c as f64 / n).ln()).collect();
    GnbModel {
        classes,
        means,
        variances,
        log_priors,
    }
}
