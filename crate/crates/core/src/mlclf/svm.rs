//! Support vector machine trained with a maximal-violating-pair SMO solver.
//!
//! Multiclass problems are handled one-vs-rest; scores are raw decision
//! values, so the argmax picks the most confident binary machine.

use super::MlError;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

const KKT_TOL: f64 = 1e-3;
const MAX_ITERS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Linear,
    /// Gaussian kernel; `gamma = None` means 1 / n_features.
    Rbf { gamma: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub classes: Vec<usize>,
    pub input_dim: usize,
    pub kernel: Kernel,
    /// Resolved RBF gamma (unused for linear kernels).
    pub gamma: f64,
    pub c: f64,
    pub train_x: Array2<f64>,
    /// Signed dual coefficients alpha_i * y_i, one row per one-vs-rest machine.
    pub dual_coef: Array2<f64>,
    pub biases: Vec<f64>,
}

fn kernel_eval(kernel: Kernel, gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    match kernel {
        Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Kernel::Rbf { .. } => {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (-gamma * d2).exp()
        }
    }
}

impl SvmModel {
    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let k = self.classes.len();
        let mut out = Array2::zeros((x.nrows(), k));
        for (r, query) in x.rows().into_iter().enumerate() {
            let q = query.as_slice().unwrap();
            let kvals: Vec<f64> = self
                .train_x
                .rows()
                .into_iter()
                .map(|row| kernel_eval(self.kernel, self.gamma, row.as_slice().unwrap(), q))
                .collect();
            for m in 0..k {
                let mut dec = self.biases[m];
                for (i, &kv) in kvals.iter().enumerate() {
                    dec += self.dual_coef[[m, i]] * kv;
                }
                out[[r, m]] = dec;
            }
        }
        out
    }
}

/// Solve one binary soft-margin dual problem; returns (alpha*y, bias).
fn smo_binary(gram: &Array2<f64>, y: &[f64], c: f64) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut alpha = vec![0.0f64; n];
    // Gradient of the dual objective 0.5 a'Qa - e'a, Q_ij = y_i y_j K_ij.
    let mut grad = vec![-1.0f64; n];
    let mut rho = 0.0;
    for _ in 0..MAX_ITERS {
        // Maximal violating pair over I_up / I_low.
        let mut i_up = usize::MAX;
        let mut m_up = f64::NEG_INFINITY;
        let mut j_low = usize::MAX;
        let mut m_low = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            let in_low = (y[t] < 0.0 && alpha[t] < c) || (y[t] > 0.0 && alpha[t] > 0.0);
            if in_up && v > m_up {
                m_up = v;
                i_up = t;
            }
            if in_low && v < m_low {
                m_low = v;
                j_low = t;
            }
        }
        if i_up == usize::MAX || j_low == usize::MAX || m_up - m_low <= KKT_TOL {
            rho = if i_up == usize::MAX || j_low == usize::MAX {
                0.0
            } else {
                (m_up + m_low) / 2.0
            };
            break;
        }
        let (i, j) = (i_up, j_low);
        let quad = (gram[[i, i]] + gram[[j, j]] - 2.0 * gram[[i, j]]).max(1e-12);
        let delta = (m_up - m_low) / quad;
        let old_ai = alpha[i];
        let old_aj = alpha[j];
        let sum = y[i] * old_ai + y[j] * old_aj;
        alpha[i] = (old_ai + y[i] * delta).clamp(0.0, c);
        alpha[j] = (y[j] * (sum - y[i] * alpha[i])).clamp(0.0, c);
        alpha[i] = (y[i] * (sum - y[j] * alpha[j])).clamp(0.0, c);
        let di = alpha[i] - old_ai;
        let dj = alpha[j] - old_aj;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * gram[[t, i]] * di + y[j] * gram[[t, j]] * dj);
        }
        rho = (m_up + m_low) / 2.0;
    }
    // Prefer the free-vector average for the offset when available.
    let mut free_sum = 0.0;
    let mut free_n = 0usize;
    for t in 0..n {
        if alpha[t] > 1e-12 && alpha[t] < c - 1e-12 {
            free_sum += -y[t] * grad[t];
            free_n += 1;
        }
    }
    if free_n > 0 {
        rho = free_sum / free_n as f64;
    }
    let coef = (0..n).map(|t| alpha[t] * y[t]).collect();
    (coef, rho)
}

pub fn fit(
    c: f64,
    kernel: Kernel,
    x: &Array2<f64>,
    y: &[usize],
    classes: Vec<usize>,
) -> Result<SvmModel, MlError> {
    let n = x.nrows();
    let d = x.ncols();
    let gamma = match kernel {
        Kernel::Rbf { gamma: Some(g) } => {
            if g <= 0.0 {
                return Err(MlError::InvalidHyperparameter("RBF gamma must be > 0".into()));
            }
            g
        }
        Kernel::Rbf { gamma: None } => 1.0 / d as f64,
        Kernel::Linear => 0.0,
    };
    let gram = Array2::from_shape_fn((n, n), |(i, j)| {
        kernel_eval(
            kernel,
            gamma,
            x.row(i).as_slice().unwrap(),
            x.row(j).as_slice().unwrap(),
        )
    });
    let k = classes.len();
    let mut dual_coef = Array2::zeros((k, n));
    let mut biases = Vec::with_capacity(k);
    for (m, &cls) in classes.iter().enumerate() {
        let signed: Vec<f64> = y
            .iter()
            .map(|&label| if label == cls { 1.0 } else { -1.0 })
            .collect();
        let (coef, rho) = smo_binary(&gram, &signed, c);
        for (i, v) in coef.into_iter().enumerate() {
            dual_coef[[m, i]] = v;
        }
        biases.push(-rho);
    }
    Ok(SvmModel {
        classes,
        input_dim: d,
        kernel,
        gamma,
        c,
        train_x: x.to_owned(),
        dual_coef,
        biases,
    })
}
