//! Common Spatial Patterns: spatial filters maximizing the between-class
//! variance ratio, solved by whitening the composite covariance followed by a
//! symmetric eigendecomposition. Features are per-filter log-variances.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::datamodel::{Epoch, NUM_CHANNELS};

/// Floor added inside the log of the variance feature.
pub const CSP_LOG_EPSILON: f64 = 1e-12;

/// Condition-number limit for the composite covariance.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum CspError {
    #[error("no epochs provided for class covariance")]
    NoEpochs,
    #[error("all epochs had zero trace")]
    AllZeroTrace,
    #[error("composite covariance is singular (condition number {0:.3e})")]
    SingularComposite(f64),
    #[error("multiclass CSP requires at least 3 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {0} is empty")]
    EmptyClass(usize),
}

/// Fitted spatial filter bank.
#[derive(Debug, Clone)]
pub struct CspTransform {
    /// rows = spatial filters, unit Euclidean norm.
    pub filters: Array2<f64>,
    /// One eigenvalue of the whitened problem per filter, in [0, 1].
    pub eigenvalues: Vec<f64>,
    /// Human-readable tag for the class pair (or one-vs-rest construction).
    pub class_pair: String,
}

/// 6-element log-variance feature.
#[derive(Debug, Clone, PartialEq)]
pub struct CspFeature {
    pub values: Array1<f64>,
}

/// Mean over epochs of the trace-normalized covariance X X^T / tr(X X^T).
///
/// Zero-trace epochs are skipped (their covariance carries no spatial
/// information); it is an error if every epoch is skipped.
pub fn class_covariance(epochs: &[Epoch]) -> Result<Array2<f64>, CspError> {
    if epochs.is_empty() {
        return Err(CspError::NoEpochs);
    }
    let mut normalized: Vec<Array2<f64>> = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let x = &epoch.data;
        let cov = x.dot(&x.t());
        let trace: f64 = (0..NUM_CHANNELS).map(|i| cov[[i, i]]).sum();
        if trace <= 0.0 {
            continue;
        }
        normalized.push(cov / trace);
    }
    if normalized.is_empty() {
        return Err(CspError::AllZeroTrace);
    }
    // Sum in a canonical order so the result is bitwise independent of the
    // epoch ordering.
    normalized.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let used = normalized.len();
    let mut acc = Array2::<f64>::zeros((NUM_CHANNELS, NUM_CHANNELS));
    for cov in normalized {
        acc += &cov;
    }
    acc /= used as f64;
    // Enforce exact symmetry against accumulation noise.
    for i in 0..NUM_CHANNELS {
        for j in 0..i {
            let v = 0.5 * (acc[[i, j]] + acc[[j, i]]);
            acc[[i, j]] = v;
            acc[[j, i]] = v;
        }
    }
    Ok(acc)
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric eigendecomposition with eigenvalues sorted descending and a
/// stable order.
fn sym_eigen_sorted(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

fn unit_norm_signed(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    let mut max_abs = 0.0;
    let mut sign = 1.0;
    for &v in row.iter() {
        if v.abs() > max_abs {
            max_abs = v.abs();
            sign = if v >= 0.0 { 1.0 } else { -1.0 };
        }
    }
    if sign < 0.0 {
        for v in row.iter_mut() {
            *v = -*v;
        }
    }
}

/// Solve the CSP problem for two fitted class covariances: generalized
/// eigenvectors of (C1, C1 + C2) via whitening. Returns all eigenpairs
/// sorted by eigenvalue descending; filters are rows.
fn solve_csp(c1: &Array2<f64>, c2: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>), CspError> {
    let composite = to_nalgebra(&(c1 + c2));
    let attempt = |comp: &DMatrix<f64>| -> Result<(Vec<f64>, Array2<f64>), CspError> {
        let (comp_vals, comp_vecs) = sym_eigen_sorted(comp);
        let max = comp_vals[0].max(0.0);
        let min = comp_vals[comp_vals.len() - 1];
        if min <= 0.0 || max / min >= MAX_CONDITION {
            return Err(CspError::SingularComposite(if min <= 0.0 {
                f64::INFINITY
            } else {
                max / min
            }));
        }
        // Whitening matrix P = Lambda^{-1/2} U^T so P (C1+C2) P^T = I.
        let n = comp_vals.len();
        let mut p = DMatrix::zeros(n, n);
        for i in 0..n {
            let scale = 1.0 / comp_vals[i].sqrt();
            for j in 0..n {
                p[(i, j)] = comp_vecs[(j, i)] * scale;
            }
        }
        let s = &p * to_nalgebra(c1) * p.transpose();
        let s = (&s + s.transpose()) * 0.5;
        let (vals, vecs) = sym_eigen_sorted(&s);
        // Each whitened eigenvector maps back to a spatial filter row.
        let mut filters = Array2::zeros((n, n));
        for (row, _) in vals.iter().enumerate() {
            let w = vecs.column(row).transpose() * &p;
            let mut buf: Vec<f64> = w.iter().copied().collect();
            unit_norm_signed(&mut buf);
            for (j, v) in buf.iter().enumerate() {
                filters[[row, j]] = *v;
            }
        }
        Ok((vals, filters))
    };
    match attempt(&composite) {
        Ok(out) => Ok(out),
        Err(CspError::SingularComposite(_)) => {
            let trace: f64 = composite.trace();
            let n = composite.nrows();
            let regularized = &composite + DMatrix::identity(n, n) * (1e-8 * trace);
            attempt(&regularized)
        }
        Err(e) => Err(e),
    }
}

/// Fit a binary CSP transform: `pairs` filters for the largest eigenvalues
/// followed by `pairs` for the smallest.
pub fn fit_csp(epochs_a: &[Epoch], epochs_b: &[Epoch], pairs: usize) -> Result<CspTransform, CspError> {
    let c1 = class_covariance(epochs_a)?;
    let c2 = class_covariance(epochs_b)?;
    fit_csp_from_covariances(&c1, &c2, pairs, "a-vs-b")
}

/// Fit from precomputed class covariances.
pub fn fit_csp_from_covariances(
    c1: &Array2<f64>,
    c2: &Array2<f64>,
    pairs: usize,
    tag: &str,
) -> Result<CspTransform, CspError> {
    let (vals, all_filters) = solve_csp(c1, c2)?;
    let n = vals.len();
    let pairs = pairs.min(n / 2);
    let mut filters = Array2::zeros((2 * pairs, n));
    let mut eigenvalues = Vec::with_capacity(2 * pairs);
    for i in 0..pairs {
        filters.row_mut(i).assign(&all_filters.row(i));
        eigenvalues.push(vals[i].clamp(0.0, 1.0));
    }
    for i in 0..pairs {
        let src = n - pairs + i;
        filters.row_mut(pairs + i).assign(&all_filters.row(src));
        eigenvalues.push(vals[src].clamp(0.0, 1.0));
    }
    Ok(CspTransform {
        filters,
        eigenvalues,
        class_pair: tag.to_string(),
    })
}

/// One-vs-rest multiclass CSP: for each class (in the given order), fit that
/// class against the pooled rest and keep the single largest-eigenvalue
/// filter. Filter count equals class count.
pub fn fit_csp_multiclass(epochs_by_class: &[Vec<Epoch>]) -> Result<CspTransform, CspError> {
    if epochs_by_class.len() < 3 {
        return Err(CspError::TooFewClasses(epochs_by_class.len()));
    }
    for (i, class) in epochs_by_class.iter().enumerate() {
        if class.is_empty() {
            return Err(CspError::EmptyClass(i));
        }
    }
    let covs: Vec<Array2<f64>> = epochs_by_class
        .iter()
        .map(|class| class_covariance(class))
        .collect::<Result<_, _>>()?;
    let k = covs.len();
    let mut filters = Array2::zeros((k, NUM_CHANNELS));
    let mut eigenvalues = Vec::with_capacity(k);
    for i in 0..k {
        let mut rest = Array2::<f64>::zeros((NUM_CHANNELS, NUM_CHANNELS));
        for (j, c) in covs.iter().enumerate() {
            if j != i {
                rest += c;
            }
        }
        rest /= (k - 1) as f64;
        let t = fit_csp_from_covariances(&covs[i], &rest, 1, &format!("class{i}-vs-rest"))?;
        filters.row_mut(i).assign(&t.filters.row(0));
        eigenvalues.push(t.eigenvalues[0]);
    }
    Ok(CspTransform {
        filters,
        eigenvalues,
        class_pair: "one-vs-rest".to_string(),
    })
}

/// Log-variance features of a spatially filtered epoch.
pub fn csp_features(transform: &CspTransform, epoch: &Epoch) -> CspFeature {
    let filtered = transform.filters.dot(&epoch.data);
    let n = filtered.ncols() as f64;
    let values = Array1::from_iter(filtered.rows().into_iter().map(|row| {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (var + CSP_LOG_EPSILON).ln()
    }));
    CspFeature { values }
}

/// The objective maximized by the top filter: w C1 w^T / w C2 w^T.
pub fn variance_ratio(w: &Array1<f64>, c1: &Array2<f64>, c2: &Array2<f64>) -> f64 {
    let num = w.dot(&c1.dot(w));
    let den = w.dot(&c2.dot(w));
    num / den
}
