//! Amplitude-based epoch rejection, Butterworth bandpass filtering, epoch
//! segmentation and feature-space normalization (z-norm, PCA).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Epoch, EpochLabels, Trial, EPOCH_SAMPLES};

/// Default amplitude threshold for epoch rejection, microvolts.
pub const DEFAULT_OUTLIER_THRESHOLD_UV: f64 = 85.0;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid bandpass spec: {0}")]
    InvalidSpec(String),
    #[error("unstable filter design: pole magnitude {0} >= 1")]
    UnstableDesign(f64),
    #[error("numerical instability: non-finite filter output")]
    NonFiniteOutput,
    #[error("trial too short: {got} samples < {min} required")]
    TooShort { got: usize, min: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("PCA requires at least 2 observations, got {0}")]
    TooFewObservations(usize),
}

/// Bandpass design request.
#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Serialize, Deserialize)]
pub struct BandpassSpec {
    pub low_cut: f64,
    pub high_cut: f64,
    pub order: usize,
    pub zero_phase: bool,
}

impl BandpassSpec {
    /// The pipeline default: 8-49 Hz, order 4, zero phase.
    pub fn broadband() -> BandpassSpec {
        BandpassSpec {
            low_cut: 8.0,
            high_cut: 49.0,
            order: 4,
            zero_phase: true,
        }
    }
}

/// Designed digital Butterworth bandpass filter.
///
/// Holds both the expanded transfer-function coefficients (used for
/// filtering) and the pole/zero form (used for response evaluation).
#[derive(Debug, Clone)]
pub struct BandpassFilter {
    pub spec: BandpassSpec,
    pub sample_rate: f64,
    /// Numerator, b[0] first.
    pub b: Vec<f64>,
    /// Denominator, a[0] = 1.
    pub a: Vec<f64>,
    zeros: Vec<Complex64>,
    poles: Vec<Complex64>,
    gain: f64,
}

impl BandpassFilter {
    /// Magnitude of the frequency response at `freq_hz` (single pass).
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / self.sample_rate;
        let z = Complex64::new(w.cos(), w.sin());
        let mut h = Complex64::new(self.gain, 0.0);
        for zero in &self.zeros {
            h *= z - zero;
        }
        for pole in &self.poles {
            h /= z - pole;
        }
        h.norm()
    }

    /// Number of taps of the expanded transfer function.
    pub fn len(&self) -> usize {
        self.b.len().max(self.a.len())
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Design a digital Butterworth bandpass via the bilinear transform with
/// prewarped band edges, so the -3 dB corners land exactly on
/// `spec.low_cut` and `spec.high_cut`.
pub fn design_bandpass(spec: &BandpassSpec, sample_rate: f64) -> Result<BandpassFilter, PreprocessError> {
    if !(spec.low_cut > 0.0 && spec.low_cut < spec.high_cut && spec.high_cut < sample_rate / 2.0) {
        return Err(PreprocessError::InvalidSpec(format!(
            "need 0 < low ({}) < high ({}) < fs/2 ({})",
            spec.low_cut,
            spec.high_cut,
            sample_rate / 2.0
        )));
    }
    if spec.order < 1 {
        return Err(PreprocessError::InvalidSpec("order must be >= 1".into()));
    }
    let n = spec.order;
    let fs2 = 2.0 * sample_rate;

    // Analog prototype poles on the unit circle, left half plane.
    let proto: Vec<Complex64> = (1..=n)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + n - 1) as f64 / (2 * n) as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect();

    // Prewarped analog band edges.
    let warp = |f: f64| fs2 * (std::f64::consts::PI * f / sample_rate).tan();
    let w1 = warp(spec.low_cut);
    let w2 = warp(spec.high_cut);
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    // Lowpass-to-bandpass: each prototype pole yields a conjugate-ish pair.
    let mut s_poles = Vec::with_capacity(2 * n);
    for p in &proto {
        let ps = p * (bw / 2.0);
        let disc = (ps * ps - w0_sq).sqrt();
        s_poles.push(ps + disc);
        s_poles.push(ps - disc);
    }

    // Bilinear transform; n analog zeros at s=0 map to z=1, the n zeros at
    // infinity map to z=-1.
    let bilinear = |s: Complex64| (Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s);
    let z_poles: Vec<Complex64> = s_poles.iter().map(|&s| bilinear(s)).collect();
    let mut z_zeros = vec![Complex64::new(1.0, 0.0); n];
    z_zeros.extend(vec![Complex64::new(-1.0, 0.0); n]);

    for p in &z_poles {
        if p.norm() >= 1.0 {
            return Err(PreprocessError::UnstableDesign(p.norm()));
        }
    }

    // Normalize unit gain at the (digital image of the) analog center frequency.
    let f_center = sample_rate / std::f64::consts::PI * (w0_sq.sqrt() / fs2).atan();
    let mut filter = BandpassFilter {
        spec: *spec,
        sample_rate,
        b: Vec::new(),
        a: Vec::new(),
        zeros: z_zeros,
        poles: z_poles,
        gain: 1.0,
    };
    let g = filter.magnitude(f_center);
    filter.gain = 1.0 / g;

    filter.b = poly_from_roots(&filter.zeros, filter.gain);
    filter.a = poly_from_roots(&filter.poles, 1.0);
    Ok(filter)
}

/// Expand (s - r_0)(s - r_1)... * gain into real polynomial coefficients,
/// highest order first in z^0 convention (b[0] + b[1] z^-1 + ...).
fn poly_from_roots(roots: &[Complex64], gain: f64) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.iter().map(|c| c.re * gain).collect()
}

/// Direct-form II transposed single-pass IIR filter.
fn lfilter(b: &[f64], a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = b.len().max(a.len());
    let mut bb = b.to_vec();
    let mut aa = a.to_vec();
    bb.resize(n, 0.0);
    aa.resize(n, 0.0);
    let a0 = aa[0];
    for v in bb.iter_mut() {
        *v /= a0;
    }
    for v in aa.iter_mut() {
        *v /= a0;
    }
    let mut state = vec![0.0f64; n - 1];
    let mut y = Vec::with_capacity(x.len());
    for &xi in x {
        let yi = bb[0] * xi + state[0];
        for k in 0..n - 1 {
            let next = if k + 1 < n - 1 { state[k + 1] } else { 0.0 };
            state[k] = bb[k + 1] * xi - aa[k + 1] * yi + next;
        }
        y.push(yi);
    }
    y
}

/// Apply the filter to each channel of `signal` (channels x samples).
///
/// Zero-phase mode runs the filter forward and backward over the signal
/// extended at both ends with odd reflection padding of length
/// 3 x (filter length).
pub fn apply_bandpass(
    filter: &BandpassFilter,
    signal: &Array2<f64>,
    zero_phase: bool,
) -> Result<Array2<f64>, PreprocessError> {
    let mut out = Array2::zeros(signal.raw_dim());
    for (row_idx, row) in signal.rows().into_iter().enumerate() {
        let x: Vec<f64> = row.to_vec();
        let y = if zero_phase {
            filtfilt_channel(filter, &x)?
        } else {
            lfilter(&filter.b, &filter.a, &x)
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::NonFiniteOutput);
        }
        for (col_idx, v) in y.into_iter().enumerate() {
            out[[row_idx, col_idx]] = v;
        }
    }
    Ok(out)
}

fn filtfilt_channel(filter: &BandpassFilter, x: &[f64]) -> Result<Vec<f64>, PreprocessError> {
    let padlen = 3 * filter.len();
    if x.len() <= padlen {
        return Err(PreprocessError::TooShort {
            got: x.len(),
            min: padlen + 1,
        });
    }
    // Odd reflection about the end samples.
    let mut ext = Vec::with_capacity(x.len() + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    let last = *x.last().unwrap();
    for i in 1..=padlen {
        ext.push(2.0 * last - x[x.len() - 1 - i]);
    }
    let mut y = lfilter(&filter.b, &filter.a, &ext);
    y.reverse();
    let mut y = lfilter(&filter.b, &filter.a, &y);
    y.reverse();
    Ok(y[padlen..padlen + x.len()].to_vec())
}

/// Per-trial epoch rejection counts.
#[derive(Debug, Clone, Default)]
pub struct RejectionReport {
    pub kept: usize,
    pub dropped: usize,
    /// Drop count keyed by "subject/emotion/trial".
    pub per_trial: BTreeMap<String, usize>,
}

fn trial_key(labels: &EpochLabels) -> String {
    format!("{}/{}/{}", labels.subject_id, labels.emotion, labels.trial_index)
}

/// Drop every epoch containing a sample with |value| > threshold.
pub fn reject_outlier_epochs(epochs: Vec<Epoch>, threshold_uv: f64) -> (Vec<Epoch>, RejectionReport) {
    let mut report = RejectionReport::default();
    let mut kept = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        if epoch.data.iter().any(|v| v.abs() > threshold_uv) {
            *report.per_trial.entry(trial_key(&epoch.labels)).or_insert(0) += 1;
            report.dropped += 1;
        } else {
            report.kept += 1;
            kept.push(epoch);
        }
    }
    (kept, report)
}

/// Split a trial into non-overlapping 640-sample epochs; the trailing
/// remainder is discarded.
pub fn segment(trial: &Trial) -> Result<Vec<Epoch>, PreprocessError> {
    segment_signal(&trial.signal, &EpochLabels {
        subject_id: trial.subject_id.clone(),
        cohort: trial.cohort,
        emotion: trial.emotion,
        trial_index: trial.trial_index,
    })
}

/// Segment an arbitrary (already filtered) channels x samples signal.
pub fn segment_signal(signal: &Array2<f64>, labels: &EpochLabels) -> Result<Vec<Epoch>, PreprocessError> {
    let n = signal.ncols();
    if n < EPOCH_SAMPLES {
        return Err(PreprocessError::TooShort {
            got: n,
            min: EPOCH_SAMPLES,
        });
    }
    let count = n / EPOCH_SAMPLES;
    let mut epochs = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * EPOCH_SAMPLES;
        let data = signal
            .slice(ndarray::s![.., start..start + EPOCH_SAMPLES])
            .to_owned();
        epochs.push(Epoch {
            data,
            labels: labels.clone(),
            start_sample: start,
        });
    }
    Ok(epochs)
}

/// Standard-deviation floor for constant features.
pub const ZNORM_STD_FLOOR: f64 = 1e-12;

/// Per-feature mean/std model (population convention).
#[derive(Debug, Clone, PartialEq)]
pub struct ZNormModel {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Fit per-column mean and population standard deviation.
pub fn fit_znorm(x: &Array2<f64>) -> Result<ZNormModel, PreprocessError> {
    if x.nrows() == 0 {
        return Err(PreprocessError::EmptyInput);
    }
    let n = x.nrows() as f64;
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let mut var: Array1<f64> = Array1::zeros(x.ncols());
    for row in x.rows() {
        for (j, v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.mapv_inplace(|v| (v / n).sqrt().max(ZNORM_STD_FLOOR));
    Ok(ZNormModel { mean, std: var })
}

pub fn apply_znorm(model: &ZNormModel, x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - model.mean[j]) / model.std[j];
        }
    }
    out
}

/// PCA projection model fit by eigendecomposition of the population
/// covariance. Components carry a deterministic sign: the largest-magnitude
/// entry of each row is positive.
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// rows = principal directions, orthonormal.
    pub components: Array2<f64>,
    /// Explained-variance fraction per retained component.
    pub explained: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub retain: f64,
}

pub fn fit_pca(x: &Array2<f64>, retain: f64) -> Result<PcaModel, PreprocessError> {
    if x.nrows() < 2 {
        return Err(PreprocessError::TooFewObservations(x.nrows()));
    }
    let d = x.ncols();
    let n = x.nrows() as f64;
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = x - &mean;

    let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
    for row in centered.rows() {
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let total = if total <= 0.0 { 1.0 } else { total };

    let mut cum = 0.0;
    let mut k = 0;
    let mut explained = Vec::new();
    for &idx in &order {
        cum += eig.eigenvalues[idx].max(0.0) / total;
        explained.push(eig.eigenvalues[idx].max(0.0) / total);
        k += 1;
        if cum >= retain {
            break;
        }
    }

    let mut components = Array2::zeros((k, d));
    for (row, &idx) in order[..k].iter().enumerate() {
        let col = eig.eigenvectors.column(idx);
        // Deterministic sign: largest-magnitude entry positive.
        let mut max_abs = 0.0;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                sign = if v >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        for (j, &v) in col.iter().enumerate() {
            components[[row, j]] = v * sign;
        }
    }

    Ok(PcaModel {
        mean,
        components,
        explained,
        input_dim: d,
        output_dim: k,
        retain,
    })
}

pub fn apply_pca(model: &PcaModel, x: &Array2<f64>) -> Array2<f64> {
    let centered = x - &model.mean;
    centered.dot(&model.components.t())
}

/// Convenience: one channel as a slice view.
pub fn channel<'a>(signal: &'a Array2<f64>, idx: usize) -> ArrayView1<'a, f64> {
    signal.row(idx)
}
