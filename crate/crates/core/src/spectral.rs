//! Band decomposition and Spectral Power Vector extraction.
//!
//! Convention: unnormalized forward DFT over the 640-sample epoch with a
//! rectangular window; band power is the sum of |X[k]|^2 over one-sided bins
//! (bin 0 excluded, no symmetry doubling) whose frequency f(k) = k * 128 / 640
//! satisfies low <= f(k) < high.

use std::sync::OnceLock;

use ndarray::Array1;
use rustfft::{num_complex::Complex64, FftPlanner};
use thiserror::Error;

use crate::datamodel::{Epoch, EPOCH_SAMPLES, NUM_CHANNELS, SAMPLE_RATE};
use crate::preprocess::{apply_bandpass, design_bandpass, BandpassFilter, BandpassSpec, PreprocessError};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("non-finite input sample")]
    NonFinite,
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// The three analysis bands; together they tile [8, 49) Hz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    Alpha,
    Beta,
    Gamma,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Alpha, Band::Beta, Band::Gamma];

    pub fn range(&self) -> (f64, f64) {
        match self {
            Band::Alpha => (8.0, 13.0),
            Band::Beta => (13.0, 30.0),
            Band::Gamma => (30.0, 49.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Band::Alpha => "alpha",
            Band::Beta => "beta",
            Band::Gamma => "gamma",
        }
    }

    fn filter(&self) -> &'static BandpassFilter {
        static FILTERS: OnceLock<[BandpassFilter; 3]> = OnceLock::new();
        let filters = FILTERS.get_or_init(|| {
            let design = |band: Band| {
                let (low, high) = band.range();
                // Single pass: phase does not affect band power, and a
                // forward-backward pass would square the corner attenuation.
                design_bandpass(
                    &BandpassSpec {
                        low_cut: low,
                        high_cut: high,
                        order: 4,
                        zero_phase: false,
                    },
                    SAMPLE_RATE,
                )
                .expect("fixed band designs are valid")
            };
            [design(Band::Alpha), design(Band::Beta), design(Band::Gamma)]
        });
        match self {
            Band::Alpha => &filters[0],
            Band::Beta => &filters[1],
            Band::Gamma => &filters[2],
        }
    }
}

/// 42-element vector ordered channel-major: [a1, b1, g1, ..., a14, b14, g14].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPowerVector {
    pub values: Array1<f64>,
}

pub const SPV_DIM: usize = NUM_CHANNELS * 3;

/// Unnormalized forward DFT of a real signal.
pub fn dft(signal: &[f64]) -> Vec<Complex64> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(signal.len());
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf
}

/// Sum of |X[k]|^2 over the one-sided bins of `band` after band filtering.
pub fn band_power(channel_signal: &[f64], band: Band) -> Result<f64, SpectralError> {
    if channel_signal.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    let n = channel_signal.len();
    let sig = ndarray::Array2::from_shape_vec((1, n), channel_signal.to_vec()).unwrap();
    let filtered = apply_bandpass(band.filter(), &sig, false)?;
    let filtered: Vec<f64> = filtered.row(0).to_vec();
    let spectrum = dft(&filtered);
    Ok(band_bin_sum(&spectrum, band, n))
}

/// Sum |X[k]|^2 over one-sided band bins of an already computed spectrum.
pub fn band_bin_sum(spectrum: &[Complex64], band: Band, n: usize) -> f64 {
    let (low, high) = band.range();
    let mut total = 0.0;
    for (k, x) in spectrum.iter().enumerate().take(n / 2 + 1).skip(1) {
        let f = k as f64 * SAMPLE_RATE / n as f64;
        if f >= low && f < high {
            total += x.norm_sqr();
        }
    }
    total
}

/// Per-band powers of one channel signal (any length that the band filters
/// accept; 640 for epochs, 128 for movie windows).
pub fn channel_band_powers(channel_signal: &[f64]) -> Result<[f64; 3], SpectralError> {
    let mut out = [0.0; 3];
    for (i, band) in Band::ALL.iter().enumerate() {
        out[i] = band_power(channel_signal, *band)?;
    }
    Ok(out)
}

/// Assemble the 42-D spectral power vector of an epoch, channel-major in
/// layout order.
pub fn spv(epoch: &Epoch) -> Result<SpectralPowerVector, SpectralError> {
    debug_assert_eq!(epoch.data.ncols(), EPOCH_SAMPLES);
    let mut values = Array1::zeros(SPV_DIM);
    for (c, row) in epoch.data.rows().into_iter().enumerate() {
        let sig: Vec<f64> = row.to_vec();
        let powers = channel_band_powers(&sig)?;
        for (b, p) in powers.iter().enumerate() {
            values[c * 3 + b] = *p;
        }
    }
    Ok(SpectralPowerVector { values })
}
