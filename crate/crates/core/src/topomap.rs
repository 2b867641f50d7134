//! Topographic EEG images: Azimuthal Equidistant Projection of the montage,
//! inverse-distance-weighted rasterization of per-electrode band powers, and
//! the 32x32x3 image / 5x32x32x3 movie tensors.

use ndarray::{Array3, Array4};
use thiserror::Error;

use crate::datamodel::{ChannelLayout, Epoch, EPOCH_SAMPLES, NUM_CHANNELS};
use crate::spectral::{channel_band_powers, spv, SpectralError};

/// Image side length in pixels.
pub const GRID: usize = 32;
/// Frames per movie (1 s windows over the 5 s epoch).
pub const MOVIE_FRAMES: usize = 5;
/// Samples per movie window.
pub const WINDOW_SAMPLES: usize = EPOCH_SAMPLES / MOVIE_FRAMES;

#[derive(Debug, Error)]
pub enum TopomapError {
    #[error("electrode {0} is antipodal to the vertex; azimuth undefined")]
    Antipodal(usize),
    #[error("expected {expected} electrode values, got {got}")]
    ValueCount { expected: usize, got: usize },
    #[error("non-finite electrode value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Planar electrode coordinates from the Azimuthal Equidistant Projection
/// about the vertex: radius = great-circle distance from (0,0,1), direction =
/// azimuth in the xy-plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedLayout {
    pub points: Vec<[f64; 2]>,
}

pub fn project_aep(layout: &ChannelLayout) -> Result<ProjectedLayout, TopomapError> {
    let mut points = Vec::with_capacity(layout.len());
    for (i, ch) in layout.channels().iter().enumerate() {
        let [x, y, z] = ch.position;
        let colat = z.clamp(-1.0, 1.0).acos();
        let planar_norm = (x * x + y * y).sqrt();
        if planar_norm < 1e-12 {
            if z < 0.0 {
                return Err(TopomapError::Antipodal(i));
            }
            points.push([0.0, 0.0]);
        } else {
            points.push([colat * x / planar_norm, colat * y / planar_norm]);
        }
    }
    Ok(ProjectedLayout { points })
}

/// The square pixel grid covering the projected montage: centered on the
/// electrode bounding box, half-size = half the larger span plus 10% padding.
#[derive(Debug, Clone, Copy)]
struct GridFrame {
    x0: f64,
    y0: f64,
    step: f64,
}

fn grid_frame(projected: &ProjectedLayout) -> GridFrame {
    let xs: Vec<f64> = projected.points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = projected.points.iter().map(|p| p[1]).collect();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (xmin, xmax) = (min(&xs), max(&xs));
    let (ymin, ymax) = (min(&ys), max(&ys));
    let cx = 0.5 * (xmin + xmax);
    let cy = 0.5 * (ymin + ymax);
    let half = 0.5 * (xmax - xmin).max(ymax - ymin) * 1.1;
    let half = if half > 0.0 { half } else { 1.0 };
    GridFrame {
        x0: cx - half,
        y0: cy - half,
        step: 2.0 * half / (GRID as f64 - 1.0),
    }
}

/// Inverse-distance-weighted (power 2) interpolation of per-electrode values
/// onto the 32x32 grid. A pixel whose center coincides with an electrode
/// (distance < 1e-9) takes that electrode's value exactly.
///
/// Rows index y from top (+y, nasion) to bottom; columns index x left to
/// right.
pub fn rasterize(values: &[f64], projected: &ProjectedLayout) -> Result<[[f64; GRID]; GRID], TopomapError> {
    if values.len() != projected.points.len() {
        return Err(TopomapError::ValueCount {
            expected: projected.points.len(),
            got: values.len(),
        });
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(TopomapError::NonFinite(i));
        }
    }
    let frame = grid_frame(projected);
    let mut out = [[0.0; GRID]; GRID];
    for (row, out_row) in out.iter_mut().enumerate() {
        let py = frame.y0 + (GRID - 1 - row) as f64 * frame.step;
        for (col, pixel) in out_row.iter_mut().enumerate() {
            let px = frame.x0 + col as f64 * frame.step;
            let mut num = 0.0;
            let mut den = 0.0;
            let mut exact = None;
            for (e, p) in projected.points.iter().enumerate() {
                let dx = px - p[0];
                let dy = py - p[1];
                let d = (dx * dx + dy * dy).sqrt();
                if d < 1e-9 {
                    exact = Some(values[e]);
                    break;
                }
                let w = 1.0 / (d * d);
                num += w * values[e];
                den += w;
            }
            *pixel = exact.unwrap_or(num / den);
        }
    }
    Ok(out)
}

/// 32x32x3 band-power image, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EegImage {
    /// height x width x band (alpha, beta, gamma).
    pub data: Array3<f64>,
}

/// 5x32x32x3 movie: frame x height x width x band.
#[derive(Debug, Clone, PartialEq)]
pub struct EegMovie {
    pub data: Array4<f64>,
}

/// Per-band clamp-normalization range, fit on training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandNormalizer {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// When set, powers are compressed with log10(1 + p) before
    /// normalization (and the fitted range is in compressed units).
    pub log_compress: bool,
}

impl BandNormalizer {
    /// Fit the per-band range over per-electrode band powers of the given
    /// training epochs.
    pub fn fit(epochs: &[Epoch], log_compress: bool) -> Result<BandNormalizer, TopomapError> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for epoch in epochs {
            let v = spv(epoch)?;
            for c in 0..NUM_CHANNELS {
                for b in 0..3 {
                    let mut p = v.values[c * 3 + b];
                    if log_compress {
                        p = (1.0 + p).log10();
                    }
                    min[b] = min[b].min(p);
                    max[b] = max[b].max(p);
                }
            }
        }
        if !min.iter().all(|v| v.is_finite()) {
            min = [0.0; 3];
            max = [1.0; 3];
        }
        Ok(BandNormalizer {
            min,
            max,
            log_compress,
        })
    }

    fn apply(&self, band: usize, value: f64) -> f64 {
        let v = if self.log_compress {
            (1.0 + value).log10()
        } else {
            value
        };
        let span = self.max[band] - self.min[band];
        if span <= 0.0 {
            return 0.0;
        }
        ((v - self.min[band]) / span).clamp(0.0, 1.0)
    }
}

fn electrode_band_values(epoch: &Epoch) -> Result<[[f64; NUM_CHANNELS]; 3], TopomapError> {
    let v = spv(epoch)?;
    let mut out = [[0.0; NUM_CHANNELS]; 3];
    for c in 0..NUM_CHANNELS {
        for b in 0..3 {
            out[b][c] = v.values[c * 3 + b];
        }
    }
    Ok(out)
}

fn stack_bands(
    per_band: &[[f64; NUM_CHANNELS]; 3],
    projected: &ProjectedLayout,
    normalizer: &BandNormalizer,
) -> Result<Array3<f64>, TopomapError> {
    let mut data = Array3::zeros((GRID, GRID, 3));
    for (b, values) in per_band.iter().enumerate() {
        let raster = rasterize(values, projected)?;
        for (y, row) in raster.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                data[[y, x, b]] = normalizer.apply(b, v);
            }
        }
    }
    Ok(data)
}

/// Rasterize the three per-band power maps of an epoch and stack them into a
/// 32x32x3 image, clamp-normalized with the fitted per-band range.
pub fn eeg_image(
    epoch: &Epoch,
    projected: &ProjectedLayout,
    normalizer: &BandNormalizer,
) -> Result<EegImage, TopomapError> {
    let per_band = electrode_band_values(epoch)?;
    Ok(EegImage {
        data: stack_bands(&per_band, projected, normalizer)?,
    })
}

/// Five 1 s windows over the (already bandpass-filtered) epoch; per-window
/// band powers are computed on the raw window, then rasterized per band.
pub fn eeg_movie(
    epoch: &Epoch,
    projected: &ProjectedLayout,
    normalizer: &BandNormalizer,
) -> Result<EegMovie, TopomapError> {
    let mut data = Array4::zeros((MOVIE_FRAMES, GRID, GRID, 3));
    for frame in 0..MOVIE_FRAMES {
        let start = frame * WINDOW_SAMPLES;
        let mut per_band = [[0.0; NUM_CHANNELS]; 3];
        for c in 0..NUM_CHANNELS {
            let window: Vec<f64> = epoch
                .data
                .slice(ndarray::s![c, start..start + WINDOW_SAMPLES])
                .to_vec();
            let powers = channel_band_powers(&window)?;
            for b in 0..3 {
                per_band[b][c] = powers[b];
            }
        }
        let plane = stack_bands(&per_band, projected, normalizer)?;
        data.slice_mut(ndarray::s![frame, .., .., ..]).assign(&plane);
    }
    Ok(EegMovie { data })
}
