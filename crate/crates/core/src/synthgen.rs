//! Deterministic synthetic EEG cohort generator.
//!
//! Trials are sums of band-limited Gaussian noise (white noise filtered
//! through the alpha/beta/gamma Butterworth bandpasses) with
//! per-(cohort, emotion, channel-group) gain multipliers, a per-subject
//! seeded gain offset, and a white noise floor. The generator also exposes
//! `oracle_separability`, a Monte-Carlo quadratic-discriminant estimate of
//! the achievable accuracy implied by its own latent parameters, used to
//! calibrate acceptance thresholds.

use crate::datamodel::{
    standard_layout, Cohort, DataError, DatasetManifest, Emotion, ManifestEntry, Trial,
    EPOCH_SAMPLES, NUM_CHANNELS, SAMPLE_RATE,
};
use crate::preprocess::{apply_bandpass, design_bandpass, BandpassFilter, BandpassSpec, PreprocessError};
use crate::spectral::Band;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Named electrode groups of the 14-channel montage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGroup {
    All,
    Frontal,
    Central,
    Posterior,
}

impl ChannelGroup {
    pub fn contains(&self, channel_name: &str) -> bool {
        match self {
            ChannelGroup::All => true,
            ChannelGroup::Frontal => {
                matches!(channel_name, "AF3" | "F7" | "F3" | "AF4" | "F4" | "F8")
            }
            ChannelGroup::Central => matches!(channel_name, "FC5" | "FC6" | "T7" | "T8"),
            ChannelGroup::Posterior => matches!(channel_name, "P7" | "P8" | "O1" | "O2"),
        }
    }
}

/// One multiplicative gain rule. `cohort`/`emotion` of `None` match
/// everything; all matching rules multiply together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRule {
    #[serde(default)]
    pub cohort: Option<Cohort>,
    #[serde(default)]
    pub emotion: Option<Emotion>,
    pub group: ChannelGroup,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GainRule {
    fn band_factor(&self, band: Band) -> f64 {
        match band {
            Band::Alpha => self.alpha,
            Band::Beta => self.beta,
            Band::Gamma => self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectModel {
    /// Standard deviation (uV) of the broadband white noise floor.
    pub noise_floor_uv: f64,
    /// Base standard deviation (uV) of each band component before gains.
    pub band_scale_uv: f64,
    /// Log-normal sigma of the per-subject, per-band gain offset.
    pub subject_jitter: f64,
    pub gains: Vec<GainRule>,
}

impl Default for EffectModel {
    fn default() -> Self {
        EffectModel {
            noise_floor_uv: 2.0,
            band_scale_uv: 6.0,
            subject_jitter: 0.05,
            gains: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub subjects_per_cohort: usize,
    /// Trials per (subject, emotion).
    pub trials_per_emotion: usize,
    pub trial_duration_s: f64,
    pub seed: u64,
    #[serde(default)]
    pub effect: EffectModel,
}

impl CohortSpec {
    /// Dataset with the clinical study's shape: 2 cohorts x 20 subjects x
    /// 6 emotions x 6 trials = 1440 trials.
    pub fn paper_shape(seed: u64) -> CohortSpec {
        CohortSpec {
            subjects_per_cohort: 20,
            trials_per_emotion: 6,
            trial_duration_s: 5.0,
            seed,
            effect: EffectModel::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.subjects_per_cohort == 0 {
            return Err(SynthError::Invalid("subjects_per_cohort must be >= 1".into()));
        }
        if self.trials_per_emotion == 0 {
            return Err(SynthError::Invalid("trials_per_emotion must be >= 1".into()));
        }
        if !(self.trial_duration_s >= 5.0) {
            return Err(SynthError::Invalid(format!(
                "trial_duration_s must be >= 5, got {}",
                self.trial_duration_s
            )));
        }
        if !(self.effect.noise_floor_uv > 0.0) {
            return Err(SynthError::Invalid("noise_floor_uv must be > 0".into()));
        }
        if !(self.effect.band_scale_uv > 0.0) {
            return Err(SynthError::Invalid("band_scale_uv must be > 0".into()));
        }
        if !(self.effect.subject_jitter >= 0.0) {
            return Err(SynthError::Invalid("subject_jitter must be >= 0".into()));
        }
        for rule in &self.effect.gains {
            for band in Band::ALL {
                if !(rule.band_factor(band) > 0.0) {
                    return Err(SynthError::Invalid(format!(
                        "gain rule {rule:?} has a non-positive multiplier"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Product of all matching gain multipliers for a channel/band.
pub fn band_gain(
    effect: &EffectModel,
    cohort: Cohort,
    emotion: Emotion,
    channel_name: &str,
    band: Band,
) -> f64 {
    let mut g = 1.0;
    for rule in &effect.gains {
        let cohort_ok = rule.cohort.is_none_or(|c| c == cohort);
        let emotion_ok = rule.emotion.is_none_or(|e| e == emotion);
        if cohort_ok && emotion_ok && rule.group.contains(channel_name) {
            g *= rule.band_factor(band);
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn subject_seed(master: u64, subject_index: usize) -> u64 {
    splitmix64(master ^ splitmix64(0x5u64 ^ subject_index as u64))
}

fn trial_seed(master: u64, subject_index: usize, emotion_index: usize, trial: usize) -> u64 {
    splitmix64(
        master
            ^ splitmix64(((subject_index as u64) << 32) | ((emotion_index as u64) << 8) | trial as u64),
    )
}

/// Per-subject multiplicative gain offsets, one per band, shared across all
/// of the subject's trials.
fn subject_band_offsets(spec: &CohortSpec, subject_index: usize) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(spec.seed, subject_index));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = [1.0; 3];
    for v in out.iter_mut() {
        *v = (spec.effect.subject_jitter * normal.sample(&mut rng)).exp();
    }
    out
}

// ---------------------------------------------------------------------------
// Signal synthesis
// ---------------------------------------------------------------------------

/// Lead-in samples discarded so filter start-up transients never reach the
/// emitted signal.
const LEAD_IN: usize = 256;

fn band_filter(band: Band) -> Result<BandpassFilter, PreprocessError> {
    let (low, high) = band.range();
    design_bandpass(
        &BandpassSpec {
            low_cut: low,
            high_cut: high,
            order: 4,
            zero_phase: false,
        },
        SAMPLE_RATE,
    )
}

/// Single-pass noise power gain of a filter: the output variance when the
/// input is unit-variance white noise, via numerical integration of |H|^2.
fn noise_power_gain(filter: &BandpassFilter) -> f64 {
    const M: usize = 4096;
    let nyquist = SAMPLE_RATE / 2.0;
    let mut acc = 0.0;
    for k in 0..M {
        let f = (k as f64 + 0.5) / M as f64 * nyquist;
        let h = filter.magnitude(f);
        acc += h * h;
    }
    acc / M as f64
}

struct BandSynth {
    filter: BandpassFilter,
    /// 1/sqrt(power gain): scales filtered unit noise back to unit variance.
    norm: f64,
}

fn band_synths() -> Result<Vec<(Band, BandSynth)>, SynthError> {
    Band::ALL
        .iter()
        .map(|&band| {
            let filter = band_filter(band)?;
            let norm = 1.0 / noise_power_gain(&filter).sqrt();
            Ok((band, BandSynth { filter, norm }))
        })
        .collect()
}

fn synth_trial_signal(
    spec: &CohortSpec,
    synths: &[(Band, BandSynth)],
    cohort: Cohort,
    emotion: Emotion,
    offsets: &[f64; 3],
    seed: u64,
) -> Result<Array2<f64>, SynthError> {
    let n = (spec.trial_duration_s * SAMPLE_RATE).round() as usize;
    let layout = standard_layout();
    let names = layout.names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut signal = Array2::<f64>::zeros((NUM_CHANNELS, n));
    for (bi, (band, synth)) in synths.iter().enumerate() {
        let white =
            Array2::from_shape_fn((NUM_CHANNELS, n + LEAD_IN), |_| normal.sample(&mut rng));
        let filtered = apply_bandpass(&synth.filter, &white, false)?;
        for c in 0..NUM_CHANNELS {
            let scale = spec.effect.band_scale_uv
                * band_gain(&spec.effect, cohort, emotion, names[c], *band)
                * offsets[bi]
                * synth.norm;
            for t in 0..n {
                signal[[c, t]] += scale * filtered[[c, t + LEAD_IN]];
            }
        }
    }
    for c in 0..NUM_CHANNELS {
        for t in 0..n {
            signal[[c, t]] += spec.effect.noise_floor_uv * normal.sample(&mut rng);
        }
    }
    Ok(signal)
}

fn roster(spec: &CohortSpec) -> Vec<(usize, String, Cohort)> {
    let mut out = Vec::new();
    let mut index = 0;
    for (cohort, prefix) in [(Cohort::Pd, "PD"), (Cohort::Hc, "HC")] {
        for s in 0..spec.subjects_per_cohort {
            out.push((index, format!("{prefix}{:02}", s + 1), cohort));
            index += 1;
        }
    }
    out
}

/// Generate the full cohort in memory. Trials appear in roster order
/// (all PD subjects, then all HC), emotions in canonical order.
pub fn generate_trials(spec: &CohortSpec) -> Result<Vec<Trial>, SynthError> {
    spec.validate()?;
    let synths = band_synths()?;
    let mut jobs = Vec::new();
    for (subject_index, subject_id, cohort) in roster(spec) {
        let offsets = subject_band_offsets(spec, subject_index);
        for (ei, &emotion) in Emotion::ALL.iter().enumerate() {
            for trial in 0..spec.trials_per_emotion {
                jobs.push((
                    subject_id.clone(),
                    cohort,
                    emotion,
                    trial as u32,
                    offsets,
                    trial_seed(spec.seed, subject_index, ei, trial),
                ));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(subject_id, cohort, emotion, trial, offsets, seed)| {
            let signal = synth_trial_signal(spec, &synths, cohort, emotion, &offsets, seed)?;
            Ok(Trial::new(subject_id, cohort, emotion, trial, signal, SAMPLE_RATE)?)
        })
        .collect()
}

/// Generate the cohort and write it as `manifest.json` plus one CSV per
/// trial under `trials/`. Byte-identical for identical specs.
pub fn generate(spec: &CohortSpec, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    let trials = generate_trials(spec)?;
    std::fs::create_dir_all(out_dir.join("trials"))?;
    let entries: Vec<ManifestEntry> = trials
        .iter()
        .map(|t| ManifestEntry {
            subject: t.subject_id.clone(),
            cohort: t.cohort,
            emotion: t.emotion,
            trial: t.trial_index,
            path: format!(
                "trials/{}_{}_{:02}.csv",
                t.subject_id,
                t.emotion.name(),
                t.trial_index
            ),
        })
        .collect();
    trials
        .par_iter()
        .zip(&entries)
        .try_for_each(|(trial, entry)| -> Result<(), SynthError> {
            crate::datamodel::write_trial_csv(&out_dir.join(&entry.path), &trial.signal)?;
            Ok(())
        })?;
    let manifest = DatasetManifest {
        version: 1,
        trials: entries,
        root: out_dir.to_path_buf(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Separability oracle
// ---------------------------------------------------------------------------

const ORACLE_GROUPS: [(ChannelGroup, usize); 3] = [
    (ChannelGroup::Frontal, 6),
    (ChannelGroup::Central, 4),
    (ChannelGroup::Posterior, 4),
];
const ORACLE_DIM: usize = 9;
const ORACLE_TRAIN: usize = 4000;
const ORACLE_TEST: usize = 4000;

/// Draw one latent log-band-power feature vector (3 groups x 3 bands) for a
/// cohort, marginalizing over emotions and subject offsets.
fn oracle_draw(spec: &CohortSpec, cohort: Cohort, rng: &mut ChaCha8Rng) -> [f64; ORACLE_DIM] {
    let layout = standard_layout();
    let names = layout.names();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let emotion = Emotion::ALL[rng.gen_range(0..Emotion::ALL.len())];
    let mut offsets = [1.0; 3];
    for v in offsets.iter_mut() {
        *v = (spec.effect.subject_jitter * normal.sample(rng)).exp();
    }
    let epoch_s = EPOCH_SAMPLES as f64 / SAMPLE_RATE;
    let mut out = [0.0; ORACLE_DIM];
    let mut idx = 0;
    for (group, n_ch) in ORACLE_GROUPS {
        for (bi, &band) in Band::ALL.iter().enumerate() {
            let (low, high) = band.range();
            let width = high - low;
            // Mean in-band power over the group's channels: the band
            // component's variance plus the noise floor's share of the band.
            let mut mean_power = 0.0;
            for name in names.iter().filter(|n| group.contains(n)) {
                let sigma = spec.effect.band_scale_uv
                    * band_gain(&spec.effect, cohort, emotion, name, band)
                    * offsets[bi];
                mean_power += sigma * sigma;
            }
            mean_power /= n_ch as f64;
            mean_power += spec.effect.noise_floor_uv.powi(2) * width / (SAMPLE_RATE / 2.0);
            // Chi-square-distributed epoch power estimate: 2*B*T degrees of
            // freedom per channel, pooled over the group's channels.
            let dof = 2.0 * width * epoch_s * n_ch as f64;
            let gamma = Gamma::new(dof / 2.0, 2.0 / dof).unwrap();
            out[idx] = (mean_power * gamma.sample(rng)).ln();
            idx += 1;
        }
    }
    out
}

struct GaussianClass {
    mean: nalgebra::DVector<f64>,
    inv: nalgebra::DMatrix<f64>,
    logdet: f64,
}

fn fit_gaussian(samples: &[[f64; ORACLE_DIM]]) -> GaussianClass {
    let n = samples.len() as f64;
    let mut mean = nalgebra::DVector::zeros(ORACLE_DIM);
    for s in samples {
        for j in 0..ORACLE_DIM {
            mean[j] += s[j];
        }
    }
    mean /= n;
    let mut cov = nalgebra::DMatrix::zeros(ORACLE_DIM, ORACLE_DIM);
    for s in samples {
        for i in 0..ORACLE_DIM {
            for j in 0..ORACLE_DIM {
                cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    cov /= n;
    for i in 0..ORACLE_DIM {
        cov[(i, i)] += 1e-9;
    }
    let chol = cov.clone().cholesky().expect("oracle covariance is SPD");
    let logdet = 2.0 * (0..ORACLE_DIM).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    GaussianClass {
        mean,
        inv: chol.inverse(),
        logdet,
    }
}

impl GaussianClass {
    fn log_density(&self, x: &[f64; ORACLE_DIM]) -> f64 {
        let d = nalgebra::DVector::from_iterator(
            ORACLE_DIM,
            x.iter().enumerate().map(|(j, &v)| v - self.mean[j]),
        );
        -0.5 * (self.logdet + (&d.transpose() * &self.inv * &d)[(0, 0)])
    }
}

/// Monte-Carlo estimate of the accuracy a quadratic discriminant on the
/// generator's true latent band powers achieves for PD vs HC. Deterministic
/// given the spec's seed; all Monte-Carlo draws reuse one seeded stream, so
/// widening a gain gap never decreases the estimate.
pub fn oracle_separability(spec: &CohortSpec) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x0bac1e));
    let cohorts = [Cohort::Pd, Cohort::Hc];
    let train: Vec<Vec<[f64; ORACLE_DIM]>> = cohorts
        .iter()
        .map(|&c| (0..ORACLE_TRAIN).map(|_| oracle_draw(spec, c, &mut rng)).collect())
        .collect();
    let models: Vec<GaussianClass> = train.iter().map(|s| fit_gaussian(s)).collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (ci, &c) in cohorts.iter().enumerate() {
        for _ in 0..ORACLE_TEST {
            let x = oracle_draw(spec, c, &mut rng);
            let pick = if models[0].log_density(&x) >= models[1].log_density(&x) {
                0
            } else {
                1
            };
            if pick == ci {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}
