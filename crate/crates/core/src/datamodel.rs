//! Domain types, electrode geometry and dataset ingestion.
//!
//! The on-disk layout is a JSON manifest pointing at one CSV file per trial
//! (one column per channel, samples in microvolts at 128 Hz).

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of electrodes in the supported montage.
pub const NUM_CHANNELS: usize = 14;
/// Sampling rate in Hz; fixed across the whole pipeline.
pub const SAMPLE_RATE: f64 = 128.0;
/// Samples per 5 s classification epoch.
pub const EPOCH_SAMPLES: usize = 640;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("duplicate trial entry (subject={subject}, emotion={emotion}, trial={trial})")]
    DuplicateTrial {
        subject: String,
        emotion: Emotion,
        trial: u32,
    },
    #[error("signal file {path} not found")]
    MissingFile { path: PathBuf },
    #[error("bad signal shape in {path}: expected {expected} channels, found {found}")]
    ChannelCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("bad sample rate: expected 128 Hz, got {0}")]
    SampleRate(f64),
    #[error("non-finite sample at channel {channel}, sample {sample}")]
    NonFinite { channel: usize, sample: usize },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("header mismatch in {path}: expected channel names in layout order")]
    HeaderMismatch { path: PathBuf },
}

/// Subject cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cohort {
    #[serde(rename = "PD")]
    Pd,
    #[serde(rename = "HC")]
    Hc,
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cohort::Pd => write!(f, "PD"),
            Cohort::Hc => write!(f, "HC"),
        }
    }
}

/// The six induced emotion categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Sadness,
    Happiness,
    Fear,
    Disgust,
    Surprise,
    Anger,
}

impl Emotion {
    pub const ALL: [Emotion; 6] = [
        Emotion::Sadness,
        Emotion::Happiness,
        Emotion::Fear,
        Emotion::Disgust,
        Emotion::Surprise,
        Emotion::Anger,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Emotion::Sadness => "sadness",
            Emotion::Happiness => "happiness",
            Emotion::Fear => "fear",
            Emotion::Disgust => "disgust",
            Emotion::Surprise => "surprise",
            Emotion::Anger => "anger",
        }
    }

    pub fn from_name(name: &str) -> Option<Emotion> {
        Emotion::ALL.iter().copied().find(|e| e.name() == name)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One electrode: label plus position on the unit sphere (head model).
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    /// Unit-norm (x, y, z); +x right ear, +y nasion, +z vertex.
    pub position: [f64; 3],
}

/// Ordered electrode montage. The order is fixed everywhere: feature index i
/// always refers to `channels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    channels: Vec<Channel>,
}

impl ChannelLayout {
    pub fn new(channels: Vec<Channel>) -> ChannelLayout {
        ChannelLayout { channels }
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }
}

/// Spherical linear interpolation between two unit vectors.
fn slerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let omega = dot.clamp(-1.0, 1.0).acos();
    if omega.abs() < 1e-12 {
        return a;
    }
    let sa = ((1.0 - t) * omega).sin() / omega.sin();
    let sb = (t * omega).sin() / omega.sin();
    let v = [
        sa * a[0] + sb * b[0],
        sa * a[1] + sb * b[1],
        sa * a[2] + sb * b[2],
    ];
    normalize(v)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Point on the equatorial 10-20 ring, `alpha` degrees from the front midline,
/// on the left hemisphere (mirror x for the right).
fn ring_left(alpha_deg: f64) -> [f64; 3] {
    let a = alpha_deg.to_radians();
    [-a.sin(), a.cos(), 0.0]
}

fn midline(colat_deg: f64) -> [f64; 3] {
    let c = colat_deg.to_radians();
    [0.0, c.sin(), c.cos()]
}

fn mirror(p: [f64; 3]) -> [f64; 3] {
    [-p[0], p[1], p[2]]
}

/// The 14-electrode montage (AF3, F7, F3, FC5, T7, P7, O1, O2, P8, T8, FC6,
/// F4, F8, AF4) at idealized 10-20 positions on the unit sphere.
///
/// Positions follow the standard spherical 10-20 construction: outer-ring
/// electrodes sit on the equator at 18-degree steps from the front midline;
/// interior electrodes are placed along great-circle arcs between ring and
/// midline electrodes (F3 midway on F7-Fz, AF3 midway on AF7-AFz, FC5 a
/// quarter of the way along FT7-FCz).
pub fn standard_layout() -> ChannelLayout {
    let af7 = ring_left(36.0);
    let f7 = ring_left(54.0);
    let ft7 = ring_left(72.0);
    let t7 = ring_left(90.0);
    let p7 = ring_left(126.0);
    let o1 = ring_left(162.0);
    let afz = midline(67.5);
    let fz = midline(45.0);
    let fcz = midline(22.5);

    let af3 = slerp(af7, afz, 0.5);
    let f3 = slerp(f7, fz, 0.5);
    let fc5 = slerp(ft7, fcz, 0.25);

    let left: [(&str, [f64; 3]); 7] = [
        ("AF3", af3),
        ("F7", f7),
        ("F3", f3),
        ("FC5", fc5),
        ("T7", t7),
        ("P7", p7),
        ("O1", o1),
    ];
    let right_names = ["O2", "P8", "T8", "FC6", "F4", "F8", "AF4"];

    let mut channels: Vec<Channel> = left
        .iter()
        .map(|(name, pos)| Channel {
            name: (*name).to_string(),
            position: *pos,
        })
        .collect();
    // Right hemisphere mirrors the left, listed back-to-front.
    for (i, name) in right_names.iter().enumerate() {
        let src = left[left.len() - 1 - i].1;
        channels.push(Channel {
            name: (*name).to_string(),
            position: mirror(src),
        });
    }
    ChannelLayout { channels }
}

/// One stimulus-viewing recording.
#[derive(Debug, Clone)]
pub struct Trial {
    pub subject_id: String,
    pub cohort: Cohort,
    pub emotion: Emotion,
    pub trial_index: u32,
    /// channels (14) x samples, microvolts.
    pub signal: Array2<f64>,
    pub sample_rate: f64,
}

impl Trial {
    pub fn new(
        subject_id: String,
        cohort: Cohort,
        emotion: Emotion,
        trial_index: u32,
        signal: Array2<f64>,
        sample_rate: f64,
    ) -> Result<Trial, DataError> {
        if signal.nrows() != NUM_CHANNELS {
            return Err(DataError::ChannelCount {
                path: PathBuf::new(),
                expected: NUM_CHANNELS,
                found: signal.nrows(),
            });
        }
        if sample_rate != SAMPLE_RATE {
            return Err(DataError::SampleRate(sample_rate));
        }
        for ((c, s), v) in signal.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFinite { channel: c, sample: s });
            }
        }
        Ok(Trial {
            subject_id,
            cohort,
            emotion,
            trial_index,
            signal,
            sample_rate,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.signal.ncols()
    }
}

/// Labels an epoch inherits from its parent trial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EpochLabels {
    pub subject_id: String,
    pub cohort: Cohort,
    pub emotion: Emotion,
    pub trial_index: u32,
}

/// A 14x640 segment of a trial; the unit of classification.
#[derive(Debug, Clone)]
pub struct Epoch {
    /// 14 x 640, microvolts.
    pub data: Array2<f64>,
    pub labels: EpochLabels,
    /// Start-sample offset within the parent trial.
    pub start_sample: usize,
}

impl Epoch {
    pub fn new(data: Array2<f64>, labels: EpochLabels, start_sample: usize) -> Result<Epoch, DataError> {
        if data.nrows() != NUM_CHANNELS {
            return Err(DataError::ChannelCount {
                path: PathBuf::new(),
                expected: NUM_CHANNELS,
                found: data.nrows(),
            });
        }
        if data.ncols() != EPOCH_SAMPLES {
            return Err(DataError::ManifestParse(format!(
                "epoch must have {} samples, got {}",
                EPOCH_SAMPLES,
                data.ncols()
            )));
        }
        for ((c, s), v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFinite { channel: c, sample: s });
            }
        }
        Ok(Epoch {
            data,
            labels,
            start_sample,
        })
    }
}

/// One manifest row: trial metadata plus the relative path of its signal CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub cohort: Cohort,
    pub emotion: Emotion,
    pub trial: u32,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub trials: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to; set on load, not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn count_by_cohort(&self, cohort: Cohort) -> usize {
        self.trials.iter().filter(|t| t.cohort == cohort).count()
    }

    pub fn count_by_emotion(&self, emotion: Emotion) -> usize {
        self.trials.iter().filter(|t| t.emotion == emotion).count()
    }

    fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for t in &self.trials {
            if !seen.insert((t.subject.clone(), t.emotion, t.trial)) {
                return Err(DataError::DuplicateTrial {
                    subject: t.subject.clone(),
                    emotion: t.emotion,
                    trial: t.trial,
                });
            }
        }
        Ok(())
    }
}

/// Load and validate a dataset manifest. Entry paths are resolved relative to
/// the manifest's directory; each referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::ManifestParse(e.to_string()))?;
    manifest.root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    manifest.validate()?;
    for entry in &manifest.trials {
        let p = manifest.root.join(&entry.path);
        if !p.exists() {
            return Err(DataError::MissingFile { path: p });
        }
    }
    Ok(manifest)
}

/// Load one trial's signal CSV. The header row must list the channel names of
/// `standard_layout` in order; data rows are samples in microvolts.
pub fn load_trial(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Trial, DataError> {
    let path = manifest.root.join(&entry.path);
    let layout = standard_layout();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(|source| DataError::Csv {
            path: path.clone(),
            source,
        })?;
    {
        let headers = reader.headers().map_err(|source| DataError::Csv {
            path: path.clone(),
            source,
        })?;
        if headers.len() != NUM_CHANNELS {
            return Err(DataError::ChannelCount {
                path: path.clone(),
                expected: NUM_CHANNELS,
                found: headers.len(),
            });
        }
        let names = layout.names();
        if headers.iter().zip(names.iter()).any(|(h, n)| h != *n) {
            return Err(DataError::HeaderMismatch { path: path.clone() });
        }
    }
    let mut samples: Vec<f64> = Vec::new();
    let mut n_rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv {
            path: path.clone(),
            source,
        })?;
        if record.len() != NUM_CHANNELS {
            return Err(DataError::ChannelCount {
                path: path.clone(),
                expected: NUM_CHANNELS,
                found: record.len(),
            });
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| DataError::ManifestParse(format!("bad sample value {field:?} in {}", path.display())))?;
            samples.push(v);
        }
        n_rows += 1;
    }
    // CSV rows are time, columns are channels; internal layout is the transpose.
    let by_row = Array2::from_shape_vec((n_rows, NUM_CHANNELS), samples)
        .expect("shape checked per record");
    let signal = by_row.t().to_owned();
    Trial::new(
        entry.subject.clone(),
        entry.cohort,
        entry.emotion,
        entry.trial,
        signal,
        SAMPLE_RATE,
    )
}

/// Write a trial's signal to the CSV trial-signal format.
pub fn write_trial_csv(path: &Path, signal: &Array2<f64>) -> Result<(), DataError> {
    let layout = standard_layout();
    let mut writer = csv::Writer::from_path(path).map_err(|source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    writer
        .write_record(layout.names())
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    for col in signal.columns() {
        let row: Vec<String> = col.iter().map(|v| format!("{v:?}")).collect();
        writer.write_record(&row).map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    writer.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}
