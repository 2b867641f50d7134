//! Task construction, stratified cross-validation, grid search, metrics,
//! and the end-to-end experiment runner.
//!
//! Every fitted transformer (z-norm, PCA, CSP, image normalizer) and every
//! classifier is fit on training-fold epochs only; each fit is recorded in
//! a `FitLog` so leak-freedom is testable, not just intended.

use crate::csp::{csp_features, fit_csp, fit_csp_multiclass, CspError};
use crate::datamodel::{
    load_manifest, load_trial, standard_layout, Cohort, DataError, Emotion, Epoch,
};
use crate::mlclf::{self, ClassifierSpec, MlError};
use crate::neuralnet::{self, build_cnn_with_stride, NetKind, NnError, Tensor, TrainConfig};
use crate::preprocess::{
    apply_bandpass, apply_pca, apply_znorm, design_bandpass, fit_pca, fit_znorm,
    reject_outlier_epochs, segment, BandpassSpec, PreprocessError, DEFAULT_OUTLIER_THRESHOLD_UV,
};
use crate::spectral::{spv, SpectralError};
use crate::topomap::{eeg_image, eeg_movie, project_aep, BandNormalizer, TopomapError};
use ndarray::Array2;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty class {0} after filtering")]
    EmptyClass(String),
    #[error("class {class} has {count} members, fewer than k={k}")]
    ClassTooSmall { class: String, count: usize, k: usize },
    #[error("{subjects} subjects cannot fill {k} subject-level folds")]
    TooFewSubjects { subjects: usize, k: usize },
    #[error("all-zero confusion matrix")]
    AllZeroConfusion,
    #[error("sensitivity/specificity need a binary confusion matrix, got {0} classes")]
    NotBinary(usize),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty grid")]
    EmptyGrid,
    #[error("every grid point failed; first error: {0}")]
    AllGridPointsFailed(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Csp(#[from] CspError),
    #[error(transparent)]
    Topomap(#[from] TopomapError),
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Valence,
    Arousal,
    Emotion6,
    PdVsHc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortFilter {
    #[default]
    Full,
    Pd,
    Hc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionFilter {
    #[default]
    Full,
    Only(Emotion),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default)]
    pub cohort_filter: CohortFilter,
    #[serde(default)]
    pub emotion_filter: EmotionFilter,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            cohort_filter: CohortFilter::Full,
            emotion_filter: EmotionFilter::Full,
        }
    }
}

/// Whether an emotion belongs to the high-valence group.
pub fn is_high_valence(e: Emotion) -> bool {
    matches!(e, Emotion::Happiness | Emotion::Surprise)
}

/// Whether an emotion belongs to the low-arousal group.
pub fn is_low_arousal(e: Emotion) -> bool {
    matches!(e, Emotion::Sadness)
}

/// Epochs selected for a task, with task labels. `indices` point into the
/// original epoch slice; `labels` are class indices into `class_names`
/// (class 0 is the positive class for binary tasks).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub subjects: Vec<String>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Relabel epochs for a task, applying the task's cohort/emotion filter.
pub fn build_task(epochs: &[Epoch], spec: &TaskSpec) -> Result<LabeledSet, EvalError> {
    match spec.kind {
        TaskKind::PdVsHc => {
            if spec.cohort_filter != CohortFilter::Full {
                return Err(EvalError::InvalidTask(
                    "pd_vs_hc takes an emotion filter, not a cohort filter".into(),
                ));
            }
        }
        _ => {
            if spec.emotion_filter != EmotionFilter::Full {
                return Err(EvalError::InvalidTask(format!(
                    "{:?} takes a cohort filter, not an emotion filter",
                    spec.kind
                )));
            }
        }
    }
    let class_names: Vec<String> = match spec.kind {
        TaskKind::Valence => vec!["LV".into(), "HV".into()],
        TaskKind::Arousal => vec!["LA".into(), "HA".into()],
        TaskKind::Emotion6 => Emotion::ALL.iter().map(|e| e.name().to_string()).collect(),
        TaskKind::PdVsHc => vec!["PD".into(), "HC".into()],
    };
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    for (i, epoch) in epochs.iter().enumerate() {
        let keep = match spec.kind {
            TaskKind::PdVsHc => match spec.emotion_filter {
                EmotionFilter::Full => true,
                EmotionFilter::Only(e) => epoch.labels.emotion == e,
            },
            _ => match spec.cohort_filter {
                CohortFilter::Full => true,
                CohortFilter::Pd => epoch.labels.cohort == Cohort::Pd,
                CohortFilter::Hc => epoch.labels.cohort == Cohort::Hc,
            },
        };
        if !keep {
            continue;
        }
        let label = match spec.kind {
            TaskKind::Valence => {
                if is_high_valence(epoch.labels.emotion) {
                    1
                } else {
                    0
                }
            }
            TaskKind::Arousal => {
                if is_low_arousal(epoch.labels.emotion) {
                    0
                } else {
                    1
                }
            }
            TaskKind::Emotion6 => Emotion::ALL
                .iter()
                .position(|&e| e == epoch.labels.emotion)
                .unwrap(),
            TaskKind::PdVsHc => {
                if epoch.labels.cohort == Cohort::Pd {
                    0
                } else {
                    1
                }
            }
        };
        indices.push(i);
        labels.push(label);
        subjects.push(epoch.labels.subject_id.clone());
    }
    let set = LabeledSet {
        indices,
        labels,
        class_names,
        subjects,
    };
    for (c, &count) in set.class_counts().iter().enumerate() {
        if count == 0 {
            return Err(EvalError::EmptyClass(set.class_names[c].clone()));
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Fold planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    EpochLevel,
    SubjectLevel,
}

/// A k-fold partition of labeled-set positions (`0..set.len()`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub mode: FoldMode,
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Training positions for a fold: the complement of its test positions.
    pub fn train_positions(&self, fold: usize) -> Vec<usize> {
        let test = &self.folds[fold];
        let total: usize = self.folds.iter().map(|f| f.len()).sum();
        let mut in_test = vec![false; total];
        for &p in test {
            in_test[p] = true;
        }
        (0..total).filter(|&p| !in_test[p]).collect()
    }
}

/// Stratified k-fold plan, deterministic given seed.
pub fn plan_folds(
    labels: &[usize],
    subjects: &[String],
    class_names: &[String],
    k: usize,
    mode: FoldMode,
    seed: u64,
) -> Result<FoldPlan, EvalError> {
    assert_eq!(labels.len(), subjects.len());
    let mut folds = vec![Vec::new(); k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        FoldMode::EpochLevel => {
            let n_classes = class_names.len();
            for c in 0..n_classes {
                let mut members: Vec<usize> =
                    (0..labels.len()).filter(|&i| labels[i] == c).collect();
                if members.len() < k {
                    return Err(EvalError::ClassTooSmall {
                        class: class_names[c].clone(),
                        count: members.len(),
                        k,
                    });
                }
                members.shuffle(&mut rng);
                for (i, &pos) in members.iter().enumerate() {
                    folds[i % k].push(pos);
                }
            }
        }
        FoldMode::SubjectLevel => {
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in subjects.iter().enumerate() {
                by_subject.entry(s.as_str()).or_default().push(i);
            }
            if by_subject.len() < k {
                return Err(EvalError::TooFewSubjects {
                    subjects: by_subject.len(),
                    k,
                });
            }
            let mut subject_list: Vec<&str> = by_subject.keys().cloned().collect();
            subject_list.shuffle(&mut rng);
            // Greedy balance: each subject goes to the currently smallest fold.
            for s in subject_list {
                let fold = (0..k)
                    .min_by_key(|&f| (folds[f].len(), f))
                    .unwrap();
                folds[fold].extend(&by_subject[s]);
            }
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(FoldPlan {
        k,
        mode,
        seed,
        folds,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Confusion matrix: rows = truth, columns = prediction.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut conf = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        conf[t][p] += 1;
    }
    conf
}

fn conf_total(conf: &[Vec<usize>]) -> usize {
    conf.iter().map(|r| r.iter().sum::<usize>()).sum()
}

/// Class-frequency-weighted mean of per-class F1 scores. Classes with no
/// true members carry weight zero.
pub fn weighted_f1(conf: &[Vec<usize>]) -> Result<f64, EvalError> {
    let n = conf_total(conf);
    if n == 0 {
        return Err(EvalError::AllZeroConfusion);
    }
    let k = conf.len();
    let mut f1 = 0.0;
    for c in 0..k {
        let support: usize = conf[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = conf[c][c];
        let fp: usize = (0..k).filter(|&r| r != c).map(|r| conf[r][c]).sum();
        let fn_ = support - tp;
        let denom = 2 * tp + fp + fn_;
        let class_f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        f1 += support as f64 / n as f64 * class_f1;
    }
    Ok(f1)
}

/// True-positive rate of the positive class (class 0) of a binary matrix.
pub fn sensitivity(conf: &[Vec<usize>]) -> Result<f64, EvalError> {
    if conf.len() != 2 {
        return Err(EvalError::NotBinary(conf.len()));
    }
    if conf_total(conf) == 0 {
        return Err(EvalError::AllZeroConfusion);
    }
    let tp = conf[0][0] as f64;
    let fn_ = conf[0][1] as f64;
    Ok(tp / (tp + fn_))
}

/// True-negative rate of the negative class (class 1) of a binary matrix.
pub fn specificity(conf: &[Vec<usize>]) -> Result<f64, EvalError> {
    if conf.len() != 2 {
        return Err(EvalError::NotBinary(conf.len()));
    }
    if conf_total(conf) == 0 {
        return Err(EvalError::AllZeroConfusion);
    }
    let tn = conf[1][1] as f64;
    let fp = conf[1][0] as f64;
    Ok(tn / (tn + fp))
}

pub fn accuracy(conf: &[Vec<usize>]) -> Result<f64, EvalError> {
    let n = conf_total(conf);
    if n == 0 {
        return Err(EvalError::AllZeroConfusion);
    }
    let correct: usize = (0..conf.len()).map(|c| conf[c][c]).sum();
    Ok(correct as f64 / n as f64)
}

/// Presentation formatting used by the report tables.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} \u{b1} {std:.2}")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Spv,
    Csp,
    Raw,
    Image,
    Movie,
}

impl FeatureKind {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureKind::Spv => "spv",
            FeatureKind::Csp => "csp",
            FeatureKind::Raw => "raw",
            FeatureKind::Image => "image",
            FeatureKind::Movie => "movie",
        }
    }

    fn is_flat(&self) -> bool {
        matches!(self, FeatureKind::Spv | FeatureKind::Csp | FeatureKind::Raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k: usize,
    pub mode: FoldMode,
    pub seed: u64,
}

/// Hyperparameter grid for the CNN models; the cross product of learning
/// rates and dropout rates is searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnGridConfig {
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

impl Default for NnGridConfig {
    fn default() -> Self {
        NnGridConfig {
            learning_rates: vec![1e-3],
            dropouts: vec![0.3],
            max_epochs: 40,
            batch_size: 32,
            patience: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to the dataset manifest (unused when running on in-memory epochs).
    pub manifest: String,
    pub task: TaskSpec,
    pub feature: FeatureKind,
    /// One of knn|svm|gnb|dt|lda|lr|cnn1d|cnn2d|cnn3d.
    pub model: String,
    /// Explicit classical grid; defaults to the family grid when absent.
    #[serde(default)]
    pub grid: Option<Vec<ClassifierSpec>>,
    pub cv: CvConfig,
    /// Variance fraction retained by PCA (classical flat features only).
    #[serde(default)]
    pub pca_retain: Option<f64>,
    #[serde(default)]
    pub nn: Option<NnGridConfig>,
    /// Experimental: build CNNs with convolution stride 3.
    #[serde(default)]
    pub stride3: bool,
}

/// A single candidate model in the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Classical(ClassifierSpec),
    Cnn(NetKind, TrainConfig),
}

impl ModelSpec {
    pub fn desc(&self) -> String {
        match self {
            ModelSpec::Classical(spec) => format!("{spec:?}"),
            ModelSpec::Cnn(kind, cfg) => format!(
                "{}{{lr={}, dropout={}}}",
                kind.name(),
                cfg.learning_rate,
                cfg.dropout
            ),
        }
    }
}

fn cnn_kind_for(model: &str, feature: FeatureKind) -> Result<NetKind, EvalError> {
    match (model, feature) {
        ("cnn1d", FeatureKind::Spv) => Ok(NetKind::Cnn1dSpv),
        ("cnn1d", FeatureKind::Csp) => Ok(NetKind::Cnn1dCsp),
        ("cnn1d", FeatureKind::Raw) => Ok(NetKind::Cnn1dRaw),
        ("cnn2d", FeatureKind::Image) => Ok(NetKind::Cnn2d),
        ("cnn3d", FeatureKind::Movie) => Ok(NetKind::Cnn3d),
        _ => Err(EvalError::InvalidConfig(format!(
            "model {model} is incompatible with feature {}",
            feature.name()
        ))),
    }
}

/// Expand the configured model into the grid of candidates, in declaration
/// order (ties in grid search resolve to the earliest).
pub fn build_grid(config: &ExperimentConfig) -> Result<Vec<ModelSpec>, EvalError> {
    let model = config.model.as_str();
    let grid = match model {
        "knn" | "svm" | "gnb" | "dt" | "lda" | "lr" => {
            if config.pca_retain.is_some() && !config.feature.is_flat() {
                return Err(EvalError::InvalidConfig(
                    "pca_retain requires a flat feature kind (spv|csp|raw)".into(),
                ));
            }
            let specs = match &config.grid {
                Some(specs) => specs.clone(),
                None => ClassifierSpec::default_grid(model),
            };
            for spec in &specs {
                if spec.family() != model {
                    return Err(EvalError::InvalidConfig(format!(
                        "grid entry {spec:?} does not belong to family {model}"
                    )));
                }
            }
            specs.into_iter().map(ModelSpec::Classical).collect()
        }
        "cnn1d" | "cnn2d" | "cnn3d" => {
            if config.pca_retain.is_some() {
                return Err(EvalError::InvalidConfig(
                    "pca_retain is not applicable to CNN models".into(),
                ));
            }
            let kind = cnn_kind_for(model, config.feature)?;
            let nn = config.nn.clone().unwrap_or_default();
            let mut out = Vec::new();
            for &lr in &nn.learning_rates {
                for &dropout in &nn.dropouts {
                    out.push(ModelSpec::Cnn(
                        kind,
                        TrainConfig {
                            learning_rate: lr,
                            dropout,
                            batch_size: nn.batch_size,
                            max_epochs: nn.max_epochs,
                            patience: nn.patience,
                            seed: config.cv.seed,
                            ..TrainConfig::default()
                        },
                    ));
                }
            }
            out
        }
        other => {
            return Err(EvalError::InvalidConfig(format!("unknown model {other}")));
        }
    };
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Fit instrumentation
// ---------------------------------------------------------------------------

/// One fit call: which transformer/model saw which labeled-set positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub grid_index: usize,
    pub fold: usize,
    pub transformer: String,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub records: Vec<FitRecord>,
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Per-class metrics over the aggregate (all-fold) confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisclassRow {
    pub class_name: String,
    pub total: usize,
    pub misclassified: usize,
    pub rate: f64,
    pub most_mispredicted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_desc: String,
    pub class_names: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_sensitivity: Option<f64>,
    pub std_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
    pub std_specificity: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub misclassification: Vec<MisclassRow>,
}

impl EvalReport {
    fn from_folds(
        model_desc: String,
        class_names: Vec<String>,
        folds: Vec<FoldResult>,
    ) -> EvalReport {
        let f1s: Vec<f64> = folds.iter().map(|f| f.weighted_f1).collect();
        let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let (mean_f1, std_f1) = mean_std(&f1s);
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        let binary = class_names.len() == 2;
        let (mean_sensitivity, std_sensitivity, mean_specificity, std_specificity) = if binary {
            let sens: Vec<f64> = folds.iter().filter_map(|f| f.sensitivity).collect();
            let spec: Vec<f64> = folds.iter().filter_map(|f| f.specificity).collect();
            let (ms, ss) = mean_std(&sens);
            let (mp, sp) = mean_std(&spec);
            (Some(ms), Some(ss), Some(mp), Some(sp))
        } else {
            (None, None, None, None)
        };
        // Aggregate confusion over folds for the misclassification table.
        let k = class_names.len();
        let mut total_conf = vec![vec![0usize; k]; k];
        for f in &folds {
            for r in 0..k {
                for c in 0..k {
                    total_conf[r][c] += f.confusion[r][c];
                }
            }
        }
        let per_class = (0..k)
            .map(|c| {
                let support: usize = total_conf[c].iter().sum();
                let tp = total_conf[c][c];
                let predicted: usize = (0..k).map(|r| total_conf[r][c]).sum();
                let precision = if predicted == 0 {
                    0.0
                } else {
                    tp as f64 / predicted as f64
                };
                let recall = if support == 0 {
                    0.0
                } else {
                    tp as f64 / support as f64
                };
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    class_name: class_names[c].clone(),
                    support,
                    precision,
                    recall,
                    f1,
                }
            })
            .collect();
        let misclassification = (0..k)
            .map(|c| {
                let total: usize = total_conf[c].iter().sum();
                let misclassified = total - total_conf[c][c];
                let most = (0..k)
                    .filter(|&p| p != c && total_conf[c][p] > 0)
                    .max_by_key(|&p| (total_conf[c][p], std::cmp::Reverse(p)))
                    .map(|p| class_names[p].clone());
                MisclassRow {
                    class_name: class_names[c].clone(),
                    total,
                    misclassified,
                    rate: if total == 0 {
                        0.0
                    } else {
                        misclassified as f64 / total as f64
                    },
                    most_mispredicted: most,
                }
            })
            .collect();
        EvalReport {
            model_desc,
            class_names,
            folds,
            mean_f1,
            std_f1,
            mean_accuracy,
            std_accuracy,
            mean_sensitivity,
            std_sensitivity,
            mean_specificity,
            std_specificity,
            per_class,
            misclassification,
        }
    }

    /// Table-style one-line summary: "0.93 ± 0.02".
    pub fn f1_summary(&self) -> String {
        format_mean_std(self.mean_f1, self.std_f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointResult {
    pub desc: String,
    pub mean_f1: Option<f64>,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub best_index: usize,
    pub grid: Vec<GridPointResult>,
    pub fit_log: FitLog,
}

impl ExperimentOutcome {
    pub fn best(&self) -> &EvalReport {
        self.grid[self.best_index].report.as_ref().unwrap()
    }
}

// ---------------------------------------------------------------------------
// Feature extraction (per fold, leak-free)
// ---------------------------------------------------------------------------

struct FoldFeatures {
    item_shape: Vec<usize>,
    train: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
}

fn flatten_epoch_time_major(epoch: &Epoch) -> Vec<f64> {
    // [time][channel] layout matching the raw CNN input shape [640, 14].
    let mut out = Vec::with_capacity(epoch.data.len());
    for t in 0..epoch.data.ncols() {
        for c in 0..epoch.data.nrows() {
            out.push(epoch.data[[c, t]]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn extract_features(
    epochs: &[Epoch],
    set: &LabeledSet,
    train_pos: &[usize],
    test_pos: &[usize],
    feature: FeatureKind,
    n_classes: usize,
    log: &mut Vec<FitRecord>,
    grid_index: usize,
    fold: usize,
) -> Result<FoldFeatures, EvalError> {
    let train_epochs: Vec<&Epoch> = train_pos.iter().map(|&p| &epochs[set.indices[p]]).collect();
    let test_epochs: Vec<&Epoch> = test_pos.iter().map(|&p| &epochs[set.indices[p]]).collect();
    let record = |name: &str, log: &mut Vec<FitRecord>| {
        log.push(FitRecord {
            grid_index,
            fold,
            transformer: name.to_string(),
            positions: train_pos.to_vec(),
        });
    };
    match feature {
        FeatureKind::Spv => {
            let f = |e: &Epoch| -> Result<Vec<f64>, EvalError> { Ok(spv(e)?.values.to_vec()) };
            let train = train_epochs.iter().map(|e| f(e)).collect::<Result<_, _>>()?;
            let test = test_epochs.iter().map(|e| f(e)).collect::<Result<_, _>>()?;
            Ok(FoldFeatures {
                item_shape: vec![42, 1],
                train,
                test,
            })
        }
        FeatureKind::Raw => {
            let train = train_epochs
                .iter()
                .map(|e| flatten_epoch_time_major(e))
                .collect();
            let test = test_epochs
                .iter()
                .map(|e| flatten_epoch_time_major(e))
                .collect();
            Ok(FoldFeatures {
                item_shape: vec![640, 14],
                train,
                test,
            })
        }
        FeatureKind::Csp => {
            let mut by_class: Vec<Vec<Epoch>> = vec![Vec::new(); n_classes];
            for &p in train_pos {
                by_class[set.labels[p]].push(epochs[set.indices[p]].clone());
            }
            let transform = if n_classes == 2 {
                fit_csp(&by_class[0], &by_class[1], 3)?
            } else {
                fit_csp_multiclass(&by_class)?
            };
            record("csp", log);
            let f = |e: &Epoch| csp_features(&transform, e).values.to_vec();
            let train = train_epochs.iter().map(|e| f(e)).collect();
            let test = test_epochs.iter().map(|e| f(e)).collect();
            Ok(FoldFeatures {
                item_shape: vec![transform.filters.nrows(), 1],
                train,
                test,
            })
        }
        FeatureKind::Image | FeatureKind::Movie => {
            let owned_train: Vec<Epoch> = train_epochs.iter().map(|e| (*e).clone()).collect();
            let normalizer = BandNormalizer::fit(&owned_train, true)?;
            record("band_normalizer", log);
            let projected = project_aep(&standard_layout())?;
            let image_of = |e: &Epoch| -> Result<Vec<f64>, EvalError> {
                Ok(match feature {
                    FeatureKind::Image => eeg_image(e, &projected, &normalizer)?
                        .data
                        .as_slice()
                        .unwrap()
                        .to_vec(),
                    _ => eeg_movie(e, &projected, &normalizer)?
                        .data
                        .as_slice()
                        .unwrap()
                        .to_vec(),
                })
            };
            let train = train_epochs
                .iter()
                .map(|e| image_of(e))
                .collect::<Result<_, _>>()?;
            let test = test_epochs
                .iter()
                .map(|e| image_of(e))
                .collect::<Result<_, _>>()?;
            let item_shape = match feature {
                FeatureKind::Image => vec![32, 32, 3],
                _ => vec![5, 32, 32, 3],
            };
            Ok(FoldFeatures {
                item_shape,
                train,
                test,
            })
        }
    }
}

fn to_matrix(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
}

/// Stratified split of training positions into (inner-train, validation)
/// for CNN early stopping. Classes with a single member stay in train.
fn validation_split(
    labels: &[usize],
    train_pos: &[usize],
    n_classes: usize,
    frac: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inner = Vec::new();
    let mut val = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = train_pos
            .iter()
            .cloned()
            .filter(|&p| labels[p] == c)
            .collect();
        if members.len() < 2 {
            inner.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64 * frac).ceil() as usize)
            .max(1)
            .min(members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        inner.extend_from_slice(&members[n_val..]);
    }
    inner.sort_unstable();
    val.sort_unstable();
    (inner, val)
}

#[allow(clippy::too_many_arguments)]
fn eval_fold(
    epochs: &[Epoch],
    set: &LabeledSet,
    plan: &FoldPlan,
    fold: usize,
    feature: FeatureKind,
    model: &ModelSpec,
    stride3: bool,
    pca_retain: Option<f64>,
    grid_index: usize,
) -> Result<(FoldResult, Vec<FitRecord>), EvalError> {
    let mut log = Vec::new();
    let test_pos = plan.folds[fold].clone();
    let train_pos = plan.train_positions(fold);
    let n_classes = set.class_names.len();
    let feats = extract_features(
        epochs, set, &train_pos, &test_pos, feature, n_classes, &mut log, grid_index, fold,
    )?;
    let dim: usize = feats.item_shape.iter().product();
    let truth: Vec<usize> = test_pos.iter().map(|&p| set.labels[p]).collect();
    let train_y: Vec<usize> = train_pos.iter().map(|&p| set.labels[p]).collect();

    let pred: Vec<usize> = match model {
        ModelSpec::Classical(spec) => {
            let mut x_train = to_matrix(&feats.train, dim);
            let mut x_test = to_matrix(&feats.test, dim);
            let znorm = fit_znorm(&x_train)?;
            log.push(FitRecord {
                grid_index,
                fold,
                transformer: "znorm".into(),
                positions: train_pos.clone(),
            });
            x_train = apply_znorm(&znorm, &x_train);
            x_test = apply_znorm(&znorm, &x_test);
            if let Some(retain) = pca_retain {
                let pca = fit_pca(&x_train, retain)?;
                log.push(FitRecord {
                    grid_index,
                    fold,
                    transformer: "pca".into(),
                    positions: train_pos.clone(),
                });
                x_train = apply_pca(&pca, &x_train);
                x_test = apply_pca(&pca, &x_test);
            }
            let trained = mlclf::train(spec, &x_train, &train_y)?;
            log.push(FitRecord {
                grid_index,
                fold,
                transformer: format!("classifier:{}", spec.family()),
                positions: train_pos.clone(),
            });
            trained.predict(&x_test)?
        }
        ModelSpec::Cnn(kind, base_config) => {
            let mut train_rows = feats.train.clone();
            let mut test_rows = feats.test.clone();
            if feature.is_flat() {
                let mut x_train = to_matrix(&train_rows, dim);
                let mut x_test = to_matrix(&test_rows, dim);
                let znorm = fit_znorm(&x_train)?;
                log.push(FitRecord {
                    grid_index,
                    fold,
                    transformer: "znorm".into(),
                    positions: train_pos.clone(),
                });
                x_train = apply_znorm(&znorm, &x_train);
                x_test = apply_znorm(&znorm, &x_test);
                train_rows = x_train.rows().into_iter().map(|r| r.to_vec()).collect();
                test_rows = x_test.rows().into_iter().map(|r| r.to_vec()).collect();
            }
            let fold_seed = base_config
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(((grid_index as u64) << 32) | fold as u64);
            let (inner_pos, val_pos) =
                validation_split(&set.labels, &train_pos, n_classes, 0.1, fold_seed ^ 0x7a1e);
            let pos_to_row: BTreeMap<usize, usize> = train_pos
                .iter()
                .enumerate()
                .map(|(row, &p)| (p, row))
                .collect();
            let gather = |positions: &[usize]| -> (Tensor, Vec<usize>) {
                let rows: Vec<&[f64]> = positions
                    .iter()
                    .map(|p| train_rows[pos_to_row[p]].as_slice())
                    .collect();
                let y = positions.iter().map(|&p| set.labels[p]).collect();
                (Tensor::from_items(&feats.item_shape, &rows), y)
            };
            let (x_inner, y_inner) = gather(&inner_pos);
            let (x_val, y_val) = gather(&val_pos);
            let net_classes = if n_classes == 2 { 2 } else { 6 };
            let stride = if stride3 { 3 } else { 1 };
            let spec = build_cnn_with_stride(*kind, net_classes, stride)?;
            let mut config = base_config.clone();
            config.seed = fold_seed;
            let trained = neuralnet::train(&spec, &x_inner, &y_inner, &x_val, &y_val, &config)?;
            log.push(FitRecord {
                grid_index,
                fold,
                transformer: format!("cnn:{}", kind.name()),
                positions: train_pos.clone(),
            });
            let test_refs: Vec<&[f64]> = test_rows.iter().map(|r| r.as_slice()).collect();
            let x_test = Tensor::from_items(&feats.item_shape, &test_refs);
            let mut network = trained.network;
            network.predict(&x_test)?
        }
    };

    let conf = confusion_matrix(&truth, &pred, n_classes);
    let binary = n_classes == 2;
    Ok((
        FoldResult {
            fold,
            accuracy: accuracy(&conf)?,
            weighted_f1: weighted_f1(&conf)?,
            sensitivity: if binary { Some(sensitivity(&conf)?) } else { None },
            specificity: if binary { Some(specificity(&conf)?) } else { None },
            confusion: conf,
        },
        log,
    ))
}

/// Evaluate one grid point across all folds (folds run in parallel; results
/// are reduced in fold order, so the output is independent of thread count).
pub fn evaluate_grid_point(
    epochs: &[Epoch],
    set: &LabeledSet,
    plan: &FoldPlan,
    feature: FeatureKind,
    model: &ModelSpec,
    stride3: bool,
    pca_retain: Option<f64>,
    grid_index: usize,
) -> Result<(EvalReport, Vec<FitRecord>), EvalError> {
    let per_fold: Vec<Result<(FoldResult, Vec<FitRecord>), EvalError>> = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            eval_fold(
                epochs, set, plan, fold, feature, model, stride3, pca_retain, grid_index,
            )
        })
        .collect();
    let mut folds = Vec::with_capacity(plan.k);
    let mut log = Vec::new();
    for r in per_fold {
        let (fr, fl) = r?;
        folds.push(fr);
        log.extend(fl);
    }
    Ok((
        EvalReport::from_folds(model.desc(), set.class_names.clone(), folds),
        log,
    ))
}

/// Run a full experiment on already-preprocessed epochs.
pub fn run_experiment_on_epochs(
    epochs: &[Epoch],
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome, EvalError> {
    let set = build_task(epochs, &config.task)?;
    let plan = plan_folds(
        &set.labels,
        &set.subjects,
        &set.class_names,
        config.cv.k,
        config.cv.mode,
        config.cv.seed,
    )?;
    let grid = build_grid(config)?;
    let mut results = Vec::with_capacity(grid.len());
    let mut fit_log = FitLog::default();
    let mut first_error: Option<String> = None;
    for (gi, model) in grid.iter().enumerate() {
        match evaluate_grid_point(
            epochs,
            &set,
            &plan,
            config.feature,
            model,
            config.stride3,
            config.pca_retain,
            gi,
        ) {
            Ok((report, log)) => {
                fit_log.records.extend(log);
                results.push(GridPointResult {
                    desc: model.desc(),
                    mean_f1: Some(report.mean_f1),
                    error: None,
                    report: Some(report),
                });
            }
            Err(e) => {
                let msg = e.to_string();
                if first_error.is_none() {
                    first_error = Some(msg.clone());
                }
                results.push(GridPointResult {
                    desc: model.desc(),
                    mean_f1: None,
                    error: Some(msg),
                    report: None,
                });
            }
        }
    }
    // Best = max mean weighted F1; strict comparison keeps declaration order
    // on ties.
    let mut best_index = None;
    for (i, r) in results.iter().enumerate() {
        if let Some(f1) = r.mean_f1 {
            if best_index.is_none_or(|b: usize| f1 > results[b].mean_f1.unwrap()) {
                best_index = Some(i);
            }
        }
    }
    let best_index = best_index
        .ok_or_else(|| EvalError::AllGridPointsFailed(first_error.unwrap_or_default()))?;
    Ok(ExperimentOutcome {
        config: config.clone(),
        class_names: set.class_names.clone(),
        class_counts: set.class_counts(),
        best_index,
        grid: results,
        fit_log,
    })
}

/// Load a manifest, preprocess every trial (segment, 85 uV outlier
/// rejection on raw amplitudes, zero-phase 8-49 Hz bandpass), and return
/// the surviving epochs.
pub fn load_and_preprocess(manifest_path: &Path) -> Result<Vec<Epoch>, EvalError> {
    let manifest = load_manifest(manifest_path)?;
    let mut epochs = Vec::new();
    for entry in &manifest.trials {
        let trial = load_trial(&manifest, entry)?;
        epochs.extend(segment(&trial)?);
    }
    let (kept, _report) = reject_outlier_epochs(epochs, DEFAULT_OUTLIER_THRESHOLD_UV);
    let filter = design_bandpass(&BandpassSpec::broadband(), crate::datamodel::SAMPLE_RATE)?;
    let filtered: Vec<Result<Epoch, EvalError>> = kept
        .into_par_iter()
        .map(|epoch| {
            Ok(Epoch {
                data: apply_bandpass(&filter, &epoch.data, true)?,
                labels: epoch.labels.clone(),
                start_sample: epoch.start_sample,
            })
        })
        .collect();
    filtered.into_iter().collect()
}

/// End-to-end experiment from a config file's manifest path.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, EvalError> {
    let epochs = load_and_preprocess(Path::new(&config.manifest))?;
    run_experiment_on_epochs(&epochs, config)
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Write folds.csv, misclassification.csv, report.json and charts.svg into
/// `dir`. Byte-identical for identical outcomes.
pub fn write_reports(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let best = outcome.best();

    let mut folds_csv = String::from("fold,accuracy,weighted_f1,sensitivity,specificity\n");
    for f in &best.folds {
        folds_csv.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            f.fold,
            f.accuracy,
            f.weighted_f1,
            fmt_opt(f.sensitivity),
            fmt_opt(f.specificity),
        ));
    }
    folds_csv.push_str(&format!(
        "summary,{},{},{},{}\n",
        format_mean_std(best.mean_accuracy, best.std_accuracy),
        format_mean_std(best.mean_f1, best.std_f1),
        best.mean_sensitivity
            .map(|m| format_mean_std(m, best.std_sensitivity.unwrap()))
            .unwrap_or_default(),
        best.mean_specificity
            .map(|m| format_mean_std(m, best.std_specificity.unwrap()))
            .unwrap_or_default(),
    ));
    std::fs::File::create(dir.join("folds.csv"))?.write_all(folds_csv.as_bytes())?;

    let mut mis_csv = String::from("class,total,misclassified,rate,most_mispredicted\n");
    for row in &best.misclassification {
        mis_csv.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            row.class_name,
            row.total,
            row.misclassified,
            row.rate,
            row.most_mispredicted.clone().unwrap_or_default(),
        ));
    }
    std::fs::File::create(dir.join("misclassification.csv"))?.write_all(mis_csv.as_bytes())?;

    let json = serde_json::to_vec_pretty(outcome).expect("outcome serializes");
    std::fs::File::create(dir.join("report.json"))?.write_all(&json)?;

    std::fs::File::create(dir.join("charts.svg"))?
        .write_all(render_svg_chart(best).as_bytes())?;
    Ok(())
}

/// Simple deterministic bar chart of per-fold weighted F1 with summary
/// lines for F1 / sensitivity / specificity.
fn render_svg_chart(report: &EvalReport) -> String {
    let n = report.folds.len();
    let bar_w = 40.0;
    let gap = 10.0;
    let height = 260.0;
    let chart_h = 200.0;
    let width = 60.0 + n as f64 * (bar_w + gap);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"10\" y=\"16\" font-size=\"12\">weighted F1 per fold; mean {}</text>\n",
        report.f1_summary()
    ));
    for (i, f) in report.folds.iter().enumerate() {
        let h = f.weighted_f1.clamp(0.0, 1.0) * chart_h;
        let x = 50.0 + i as f64 * (bar_w + gap);
        let y = 30.0 + (chart_h - h);
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"#4477aa\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>\n",
            x + 10.0,
            245.0,
            f.fold
        ));
    }
    if let (Some(sens), Some(spec)) = (report.mean_sensitivity, report.mean_specificity) {
        s.push_str(&format!(
            "<text x=\"10\" y=\"258\" font-size=\"10\">sensitivity {sens:.4}; specificity {spec:.4}</text>\n"
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{EpochLabels, EPOCH_SAMPLES, NUM_CHANNELS, SAMPLE_RATE};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal};

    fn synth_epoch(
        subject: &str,
        cohort: Cohort,
        emotion: Emotion,
        trial: u32,
        seed: u64,
    ) -> Epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        // Emotion-dependent beta-band tone gives tasks some real signal.
        let tone_hz = 12.0 + 3.0 * Emotion::ALL.iter().position(|&e| e == emotion).unwrap() as f64;
        let gain = if cohort == Cohort::Pd { 2.0 } else { 1.0 };
        let data = Array2::from_shape_fn((NUM_CHANNELS, EPOCH_SAMPLES), |(c, t)| {
            let phase = std::f64::consts::TAU * tone_hz * t as f64 / SAMPLE_RATE;
            gain * (phase + c as f64).sin() + 0.3 * noise.sample(&mut rng)
        });
        Epoch {
            data,
            labels: EpochLabels {
                subject_id: subject.to_string(),
                cohort,
                emotion,
                trial_index: trial,
            },
            start_sample: 0,
        }
    }

    /// One epoch per (subject, emotion) for the given subjects.
    fn balanced_epochs(pd_subjects: &[&str], hc_subjects: &[&str], per_cell: usize) -> Vec<Epoch> {
        let mut out = Vec::new();
        let mut seed = 0u64;
        for (subjects, cohort) in [(pd_subjects, Cohort::Pd), (hc_subjects, Cohort::Hc)] {
            for &s in subjects.iter() {
                for &e in Emotion::ALL.iter() {
                    for t in 0..per_cell {
                        seed += 1;
                        out.push(synth_epoch(s, cohort, e, t as u32, seed));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn valence_task_has_one_to_two_ratio() {
        let epochs = balanced_epochs(&["p1"], &["h1"], 2);
        let set = build_task(&epochs, &TaskSpec::new(TaskKind::Valence)).unwrap();
        assert_eq!(set.class_names, vec!["LV".to_string(), "HV".to_string()]);
        let counts = set.class_counts();
        // 4 low-valence emotions vs 2 high-valence emotions.
        assert_eq!(counts[1] * 2, counts[0]);
        assert_eq!(set.len(), epochs.len());
    }

    #[test]
    fn arousal_task_has_five_to_one_ratio() {
        let epochs = balanced_epochs(&["p1"], &["h1"], 2);
        let set = build_task(&epochs, &TaskSpec::new(TaskKind::Arousal)).unwrap();
        assert_eq!(set.class_names, vec!["LA".to_string(), "HA".to_string()]);
        let counts = set.class_counts();
        assert_eq!(counts[0] * 5, counts[1]);
    }

    #[test]
    fn emotion6_labels_follow_canonical_order() {
        let epochs = balanced_epochs(&["p1"], &[], 1);
        let set = build_task(&epochs, &TaskSpec::new(TaskKind::Emotion6)).unwrap();
        assert_eq!(set.class_names.len(), 6);
        for (pos, &label) in set.labels.iter().enumerate() {
            let emotion = epochs[set.indices[pos]].labels.emotion;
            assert_eq!(Emotion::ALL[label], emotion);
        }
    }

    #[test]
    fn pd_vs_hc_puts_pd_first_and_honors_emotion_filter() {
        let epochs = balanced_epochs(&["p1"], &["h1"], 1);
        let spec = TaskSpec {
            kind: TaskKind::PdVsHc,
            cohort_filter: CohortFilter::Full,
            emotion_filter: EmotionFilter::Only(Emotion::Sadness),
        };
        let set = build_task(&epochs, &spec).unwrap();
        assert_eq!(set.class_names, vec!["PD".to_string(), "HC".to_string()]);
        assert_eq!(set.len(), 2);
        for (pos, &label) in set.labels.iter().enumerate() {
            let epoch = &epochs[set.indices[pos]];
            assert_eq!(epoch.labels.emotion, Emotion::Sadness);
            assert_eq!(label == 0, epoch.labels.cohort == Cohort::Pd);
        }
    }

    #[test]
    fn cohort_filter_restricts_emotion_tasks() {
        let epochs = balanced_epochs(&["p1"], &["h1"], 1);
        let spec = TaskSpec {
            kind: TaskKind::Valence,
            cohort_filter: CohortFilter::Pd,
            emotion_filter: EmotionFilter::Full,
        };
        let set = build_task(&epochs, &spec).unwrap();
        assert_eq!(set.len(), 6);
        assert!(set.subjects.iter().all(|s| s == "p1"));
    }

    #[test]
    fn mismatched_filters_are_rejected() {
        let epochs = balanced_epochs(&["p1"], &["h1"], 1);
        let bad = TaskSpec {
            kind: TaskKind::Valence,
            cohort_filter: CohortFilter::Full,
            emotion_filter: EmotionFilter::Only(Emotion::Anger),
        };
        assert!(matches!(
            build_task(&epochs, &bad),
            Err(EvalError::InvalidTask(_))
        ));
        let bad = TaskSpec {
            kind: TaskKind::PdVsHc,
            cohort_filter: CohortFilter::Pd,
            emotion_filter: EmotionFilter::Full,
        };
        assert!(matches!(
            build_task(&epochs, &bad),
            Err(EvalError::InvalidTask(_))
        ));
    }

    #[test]
    fn epoch_folds_are_stratified_and_evenly_sized() {
        // 100 of class 0, 200 of class 1; each of 10 folds gets 10 + 20.
        let labels: Vec<usize> = (0..300).map(|i| usize::from(i >= 100)).collect();
        let subjects: Vec<String> = (0..300).map(|i| format!("s{i}")).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let plan = plan_folds(&labels, &subjects, &names, 10, FoldMode::EpochLevel, 7).unwrap();
        let mut seen = vec![false; 300];
        for fold in &plan.folds {
            assert_eq!(fold.len(), 30);
            assert_eq!(fold.iter().filter(|&&p| labels[p] == 0).count(), 10);
            assert_eq!(fold.iter().filter(|&&p| labels[p] == 1).count(), 20);
            for &p in fold {
                assert!(!seen[p], "position {p} appears in two folds");
                seen[p] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // Deterministic given the seed, different for another seed.
        let again = plan_folds(&labels, &subjects, &names, 10, FoldMode::EpochLevel, 7).unwrap();
        assert_eq!(plan, again);
        let other = plan_folds(&labels, &subjects, &names, 10, FoldMode::EpochLevel, 8).unwrap();
        assert_ne!(plan.folds, other.folds);
    }

    #[test]
    fn subject_folds_keep_subjects_disjoint() {
        let mut labels = Vec::new();
        let mut subjects = Vec::new();
        for s in 0..9 {
            for i in 0..8 {
                labels.push(usize::from(i % 2 == 0));
                subjects.push(format!("subj{s}"));
            }
        }
        let names = vec!["a".to_string(), "b".to_string()];
        let plan =
            plan_folds(&labels, &subjects, &names, 3, FoldMode::SubjectLevel, 11).unwrap();
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        for (f, fold) in plan.folds.iter().enumerate() {
            for &p in fold {
                let subject = subjects[p].as_str();
                let prev = owner.insert(subject, f);
                assert!(prev.is_none_or(|pf| pf == f), "{subject} spans folds");
            }
        }
        // Greedy balancing: 9 subjects x 8 epochs over 3 folds = 24 each.
        for fold in &plan.folds {
            assert_eq!(fold.len(), 24);
        }
    }

    #[test]
    fn fold_planning_rejects_impossible_splits() {
        let names = vec!["a".to_string(), "b".to_string()];
        let labels = vec![0, 0, 0, 1, 1];
        let subjects: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        assert!(matches!(
            plan_folds(&labels, &subjects, &names, 3, FoldMode::EpochLevel, 0),
            Err(EvalError::ClassTooSmall { .. })
        ));
        let one_subject = vec!["s".to_string(); 5];
        assert!(matches!(
            plan_folds(&labels, &one_subject, &names, 2, FoldMode::SubjectLevel, 0),
            Err(EvalError::TooFewSubjects { .. })
        ));
    }

    #[test]
    fn metric_oracle_matches_hand_computation() {
        // Worked example: [[40, 10], [5, 45]] with class 0 positive.
        let conf = vec![vec![40usize, 10], vec![5, 45]];
        assert_abs_diff_eq!(sensitivity(&conf).unwrap(), 0.80, epsilon = 1e-12);
        assert_abs_diff_eq!(specificity(&conf).unwrap(), 0.90, epsilon = 1e-12);
        assert_abs_diff_eq!(accuracy(&conf).unwrap(), 0.85, epsilon = 1e-12);
        // F1_0 = 2*40/(2*40 + 5 + 10) = 16/19; F1_1 = 2*45/(2*45 + 10 + 5) = 6/7.
        let expected = 0.5 * (16.0 / 19.0 + 6.0 / 7.0);
        assert_abs_diff_eq!(weighted_f1(&conf).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(
            weighted_f1(&conf).unwrap(),
            0.8496240601503759,
            epsilon = 1e-12
        );
    }

    #[test]
    fn confusion_f1_matches_per_sample_computation() {
        // Cross-check: weighted F1 from the confusion matrix equals the
        // value computed directly from per-sample predictions.
        let truth = vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let pred = vec![0, 1, 0, 1, 1, 2, 2, 2, 0, 2];
        let conf = confusion_matrix(&truth, &pred, 3);
        let mut direct = 0.0;
        let n = truth.len() as f64;
        for c in 0..3 {
            let support = truth.iter().filter(|&&t| t == c).count();
            let tp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == c && p == c)
                .count() as f64;
            let fp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t != c && p == c)
                .count() as f64;
            let fn_ = support as f64 - tp;
            let denom = 2.0 * tp + fp + fn_;
            let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
            direct += support as f64 / n * f1;
        }
        assert_abs_diff_eq!(weighted_f1(&conf).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn per_class_metrics_agree_with_aggregate_confusion() {
        let epochs = balanced_epochs(&["p1", "p2"], &["h1", "h2"], 1);
        let config = quick_config("gnb", FeatureKind::Spv);
        let outcome = run_experiment_on_epochs(&epochs, &config).unwrap();
        let best = outcome.best();
        assert_eq!(best.per_class.len(), 2);
        let mut total = vec![vec![0usize; 2]; 2];
        for f in &best.folds {
            for r in 0..2 {
                for c in 0..2 {
                    total[r][c] += f.confusion[r][c];
                }
            }
        }
        for (c, m) in best.per_class.iter().enumerate() {
            assert_eq!(m.support, total[c].iter().sum::<usize>());
            let predicted: usize = (0..2).map(|r| total[r][c]).sum();
            if predicted > 0 {
                assert_abs_diff_eq!(
                    m.precision,
                    total[c][c] as f64 / predicted as f64,
                    epsilon = 1e-12
                );
            }
            assert_abs_diff_eq!(
                m.recall,
                total[c][c] as f64 / m.support as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn degenerate_confusion_matrices_are_rejected() {
        let zero = vec![vec![0usize, 0], vec![0, 0]];
        assert!(matches!(weighted_f1(&zero), Err(EvalError::AllZeroConfusion)));
        assert!(matches!(sensitivity(&zero), Err(EvalError::AllZeroConfusion)));
        let three = vec![vec![1usize; 3]; 3];
        assert!(matches!(sensitivity(&three), Err(EvalError::NotBinary(3))));
        assert!(matches!(specificity(&three), Err(EvalError::NotBinary(3))));
        assert!(weighted_f1(&three).is_ok());
    }

    #[test]
    fn confusion_matrix_counts_truth_rows() {
        let conf = confusion_matrix(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2);
        assert_eq!(conf, vec![vec![1, 1], vec![1, 2]]);
    }

    #[test]
    fn mean_std_formatting_uses_two_decimals() {
        assert_eq!(format_mean_std(0.93, 0.024), "0.93 \u{b1} 0.02");
        assert_eq!(format_mean_std(1.0, 0.0), "1.00 \u{b1} 0.00");
    }

    #[test]
    fn aggregation_matches_population_moments() {
        let values = [0.8, 0.9, 1.0, 0.7];
        let (mean, std) = mean_std(&values);
        assert_abs_diff_eq!(mean, 0.85, epsilon = 1e-12);
        let var = values.iter().map(|v| (v - 0.85) * (v - 0.85)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(std, var.sqrt(), epsilon = 1e-12);
    }

    fn quick_config(model: &str, feature: FeatureKind) -> ExperimentConfig {
        ExperimentConfig {
            manifest: String::new(),
            task: TaskSpec::new(TaskKind::PdVsHc),
            feature,
            model: model.to_string(),
            grid: None,
            cv: CvConfig {
                k: 3,
                mode: FoldMode::EpochLevel,
                seed: 42,
            },
            pca_retain: None,
            nn: None,
            stride3: false,
        }
    }

    #[test]
    fn classical_experiment_is_deterministic_and_leak_free() {
        let epochs = balanced_epochs(&["p1", "p2"], &["h1", "h2"], 1);
        let config = quick_config("gnb", FeatureKind::Spv);
        let outcome = run_experiment_on_epochs(&epochs, &config).unwrap();
        let again = run_experiment_on_epochs(&epochs, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&outcome).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        // The synthetic cohorts differ in gain, so PD vs HC should be easy.
        assert!(outcome.best().mean_f1 > 0.9, "f1 = {}", outcome.best().mean_f1);
        // Every recorded fit used only training positions for its fold.
        let set = build_task(&epochs, &config.task).unwrap();
        let plan = plan_folds(
            &set.labels,
            &set.subjects,
            &set.class_names,
            config.cv.k,
            config.cv.mode,
            config.cv.seed,
        )
        .unwrap();
        assert!(!outcome.fit_log.records.is_empty());
        for record in &outcome.fit_log.records {
            let test: &Vec<usize> = &plan.folds[record.fold];
            for p in &record.positions {
                assert!(!test.contains(p), "fit saw test position {p}");
            }
            assert_eq!(record.positions, plan.train_positions(record.fold));
        }
    }

    #[test]
    fn grid_search_prefers_best_mean_f1_and_reports_failures() {
        let epochs = balanced_epochs(&["p1", "p2"], &["h1", "h2"], 1);
        let mut config = quick_config("knn", FeatureKind::Spv);
        config.grid = Some(vec![
            ClassifierSpec::Knn { k: 1 },
            ClassifierSpec::Knn { k: 3 },
            ClassifierSpec::Knn { k: 5 },
        ]);
        let outcome = run_experiment_on_epochs(&epochs, &config).unwrap();
        assert_eq!(outcome.grid.len(), 3);
        let best_f1 = outcome.grid[outcome.best_index].mean_f1.unwrap();
        for point in &outcome.grid {
            assert!(point.mean_f1.unwrap() <= best_f1);
        }
        // Ties resolve to the earliest declaration.
        let first_at_max = outcome
            .grid
            .iter()
            .position(|p| p.mean_f1.unwrap() == best_f1)
            .unwrap();
        assert_eq!(outcome.best_index, first_at_max);
    }

    #[test]
    fn all_failing_grid_points_surface_an_error() {
        let epochs = balanced_epochs(&["p1"], &["h1"], 1);
        let mut config = quick_config("knn", FeatureKind::Spv);
        // k = 0 is an invalid hyperparameter, so every grid point fails.
        config.grid = Some(vec![ClassifierSpec::Knn { k: 0 }]);
        assert!(matches!(
            run_experiment_on_epochs(&epochs, &config),
            Err(EvalError::AllGridPointsFailed(_))
        ));
    }

    #[test]
    fn incompatible_model_feature_pairs_are_rejected() {
        let config = quick_config("cnn2d", FeatureKind::Spv);
        assert!(matches!(build_grid(&config), Err(EvalError::InvalidConfig(_))));
        let mut config = quick_config("gnb", FeatureKind::Image);
        config.pca_retain = Some(0.95);
        assert!(matches!(build_grid(&config), Err(EvalError::InvalidConfig(_))));
        let config = quick_config("mlp", FeatureKind::Spv);
        assert!(matches!(build_grid(&config), Err(EvalError::InvalidConfig(_))));
    }

    #[test]
    fn pca_is_fit_inside_each_training_fold() {
        let epochs = balanced_epochs(&["p1", "p2"], &["h1", "h2"], 1);
        let mut config = quick_config("lda", FeatureKind::Spv);
        config.pca_retain = Some(0.99);
        let outcome = run_experiment_on_epochs(&epochs, &config).unwrap();
        let pca_fits: Vec<_> = outcome
            .fit_log
            .records
            .iter()
            .filter(|r| r.transformer == "pca")
            .collect();
        assert_eq!(pca_fits.len(), config.cv.k);
        let folds: std::collections::BTreeSet<usize> =
            pca_fits.iter().map(|r| r.fold).collect();
        assert_eq!(folds.len(), config.cv.k);
    }

    #[test]
    fn cnn_grid_point_trains_and_predicts() {
        let epochs = balanced_epochs(&["p1", "p2"], &["h1", "h2"], 1);
        let mut config = quick_config("cnn1d", FeatureKind::Csp);
        config.cv.k = 2;
        config.nn = Some(NnGridConfig {
            learning_rates: vec![1e-3],
            dropouts: vec![0.3],
            max_epochs: 3,
            batch_size: 8,
            patience: 2,
        });
        let outcome = run_experiment_on_epochs(&epochs, &config).unwrap();
        let best = outcome.best();
        assert_eq!(best.folds.len(), 2);
        for fold in &best.folds {
            assert_eq!(conf_total(&fold.confusion), 12);
        }
        // CSP and the network itself must both be fold-scoped fits.
        for name in ["csp", "znorm"] {
            assert!(outcome
                .fit_log
                .records
                .iter()
                .any(|r| r.transformer == name));
        }
        assert!(outcome
            .fit_log
            .records
            .iter()
            .any(|r| r.transformer.starts_with("cnn:")));
    }

    #[test]
    fn validation_split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let train_pos: Vec<usize> = (0..40).collect();
        let (inner, val) = validation_split(&labels, &train_pos, 2, 0.1, 5);
        assert_eq!(inner.len() + val.len(), 40);
        for c in 0..2 {
            assert_eq!(val.iter().filter(|&&p| labels[p] == c).count(), 2);
        }
        let overlap = inner.iter().any(|p| val.contains(p));
        assert!(!overlap);
        // Single-member classes stay in the training side.
        let (inner, val) = validation_split(&[0, 1, 1, 1], &[0, 1, 2, 3], 2, 0.1, 5);
        assert!(inner.contains(&0));
        assert_eq!(val.iter().filter(|&&p| p == 0).count(), 0);
    }

    #[test]
    fn reports_are_written_and_byte_stable() {
        let epochs = balanced_epochs(&["p1", "p2"], &["h1", "h2"], 1);
        let config = quick_config("gnb", FeatureKind::Spv);
        let outcome = run_experiment_on_epochs(&epochs, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_reports(&outcome, dir.path()).unwrap();
        let mut bytes = BTreeMap::new();
        for name in ["report.json", "folds.csv", "misclassification.csv", "charts.svg"] {
            let b = std::fs::read(dir.path().join(name)).unwrap();
            assert!(!b.is_empty(), "{name} is empty");
            bytes.insert(name, b);
        }
        let folds_csv = String::from_utf8(bytes["folds.csv"].clone()).unwrap();
        assert!(folds_csv.starts_with("fold,accuracy,weighted_f1"));
        assert!(folds_csv.contains('\u{b1}'));
        write_reports(&outcome, dir.path()).unwrap();
        for (name, b) in &bytes {
            assert_eq!(&std::fs::read(dir.path().join(name)).unwrap(), b, "{name}");
        }
        let parsed: ExperimentOutcome =
            serde_json::from_slice(&bytes["report.json"]).unwrap();
        assert_eq!(parsed.best_index, outcome.best_index);
    }

    #[test]
    fn misclassification_table_accounts_for_every_error() {
        let epochs = balanced_epochs(&["p1"], &["h1"], 2);
        let mut config = quick_config("gnb", FeatureKind::Spv);
        config.task = TaskSpec::new(TaskKind::Emotion6);
        config.cv.k = 2;
        let outcome = run_experiment_on_epochs(&epochs, &config).unwrap();
        let best = outcome.best();
        assert_eq!(best.misclassification.len(), 6);
        let total_err: usize = best
            .misclassification
            .iter()
            .map(|r| r.misclassified)
            .sum();
        let conf_err: usize = best
            .folds
            .iter()
            .map(|f| {
                conf_total(&f.confusion)
                    - (0..6).map(|c| f.confusion[c][c]).sum::<usize>()
            })
            .sum();
        assert_eq!(total_err, conf_err);
        for row in &best.misclassification {
            if row.misclassified > 0 {
                assert!(row.most_mispredicted.is_some());
            }
            assert_abs_diff_eq!(
                row.rate,
                row.misclassified as f64 / row.total as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn fold_seed_changes_fold_assignment_but_not_metric_semantics() {
        let epochs = balanced_epochs(&["p1", "p2"], &["h1", "h2"], 1);
        let mut a = quick_config("gnb", FeatureKind::Spv);
        let mut b = quick_config("gnb", FeatureKind::Spv);
        a.cv.seed = 1;
        b.cv.seed = 2;
        let oa = run_experiment_on_epochs(&epochs, &a).unwrap();
        let ob = run_experiment_on_epochs(&epochs, &b).unwrap();
        // Both runs score the same task; per-fold counts match even though
        // assignments differ.
        for (fa, fb) in oa.best().folds.iter().zip(&ob.best().folds) {
            assert_eq!(conf_total(&fa.confusion), conf_total(&fb.confusion));
        }
    }

}
