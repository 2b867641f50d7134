//! The six classical classifiers behind one train/predict interface.
//!
//! All solvers are implemented in-repo: the models are tiny and deterministic
//! training makes runs reproducible byte-for-byte.

mod gnb;
mod knn;
mod lda;
mod lr;
mod svm;
mod tree;

pub use gnb::GnbModel;
pub use knn::KnnModel;
pub use lda::LdaModel;
pub use lr::LrModel;
pub use svm::{Kernel, SvmModel};
pub use tree::TreeModel;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("training needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("training needs at least 2 distinct labels")]
    DegenerateLabels,
    #[error("label/row count mismatch: {rows} rows, {labels} labels")]
    LabelMismatch { rows: usize, labels: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("solver failed to converge: {0}")]
    NoConvergence(String),
}

/// Classifier kind plus validated hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClassifierSpec {
    Knn { k: usize },
    Svm { c: f64, kernel: Kernel },
    Gnb,
    Dt { max_depth: Option<usize>, min_leaf: usize },
    Lda,
    Lr { l2: f64 },
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<(), MlError> {
        match self {
            ClassifierSpec::Knn { k } if *k == 0 => {
                Err(MlError::InvalidHyperparameter("kNN k must be >= 1".into()))
            }
            ClassifierSpec::Svm { c, .. } if *c <= 0.0 => {
                Err(MlError::InvalidHyperparameter("SVM C must be > 0".into()))
            }
            ClassifierSpec::Dt { min_leaf, .. } if *min_leaf == 0 => {
                Err(MlError::InvalidHyperparameter("DT min_leaf must be >= 1".into()))
            }
            ClassifierSpec::Lr { l2 } if *l2 < 0.0 => {
                Err(MlError::InvalidHyperparameter("LR l2 must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Short name for reports.
    pub fn family(&self) -> &'static str {
        match self {
            ClassifierSpec::Knn { .. } => "knn",
            ClassifierSpec::Svm { .. } => "svm",
            ClassifierSpec::Gnb => "gnb",
            ClassifierSpec::Dt { .. } => "dt",
            ClassifierSpec::Lda => "lda",
            ClassifierSpec::Lr { .. } => "lr",
        }
    }

    /// The default hyperparameter grid per family, in declaration order.
    pub fn default_grid(family: &str) -> Vec<ClassifierSpec> {
        match family {
            "knn" => [1usize, 3, 5, 7]
                .iter()
                .map(|&k| ClassifierSpec::Knn { k })
                .collect(),
            "svm" => {
                let mut out = Vec::new();
                for &c in &[0.1, 1.0, 10.0] {
                    for kernel in [Kernel::Linear, Kernel::Rbf { gamma: None }] {
                        out.push(ClassifierSpec::Svm { c, kernel });
                    }
                }
                out
            }
            "dt" => [Some(5usize), Some(10), None]
                .iter()
                .map(|&max_depth| ClassifierSpec::Dt {
                    max_depth,
                    min_leaf: 5,
                })
                .collect(),
            "lr" => [1e-4, 1e-2]
                .iter()
                .map(|&l2| ClassifierSpec::Lr { l2 })
                .collect(),
            "gnb" => vec![ClassifierSpec::Gnb],
            "lda" => vec![ClassifierSpec::Lda],
            _ => vec![],
        }
    }
}

/// A fitted model of any kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainedClassifier {
    Knn(KnnModel),
    Svm(SvmModel),
    Gnb(GnbModel),
    Dt(TreeModel),
    Lda(LdaModel),
    Lr(LrModel),
}

fn validate_training_input(x: &Array2<f64>, y: &[usize]) -> Result<Vec<usize>, MlError> {
    if x.nrows() != y.len() {
        return Err(MlError::LabelMismatch {
            rows: x.nrows(),
            labels: y.len(),
        });
    }
    if x.nrows() < 2 {
        return Err(MlError::TooFewRows(x.nrows()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MlError::NonFinite);
    }
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(MlError::DegenerateLabels);
    }
    Ok(classes)
}

/// Train a classifier of the given kind.
pub fn train(spec: &ClassifierSpec, x: &Array2<f64>, y: &[usize]) -> Result<TrainedClassifier, MlError> {
    spec.validate()?;
    let classes = validate_training_input(x, y)?;
    Ok(match spec {
        ClassifierSpec::Knn { k } => TrainedClassifier::Knn(knn::fit(*k, x, y, classes)),
        ClassifierSpec::Svm { c, kernel } => {
            TrainedClassifier::Svm(svm::fit(*c, *kernel, x, y, classes)?)
        }
        ClassifierSpec::Gnb => TrainedClassifier::Gnb(gnb::fit(x, y, classes)),
        ClassifierSpec::Dt { max_depth, min_leaf } => {
            TrainedClassifier::Dt(tree::fit(*max_depth, *min_leaf, x, y, classes))
        }
        ClassifierSpec::Lda => TrainedClassifier::Lda(lda::fit(x, y, classes)),
        ClassifierSpec::Lr { l2 } => TrainedClassifier::Lr(lr::fit(*l2, x, y, classes)?),
    })
}

impl TrainedClassifier {
    pub fn classes(&self) -> &[usize] {
        match self {
            TrainedClassifier::Knn(m) => &m.classes,
            TrainedClassifier::Svm(m) => &m.classes,
            TrainedClassifier::Gnb(m) => &m.classes,
            TrainedClassifier::Dt(m) => &m.classes,
            TrainedClassifier::Lda(m) => &m.classes,
            TrainedClassifier::Lr(m) => &m.classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TrainedClassifier::Knn(m) => m.input_dim(),
            TrainedClassifier::Svm(m) => m.input_dim,
            TrainedClassifier::Gnb(m) => m.input_dim(),
            TrainedClassifier::Dt(m) => m.input_dim,
            TrainedClassifier::Lda(m) => m.input_dim(),
            TrainedClassifier::Lr(m) => m.input_dim(),
        }
    }

    /// Per-class scores, one row per input row. Scores are posterior-like by
    /// kind (vote fraction, decision value, log posterior, leaf fraction);
    /// the predicted label is always the argmax, ties to the lower class.
    pub fn predict_scores(&self, x: &Array2<f64>) -> Result<Array2<f64>, MlError> {
        if x.ncols() != self.input_dim() {
            return Err(MlError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(match self {
            TrainedClassifier::Knn(m) => m.scores(x),
            TrainedClassifier::Svm(m) => m.scores(x),
            TrainedClassifier::Gnb(m) => m.scores(x),
            TrainedClassifier::Dt(m) => m.scores(x),
            TrainedClassifier::Lda(m) => m.scores(x),
            TrainedClassifier::Lr(m) => m.scores(x),
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>, MlError> {
        let scores = self.predict_scores(x)?;
        let classes = self.classes();
        Ok(scores
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                classes[best]
            })
            .collect())
    }
}
