//! EEG analysis toolkit: preprocessing, spectral/spatial feature extraction,
//! topographic imaging, classical and convolutional classifiers, and a
//! cross-validated evaluation harness, plus a deterministic synthetic cohort
//! generator for end-to-end verification.
//!
//! The pipeline operates on 14-channel recordings sampled at 128 Hz, segmented
//! into 5 s epochs. See the `cli` binary (`eegkit --help`) for the command-line
//! entry points.

pub mod csp;
pub mod datamodel;
pub mod evalharness;
pub mod mlclf;
pub mod neuralnet;
pub mod preprocess;
pub mod spectral;
pub mod stats;
pub mod store;
pub mod synthgen;
pub mod topomap;

pub use datamodel::{ChannelLayout, Cohort, DatasetManifest, Emotion, Epoch, Trial};
