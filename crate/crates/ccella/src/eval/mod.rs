//! Evaluation: frozen-feature distribution distance, classification
//! metrics, and the phantom class-consistency probe.

mod features;
mod fid;
mod metrics;

pub use features::{FeatureExtractor, FeatureStats, FEATURE_DIM, RECOMMENDED_SAMPLES};
pub use fid::{fid, planar_fid, sym_eigenvalues};
pub use metrics::{class_consistency, classifier_metrics, ConfusionReport};
