//! Data, training and evaluation harness.

pub mod config;
pub mod cv;
pub mod dataset;
pub mod featfile;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod selection;
pub mod synth;
pub mod train;

pub use config::{FusionMode, ModelDims, RunConfig, Task};
pub use cv::{ablate, run_cv, stratified_folds, CvOutcome};
pub use dataset::{Dataset, DatasetManifest, Label, Sample};
pub use heatmap::export_heatmap;
pub use metrics::{auroc, evaluate_classification, MetricsReport};
pub use model::{Model, ModelSpec};
pub use selection::select_cpg_features;
pub use synth::{generate, write_synthetic, SyntheticSpec};
pub use train::{train, TrainLog, TrainedModel};
