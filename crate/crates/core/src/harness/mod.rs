//! Metrics, run configuration, model bundles, presets and exports.

pub mod bundle;
pub mod config;
pub mod export;
pub mod metrics;
pub mod pipeline;
pub mod presets;

pub use bundle::ModelBundle;
pub use config::RunConfig;
pub use export::{export_points, load_points, PointRow};
pub use metrics::{auc_roc, evaluate, kendall_tau, measure_tif, prf_at_threshold, EvalReport, ModelVariant, Prf, Scorer};
pub use pipeline::{train_pipeline, TrainedPipeline};
pub use presets::{run_custom, run_preset, run_sine_toy, run_cluster_comparison};
