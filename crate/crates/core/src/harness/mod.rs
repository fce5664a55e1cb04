//! Training loop, ablation modes, evaluation metrics, sweeps and feature
//! dumps.

mod features;
mod metrics;
mod sweeps;
pub mod synthetic;
mod trainer;

pub use features::{dump_features, pca_top2, pooled_features};
pub use metrics::{evaluate, evaluate_noisy, macro_f1, Metrics, MetricsReport, RunRecord};
pub use sweeps::{layer_set_sweep, low_resource_sweep, LayerSweepRow, LowResourceRow, SweepTable};
pub use trainer::{train_multi, train_run, Resources, TrainedRun};
