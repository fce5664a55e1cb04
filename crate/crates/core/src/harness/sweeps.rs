//! Interpolation-layer-set and low-resource sweeps. Every row is one full
//! multi-seed training run; Δ columns compare against the no-interpolation
//! baseline row.

use serde::Serialize;

use crate::config::{AblationMode, LabConfig};
use crate::error::{Error, Result};
use crate::harness::metrics::MetricsReport;
use crate::harness::trainer::{train_multi, Resources};
use crate::text::{subsample, Dataset};

/// Renders a layer set the way sweeps label their rows; the empty set is
/// the no-interpolation baseline.
pub fn layer_set_label(set: &[usize]) -> String {
    if set.is_empty() {
        "none".to_string()
    } else {
        set.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSweepRow {
    pub layer_set: String,
    pub report: MetricsReport,
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LowResourceRow {
    pub train_size: usize,
    pub report: MetricsReport,
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
    /// Example ids each seed's run was allowed to see, for auditing.
    pub train_ids: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable<R> {
    pub rows: Vec<R>,
}

fn run_report(
    train_set: &Dataset,
    dev_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &LabConfig,
    resources: &Resources,
) -> Result<MetricsReport> {
    let (_, report) = train_multi(train_set, dev_set, test_set, config, resources)?;
    Ok(report)
}

/// One multi-seed run per configured layer set. An empty set means the
/// no-augmentation baseline; its row anchors the Δ columns. When no empty
/// set is listed, a baseline run is still performed for the deltas.
pub fn layer_set_sweep(
    train_set: &Dataset,
    dev_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &LabConfig,
    resources: &Resources,
) -> Result<SweepTable<LayerSweepRow>> {
    // Validate every set before any training starts.
    for set in &config.sweep_layer_sets {
        for &layer in set {
            if layer > config.num_layers {
                return Err(Error::Config(format!(
                    "sweep layer {layer} exceeds model depth {}",
                    config.num_layers
                )));
            }
        }
    }

    let mut baseline_cfg = config.clone();
    baseline_cfg.ablation_mode = AblationMode::NoAugBaseline;
    let baseline = run_report(train_set, dev_set, test_set, &baseline_cfg, resources)?;

    let mut rows = Vec::with_capacity(config.sweep_layer_sets.len());
    for set in &config.sweep_layer_sets {
        let report = if set.is_empty() {
            baseline.clone()
        } else {
            let mut cfg = config.clone();
            cfg.ablation_mode = AblationMode::Full;
            cfg.layer_set = set.clone();
            run_report(train_set, dev_set, test_set, &cfg, resources)?
        };
        rows.push(LayerSweepRow {
            layer_set: layer_set_label(set),
            delta_accuracy: report.mean.accuracy - baseline.mean.accuracy,
            delta_macro_f1: report.mean.macro_f1 - baseline.mean.macro_f1,
            report,
        });
    }
    Ok(SweepTable { rows })
}

/// One multi-seed run per training-set size. Each size trains on a stratified
/// subsample of the training split while dev/test stay fixed; the largest
/// requested size anchors the Δ columns.
pub fn low_resource_sweep(
    train_set: &Dataset,
    dev_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &LabConfig,
    resources: &Resources,
) -> Result<SweepTable<LowResourceRow>> {
    if config.sweep_sizes.is_empty() {
        return Err(Error::Config("low-resource sweep has no sizes".to_string()));
    }
    for &size in &config.sweep_sizes {
        if size > train_set.len() {
            return Err(Error::Config(format!(
                "subsample size {size} exceeds training set size {}",
                train_set.len()
            )));
        }
    }

    let anchor = *config.sweep_sizes.iter().max().expect("nonempty sizes");
    let mut rows: Vec<LowResourceRow> = Vec::with_capacity(config.sweep_sizes.len());
    let mut anchor_report: Option<MetricsReport> = None;
    for &size in &config.sweep_sizes {
        let subset = subsample(train_set, size, config.seeds[0])?;
        let train_ids: Vec<usize> = subset.examples.iter().map(|e| e.id).collect();
        let report = run_report(&subset, dev_set, test_set, config, resources)?;
        if size == anchor && anchor_report.is_none() {
            anchor_report = Some(report.clone());
        }
        rows.push(LowResourceRow {
            train_size: size,
            report,
            delta_accuracy: 0.0,
            delta_macro_f1: 0.0,
            train_ids,
        });
    }
    let anchor_report = anchor_report.expect("anchor size is in the list");
    for row in &mut rows {
        row.delta_accuracy = row.report.mean.accuracy - anchor_report.mean.accuracy;
        row.delta_macro_f1 = row.report.mean.macro_f1 - anchor_report.mean.macro_f1;
    }
    Ok(SweepTable { rows })
}
