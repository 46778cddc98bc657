//! Per-epoch metric emission: a CSV with one column per estimator's
//! normalized reward-series value (plot-ready, epoch on the x axis) and a
//! JSON mirror carrying the full per-metric report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cpe::{CpeEstimate, ESTIMATOR_NAMES};
use crate::io::{write_json, IoError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub td_loss: f64,
    pub mc_loss: f64,
    pub cpe: Vec<CpeEstimate>,
}

/// CSV with header `epoch,td_loss,mc_loss,<estimator names>`; estimator
/// columns carry the normalized value of the shaped-reward series.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,td_loss,mc_loss");
    for name in ESTIMATOR_NAMES {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for epoch in history {
        out.push_str(&format!("{},{},{}", epoch.epoch, epoch.td_loss, epoch.mc_loss));
        for name in ESTIMATOR_NAMES {
            out.push(',');
            let value = epoch
                .cpe
                .iter()
                .find(|e| e.estimator == name && e.metric == "reward")
                .and_then(|e| e.normalized);
            if let Some(v) = value {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Flat JSON array of {epoch, metric, estimator, raw, normalized} records,
/// one per estimator and series, plus the loss pair per epoch.
pub fn metrics_json(history: &[EpochMetrics]) -> serde_json::Value {
    let mut records = Vec::new();
    for epoch in history {
        records.push(serde_json::json!({
            "epoch": epoch.epoch,
            "td_loss": epoch.td_loss,
            "mc_loss": epoch.mc_loss,
        }));
        for est in &epoch.cpe {
            records.push(serde_json::json!({
                "epoch": epoch.epoch,
                "metric": est.metric,
                "estimator": est.estimator,
                "raw": est.raw,
                "normalized": est.normalized,
            }));
        }
    }
    serde_json::Value::Array(records)
}

pub(super) fn write_metric_files(dir: &Path, history: &[EpochMetrics]) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|source| IoError::Open {
        path: dir.display().to_string(),
        source,
    })?;
    let csv_path = dir.join("metrics.csv");
    std::fs::write(&csv_path, metrics_csv(history)).map_err(|source| IoError::Write {
        path: csv_path.display().to_string(),
        source,
    })?;
    write_json(&dir.join("metrics.json"), &metrics_json(history))
}
