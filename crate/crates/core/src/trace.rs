//! Loss traces and metric records, with their CSV forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchstat::Histogram;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// Writes `step,loss,lr`.
pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    write_csv(path, records)
}

/// Writes `task,step,metric,value`.
pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    write_csv(path, records)
}

#[derive(Serialize)]
struct HistogramRow {
    bin_left: f64,
    bin_right: f64,
    density: f64,
}

/// Writes `bin_left,bin_right,density`.
pub fn write_histogram_csv(path: &Path, histogram: &Histogram) -> Result<()> {
    let rows: Vec<HistogramRow> = histogram
        .rows()
        .map(|(bin_left, bin_right, density)| HistogramRow {
            bin_left,
            bin_right,
            density,
        })
        .collect();
    write_csv(path, &rows)
}

fn write_csv<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean loss over the first and last `window` records.
pub fn smoothed_endpoints(records: &[LossRecord], window: usize) -> Option<(f32, f32)> {
    if records.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(records.len());
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss as f64).sum::<f64>() / s.len() as f64;
    Some((
        mean(&records[..w]) as f32,
        mean(&records[records.len() - w..]) as f32,
    ))
}
