use std::fs::File;
use std::path::Path;

use serde::Serialize;

/// One evaluation row of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub eval_return: f64,
    pub eval_success_percent: f64,
    /// Mean training loss since the previous row.
    pub loss: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda2: Option<f64>,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["step", "eval_return", "eval_success_percent", "loss", "epsilon", "lambda2"])?;
    }
    w.flush()?;
    Ok(())
}
