//! Per-iteration run records and their CSV schema.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One row of a run trace. Optional entries stay empty in the CSV when the
/// run has no oracle (gap, distance-to-optimum) or no error diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub f: f64,
    pub gap: Option<f64>,
    pub d_to_opt: Option<f64>,
    /// Worst probe state's best-so-far stationarity residual
    /// `max_s min_{t<=k} [-psi^{pi_t}(s, pi_{t+1}(s))]`.
    pub min_neg_psi: Option<f64>,
    pub varsigma_hat: Option<f64>,
    pub sigma2_hat: Option<f64>,
    /// Environment-native mean discounted episode cost.
    pub episode_score: Option<f64>,
    pub wall_ms: f64,
}

pub const TRACE_HEADER: [&str; 8] =
    ["iteration", "f", "gap", "D_to_opt", "min_neg_psi", "varsigma_hat", "sigma2_hat", "wall_ms"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TraceRow {
    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.f.to_string(),
            opt(self.gap),
            opt(self.d_to_opt),
            opt(self.min_neg_psi),
            opt(self.varsigma_hat),
            opt(self.sigma2_hat),
            self.wall_ms.to_string(),
        ]
    }
}

/// Writes trace rows as CSV, preceded by `# key = value` header comments
/// (resolved configuration provenance).
pub fn write_trace_csv(
    path: &std::path::Path,
    header_comments: &[String],
    rows: &[TraceRow],
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for line in header_comments {
        writeln!(file, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(TRACE_HEADER)?;
    for row in rows {
        w.write_record(row.csv_record())?;
    }
    w.flush()?;
    Ok(())
}
