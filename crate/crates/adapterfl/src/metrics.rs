//! Per-round metrics and their CSV form.
//!
//! The CSV column order is fixed: `round,model_id,test_accuracy,test_loss,
//! lr,wall_time_ms,method`. Floats are written with Rust's shortest
//! round-trip formatting, so identical runs produce byte-identical files
//! (wall_time_ms excepted; it is real timing).

use std::path::Path;

use crate::error::Result;
use crate::nn::checkpoint::atomic_write;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub method: String,
    pub round: usize,
    pub model_id: String,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub wall_time_ms: f64,
}

pub const CSV_HEADER: &str = "round,model_id,test_accuracy,test_loss,lr,wall_time_ms,method";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.1},{}",
            self.round,
            self.model_id,
            self.test_accuracy,
            self.test_loss,
            self.lr,
            self.wall_time_ms,
            self.method
        )
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Atomically (re)write the whole metrics file; called after every round so
/// an interrupted run never leaves a truncated CSV behind.
pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    atomic_write(path, to_csv(records).as_bytes())
}

/// The deterministic part of a CSV (wall_time_ms column masked), for
/// reproducibility comparisons.
pub fn mask_wall_time(csv: &str) -> String {
    let mut out = String::with_capacity(csv.len());
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
        } else {
            let cols: Vec<&str> = line.split(',').collect();
            for (j, c) in cols.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(if j == 5 { "-" } else { c });
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_shape() {
        let r = MetricsRecord {
            method: "adapterfl".into(),
            round: 3,
            model_id: "L-S".into(),
            test_accuracy: 0.5,
            test_loss: 1.25,
            lr: 0.01,
            wall_time_ms: 12.3,
        };
        let csv = to_csv(&[r]);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("3,L-S,0.5,1.25,0.01,12.3,adapterfl"));
        let masked = mask_wall_time(&csv);
        assert!(masked.contains("3,L-S,0.5,1.25,0.01,-,adapterfl"));
    }
}
