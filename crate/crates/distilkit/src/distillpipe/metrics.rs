//! Append-only training metrics and their CSV form.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_CSV_HEADER: &str = "step,lr,ce,kd_or_dkd,total,agreement";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub kd_or_dkd: f64,
    pub total: f64,
    /// Teacher-student argmax agreement for distillation runs; masked-frame
    /// accuracy for teacher pre-training.
    pub agreement: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.lr, r.ce, r.kd_or_dkd, r.total, r.agreement
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv_str(text: &str) -> Result<MetricsLog> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != METRICS_CSV_HEADER {
                    return Err(Error::Precondition(format!("unexpected metrics header '{line}'")));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::Precondition(format!("bad metrics row '{line}'")));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Precondition(format!("bad number '{s}' in metrics")))
            };
            rows.push(MetricsRow {
                step: fields[0]
                    .parse()
                    .map_err(|_| Error::Precondition(format!("bad step '{}'", fields[0])))?,
                lr: parse(fields[1])?,
                ce: parse(fields[2])?,
                kd_or_dkd: parse(fields[3])?,
                total: parse(fields[4])?,
                agreement: parse(fields[5])?,
            });
        }
        Ok(MetricsLog { rows })
    }

    /// Trailing-window mean of the total loss at a given step index
    /// (1-based step numbering, window truncated at the start).
    pub fn smoothed_total_at(&self, step: u64, window: usize) -> Option<f64> {
        let idx = self.rows.iter().position(|r| r.step == step)?;
        let lo = idx.saturating_sub(window - 1);
        let slice = &self.rows[lo..=idx];
        Some(slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut log = MetricsLog::default();
        for s in 1..=5u64 {
            log.push(MetricsRow {
                step: s,
                lr: 1e-4 * s as f64,
                ce: 1.0 / s as f64,
                kd_or_dkd: 0.5,
                total: 1.0 / s as f64 + 0.5,
                agreement: 0.9,
            });
        }
        let text = log.to_csv_string();
        let back = MetricsLog::from_csv_str(&text).unwrap();
        assert_eq!(back.rows, log.rows);
    }

    #[test]
    fn smoothing_truncates_at_start() {
        let mut log = MetricsLog::default();
        for s in 1..=10u64 {
            log.push(MetricsRow {
                step: s,
                lr: 0.0,
                ce: 0.0,
                kd_or_dkd: 0.0,
                total: s as f64,
                agreement: 0.0,
            });
        }
        assert_eq!(log.smoothed_total_at(1, 100).unwrap(), 1.0);
        assert_eq!(log.smoothed_total_at(10, 3).unwrap(), 9.0);
        assert!(log.smoothed_total_at(11, 3).is_none());
    }
}
