//! Metric rows, their CSV persistence, cross-seed summaries and plot data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header of every metrics CSV, in column order.
pub const METRICS_HEADER: [&str; 6] =
    ["seed", "round", "test_accuracy", "grad_norm_sq", "weighted_metric", "uplink_scalars_cumulative"];

/// One logged evaluation point of one seed's run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: u64,
    pub test_accuracy: Option<f64>,
    pub grad_norm_sq: Option<f64>,
    pub weighted_metric: Option<f64>,
    pub uplink_scalars_cumulative: u64,
}

/// A metrics row tagged with the noise variance of its sweep level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_n_sq: f64,
    pub seed: u64,
    pub round: u64,
    pub test_accuracy: Option<f64>,
    pub grad_norm_sq: Option<f64>,
    pub weighted_metric: Option<f64>,
    pub uplink_scalars_cumulative: u64,
}

impl SweepRow {
    pub fn new(sigma_n_sq: f64, row: &MetricsRow) -> Self {
        SweepRow {
            sigma_n_sq,
            seed: row.seed,
            round: row.round,
            test_accuracy: row.test_accuracy,
            grad_norm_sq: row.grad_norm_sq,
            weighted_metric: row.weighted_metric,
            uplink_scalars_cumulative: row.uplink_scalars_cumulative,
        }
    }

    pub fn metrics(&self) -> MetricsRow {
        MetricsRow {
            seed: self.seed,
            round: self.round,
            test_accuracy: self.test_accuracy,
            grad_norm_sq: self.grad_norm_sq,
            weighted_metric: self.weighted_metric,
            uplink_scalars_cumulative: self.uplink_scalars_cumulative,
        }
    }
}

/// Checks that rounds strictly increase per seed and accuracies lie in `[0, 1]`.
pub fn validate_rows(rows: &[MetricsRow]) -> Result<()> {
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        if let Some(&prev) = last.get(&row.seed) {
            if row.round <= prev {
                return Err(Error::Schema {
                    line: i + 2,
                    message: format!("round {} does not increase for seed {}", row.round, row.seed),
                });
            }
        }
        last.insert(row.seed, row.round);
        if let Some(acc) = row.test_accuracy {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::Schema { line: i + 2, message: format!("accuracy {acc} outside [0,1]") });
            }
        }
    }
    Ok(())
}

pub fn write_rows<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    if rows.is_empty() {
        // serde only emits the header alongside the first record.
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(METRICS_HEADER)?;
        w.flush()?;
        return Ok(());
    }
    write_rows(path, rows)
}

/// Reads a metrics CSV, rejecting files whose header differs from [`METRICS_HEADER`].
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Schema {
            line: 1,
            message: format!("expected header {:?}, found {:?}", METRICS_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let rows = r
        .deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::Parse { line: i + 2, message: e.to_string() }))
        .collect::<Result<Vec<MetricsRow>>>()?;
    validate_rows(&rows)?;
    Ok(rows)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Cross-seed statistics at one logged round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: u64,
    pub n_seeds: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_grad_norm_sq: Option<f64>,
    pub std_grad_norm_sq: Option<f64>,
    pub mean_weighted_metric: Option<f64>,
    pub std_weighted_metric: Option<f64>,
}

fn stat(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_and_std(&present);
        (Some(m), Some(s))
    }
}

/// Groups rows by round and aggregates across seeds.
pub fn summarize_curve(rows: &[MetricsRow]) -> Vec<CurvePoint> {
    let mut by_round: BTreeMap<u64, Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        by_round.entry(row.round).or_default().push(row);
    }
    by_round
        .into_iter()
        .map(|(round, group)| {
            let (mean_accuracy, std_accuracy) = stat(&group.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
            let (mean_grad_norm_sq, std_grad_norm_sq) =
                stat(&group.iter().map(|r| r.grad_norm_sq).collect::<Vec<_>>());
            let (mean_weighted_metric, std_weighted_metric) =
                stat(&group.iter().map(|r| r.weighted_metric).collect::<Vec<_>>());
            CurvePoint {
                round,
                n_seeds: group.len(),
                mean_accuracy,
                std_accuracy,
                mean_grad_norm_sq,
                std_grad_norm_sq,
                mean_weighted_metric,
                std_weighted_metric,
            }
        })
        .collect()
}

/// JSON summary written next to each metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub seeds: Vec<u64>,
    pub rounds: u64,
    pub uplink_scalars_per_round: u64,
    /// FedAvg uplink scalars per round divided by 1P-ZOFL's, `d / 2`.
    pub fedavg_to_zofl_uplink_ratio: f64,
    pub final_mean_accuracy: Option<f64>,
    pub final_std_accuracy: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, round: u64, acc: f64) -> MetricsRow {
        MetricsRow {
            seed,
            round,
            test_accuracy: Some(acc),
            grad_norm_sq: Some(acc * 2.0),
            weighted_metric: None,
            uplink_scalars_cumulative: round * 4,
        }
    }

    #[test]
    fn single_seed_has_zero_band() {
        let pts = summarize_curve(&[row(1, 0, 0.4), row(1, 10, 0.8)]);
        assert_eq!(pts.len(), 2);
        assert!(pts.iter().all(|p| p.std_accuracy == Some(0.0)));
        assert_eq!(pts[0].mean_weighted_metric, None);
    }

    #[test]
    fn identical_seeds_have_zero_band() {
        let rows = vec![row(1, 0, 0.4), row(2, 0, 0.4), row(1, 5, 0.7), row(2, 5, 0.7)];
        let pts = summarize_curve(&rows);
        assert!(pts.iter().all(|p| p.std_accuracy == Some(0.0) && p.n_seeds == 2));
    }

    /// Welford's one-pass recurrence, independent of the two-pass formula.
    fn welford_std(values: &[f64]) -> f64 {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for &v in values {
            n += 1.0;
            let delta = v - mean;
            mean += delta / n;
            m2 += delta * (v - mean);
        }
        (m2 / (n - 1.0)).sqrt()
    }

    #[test]
    fn band_is_sample_standard_deviation() {
        let accs = [0.61, 0.72, 0.55, 0.9, 0.83];
        let rows: Vec<MetricsRow> = accs.iter().enumerate().map(|(s, &a)| row(s as u64, 3, a)).collect();
        let pts = summarize_curve(&rows);
        let expected = welford_std(&accs);
        assert!((pts[0].std_accuracy.unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn csv_roundtrip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rows = vec![row(3, 0, 0.5), row(3, 10, 0.75)];
        rows[1].grad_norm_sq = None;
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("seed,round,test_accuracy,grad_norm_sq,weighted_metric,uplink_scalars_cumulative\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "seed,round,accuracy\n1,0,0.5\n").unwrap();
        assert!(matches!(read_metrics_csv(&bad), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn row_validation() {
        assert!(validate_rows(&[row(1, 5, 0.5), row(1, 5, 0.6)]).is_err());
        assert!(validate_rows(&[row(1, 5, 1.5)]).is_err());
        assert!(validate_rows(&[row(1, 5, 0.5), row(2, 0, 0.6), row(1, 6, 0.1)]).is_ok());
    }
}
