//! Aggregation of results files into method tables, anytime curves, and
//! architecture-parameter trajectories.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TnasError};
use crate::search::ResultRecord;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub space_id: String,
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub dim: String,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: Option<f64>,
    pub test_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnytimePoint {
    pub epoch: usize,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Report {
    pub space_id: String,
    pub tables: Vec<MethodSummary>,
    /// method -> mean-over-seeds best-so-far metric per epoch.
    pub anytime: BTreeMap<String, Vec<AnytimePoint>>,
    /// (method, seed, dim) -> per-epoch architecture parameters.
    pub trajectories: Vec<TrajectoryRecord>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Parse every line of every input as a result or trajectory record; refuse
/// aggregation across different spaces.
pub fn build_report(paths: &[impl AsRef<Path>]) -> Result<Report> {
    if paths.is_empty() {
        return Err(TnasError::Config("need at least one results file".into()));
    }
    let mut finals: Vec<ResultRecord> = Vec::new();
    let mut epochs: Vec<ResultRecord> = Vec::new();
    let mut trajectories: Vec<TrajectoryRecord> = Vec::new();
    for path in paths {
        let file = std::fs::File::open(path.as_ref())?;
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(r) = serde_json::from_str::<ResultRecord>(&line) {
                if r.epoch.is_some() {
                    epochs.push(r);
                } else {
                    finals.push(r);
                }
            } else if let Ok(t) = serde_json::from_str::<TrajectoryRecord>(&line) {
                trajectories.push(t);
            } else {
                return Err(TnasError::Data(format!(
                    "unrecognized record in {}: {line}",
                    path.as_ref().display()
                )));
            }
        }
    }

    let mut space_ids: Vec<&str> = finals
        .iter()
        .map(|r| r.space_id.as_str())
        .chain(epochs.iter().map(|r| r.space_id.as_str()))
        .chain(trajectories.iter().map(|t| t.space_id.as_str()))
        .collect();
    space_ids.sort_unstable();
    space_ids.dedup();
    if space_ids.len() > 1 {
        return Err(TnasError::Config(format!(
            "refusing mixed-space aggregation: {space_ids:?}"
        )));
    }
    let space_id = space_ids.first().copied().unwrap_or("").to_string();

    // Mean +- std per method over final rows.
    let mut by_method: BTreeMap<String, Vec<&ResultRecord>> = BTreeMap::new();
    for r in &finals {
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    let mut tables = Vec::new();
    for (method, rows) in &by_method {
        let vals: Vec<f64> = rows.iter().map(|r| r.val_metric).collect();
        let (val_mean, val_std) = mean_std(&vals);
        let tests: Vec<f64> = rows.iter().filter_map(|r| r.test_metric).collect();
        let (test_mean, test_std) = if tests.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&tests);
            (Some(m), Some(s))
        };
        tables.push(MethodSummary {
            method: method.clone(),
            runs: rows.len(),
            val_mean,
            val_std,
            test_mean,
            test_std,
        });
    }

    // Best-so-far per (method, seed), then mean across seeds per epoch.
    let mut anytime = BTreeMap::new();
    let mut per_method: BTreeMap<String, BTreeMap<u64, Vec<(usize, f64)>>> = BTreeMap::new();
    for r in &epochs {
        per_method
            .entry(r.method.clone())
            .or_default()
            .entry(r.seed)
            .or_default()
            .push((r.epoch.unwrap(), r.val_metric));
    }
    for (method, seeds) in per_method {
        let mut curves: Vec<Vec<f64>> = Vec::new();
        for (_, mut points) in seeds {
            points.sort_by_key(|&(e, _)| e);
            let mut best = f64::NEG_INFINITY;
            let mut curve = Vec::new();
            for (_, v) in points {
                best = best.max(v);
                curve.push(best);
            }
            curves.push(curve);
        }
        let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
        let series: Vec<AnytimePoint> = (0..len)
            .map(|e| AnytimePoint {
                epoch: e,
                best_so_far: curves.iter().map(|c| c[e]).sum::<f64>() / curves.len() as f64,
            })
            .collect();
        anytime.insert(method, series);
    }

    Ok(Report {
        space_id,
        tables,
        anytime,
        trajectories,
    })
}

/// Plain-text rendering of the summary tables and curve data.
pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!("space: {}\n", report.space_id));
    out.push_str("method | runs | val mean +- std | test mean +- std\n");
    for t in &report.tables {
        let test = match (t.test_mean, t.test_std) {
            (Some(m), Some(s)) => format!("{m:.4} +- {s:.4}"),
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "{} | {} | {:.4} +- {:.4} | {}\n",
            t.method, t.runs, t.val_mean, t.val_std, test
        ));
    }
    for (method, curve) in &report.anytime {
        out.push_str(&format!("anytime {method}:"));
        for p in curve {
            out.push_str(&format!(" {}:{:.4}", p.epoch, p.best_so_far));
        }
        out.push('\n');
    }
    for t in &report.trajectories {
        out.push_str(&format!(
            "trajectory {} seed {} {} epoch {}: {:?}\n",
            t.method, t.seed, t.dim, t.epoch, t.alpha
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(method: &str, seed: u64, val: f64, epoch: Option<usize>) -> ResultRecord {
        ResultRecord {
            run_id: "r".into(),
            method: method.into(),
            space_id: "toy".into(),
            architecture: "a=0".into(),
            seed,
            val_metric: val,
            test_metric: epoch.is_none().then_some(val + 0.1),
            epoch,
            wall_seconds: 0.0,
            param_count: 10,
            supernet_mode: "WE".into(),
        }
    }

    fn write_lines(path: &std::path::Path, records: &[ResultRecord]) {
        let mut f = std::fs::File::create(path).unwrap();
        for r in records {
            writeln!(f, "{}", serde_json::to_string(r).unwrap()).unwrap();
        }
    }

    #[test]
    fn mean_std_over_four_seeds_and_monotone_series() {
        let dir = std::env::temp_dir().join("tnas_report_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("results.jsonl");
        let mut rows = Vec::new();
        for seed in 0..4 {
            rows.push(record("m", seed, 0.8 + seed as f64 * 0.01, None));
            // Epoch metrics that dip: best-so-far must still be monotone.
            rows.push(record("m", seed, 0.5, Some(0)));
            rows.push(record("m", seed, 0.4, Some(1)));
            rows.push(record("m", seed, 0.6, Some(2)));
        }
        write_lines(&path, &rows);
        let report = build_report(&[&path]).unwrap();
        assert_eq!(report.tables.len(), 1);
        let t = &report.tables[0];
        assert_eq!(t.runs, 4);
        let expect_mean = (0.80 + 0.81 + 0.82 + 0.83) / 4.0;
        assert!((t.val_mean - expect_mean).abs() < 1e-12);
        assert!(t.val_std > 0.0);
        let curve = &report.anytime["m"];
        assert_eq!(curve.len(), 3);
        assert!(curve.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));
    }

    #[test]
    fn mixed_space_aggregation_refused() {
        let dir = std::env::temp_dir().join("tnas_report_test");
        std::fs::create_dir_all(&dir).unwrap();
        let a = dir.join("a.jsonl");
        let b = dir.join("b.jsonl");
        write_lines(&a, &[record("m", 0, 0.5, None)]);
        let mut other = record("m", 0, 0.5, None);
        other.space_id = "different".into();
        write_lines(&b, &[other]);
        assert!(build_report(&[&a, &b]).is_err());
    }

    #[test]
    fn any_prefix_of_a_results_file_parses() {
        let dir = std::env::temp_dir().join("tnas_report_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("prefix.jsonl");
        write_lines(
            &path,
            &[record("m", 0, 0.5, None), record("m", 1, 0.6, None)],
        );
        let full = std::fs::read_to_string(&path).unwrap();
        let first_line_len = full.find('\n').unwrap() + 1;
        let prefix_path = dir.join("prefix_cut.jsonl");
        std::fs::write(&prefix_path, &full[..first_line_len]).unwrap();
        let report = build_report(&[&prefix_path]).unwrap();
        assert_eq!(report.tables[0].runs, 1);
    }
}
