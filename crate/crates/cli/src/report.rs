//! Side-by-side comparison of metrics logs.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ckd_core::train::{read_metrics_log, EpochRecord};
use ckd_core::{Error, Result};

pub const TABLE_FILE: &str = "comparison.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "plot.dat";

const COLUMNS: [&str; 8] = [
    "epoch",
    "lr",
    "task_loss",
    "kd_loss",
    "total_loss",
    "train_accuracy",
    "test_accuracy",
    "wall_ms",
];

fn fields(r: &EpochRecord) -> [String; 8] {
    [
        r.epoch.to_string(),
        r.lr.to_string(),
        r.task_loss.to_string(),
        r.kd_loss.to_string(),
        r.total_loss.to_string(),
        r.train_accuracy.to_string(),
        r.test_accuracy.to_string(),
        r.wall_ms.to_string(),
    ]
}

/// A parsed log with a label.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub label: String,
    pub records: Vec<EpochRecord>,
}

/// Reads a metrics log; parse errors carry the file name and line number.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    let records = read_metrics_log(BufReader::new(file)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        other => other,
    })?;
    if records.is_empty() {
        return Err(Error::Format(format!("{}: no epoch records", path.display())));
    }
    Ok(records)
}

/// Labels from file stems, or from the parent directory when the stem is
/// the generic `metrics`; duplicates get a `#k` suffix.
pub fn labels_for(paths: &[PathBuf]) -> Vec<String> {
    let mut labels: Vec<String> = paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            match p.parent().and_then(Path::file_name) {
                Some(parent) if stem == "metrics" => parent.to_string_lossy().into_owned(),
                _ => stem,
            }
        })
        .collect();
    let base = labels.clone();
    for (i, label) in labels.iter_mut().enumerate() {
        if base.iter().filter(|b| *b == label).count() > 1 {
            *label = format!("{}#{}", label, i + 1);
        }
    }
    labels
}

/// Comparison of several runs, aligned on epoch index.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Set when logs had different lengths.
    pub truncation_note: Option<String>,
    /// `(label, final test accuracy, delta against the first run)`.
    pub summary: Vec<(String, f64, f64)>,
    /// Epoch followed by each run's test accuracy.
    pub plot: Vec<Vec<f64>>,
}

pub fn compare(runs: &[RunLog]) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one metrics log".into()));
    }
    let shortest = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let longest = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    let truncation_note = (shortest != longest).then(|| {
        format!(
            "logs have {} to {} epochs; table truncated to the first {}",
            shortest, longest, shortest
        )
    });

    let single = runs.len() == 1;
    let mut header = vec!["epoch".to_string()];
    for run in runs {
        for col in &COLUMNS[1..] {
            header.push(if single {
                col.to_string()
            } else {
                format!("{}.{}", run.label, col)
            });
        }
    }
    let mut rows = Vec::with_capacity(shortest);
    let mut plot = Vec::with_capacity(shortest);
    for e in 0..shortest {
        let mut row = vec![runs[0].records[e].epoch.to_string()];
        let mut point = vec![runs[0].records[e].epoch as f64];
        for run in runs {
            row.extend(fields(&run.records[e]).into_iter().skip(1));
            point.push(run.records[e].test_accuracy);
        }
        rows.push(row);
        plot.push(point);
    }
    let first = runs[0].records[shortest - 1].test_accuracy;
    let summary = runs
        .iter()
        .map(|r| {
            let acc = r.records[shortest - 1].test_accuracy;
            (r.label.clone(), acc, acc - first)
        })
        .collect();
    Ok(Comparison {
        header,
        rows,
        truncation_note,
        summary,
        plot,
    })
}

impl Comparison {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(dir.join(TABLE_FILE)).map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join(SUMMARY_FILE)).map_err(csv_err)?;
        w.write_record(["run", "final_test_accuracy", "delta_vs_first"]).map_err(csv_err)?;
        for (label, acc, delta) in &self.summary {
            w.write_record([label.clone(), acc.to_string(), delta.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;

        let mut plot = String::from("# epoch");
        for (label, _, _) in &self.summary {
            plot.push(' ');
            plot.push_str(label);
        }
        plot.push('\n');
        for point in &self.plot {
            let line: Vec<String> = point.iter().map(|x| x.to_string()).collect();
            plot.push_str(&line.join(" "));
            plot.push('\n');
        }
        fs::write(dir.join(PLOT_FILE), plot)?;
        Ok(())
    }
}

/// The `report` command.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<Comparison> {
    let labels = labels_for(paths);
    let runs = paths
        .iter()
        .zip(labels)
        .map(|(p, label)| {
            Ok(RunLog {
                label,
                records: read_log(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare(&runs)?;
    cmp.write(out)?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, acc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 0.1,
            task_loss: 1.0,
            kd_loss: 0.5,
            total_loss: 1.5,
            train_accuracy: acc,
            test_accuracy: acc,
            wall_ms: 3,
        }
    }

    #[test]
    fn single_log_keeps_its_columns() {
        let run = RunLog {
            label: "a".into(),
            records: vec![rec(1, 0.5), rec(2, 0.75)],
        };
        let cmp = compare(std::slice::from_ref(&run)).unwrap();
        assert_eq!(cmp.header, COLUMNS.map(String::from).to_vec());
        assert_eq!(cmp.rows[1], fields(&run.records[1]).to_vec());
        assert!(cmp.truncation_note.is_none());
    }

    #[test]
    fn uneven_logs_truncate_and_report_delta() {
        let a = RunLog {
            label: "none".into(),
            records: vec![rec(1, 0.5), rec(2, 0.6), rec(3, 0.7)],
        };
        let b = RunLog {
            label: "ckd".into(),
            records: vec![rec(1, 0.55), rec(2, 0.65)],
        };
        let cmp = compare(&[a, b]).unwrap();
        assert_eq!(cmp.rows.len(), 2);
        assert!(cmp.truncation_note.unwrap().contains("first 2"));
        assert_eq!(cmp.header[1], "none.lr");
        assert!((cmp.summary[1].2 - 0.05).abs() < 1e-12);
        assert_eq!(cmp.plot[1], vec![2.0, 0.6, 0.65]);
    }

    #[test]
    fn labels_disambiguate() {
        let paths = vec![
            PathBuf::from("runs/ckd/metrics.jsonl"),
            PathBuf::from("runs/none/metrics.jsonl"),
            PathBuf::from("a/x.jsonl"),
            PathBuf::from("b/x.jsonl"),
        ];
        assert_eq!(labels_for(&paths), vec!["ckd", "none", "x#3", "x#4"]);
    }
}
