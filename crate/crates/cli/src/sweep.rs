//! One-axis ablation sweeps with several seeds per value.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ckd_core::model::MlpParams;
use ckd_core::rng::derive_seed;
use ckd_core::train::TrainConfig;
use ckd_core::{Error, KdKind, Result};
use rayon::prelude::*;

use crate::config::Settings;
use crate::run::{load_data, obtain_teacher, run_student};

pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Temperature,
    BatchSize,
    Triple,
    NegativeScope,
    KdKind,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Temperature => "temperature",
            Axis::BatchSize => "batch_size",
            Axis::Triple => "triple",
            Axis::NegativeScope => "negative_scope",
            Axis::KdKind => "kd_kind",
        }
    }

    /// Returns `base` with the axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let key = match self {
            Axis::Temperature => "tau",
            Axis::BatchSize => "batch",
            Axis::Triple => "triple",
            Axis::NegativeScope => "neg-scope",
            Axis::KdKind => "kd",
        };
        let mut s = Settings {
            train: *base,
            ..Settings::default()
        };
        s.set(key, value)?;
        Ok(s.train)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Axis::Temperature,
            Axis::BatchSize,
            Axis::Triple,
            Axis::NegativeScope,
            Axis::KdKind,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown sweep axis '{}' (expected temperature, batch_size, triple, negative_scope or kd_kind)",
                s
            ))
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<String>,
    pub repeats: usize,
    pub base: Settings,
}

impl SweepSpec {
    pub fn from_settings(settings: &Settings) -> Result<Self> {
        let axis = settings
            .axis
            .as_deref()
            .ok_or_else(|| Error::Config("sweep needs --axis".into()))?
            .parse()?;
        let spec = Self {
            axis,
            values: settings.values.clone(),
            repeats: settings.repeats,
            base: settings.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.repeats < 1 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        self.base.validate()?;
        for v in &self.values {
            self.axis.apply(&self.base.train, v)?.validate()?;
        }
        Ok(())
    }

    /// Seed of repeat `r` of value `vi`.
    pub fn run_seed(&self, vi: usize, r: usize) -> u64 {
        derive_seed(self.base.train.seed, &[vi as u64, r as u64])
    }

    pub fn run_dir(&self, out: &Path, vi: usize, r: usize) -> PathBuf {
        let value: String = self.values[vi]
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() || ch == '.' || ch == '-' { ch } else { '_' })
            .collect();
        out.join("runs")
            .join(format!("{:02}-{}={}", vi, self.axis.name(), value))
            .join(format!("seed-{}", r))
    }

    fn needs_teacher(&self) -> Result<bool> {
        for v in &self.values {
            if self.axis.apply(&self.base.train, v)?.kd_kind != KdKind::None {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Aggregate of one axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub value: String,
    /// Final test accuracy per repeat; `None` for a failed run.
    pub accuracies: Vec<Option<f64>>,
    pub median: Option<f64>,
    pub iqr: Option<f64>,
    pub mean: Option<f64>,
    pub failures: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

impl ReportRow {
    pub fn new(value: String, accuracies: Vec<Option<f64>>) -> Self {
        let mut ok: Vec<f64> = accuracies.iter().flatten().copied().collect();
        ok.sort_by(f64::total_cmp);
        let failures = accuracies.len() - ok.len();
        let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        Self {
            value,
            median: quantile(&ok, 0.5),
            iqr: quantile(&ok, 0.75).zip(quantile(&ok, 0.25)).map(|(a, b)| a - b),
            mean,
            failures,
            accuracies,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub axis: Axis,
    pub rows: Vec<ReportRow>,
    pub report_path: PathBuf,
    /// `(value index, repeat, message)` per failed run.
    pub failures: Vec<(usize, usize, String)>,
}

impl SweepOutcome {
    /// Row with the highest median; ties keep the earliest value.
    pub fn best(&self) -> Option<&ReportRow> {
        self.rows.iter().filter(|r| r.median.is_some()).fold(None, |best, r| match best {
            Some(b) if b.median >= r.median => Some(b),
            _ => Some(r),
        })
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn write_report(path: &Path, axis: Axis, rows: &[ReportRow], repeats: usize) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {}", path.display(), e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec![axis.name().to_string()];
    header.extend((0..repeats).map(|r| format!("acc_seed{}", r)));
    header.extend(["median", "iqr", "mean", "failures"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.value.clone()];
        rec.extend(row.accuracies.iter().map(|a| fmt_opt(*a)));
        rec.extend([fmt_opt(row.median), fmt_opt(row.iqr), fmt_opt(row.mean), row.failures.to_string()]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every `(value, repeat)` pair, up to `workers` at a time, and writes
/// `report.csv`. A failed run is recorded and does not stop the others.
///
/// `teacher` overrides both `--teacher` and teacher training.
pub fn run_sweep(spec: &SweepSpec, out: &Path, teacher: Option<&MlpParams<f64>>) -> Result<SweepOutcome> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    let data = load_data(&spec.base)?;
    let owned;
    let teacher = match teacher {
        Some(t) => Some(t),
        None if spec.needs_teacher()? => {
            owned = obtain_teacher(&spec.base, &data, out)?;
            Some(&owned)
        }
        None => None,
    };

    let jobs: Vec<(usize, usize)> = (0..spec.values.len())
        .flat_map(|vi| (0..spec.repeats).map(move |r| (vi, r)))
        .collect();
    let run = |&(vi, r): &(usize, usize)| -> std::result::Result<f64, String> {
        let dir = spec.run_dir(out, vi, r);
        let result = spec
            .axis
            .apply(&spec.base.train, &spec.values[vi])
            .and_then(|mut cfg| {
                cfg.seed = spec.run_seed(vi, r);
                let t = if cfg.kd_kind == KdKind::None { None } else { teacher };
                run_student(&spec.base, &cfg, &data, t, &dir)
            });
        match result {
            Ok((_, history)) => history
                .last()
                .map(|rec| rec.test_accuracy)
                .ok_or_else(|| "no epochs recorded".to_string()),
            Err(e) => {
                let msg = e.to_string();
                let _ = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join("error.txt"), &msg));
                Err(msg)
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.base.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {}", e)))?;
    let results: Vec<std::result::Result<f64, String>> = pool.install(|| jobs.par_iter().map(run).collect());

    let mut rows = Vec::with_capacity(spec.values.len());
    let mut failures = Vec::new();
    for (vi, value) in spec.values.iter().enumerate() {
        let accs = (0..spec.repeats)
            .map(|r| match &results[vi * spec.repeats + r] {
                Ok(a) => Some(*a),
                Err(msg) => {
                    failures.push((vi, r, msg.clone()));
                    None
                }
            })
            .collect();
        rows.push(ReportRow::new(value.clone(), accs));
    }
    let report_path = out.join(REPORT_FILE);
    write_report(&report_path, spec.axis, &rows, spec.repeats)?;
    Ok(SweepOutcome {
        axis: spec.axis,
        rows,
        report_path,
        failures,
    })
}

/// The `sweep` command.
pub fn cmd_sweep(settings: &Settings) -> Result<SweepOutcome> {
    let spec = SweepSpec::from_settings(settings)?;
    run_sweep(&spec, &settings.out_dir()?, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5), Some(2.5));
        assert_eq!(quantile(&xs, 0.25), Some(1.75));
        assert_eq!(quantile(&xs, 0.75), Some(3.25));
        assert_eq!(quantile(&[7.0], 0.25), Some(7.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn row_statistics_skip_failures() {
        let row = ReportRow::new("1".into(), vec![Some(0.5), None, Some(0.7), Some(0.6)]);
        assert_eq!(row.failures, 1);
        assert_eq!(row.median, Some(0.6));
        assert!((row.mean.unwrap() - 0.6).abs() < 1e-15);
        assert!((row.iqr.unwrap() - 0.1).abs() < 1e-15);
        let dead = ReportRow::new("x".into(), vec![None]);
        assert_eq!((dead.median, dead.mean, dead.failures), (None, None, 1));
    }

    #[test]
    fn axis_application() {
        let base = TrainConfig::default();
        assert_eq!(Axis::Temperature.apply(&base, "0.07").unwrap().distill.tau, 0.07);
        assert_eq!(Axis::BatchSize.apply(&base, "512").unwrap().batch_size, 512);
        assert_eq!(Axis::KdKind.apply(&base, "none").unwrap().kd_kind, KdKind::None);
        assert!(Axis::Triple.apply(&base, "bogus").is_err());
        assert!("depth".parse::<Axis>().is_err());
        assert_eq!("negative_scope".parse::<Axis>().unwrap(), Axis::NegativeScope);
    }

    #[test]
    fn seeds_differ_per_cell() {
        let spec = SweepSpec {
            axis: Axis::Temperature,
            values: vec!["1".into(), "2".into()],
            repeats: 3,
            base: Settings::default(),
        };
        let mut seeds: Vec<u64> = (0..2).flat_map(|v| (0..3).map(move |r| (v, r))).map(|(v, r)| spec.run_seed(v, r)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
    }
}
