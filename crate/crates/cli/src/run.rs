//! Data loading, teacher preparation and single student runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ckd_core::checkpoint::{load_checkpoint, save_checkpoint};
use ckd_core::cifar;
use ckd_core::data::Split;
use ckd_core::model::{MlpParams, MlpSpec};
use ckd_core::train::{train_with, write_metrics_line, EpochRecord, TrainConfig};
use ckd_core::{Error, KdKind, Result};

use crate::config::{DatasetSource, Settings};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TEACHER_METRICS_FILE: &str = "teacher_metrics.jsonl";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

const TEACHER_BATCH: usize = 64;

pub fn load_data(settings: &Settings) -> Result<Split> {
    match &settings.dataset {
        DatasetSource::Synthetic => settings.synthetic.generate(),
        DatasetSource::Cifar100(dir) => {
            let load = |name: &str| -> Result<_> {
                let path = dir.join(name);
                let records = cifar::load_file(&path).map_err(|e| match e {
                    Error::Io(io) => Error::Config(format!("{}: {}", path.display(), io)),
                    other => other,
                })?;
                cifar::to_dataset(&records)
            };
            Ok(Split {
                train: load("train.bin")?,
                test: load("test.bin")?,
            })
        }
    }
}

fn widths(input: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(classes);
    w
}

pub fn teacher_spec(settings: &Settings, data: &Split) -> Result<MlpSpec> {
    MlpSpec::new(
        widths(data.train.dim(), &settings.teacher_hidden, data.train.class_count()),
        settings.teacher_seed,
    )
}

/// Student architecture; its initialization is seeded by the run seed.
pub fn student_spec(settings: &Settings, data: &Split, seed: u64) -> Result<MlpSpec> {
    MlpSpec::new(
        widths(data.train.dim(), &settings.student_hidden, data.train.class_count()),
        seed,
    )
}

pub fn teacher_config(settings: &Settings, data: &Split) -> TrainConfig {
    TrainConfig {
        epochs: settings.teacher_epochs,
        base_lr: settings.teacher_lr,
        min_lr: settings.train.min_lr.min(settings.teacher_lr),
        batch_size: TEACHER_BATCH.min(data.train.len()),
        seed: settings.teacher_seed,
        kd_kind: KdKind::None,
        ..settings.train
    }
}

/// Writes each record as one line and flushes, so a crashed run keeps its
/// completed epochs.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        write_metrics_line(&mut self.out, rec)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Trains a teacher from scratch, logging to `log` when given.
pub fn train_teacher(settings: &Settings, data: &Split, log: Option<&Path>) -> Result<(MlpParams<f64>, Vec<EpochRecord>)> {
    let spec = teacher_spec(settings, data)?;
    let cfg = teacher_config(settings, data);
    let mut writer = log.map(MetricsWriter::create).transpose()?;
    train_with(None, &spec, data, &cfg, |rec| match writer.as_mut() {
        Some(w) => w.append(rec),
        None => Ok(()),
    })
}

/// Loads `--teacher` when given, else trains one and stores it under `out`.
pub fn obtain_teacher(settings: &Settings, data: &Split, out: &Path) -> Result<MlpParams<f64>> {
    match &settings.teacher {
        Some(path) => load_checkpoint(path, &teacher_spec(settings, data)?).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("teacher {}: {}", path.display(), io)),
            other => other,
        }),
        None => {
            let (teacher, _) = train_teacher(settings, data, Some(&out.join(TEACHER_METRICS_FILE)))?;
            save_checkpoint(&teacher, &out.join(TEACHER_CKPT))?;
            Ok(teacher)
        }
    }
}

/// One student run writing `metrics.jsonl` and `student.ckpt` into `dir`.
pub fn run_student(
    settings: &Settings,
    cfg: &TrainConfig,
    data: &Split,
    teacher: Option<&MlpParams<f64>>,
    dir: &Path,
) -> Result<(MlpParams<f64>, Vec<EpochRecord>)> {
    fs::create_dir_all(dir)?;
    let spec = student_spec(settings, data, cfg.seed)?;
    let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    let (student, history) = train_with(teacher, &spec, data, cfg, |rec| writer.append(rec))?;
    save_checkpoint(&student, &dir.join(STUDENT_CKPT))?;
    Ok((student, history))
}

/// What `train` produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub teacher_test_accuracy: Option<f64>,
}

/// The `train` command. Settings are validated before any data is read.
pub fn cmd_train(settings: &Settings) -> Result<TrainOutcome> {
    settings.validate()?;
    let out = settings.out_dir()?;
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_FILE), settings.to_config_text())?;
    let data = load_data(settings)?;
    if settings.dataset == DatasetSource::Synthetic {
        for (name, set) in [("train.ckds", &data.train), ("test.ckds", &data.test)] {
            let mut w = BufWriter::new(File::create(out.join(name))?);
            set.write_ckds(&mut w)?;
            w.flush()?;
        }
    }
    let teacher = match settings.train.kd_kind {
        KdKind::None => None,
        _ => Some(obtain_teacher(settings, &data, &out)?),
    };
    let teacher_test_accuracy = teacher
        .as_ref()
        .map(|t| ckd_core::train::evaluate(t, &data.test))
        .transpose()?;
    let (_, history) = run_student(settings, &settings.train, &data, teacher.as_ref(), &out)?;
    Ok(TrainOutcome {
        history,
        teacher_test_accuracy,
    })
}
