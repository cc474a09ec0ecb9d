//! Teacher pre-training and student distillation with SGD + momentum under a
//! cosine learning-rate schedule.

use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{total_objective, DistillConfig, KdKind, LogitBatch};
use crate::model::{MlpParams, MlpSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub distill: DistillConfig,
    pub kd_kind: KdKind,
    /// Record measured epoch time; when false `wall_ms` is written as 0 so
    /// logs of identical runs are byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 0.05,
            min_lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
            distill: DistillConfig::default(),
            kd_kind: KdKind::Ckd,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) && !(self.base_lr == 0.0 && self.min_lr == 0.0) {
            return Err(Error::Config(format!(
                "need 0 < min-lr <= lr, got min-lr {} and lr {}",
                self.min_lr, self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.distill.validate()
    }
}

/// Metrics for one epoch; serialized as one JSON line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub kd_loss: f64,
    pub total_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("EpochRecord serializes")
    }
}

/// Parses a metrics log; errors name the 1-based line.
pub fn read_metrics_log<R: BufRead>(r: R) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpochRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {}", i + 1, e)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_metrics_line<W: Write>(mut w: W, rec: &EpochRecord) -> Result<()> {
    writeln!(w, "{}", rec.to_json_line())?;
    Ok(())
}

/// `min + (base - min)(1 + cos(π step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let frac = (step.min(total_steps) as f64) / total;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Top-1 accuracy from logits; ties resolve to the lowest class index.
pub fn accuracy_from_logits(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(Error::Shape {
            op: "accuracy",
            detail: format!("{} predictions for {} labels", pred.len(), labels.len()),
        });
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

const EVAL_CHUNK: usize = 1024;

pub fn predict_all(params: &MlpParams<f64>, data: &Dataset) -> Result<Tensor<f64>> {
    let n = data.len();
    let c = params.spec().classes();
    let mut out = Vec::with_capacity(n * c);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = data.features().select_rows(chunk)?;
        out.extend_from_slice(params.predict(&x)?.data());
    }
    Tensor::new(vec![n, c], out)
}

pub fn evaluate(params: &MlpParams<f64>, data: &Dataset) -> Result<f64> {
    accuracy_from_logits(&predict_all(params, data)?, data.labels())
}

/// Trains a student, calling `on_epoch` after every epoch.
///
/// Each step forwards both networks on the batch, evaluates the objective,
/// back-propagates into the student only and applies
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`. Teacher parameters are only read.
pub fn train_with<F>(
    teacher: Option<&MlpParams<f64>>,
    student_spec: &MlpSpec,
    data: &Split,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(MlpParams<f64>, Vec<EpochRecord>)>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    student_spec.validate()?;
    if student_spec.input_dim() != data.train.dim() {
        return Err(Error::Config(format!(
            "student input width {} does not match data dimension {}",
            student_spec.input_dim(),
            data.train.dim()
        )));
    }
    if student_spec.classes() != data.train.class_count() {
        return Err(Error::Config("student output width differs from class count".into()));
    }
    let teacher = match (cfg.kd_kind, teacher) {
        (KdKind::None, _) => None,
        (_, None) => {
            return Err(Error::Config(format!(
                "kd kind '{}' needs a teacher",
                cfg.kd_kind
            )))
        }
        (_, Some(t)) => {
            if t.spec().classes() != student_spec.classes() || t.spec().input_dim() != student_spec.input_dim() {
                return Err(Error::Config("teacher and student disagree on input or class count".into()));
            }
            Some(t)
        }
    };

    let mut student = MlpParams::<f64>::init(student_spec)?;
    let mut velocity: Vec<Tensor<f64>> = student
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::<f64>::new();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.min_lr);
        let batches = batch_indices(data.train.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        let (mut task_sum, mut kd_sum, mut total_sum) = (0.0, 0.0, 0.0);

        for (step, idx) in batches.iter().enumerate() {
            let (x, y) = data.train.gather(idx)?;
            tape.reset();
            let grads: Vec<Tensor<f64>>;
            {
                let vars = student.attach(&tape);
                let input = tape.constant(x.clone());
                let s = student.forward(&vars, input)?;
                let t = match teacher {
                    Some(tp) => tape.constant(tp.predict(&x)?),
                    None => s.detach(),
                };
                let batch = LogitBatch::new(t, s, y)?;
                let obj = total_objective(&batch, &cfg.distill, cfg.kd_kind)?;
                let total = obj.total.item();
                if !total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        history,
                    });
                }
                task_sum += obj.task.item();
                kd_sum += obj.kd.map_or(0.0, |k| k.item());
                total_sum += total;
                let g = tape.backward(obj.total)?;
                grads = vars.iter().map(|&v| g.wrt(v)).collect();
            }
            for ((theta, v), g) in student.tensors_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((p, vel), &gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vel = cfg.momentum * *vel + gi + cfg.weight_decay * *p;
                    *p -= lr * *vel;
                }
            }
        }

        let steps = batches.len().max(1) as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            task_loss: task_sum / steps,
            kd_loss: kd_sum / steps,
            total_loss: total_sum / steps,
            train_accuracy: evaluate(&student, &data.train)?,
            test_accuracy: evaluate(&student, &data.test)?,
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        on_epoch(&rec)?;
        history.push(rec);
    }
    Ok((student, history))
}

pub fn train(
    teacher: Option<&MlpParams<f64>>,
    student_spec: &MlpSpec,
    data: &Split,
    cfg: &TrainConfig,
) -> Result<(MlpParams<f64>, Vec<EpochRecord>)> {
    train_with(teacher, student_spec, data, cfg, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1, 0.001), 0.1);
        assert!((cosine_lr(10, 10, 0.1, 0.001) - 0.001).abs() < 1e-15);
        assert!((cosine_lr(5, 10, 0.1, 0.001) - 0.0505).abs() < 1e-15);
    }

    #[test]
    fn accuracy_cases() {
        let labels = vec![0, 1, 2, 1];
        let onehot = |shift: usize| {
            let rows: Vec<Vec<f64>> = labels
                .iter()
                .map(|&y| {
                    let mut r = vec![0.0; 3];
                    r[(y + shift) % 3] = 1.0;
                    r
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        assert_eq!(accuracy_from_logits(&onehot(0), &labels).unwrap(), 1.0);
        assert_eq!(accuracy_from_logits(&onehot(1), &labels).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { min_lr: 1.0, base_lr: 0.1, ..Default::default() }.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.distill.tau = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn metrics_log_parse_error_names_line() {
        let rec = EpochRecord {
            epoch: 1,
            lr: 0.1,
            task_loss: 1.0,
            kd_loss: 0.0,
            total_loss: 1.0,
            train_accuracy: 0.5,
            test_accuracy: 0.25,
            wall_ms: 0,
        };
        let text = format!("{}\nnot json\n", rec.to_json_line());
        match read_metrics_log(text.as_bytes()) {
            Err(Error::Format(m)) => assert!(m.starts_with("line 2"), "{}", m),
            other => panic!("unexpected {:?}", other),
        }
        let back = read_metrics_log(format!("{}\n", rec.to_json_line()).as_bytes()).unwrap();
        assert_eq!(back, vec![rec]);
    }
}
