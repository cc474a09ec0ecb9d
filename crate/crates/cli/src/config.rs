//! Run settings shared by `train` and `sweep`.
//!
//! Every setting has one key. The same key is the long flag (`--tau`) and
//! the config-file key (`tau = 0.5`). Layers apply in the order
//! defaults, then file, then flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ckd_core::data::SyntheticSpec;
use ckd_core::train::TrainConfig;
use ckd_core::{Error, Result};

/// Environment fallback for `--out`.
pub const OUT_DIR_ENV: &str = "CKD_OUT_DIR";

/// `(key, value name, help)` for every setting.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("kd", "KIND", "distillation term: ckd, vanilla, combined or none"),
    ("alpha", "F", "weight of the distillation term"),
    ("beta", "F", "inter-sample weight of the combined loss"),
    ("tau", "F", "contrastive temperature"),
    ("kd-temp", "F", "temperature of vanilla KD"),
    ("similarity", "KIND", "cosine or neg-sq-euclidean"),
    ("triple", "KIND", "teacher-anchor, student-student or student-teacher"),
    ("neg-scope", "KIND", "all or cross-class"),
    ("batch", "N", "mini-batch size"),
    ("epochs", "N", "student epochs"),
    ("lr", "F", "initial learning rate"),
    ("min-lr", "F", "final learning rate of the cosine schedule"),
    ("momentum", "F", "SGD momentum"),
    ("weight-decay", "F", "L2 weight decay"),
    ("seed", "N", "run seed (student init and batch order)"),
    ("out", "DIR", "output directory (falls back to $CKD_OUT_DIR)"),
    ("teacher", "PATH", "teacher checkpoint; trained from scratch when absent"),
    ("dataset", "SRC", "synthetic or cifar100:DIR (DIR holds train.bin and test.bin)"),
    ("workers", "N", "parallel sweep runs"),
    ("wall-clock", "on|off", "record epoch wall time in metrics logs"),
    ("teacher-hidden", "W,..", "teacher hidden widths"),
    ("student-hidden", "W,..", "student hidden widths"),
    ("teacher-epochs", "N", "teacher pre-training epochs"),
    ("teacher-lr", "F", "teacher learning rate"),
    ("teacher-seed", "N", "teacher init and batch-order seed"),
    ("classes", "N", "synthetic class count"),
    ("per-class", "N", "synthetic training samples per class"),
    ("dim", "N", "synthetic feature dimension"),
    ("center-scale", "F", "synthetic cluster centres lie in [-F, F]^dim"),
    ("noise-sigma", "F", "synthetic isotropic noise"),
    ("data-seed", "N", "synthetic data seed"),
    ("axis", "NAME", "sweep axis: temperature, batch_size, triple, negative_scope or kd_kind"),
    ("values", "V,..", "sweep axis values"),
    ("repeats", "N", "sweep seeds per value"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Cifar100(PathBuf),
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            _ => match s.strip_prefix("cifar100:") {
                Some(dir) if !dir.is_empty() => Ok(Self::Cifar100(PathBuf::from(dir))),
                _ => Err(Error::Config(format!(
                    "dataset '{}' is not 'synthetic' or 'cifar100:DIR'",
                    s
                ))),
            },
        }
    }
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Synthetic => f.write_str("synthetic"),
            Self::Cifar100(p) => write!(f, "cifar100:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub workers: usize,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_seed: u64,
    pub synthetic: SyntheticSpec,
    pub axis: Option<String>,
    pub values: Vec<String>,
    pub repeats: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            out: None,
            teacher: None,
            dataset: DatasetSource::Synthetic,
            workers: 1,
            teacher_hidden: vec![64, 64],
            student_hidden: vec![12],
            teacher_epochs: 30,
            teacher_lr: 0.05,
            teacher_seed: 1,
            synthetic: SyntheticSpec::default(),
            axis: None,
            values: Vec::new(),
            repeats: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{}: cannot parse '{}': {}", key, value, e)))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let d = &mut t.distill;
        match key {
            "kd" => t.kd_kind = parse(key, v)?,
            "alpha" => d.alpha = parse(key, v)?,
            "beta" => d.beta = parse(key, v)?,
            "tau" => d.tau = parse(key, v)?,
            "kd-temp" => d.kd_temperature = parse(key, v)?,
            "similarity" => d.similarity = parse(key, v)?,
            "triple" => d.triple = parse(key, v)?,
            "neg-scope" => d.negative_scope = parse(key, v)?,
            "batch" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "lr" => t.base_lr = parse(key, v)?,
            "min-lr" => t.min_lr = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight-decay" => t.weight_decay = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "teacher" => self.teacher = Some(PathBuf::from(v)),
            "dataset" => self.dataset = v.parse()?,
            "workers" => self.workers = parse(key, v)?,
            "wall-clock" => {
                t.record_wall_time = match v {
                    "on" => true,
                    "off" => false,
                    _ => return Err(Error::Config(format!("wall-clock: expected on or off, got '{}'", v))),
                }
            }
            "teacher-hidden" => self.teacher_hidden = parse_list(key, v)?,
            "student-hidden" => self.student_hidden = parse_list(key, v)?,
            "teacher-epochs" => self.teacher_epochs = parse(key, v)?,
            "teacher-lr" => self.teacher_lr = parse(key, v)?,
            "teacher-seed" => self.teacher_seed = parse(key, v)?,
            "classes" => self.synthetic.classes = parse(key, v)?,
            "per-class" => self.synthetic.per_class = parse(key, v)?,
            "dim" => self.synthetic.dim = parse(key, v)?,
            "center-scale" => self.synthetic.center_scale = parse(key, v)?,
            "noise-sigma" => self.synthetic.noise_sigma = parse(key, v)?,
            "data-seed" => self.synthetic.seed = parse(key, v)?,
            "axis" => self.axis = Some(v.to_string()),
            "values" => self.values = parse_list(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{}'", key))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{}'", i + 1, line))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        self.apply_file_text(&text)
    }

    /// Defaults, then the optional file, then `overrides` in order.
    pub fn resolve<'a, I>(file: Option<&Path>, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut s = Self::default();
        if let Some(path) = file {
            s.apply_file(path)?;
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        Ok(s)
    }

    /// `--out`, else `$CKD_OUT_DIR`.
    pub fn out_dir(&self) -> Result<PathBuf> {
        if let Some(p) = &self.out {
            return Ok(p.clone());
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
            _ => Err(Error::Config(format!(
                "no output directory: pass --out or set {}",
                OUT_DIR_ENV
            ))),
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.workers < 1 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.teacher_epochs < 1 {
            return Err(Error::Config("teacher-epochs must be at least 1".into()));
        }
        if self.teacher_lr.is_nan() || self.teacher_lr <= 0.0 {
            return Err(Error::Config("teacher-lr must be positive".into()));
        }
        if self.teacher_hidden.contains(&0) || self.student_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.dataset == DatasetSource::Synthetic {
            self.synthetic.validate()?;
        }
        Ok(())
    }

    /// The resolved settings as a config file that reproduces them.
    pub fn to_config_text(&self) -> String {
        let t = &self.train;
        let d = &t.distill;
        let mut lines: Vec<(&str, String)> = vec![
            ("kd", t.kd_kind.to_string()),
            ("alpha", d.alpha.to_string()),
            ("beta", d.beta.to_string()),
            ("tau", d.tau.to_string()),
            ("kd-temp", d.kd_temperature.to_string()),
            ("similarity", d.similarity.to_string()),
            ("triple", d.triple.to_string()),
            ("neg-scope", d.negative_scope.to_string()),
            ("batch", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", t.base_lr.to_string()),
            ("min-lr", t.min_lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight-decay", t.weight_decay.to_string()),
            ("seed", t.seed.to_string()),
            ("dataset", self.dataset.to_string()),
            ("wall-clock", if t.record_wall_time { "on" } else { "off" }.to_string()),
            ("teacher-hidden", join(&self.teacher_hidden)),
            ("student-hidden", join(&self.student_hidden)),
            ("teacher-epochs", self.teacher_epochs.to_string()),
            ("teacher-lr", self.teacher_lr.to_string()),
            ("teacher-seed", self.teacher_seed.to_string()),
            ("classes", self.synthetic.classes.to_string()),
            ("per-class", self.synthetic.per_class.to_string()),
            ("dim", self.synthetic.dim.to_string()),
            ("center-scale", self.synthetic.center_scale.to_string()),
            ("noise-sigma", self.synthetic.noise_sigma.to_string()),
            ("data-seed", self.synthetic.seed.to_string()),
        ];
        if let Some(p) = &self.teacher {
            lines.push(("teacher", p.display().to_string()));
        }
        let mut out = String::new();
        for (k, v) in lines {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("kd", "vanilla"),
            ("similarity", "neg-sq-euclidean"),
            ("triple", "student-student"),
            ("neg-scope", "cross-class"),
            ("out", "x"),
            ("teacher", "t.ckpt"),
            ("dataset", "synthetic"),
            ("wall-clock", "off"),
            ("teacher-hidden", "8,8"),
            ("student-hidden", "4"),
            ("axis", "temperature"),
            ("values", "0.5,1"),
        ];
        for (key, _, _) in KEYS {
            let v = samples.iter().find(|(k, _)| k == key).map_or("3", |(_, v)| *v);
            Settings::default().set(key, v).unwrap_or_else(|e| panic!("{}: {}", key, e));
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Settings::default().apply_file_text("tau = 1\nlearning_rate = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("line 2"), "{}", msg);
    }

    #[test]
    fn config_text_round_trips() {
        let mut s = Settings::default();
        s.set("tau", "0.25").unwrap();
        s.set("kd", "combined").unwrap();
        s.set("dataset", "cifar100:/data/c100").unwrap();
        let mut back = Settings::default();
        back.apply_file_text(&s.to_config_text()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn dataset_source_parse() {
        assert_eq!("synthetic".parse::<DatasetSource>().unwrap(), DatasetSource::Synthetic);
        assert_eq!(
            "cifar100:/tmp/x".parse::<DatasetSource>().unwrap(),
            DatasetSource::Cifar100("/tmp/x".into())
        );
        assert!("cifar100:".parse::<DatasetSource>().is_err());
        assert!("mnist".parse::<DatasetSource>().is_err());
    }
}
