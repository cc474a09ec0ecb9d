//! Distillation objectives on paired teacher/student logits.
//!
//! Every loss takes a [`LogitBatch`] whose rows are per-sample logits and
//! returns a scalar [`Var`]. Teacher logits are always detached inside the
//! loss, so no objective here can write a gradient into teacher parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{compensated_sum, Scalar};
use crate::tape::Var;
use crate::tensor::{check_tau, Tensor};

/// Similarity `f(u, v)` with its paired distance `d(u, v) = -f(u, v)` (up to
/// the constant 1 for cosine).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SimilarityKind {
    /// `f = cos(u, v)` on unit rows, `d = 1 - cos`.
    #[default]
    CosineOnNormalized,
    /// `f = -‖u - v‖²`, `d = ‖u - v‖²`.
    NegSquaredEuclidean,
}

/// Which (anchor, positive, negative) triple the contrastive loss is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TripleStrategy {
    /// `(t_i, s_i, s_j)`: negatives `f(t_i, s_j)`.
    #[default]
    TeacherAnchor,
    /// `(s_i, t_i, s_j)`: negatives `f(s_i, s_j)`.
    StudentAnchorStudentNeg,
    /// `(s_i, t_i, t_j)`: negatives `f(s_i, t_j)`.
    StudentAnchorTeacherNeg,
}

impl TripleStrategy {
    pub const ALL: [TripleStrategy; 3] = [
        TripleStrategy::TeacherAnchor,
        TripleStrategy::StudentAnchorStudentNeg,
        TripleStrategy::StudentAnchorTeacherNeg,
    ];
}

/// Pool of negatives for each anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NegativeScope {
    /// Every other sample in the batch.
    #[default]
    AllSamples,
    /// Only samples with a different label.
    CrossClassOnly,
}

/// Distillation term added to the task loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KdKind {
    #[default]
    Ckd,
    Vanilla,
    Combined,
    None,
}

macro_rules! name_table {
    ($ty:ty, $what:literal, [$(($variant:expr, $name:literal)),+ $(,)?]) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                $(if self == $variant { return $name; })+
                unreachable!()
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " '{}' (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

name_table!(SimilarityKind, "similarity", [
    (SimilarityKind::CosineOnNormalized, "cosine"),
    (SimilarityKind::NegSquaredEuclidean, "neg-sq-euclidean"),
]);
name_table!(TripleStrategy, "triple strategy", [
    (TripleStrategy::TeacherAnchor, "teacher-anchor"),
    (TripleStrategy::StudentAnchorStudentNeg, "student-student"),
    (TripleStrategy::StudentAnchorTeacherNeg, "student-teacher"),
]);
name_table!(NegativeScope, "negative scope", [
    (NegativeScope::AllSamples, "all"),
    (NegativeScope::CrossClassOnly, "cross-class"),
]);
name_table!(KdKind, "kd kind", [
    (KdKind::Ckd, "ckd"),
    (KdKind::Vanilla, "vanilla"),
    (KdKind::Combined, "combined"),
    (KdKind::None, "none"),
]);

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the distillation term against the task loss.
    pub alpha: f64,
    /// Weight of the inter-sample term in [`combined_kd_loss`].
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Temperature of the vanilla KD baseline.
    pub kd_temperature: f64,
    pub similarity: SimilarityKind,
    pub triple: TripleStrategy,
    pub negative_scope: NegativeScope,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 1.0,
            tau: 1.0,
            kd_temperature: 4.0,
            similarity: SimilarityKind::CosineOnNormalized,
            triple: TripleStrategy::TeacherAnchor,
            negative_scope: NegativeScope::AllSamples,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{} = {} is out of range", what, v)));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", self.tau);
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return bad("kd-temp", self.kd_temperature);
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", self.alpha);
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", self.beta);
        }
        Ok(())
    }
}

/// Teacher and student logits for one mini-batch, one sample per row.
#[derive(Debug, Clone)]
pub struct LogitBatch<'t, T> {
    teacher: Var<'t, T>,
    student: Var<'t, T>,
    labels: Vec<usize>,
}

impl<'t, T: Scalar> LogitBatch<'t, T> {
    pub fn new(teacher: Var<'t, T>, student: Var<'t, T>, labels: Vec<usize>) -> Result<Self> {
        let ts = teacher.shape();
        let ss = student.shape();
        if ts != ss || ts.len() != 2 {
            return Err(Error::Shape {
                op: "LogitBatch",
                detail: format!("teacher {:?} vs student {:?}", ts, ss),
            });
        }
        let (b, c) = (ts[0], ts[1]);
        if b < 1 || c < 2 {
            return Err(Error::Shape {
                op: "LogitBatch",
                detail: format!("need B >= 1 and c >= 2, got B={} c={}", b, c),
            });
        }
        if labels.len() != b {
            return Err(Error::Shape {
                op: "LogitBatch",
                detail: format!("{} labels for batch of {}", labels.len(), b),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index { index: y, len: c });
        }
        Ok(Self {
            teacher,
            student,
            labels,
        })
    }

    pub fn teacher(&self) -> Var<'t, T> {
        self.teacher
    }

    pub fn student(&self) -> Var<'t, T> {
        self.student
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.teacher.shape()[1]
    }
}

/// `B × B` matrix with entry `(i, j) = f(a_i, b_j)`.
///
/// Cosine similarity is the plain inner product, so rows of `a` and `b` must
/// already be unit length.
pub fn similarity_matrix<'t, T: Scalar>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    kind: SimilarityKind,
) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "similarity_matrix",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    match kind {
        SimilarityKind::CosineOnNormalized => {
            let tol = T::lit(1e-6);
            for v in [a, b] {
                let off = v.with_value(|t| {
                    t.row_norms()
                        .map(|ns| ns.into_iter().any(|n| (n - T::one()).abs() > tol))
                })?;
                if off {
                    return Err(Error::DegenerateInput(
                        "cosine similarity expects unit-norm rows".into(),
                    ));
                }
            }
            a.matmul(b.transpose()?)
        }
        SimilarityKind::NegSquaredEuclidean => a.neg_sq_dist(b),
    }
}

/// Rows prepared for a similarity of the given kind: unit rows for cosine,
/// raw rows otherwise.
fn prepare<'t, T: Scalar>(x: Var<'t, T>, kind: SimilarityKind) -> Result<Var<'t, T>> {
    match kind {
        SimilarityKind::CosineOnNormalized => x.l2_normalize_rows(),
        SimilarityKind::NegSquaredEuclidean => Ok(x),
    }
}

/// Mean of `d(t_i, s_i)` over the batch.
pub fn intra_loss<'t, T: Scalar>(batch: &LogitBatch<'t, T>, kind: SimilarityKind) -> Result<Var<'t, T>> {
    let t = prepare(batch.teacher.detach(), kind)?;
    let s = prepare(batch.student, kind)?;
    let b = T::lit(batch.batch_size() as f64);
    match kind {
        SimilarityKind::CosineOnNormalized => {
            // 1 - mean_i <t_i, s_i>
            Ok(t.mul(s)?.sum().scale(-T::one() / b).add_scalar(T::one()))
        }
        SimilarityKind::NegSquaredEuclidean => {
            let diff = t.sub(s)?;
            Ok(diff.mul(diff)?.sum().scale(T::one() / b))
        }
    }
}

fn off_diagonal_mask<T: Scalar>(b: usize) -> Tensor<T> {
    let mut m = Tensor::full(&[b, b], T::one());
    for i in 0..b {
        m.data_mut()[i * b + i] = T::zero();
    }
    m
}

/// Negated mean distance over ordered pairs `i != j`: student–student pairs,
/// plus student–teacher pairs when `include_teacher_negs` is set.
pub fn inter_loss<'t, T: Scalar>(
    batch: &LogitBatch<'t, T>,
    kind: SimilarityKind,
    include_teacher_negs: bool,
) -> Result<Var<'t, T>> {
    let b = batch.batch_size();
    let tape = batch.student.tape();
    if b == 1 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let s = prepare(batch.student, kind)?;
    let pairs = T::lit((b * (b - 1)) as f64);
    // mean over off-diagonal entries of -d = f (+ const for cosine)
    let neg_mean_dist = |u: Var<'t, T>, v: Var<'t, T>| -> Result<Var<'t, T>> {
        let sim = similarity_matrix(u, v, kind)?;
        let mean_sim = sim.mul_const(off_diagonal_mask(b))?.sum().scale(T::one() / pairs);
        Ok(match kind {
            SimilarityKind::CosineOnNormalized => mean_sim.add_scalar(-T::one()),
            SimilarityKind::NegSquaredEuclidean => mean_sim,
        })
    };
    let mut loss = neg_mean_dist(s, s)?;
    if include_teacher_negs {
        let t = prepare(batch.teacher.detach(), kind)?;
        loss = loss.add(neg_mean_dist(s, t)?)?;
    }
    Ok(loss)
}

/// `intra + beta * inter` with student-only negatives.
pub fn combined_kd_loss<'t, T: Scalar>(batch: &LogitBatch<'t, T>, cfg: &DistillConfig) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let intra = intra_loss(batch, cfg.similarity)?;
    let inter = inter_loss(batch, cfg.similarity, false)?;
    intra.add(inter.scale(T::lit(cfg.beta)))
}

/// Hinton-style KD: `tau² · mean_i KL(softmax(t_i/tau) ‖ softmax(s_i/tau))`.
pub fn vanilla_kd_loss<'t, T: Scalar>(batch: &LogitBatch<'t, T>, kd_temperature: f64) -> Result<Var<'t, T>> {
    let tau = T::lit(kd_temperature);
    check_tau(tau)?;
    let t = batch.teacher.value();
    let p = t.softmax_rows(tau)?;
    let log_p = t.log_softmax_rows(tau)?;
    let b = T::lit(batch.batch_size() as f64);
    // Σ p ln p is constant in the student.
    let entropy_term = compensated_sum(
        p.data()
            .iter()
            .zip(log_p.data())
            .map(|(&pv, &lp)| if pv > T::zero() { pv * lp } else { T::zero() }),
    );
    let log_q = batch.student.log_softmax_rows(tau)?;
    let cross = log_q.mul_const(p)?.sum();
    Ok(cross
        .add_scalar(-entropy_term)
        .scale(-tau * tau / b))
}

/// Which columns of each similarity row take part in row `i`'s softmax.
fn negative_mask(labels: &[usize], scope: NegativeScope) -> Result<Option<Vec<bool>>> {
    match scope {
        NegativeScope::AllSamples => Ok(None),
        NegativeScope::CrossClassOnly => {
            let b = labels.len();
            if labels.iter().all(|&y| y == labels[0]) {
                return Err(Error::DegenerateBatch(
                    "cross-class negatives requested but every sample has the same label".into(),
                ));
            }
            let mut mask = vec![false; b * b];
            for i in 0..b {
                for j in 0..b {
                    mask[i * b + j] = i == j || labels[i] != labels[j];
                }
            }
            Ok(Some(mask))
        }
    }
}

/// `B × B` logits whose diagonal is the positive `f(t_i, s_i)` and whose
/// off-diagonal entries are `f(anchor_i, neg_j)` for the chosen strategy.
pub fn contrastive_similarities<'t, T: Scalar>(
    batch: &LogitBatch<'t, T>,
    cfg: &DistillConfig,
) -> Result<Var<'t, T>> {
    let t = batch.teacher.detach().l2_normalize_rows()?;
    let s = batch.student.l2_normalize_rows()?;
    let kind = cfg.similarity;
    let ts = similarity_matrix(t, s, kind)?;
    Ok(match cfg.triple {
        TripleStrategy::TeacherAnchor => ts,
        TripleStrategy::StudentAnchorTeacherNeg => similarity_matrix(s, t, kind)?,
        TripleStrategy::StudentAnchorStudentNeg => {
            let b = batch.batch_size();
            let ss = similarity_matrix(s, s, kind)?;
            let diag = ts.mul_const(Tensor::eye(b))?;
            diag.add(ss.mul_const(off_diagonal_mask(b))?)?
        }
    })
}

/// InfoNCE over a similarity matrix with the diagonal as the positive:
/// mean over rows of `-ln softmax(sim_i / tau)[i]`, restricted to `mask`.
pub fn info_nce_from_similarities<'t, T: Scalar>(
    sim: Var<'t, T>,
    tau: f64,
    mask: Option<&[bool]>,
) -> Result<Var<'t, T>> {
    let tau = T::lit(tau);
    check_tau(tau)?;
    let shape = sim.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape {
            op: "info_nce",
            detail: format!("similarity matrix must be square, got {:?}", shape),
        });
    }
    let targets: Vec<usize> = (0..shape[0]).collect();
    sim.scale(T::one() / tau).masked_cross_entropy(&targets, mask)
}

/// Sample-wise contrastive distillation loss.
///
/// Both logit matrices are row-normalized, the strategy's similarity matrix
/// is formed, and a `B`-way softmax cross-entropy picks out each sample's own
/// teacher/student pair against the negatives allowed by the scope.
pub fn ckd_loss<'t, T: Scalar>(batch: &LogitBatch<'t, T>, cfg: &DistillConfig) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let mask = negative_mask(batch.labels(), cfg.negative_scope)?;
    let sim = contrastive_similarities(batch, cfg)?;
    info_nce_from_similarities(sim, cfg.tau, mask.as_deref())
}

/// Task loss plus the weighted distillation term.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'t, T> {
    pub total: Var<'t, T>,
    pub task: Var<'t, T>,
    /// `None` when no distillation term is used.
    pub kd: Option<Var<'t, T>>,
}

pub fn total_objective<'t, T: Scalar>(
    batch: &LogitBatch<'t, T>,
    cfg: &DistillConfig,
    kd_kind: KdKind,
) -> Result<Objective<'t, T>> {
    cfg.validate()?;
    let task = batch.student.cross_entropy(batch.labels())?;
    let kd = match kd_kind {
        KdKind::None => None,
        KdKind::Ckd => Some(ckd_loss(batch, cfg)?),
        KdKind::Vanilla => Some(vanilla_kd_loss(batch, cfg.kd_temperature)?),
        KdKind::Combined => Some(combined_kd_loss(batch, cfg)?),
    };
    let total = match kd {
        Some(kd) => task.add(kd.scale(T::lit(cfg.alpha)))?,
        None => task,
    };
    Ok(Objective { total, task, kd })
}
