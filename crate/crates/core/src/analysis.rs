//! Gradient-magnitude factor of the contrastive loss, its batch-size and
//! temperature behaviour, negative-rank bounds and triple counting.
//!
//! For one anchor with positive similarity `p` and negative similarities
//! `n_j`, the per-sample loss is `-ln(e^{p/τ} / (e^{p/τ} + Σ_j e^{n_j/τ}))`.
//! Its derivative with respect to `p` is `-g/τ` where
//! `g = 1 - e^{p/τ} / (e^{p/τ} + Σ_j e^{n_j/τ})`, and the derivatives with
//! respect to the negatives sum to `+g/τ`.

use crate::error::{Error, Result};
use crate::losses::LogitBatch;
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::{check_tau, Tensor};

/// Arguments of the gradient factor for a single anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientFactorInput<T> {
    pub pos_sim: T,
    pub neg_sims: Vec<T>,
    pub tau: T,
}

impl<T: Scalar> GradientFactorInput<T> {
    pub fn new(pos_sim: T, neg_sims: Vec<T>, tau: T) -> Result<Self> {
        let input = Self {
            pos_sim,
            neg_sims,
            tau,
        };
        input.validate()?;
        Ok(input)
    }

    fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !self.pos_sim.is_finite() || self.neg_sims.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parameter("similarities must be finite".into()));
        }
        Ok(())
    }

    /// Gaps `ρ_j = pos - neg_j`.
    pub fn gaps(&self) -> Vec<T> {
        self.neg_sims.iter().map(|&n| self.pos_sim - n).collect()
    }
}

/// `g = 1 - softmax(pos, negs)[pos]`, evaluated as the softmax mass of the
/// negatives so small values keep full relative precision. In `[0, 1)`.
pub fn g_factor<T: Scalar>(input: &GradientFactorInput<T>) -> Result<T> {
    input.validate()?;
    if input.neg_sims.is_empty() {
        return Ok(T::zero());
    }
    let negs: Vec<T> = input.neg_sims.iter().map(|&n| n / input.tau).collect();
    let mut all = negs.clone();
    all.push(input.pos_sim / input.tau);
    Ok((log_sum_exp(&negs) - log_sum_exp(&all)).exp())
}

/// The same factor written through the gaps: `1 - 1 / (1 + Σ_j e^{-ρ_j/τ})`.
pub fn g_factor_from_gaps<T: Scalar>(gaps: &[T], tau: T) -> Result<T> {
    check_tau(tau)?;
    let s: T = gaps.iter().map(|&r| (-r / tau).exp()).sum();
    Ok(s / (T::one() + s))
}

/// Equal-gap approximation `1 - 1 / (1 + B e^{-ρ/τ})`.
pub fn g_factor_approx<T: Scalar>(rho: T, tau: T, negatives: usize) -> Result<T> {
    check_tau(tau)?;
    let s = T::lit(negatives as f64) * (-rho / tau).exp();
    Ok(s / (T::one() + s))
}

/// Approximate factor over a list of batch sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSizeTrend<T> {
    pub batch_sizes: Vec<usize>,
    pub values: Vec<T>,
    /// True when `values` is strictly increasing.
    pub strictly_increasing: bool,
}

pub fn batch_size_trend<T: Scalar>(rho: T, tau: T, batch_sizes: &[usize]) -> Result<BatchSizeTrend<T>> {
    if !rho.is_finite() {
        return Err(Error::Parameter("rho must be finite".into()));
    }
    let values = batch_sizes
        .iter()
        .map(|&b| g_factor_approx(rho, tau, b))
        .collect::<Result<Vec<_>>>()?;
    let strictly_increasing = values.windows(2).all(|w| w[1] > w[0]);
    Ok(BatchSizeTrend {
        batch_sizes: batch_sizes.to_vec(),
        values,
        strictly_increasing,
    })
}

/// Factor with `B` hard (same-class) negatives versus `B` easy (cross-class)
/// negatives. Returns `(g_same, g_cross)`.
pub fn same_class_gain<T: Scalar>(
    pos_sim: T,
    same_class_neg: T,
    cross_class_neg: T,
    tau: T,
    negatives: usize,
) -> Result<(T, T)> {
    if same_class_neg < cross_class_neg {
        return Err(Error::Parameter(
            "same-class negative must be at least as similar as the cross-class one".into(),
        ));
    }
    let same = GradientFactorInput::new(pos_sim, vec![same_class_neg; negatives], tau)?;
    let cross = GradientFactorInput::new(pos_sim, vec![cross_class_neg; negatives], tau)?;
    Ok((g_factor(&same)?, g_factor(&cross)?))
}

pub const TINY_TAU: f64 = 1e-3;
pub const HUGE_TAU: f64 = 1e3;

/// Factor at the temperature extremes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauLimits<T> {
    pub g_at_tiny_tau: T,
    pub g_at_huge_tau: T,
    /// `B / (B + 1)` for the input's negative count.
    pub huge_tau_target: T,
    /// False when some negative is at least as similar as the positive; the
    /// vanishing limit does not apply and `tiny_ok` is not meaningful.
    pub tiny_applicable: bool,
    /// `g_at_tiny_tau < 1e-6`.
    pub tiny_ok: bool,
    /// `|g_at_huge_tau - B/(B+1)| <= 1e-3`.
    pub huge_ok: bool,
}

pub fn tau_limits<T: Scalar>(input: &GradientFactorInput<T>) -> Result<TauLimits<T>> {
    input.validate()?;
    let at = |tau: f64| {
        g_factor(&GradientFactorInput {
            tau: T::lit(tau),
            ..input.clone()
        })
    };
    let tiny = at(TINY_TAU)?;
    let huge = at(HUGE_TAU)?;
    let b = T::lit(input.neg_sims.len() as f64);
    let target = b / (b + T::one());
    let tiny_applicable = input.neg_sims.iter().all(|&n| input.pos_sim > n);
    Ok(TauLimits {
        g_at_tiny_tau: tiny,
        g_at_huge_tau: huge,
        huge_tau_target: target,
        tiny_applicable,
        tiny_ok: tiny_applicable && tiny < T::lit(1e-6),
        huge_ok: (huge - target).abs() <= T::lit(1e-3),
    })
}

/// Per-sample alignment error `t_i - s_i`. Diagnostic only.
pub fn alignment_error<T: Scalar>(batch: &LogitBatch<'_, T>) -> Result<Tensor<T>> {
    let t = batch.teacher().value();
    let s = batch.student().value();
    t.zip_map(&s, "alignment_error", |a, b| a - b)
}

/// Mean Euclidean norm of the rows of an alignment-error matrix.
pub fn mean_alignment_norm<T: Scalar>(err: &Tensor<T>) -> Result<T> {
    let norms = err.row_norms()?;
    Ok(norms.iter().copied().sum::<T>() / T::lit(norms.len().max(1) as f64))
}

/// Class-balanced dataset description for triple counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripleCountQuery {
    /// Total samples.
    pub n: usize,
    /// Samples per class.
    pub m: usize,
    /// Classes.
    pub c: usize,
    /// Memory-bank size of a bank-based class-wise method.
    pub memory_bank: usize,
}

/// Triples needed per anchor by each formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripleCounts {
    /// Same-class partner times cross-class negative: `(m-1)(n-m)`.
    pub classic: usize,
    /// Cross-class negatives with the positive taken from the same sample: `n-m`.
    pub crd: usize,
    /// Triples actually available per sample once the memory bank is used.
    pub crd_bank: usize,
    /// Sample-wise contrast over `c` non-overlapping samples: `c`.
    pub ckd: usize,
}

pub fn triple_count(q: &TripleCountQuery) -> Result<TripleCounts> {
    if q.m < 1 || q.c < 1 || q.n != q.m * q.c {
        return Err(Error::Parameter(format!(
            "triple counting needs a class-balanced set with n = m*c, got n={} m={} c={}",
            q.n, q.m, q.c
        )));
    }
    Ok(TripleCounts {
        classic: (q.m - 1) * (q.n - q.m),
        crd: q.n - q.m,
        crd_bank: q.memory_bank,
        ckd: q.c,
    })
}

/// `min(c, n-1)` against the numerical rank of an `(n-1) × c` negative matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankBound {
    pub bound: usize,
    pub empirical_rank: usize,
}

pub const PIVOT_TOLERANCE: f64 = 1e-9;

pub fn rank_bound<T: Scalar>(c: usize, n: usize, negatives: &Tensor<T>) -> Result<RankBound> {
    let (r, cols) = negatives.dims2("rank_bound")?;
    if n < 1 || r != n - 1 || cols != c {
        return Err(Error::Shape {
            op: "rank_bound",
            detail: format!("expected {}x{}, got {}x{}", n.saturating_sub(1), c, r, cols),
        });
    }
    Ok(RankBound {
        bound: c.min(n - 1),
        empirical_rank: numerical_rank(negatives, T::lit(PIVOT_TOLERANCE))?,
    })
}

/// Rank by Gaussian elimination with partial pivoting; a column whose best
/// remaining pivot is at most `tol` in magnitude is skipped.
pub fn numerical_rank<T: Scalar>(m: &Tensor<T>, tol: T) -> Result<usize> {
    let (rows, cols) = m.dims2("numerical_rank")?;
    let mut a: Vec<Vec<T>> = (0..rows).map(|i| m.row(i).to_vec()).collect();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let (pivot, best) = (rank..rows)
            .map(|i| (i, a[i][col].abs()))
            .fold((rank, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !(best > tol) {
            continue;
        }
        a.swap(rank, pivot);
        let pivot_row = a[rank].clone();
        for row in a.iter_mut().skip(rank + 1) {
            let f = row[col] / pivot_row[col];
            if f == T::zero() {
                continue;
            }
            for (x, &p) in row.iter_mut().zip(&pivot_row).skip(col) {
                *x = *x - f * p;
            }
        }
        rank += 1;
    }
    Ok(rank)
}
