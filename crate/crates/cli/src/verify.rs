//! Self-contained property suite over the losses and gradient analysis.
//!
//! Each check draws its own inputs from a seeded generator, so the suite
//! needs no files on disk. The gradient factor is injectable so a broken
//! implementation can be shown to fail the cross-checks.

use ckd_core::analysis::{
    batch_size_trend, g_factor, g_factor_approx, g_factor_from_gaps, rank_bound, same_class_gain, tau_limits,
    triple_count, GradientFactorInput, TripleCountQuery,
};
use ckd_core::losses::{ckd_loss, combined_kd_loss, total_objective, vanilla_kd_loss, LogitBatch};
use ckd_core::rng::{derive_seed, seeded, Rng};
use ckd_core::{DistillConfig, KdKind, NegativeScope, Result, Tape, Tensor, TripleStrategy};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Gradient factor under test.
pub type GFactorFn = fn(&GradientFactorInput<f64>) -> Result<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<34} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub g_factor: GFactorFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            g_factor: g_factor::<f64>,
        }
    }
}

type CheckFn = fn(&mut Rng, &VerifyOptions) -> Result<(bool, String)>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("loss closed forms", closed_forms),
    ("ckd scale invariance", scale_invariance),
    ("ckd softmax vs ratio form", ratio_form),
    ("permutation equivariance", permutation_equivariance),
    ("similarity-level gradient = g/tau", similarity_gradient),
    ("teacher receives no gradient", teacher_constancy),
    ("ckd loss non-negative", non_negative),
    ("finite-difference gradients", finite_differences),
    ("g range and monotonicity", g_monotonicity),
    ("g from gaps identity", gap_identity),
    ("g increases with batch size", batch_trend),
    ("temperature limits", temperature_limits),
    ("same-class negatives dominate", same_class),
    ("triple counts vs enumeration", triple_enumeration),
    ("negative rank bound", rank_check),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(name, check))| {
            let mut rng = seeded(derive_seed(opts.seed, &[i as u64]));
            let (passed, detail) = match check(&mut rng, opts) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {}", e)),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Logits and labels; with `mixed` the labels use at least two classes.
struct RandomBatch {
    teacher: Tensor<f64>,
    student: Tensor<f64>,
    labels: Vec<usize>,
}

fn random_batch(rng: &mut Rng, max_b: usize, max_c: usize, mixed: bool) -> RandomBatch {
    let b = rng.random_range(2..=max_b);
    let c = rng.random_range(2..=max_c);
    let mut labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    if mixed && labels.iter().all(|&y| y == labels[0]) {
        labels[0] = (labels[0] + 1) % c;
    }
    RandomBatch {
        teacher: gaussian(rng, b, c, 2.0),
        student: gaussian(rng, b, c, 2.0),
        labels,
    }
}

fn eval_loss<F>(t: &Tensor<f64>, s: &Tensor<f64>, labels: &[usize], f: F) -> Result<f64>
where
    F: for<'t> Fn(&LogitBatch<'t, f64>) -> Result<ckd_core::Var<'t, f64>>,
{
    let tape = Tape::new();
    let batch = LogitBatch::new(tape.constant(t.clone()), tape.leaf(s.clone()), labels.to_vec())?;
    Ok(f(&batch)?.item())
}

fn configs() -> Vec<DistillConfig> {
    let mut out = Vec::new();
    for triple in TripleStrategy::ALL {
        for scope in [NegativeScope::AllSamples, NegativeScope::CrossClassOnly] {
            out.push(DistillConfig {
                triple,
                negative_scope: scope,
                tau: 0.5,
                ..DistillConfig::default()
            });
        }
    }
    out
}

fn closed_forms(_: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let cfg = DistillConfig::default();
    let mut worst: f64 = 0.0;
    for b in [2usize, 8, 32] {
        // identical rows make every similarity equal
        let logits = Tensor::full(&[b, 5], 1.0);
        let labels = (0..b).map(|i| i % 5).collect::<Vec<_>>();
        let loss = eval_loss(&logits, &logits, &labels, |x| ckd_loss(x, &cfg))?;
        worst = worst.max((loss - (b as f64).ln()).abs());
    }
    let one = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]])?;
    let single = eval_loss(&one, &one.map(|x| -x), &[1], |x| ckd_loss(x, &cfg))?;
    let ok = worst <= 1e-10 && single == 0.0;
    Ok((ok, format!("max |loss - ln B| = {:.1e}, B=1 loss = {}", worst, single)))
}

fn scale_invariance(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let rb = random_batch(rng, 16, 10, true);
        let (b, c) = rb.teacher.dims2("scale")?;
        let mut st = rb.teacher.clone();
        let mut ss = rb.student.clone();
        for i in 0..b {
            let (ft, fs) = (rng.random_range(0.05..20.0), rng.random_range(0.05..20.0));
            for k in 0..c {
                st.data_mut()[i * c + k] *= ft;
                ss.data_mut()[i * c + k] *= fs;
            }
        }
        for cfg in configs() {
            let a = eval_loss(&rb.teacher, &rb.student, &rb.labels, |x| ckd_loss(x, &cfg))?;
            let z = eval_loss(&st, &ss, &rb.labels, |x| ckd_loss(x, &cfg))?;
            worst = worst.max((a - z).abs());
        }
    }
    Ok((worst <= 1e-10, format!("max deviation {:.1e}", worst)))
}

fn unit_rows(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (r, c) = x.dims2("unit_rows").expect("matrix");
    (0..r)
        .map(|i| {
            let row = &x.data()[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over anchors of `-ln(e^{pos/τ} / (e^{pos/τ} + Σ_neg e^{neg/τ}))`
/// written out term by term.
pub fn ratio_form_ckd(t: &Tensor<f64>, s: &Tensor<f64>, labels: &[usize], cfg: &DistillConfig) -> f64 {
    let (t, s) = (unit_rows(t), unit_rows(s));
    let b = t.len();
    let mut total = 0.0;
    for i in 0..b {
        let pos = dot(&t[i], &s[i]) / cfg.tau;
        let mut denom = pos.exp();
        for j in 0..b {
            if j == i || (cfg.negative_scope == NegativeScope::CrossClassOnly && labels[j] == labels[i]) {
                continue;
            }
            let neg = match cfg.triple {
                TripleStrategy::TeacherAnchor => dot(&t[i], &s[j]),
                TripleStrategy::StudentAnchorTeacherNeg => dot(&s[i], &t[j]),
                TripleStrategy::StudentAnchorStudentNeg => dot(&s[i], &s[j]),
            };
            denom += (neg / cfg.tau).exp();
        }
        total += -(pos.exp() / denom).ln();
    }
    total / b as f64
}

fn ratio_form(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let rb = random_batch(rng, 16, 10, true);
        for cfg in configs() {
            let a = eval_loss(&rb.teacher, &rb.student, &rb.labels, |x| ckd_loss(x, &cfg))?;
            let r = ratio_form_ckd(&rb.teacher, &rb.student, &rb.labels, &cfg);
            worst = worst.max((a - r).abs());
        }
    }
    Ok((worst <= 1e-10, format!("max deviation {:.1e}", worst)))
}

fn all_losses(t: &Tensor<f64>, s: &Tensor<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for cfg in configs() {
        out.push(eval_loss(t, s, labels, |x| ckd_loss(x, &cfg))?);
    }
    let cfg = DistillConfig::default();
    out.push(eval_loss(t, s, labels, |x| vanilla_kd_loss(x, cfg.kd_temperature))?);
    out.push(eval_loss(t, s, labels, |x| combined_kd_loss(x, &cfg))?);
    for kind in [KdKind::Ckd, KdKind::Vanilla, KdKind::Combined, KdKind::None] {
        out.push(eval_loss(t, s, labels, |x| Ok(total_objective(x, &cfg, kind)?.total))?);
    }
    Ok(out)
}

fn permutation_equivariance(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let rb = random_batch(rng, 16, 10, true);
        let mut perm: Vec<usize> = (0..rb.labels.len()).collect();
        perm.shuffle(rng);
        let labels: Vec<usize> = perm.iter().map(|&i| rb.labels[i]).collect();
        let a = all_losses(&rb.teacher, &rb.student, &rb.labels)?;
        let p = all_losses(&rb.teacher.select_rows(&perm)?, &rb.student.select_rows(&perm)?, &labels)?;
        for (x, y) in a.iter().zip(&p) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max deviation {:.1e}", worst)))
}

fn similarity_gradient(rng: &mut Rng, opts: &VerifyOptions) -> Result<(bool, String)> {
    let (mut worst_pos, mut worst_neg): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let k = rng.random_range(1..=16);
        let tau = rng.random_range(0.05..5.0);
        let row: Vec<f64> = (0..=k).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let tape = Tape::new();
        let sims = tape.leaf(Tensor::new(vec![1, k + 1], row.clone())?);
        let loss = sims.scale(1.0 / tau).cross_entropy(&[0])?;
        let grad = tape.backward(loss)?.wrt(sims);
        let g = (opts.g_factor)(&GradientFactorInput::new(row[0], row[1..].to_vec(), tau)?)?;
        worst_pos = worst_pos.max((grad.data()[0] + g / tau).abs());
        worst_neg = worst_neg.max((grad.data()[1..].iter().sum::<f64>() - g / tau).abs());
    }
    let worst = worst_pos.max(worst_neg);
    Ok((
        worst <= 1e-8,
        format!("max |dL/dpos + g/tau| = {:.1e}, max |sum dL/dneg - g/tau| = {:.1e}", worst_pos, worst_neg),
    ))
}

fn teacher_constancy(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let rb = random_batch(rng, 16, 10, true);
        for cfg in configs() {
            for kind in [KdKind::Ckd, KdKind::Vanilla, KdKind::Combined, KdKind::None] {
                let tape = Tape::new();
                let t = tape.leaf(rb.teacher.clone());
                let s = tape.leaf(rb.student.clone());
                let batch = LogitBatch::new(t, s, rb.labels.clone())?;
                let obj = total_objective(&batch, &cfg, kind)?;
                let g = tape.backward(obj.total)?.wrt(t);
                worst = worst.max(g.data().iter().fold(0.0, |m, x| m.max(x.abs())));
            }
        }
    }
    Ok((worst == 0.0, format!("max |dL/dteacher| = {:.1e}", worst)))
}

fn non_negative(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut lowest = f64::INFINITY;
    for _ in 0..50 {
        let rb = random_batch(rng, 16, 10, true);
        for cfg in configs() {
            lowest = lowest.min(eval_loss(&rb.teacher, &rb.student, &rb.labels, |x| ckd_loss(x, &cfg))?);
        }
    }
    Ok((lowest >= 0.0, format!("min loss {:.3e}", lowest)))
}

/// Worst relative error of the student gradient against central differences.
pub fn fd_max_relative_error<F>(t: &Tensor<f64>, s: &Tensor<f64>, labels: &[usize], f: F) -> Result<f64>
where
    F: for<'t> Fn(&LogitBatch<'t, f64>) -> Result<ckd_core::Var<'t, f64>>,
{
    const H: f64 = 1e-5;
    let tape = Tape::new();
    let sv = tape.leaf(s.clone());
    let batch = LogitBatch::new(tape.constant(t.clone()), sv, labels.to_vec())?;
    let analytic = tape.backward(f(&batch)?)?.wrt(sv);
    let mut worst: f64 = 0.0;
    for k in 0..s.len() {
        let mut plus = s.clone();
        plus.data_mut()[k] += H;
        let mut minus = s.clone();
        minus.data_mut()[k] -= H;
        let numeric = (eval_loss(t, &plus, labels, &f)? - eval_loss(t, &minus, labels, &f)?) / (2.0 * H);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn finite_differences(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let rb = random_batch(rng, 16, 10, true);
        let cfg = DistillConfig {
            triple: TripleStrategy::ALL[trial % 3],
            negative_scope: if trial % 2 == 0 {
                NegativeScope::AllSamples
            } else {
                NegativeScope::CrossClassOnly
            },
            alpha: 2.0,
            ..DistillConfig::default()
        };
        let (t, s, y) = (&rb.teacher, &rb.student, &rb.labels);
        worst = worst.max(fd_max_relative_error(t, s, y, |x| ckd_loss(x, &cfg))?);
        worst = worst.max(fd_max_relative_error(t, s, y, |x| combined_kd_loss(x, &cfg))?);
        worst = worst.max(fd_max_relative_error(t, s, y, |x| vanilla_kd_loss(x, cfg.kd_temperature))?);
        worst = worst.max(fd_max_relative_error(t, s, y, |x| Ok(total_objective(x, &cfg, KdKind::Ckd)?.total))?);
    }
    Ok((worst < 1e-4, format!("max relative error {:.1e}", worst)))
}

fn g_monotonicity(rng: &mut Rng, opts: &VerifyOptions) -> Result<(bool, String)> {
    let g = opts.g_factor;
    let mut bad = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=16);
        let tau = rng.random_range(0.1..2.0);
        let pos = rng.random_range(-1.0..=0.9);
        let negs: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..=0.9)).collect();
        let base = g(&GradientFactorInput::new(pos, negs.clone(), tau)?)?;
        let up_pos = g(&GradientFactorInput::new(pos + 0.1, negs.clone(), tau)?)?;
        let j = rng.random_range(0..k);
        let mut raised = negs.clone();
        raised[j] += 0.1;
        let up_neg = g(&GradientFactorInput::new(pos, raised, tau)?)?;
        if !((0.0..1.0).contains(&base) && up_pos < base && up_neg > base) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{} of 1000 inputs violate", bad)))
}

fn gap_identity(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(0..=16);
        let tau = rng.random_range(0.1..2.0);
        let pos = rng.random_range(-1.0..=1.0);
        let negs: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let input = GradientFactorInput::new(pos, negs, tau)?;
        worst = worst.max((g_factor(&input)? - g_factor_from_gaps(&input.gaps(), tau)?).abs());
    }
    Ok((worst <= 1e-12, format!("max deviation {:.1e}", worst)))
}

fn batch_trend(rng: &mut Rng, opts: &VerifyOptions) -> Result<(bool, String)> {
    let sizes: Vec<usize> = (0..=10).map(|k| 1usize << k).collect();
    let mut not_increasing = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let rho = rng.random_range(0.01..=2.0);
        let tau = rng.random_range(0.1..=2.0);
        if !batch_size_trend(rho, tau, &sizes)?.strictly_increasing {
            not_increasing += 1;
        }
        for &b in &sizes {
            let input = GradientFactorInput::new(0.5, vec![0.5 - rho; b], tau)?;
            worst = worst.max(((opts.g_factor)(&input)? - g_factor_approx(rho, tau, b)?).abs());
        }
    }
    Ok((
        not_increasing == 0 && worst <= 1e-12,
        format!("{} non-monotone pairs, equal-gap deviation {:.1e}", not_increasing, worst),
    ))
}

fn temperature_limits(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut ok = true;
    let mut detail = Vec::new();
    for b in [1usize, 4, 64] {
        let negs: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..=0.9)).collect();
        let lim = tau_limits(&GradientFactorInput::new(1.0, negs, 1.0)?)?;
        let target = b as f64 / (b as f64 + 1.0);
        let pass = lim.tiny_applicable && lim.g_at_tiny_tau < 1e-6 && (lim.g_at_huge_tau - target).abs() <= 1e-3;
        ok &= pass;
        detail.push(format!("B={}: {:.1e}/{:.4}", b, lim.g_at_tiny_tau, lim.g_at_huge_tau));
    }
    Ok((ok, detail.join(", ")))
}

fn same_class(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut bad = 0;
    for _ in 0..200 {
        let pos = rng.random_range(-1.0..=1.0);
        let a: f64 = rng.random_range(-1.0..=1.0);
        let c: f64 = rng.random_range(-1.0..=1.0);
        let (same, cross) = (a.max(c), a.min(c));
        let (gs, gc) = same_class_gain(pos, same, cross, rng.random_range(0.1..=2.0), rng.random_range(1..=64))?;
        if gs < gc {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{} of 200 violate", bad)))
}

/// Per-anchor triple counts by direct enumeration over a labeled set of
/// `m` samples in each of `c` classes, after a seeded shuffle.
pub fn enumerate_triples(m: usize, c: usize, rng: &mut Rng) -> (usize, usize, usize) {
    let n = m * c;
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(rng);
    let anchor = rng.random_range(0..n);
    let y = labels[anchor];
    let mut classic = 0;
    for p in 0..n {
        for q in 0..n {
            if p != anchor && labels[p] == y && labels[q] != y {
                classic += 1;
            }
        }
    }
    let crd = (0..n).filter(|&q| labels[q] != y).count();
    // consecutive groups of c samples; the anchor contrasts with its group
    let group = anchor / c;
    let ckd = (0..n).filter(|&q| q / c == group).count();
    (classic, crd, ckd)
}

fn triple_enumeration(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut cases = 0;
    let mut bad = Vec::new();
    let mut check = |m: usize, c: usize, rng: &mut Rng| -> Result<()> {
        let closed = triple_count(&TripleCountQuery {
            n: m * c,
            m,
            c,
            memory_bank: 0,
        })?;
        let (classic, crd, ckd) = enumerate_triples(m, c, rng);
        cases += 1;
        if (classic, crd, ckd) != (closed.classic, closed.crd, closed.ckd) {
            bad.push(format!("m={} c={}", m, c));
        }
        Ok(())
    };
    for n in 1..=60 {
        for m in (1..=n).filter(|m| n % m == 0) {
            check(m, n / m, rng)?;
        }
    }
    check(10, 10, rng)?;
    let big = triple_count(&TripleCountQuery {
        n: 100,
        m: 10,
        c: 10,
        memory_bank: 0,
    })?;
    let ok = bad.is_empty() && (big.classic, big.crd, big.ckd) == (810, 90, 10);
    Ok((ok, format!("{} factorizations, mismatches: [{}]", cases, bad.join("; "))))
}

fn rank_check(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut violations = 0;
    let mut full = 0;
    for _ in 0..200 {
        let c = rng.random_range(2..=12);
        let n = rng.random_range(2..=40);
        let r = rank_bound(c, n, &gaussian(rng, n - 1, c, 1.0))?;
        if r.empirical_rank > r.bound {
            violations += 1;
        }
        if r.empirical_rank == r.bound {
            full += 1;
        }
    }
    Ok((violations == 0, format!("{} violations, {} of 200 at the bound", violations, full)))
}
