use ckd_core::analysis::{g_factor, g_factor_from_gaps, GradientFactorInput};
use ckd_core::cifar::{parse_cifar100, serialize_cifar100, CifarRecord, PIXEL_BYTES};
use ckd_core::checkpoint::{decode, encode};
use ckd_core::data::SyntheticSpec;
use ckd_core::losses::{ckd_loss, combined_kd_loss, total_objective, vanilla_kd_loss, LogitBatch};
use ckd_core::model::{MlpParams, MlpSpec};
use ckd_core::{DistillConfig, KdKind, NegativeScope, SimilarityKind, Tape, Tensor, TripleStrategy};
use proptest::prelude::*;

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_r, 2..=max_c).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-5.0..5.0f64, r * c)))
}

fn away_from_zero(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x.abs() < 0.05 { x + 0.1 } else { x }).collect()
}

/// Teacher, student and labels for one batch of `b` rows and `c` classes.
fn batch() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<usize>)> {
    (2..=12usize, 2..=8usize).prop_flat_map(|(b, c)| {
        (
            Just(b),
            Just(c),
            prop::collection::vec(-4.0..4.0f64, b * c).prop_map(away_from_zero),
            prop::collection::vec(-4.0..4.0f64, b * c).prop_map(away_from_zero),
            prop::collection::vec(0..c, b),
        )
    })
}

fn triple() -> impl Strategy<Value = TripleStrategy> {
    prop::sample::select(TripleStrategy::ALL.to_vec())
}

fn all_losses(b: usize, c: usize, t: &[f64], s: &[f64], y: &[usize], cfg: &DistillConfig) -> Vec<f64> {
    let tape = Tape::new();
    let batch = LogitBatch::new(
        tape.constant(Tensor::new(vec![b, c], t.to_vec()).unwrap()),
        tape.leaf(Tensor::new(vec![b, c], s.to_vec()).unwrap()),
        y.to_vec(),
    )
    .unwrap();
    let mut out = vec![
        ckd_loss(&batch, cfg).unwrap().item(),
        combined_kd_loss(&batch, cfg).unwrap().item(),
        vanilla_kd_loss(&batch, cfg.kd_temperature).unwrap().item(),
    ];
    for kind in [KdKind::Ckd, KdKind::Vanilla, KdKind::Combined, KdKind::None] {
        out.push(total_objective(&batch, cfg, kind).unwrap().total.item());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions((r, c, data) in matrix(8, 8), tau in 0.05..5.0f64) {
        let p = Tensor::new(vec![r, c], data).unwrap().softmax_rows(tau).unwrap();
        for i in 0..r {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm((r, c, data) in matrix(8, 8)) {
        let x = Tensor::new(vec![r, c], away_from_zero(data)).unwrap();
        for n in x.l2_normalize_rows().unwrap().row_norms().unwrap() {
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss((b, c, t, s, y) in batch(), tau in 0.1..3.0f64) {
        let cfg = DistillConfig { tau, ..DistillConfig::default() };
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let sv = tape.leaf(Tensor::new(vec![b, c], s.clone()).unwrap());
            let batch = LogitBatch::new(tape.constant(Tensor::new(vec![b, c], t.clone()).unwrap()), sv, y.clone()).unwrap();
            let ckd = ckd_loss(&batch, &cfg).unwrap();
            let ce = sv.cross_entropy(&y).unwrap();
            let loss = match which {
                0 => ckd,
                1 => ce,
                _ => ckd.add(ce).unwrap(),
            };
            tape.backward(loss).unwrap().wrt(sv)
        };
        let (a, bb, sum) = (grad_of(0), grad_of(1), grad_of(2));
        for k in 0..sum.len() {
            prop_assert!((sum.data()[k] - a.data()[k] - bb.data()[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn ckd_is_scale_invariant(
        (b, c, t, s, y) in batch(),
        tr in triple(),
        scales in prop::collection::vec(0.01..100.0f64, 24),
    ) {
        let cfg = DistillConfig { triple: tr, ..DistillConfig::default() };
        let scaled = |x: &[f64], off: usize| -> Vec<f64> {
            x.iter().enumerate().map(|(k, v)| v * scales[(off + k / c) % scales.len()]).collect()
        };
        let base = all_losses(b, c, &t, &s, &y, &cfg)[0];
        let moved = all_losses(b, c, &scaled(&t, 0), &scaled(&s, 12), &y, &cfg)[0];
        prop_assert!((base - moved).abs() <= 1e-10, "{} vs {}", base, moved);
    }

    #[test]
    fn losses_are_permutation_equivariant(
        (b, c, t, s, y) in batch(),
        tr in triple(),
        sim in prop::sample::select(vec![SimilarityKind::CosineOnNormalized, SimilarityKind::NegSquaredEuclidean]),
        seed in any::<u64>(),
    ) {
        let cfg = DistillConfig { triple: tr, similarity: sim, ..DistillConfig::default() };
        let mut perm: Vec<usize> = (0..b).collect();
        let mut rng = ckd_core::rng::seeded(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permute = |x: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&i| x[i * c..(i + 1) * c].to_vec()).collect() };
        let py: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let a = all_losses(b, c, &t, &s, &y, &cfg);
        let p = all_losses(b, c, &permute(&t), &permute(&s), &py, &cfg);
        for (x, z) in a.iter().zip(&p) {
            prop_assert!((x - z).abs() <= 1e-12, "{} vs {}", x, z);
        }
    }

    #[test]
    fn ckd_is_non_negative((b, c, t, s, y) in batch(), tr in triple(), tau in 0.05..4.0f64) {
        let cfg = DistillConfig { triple: tr, tau, ..DistillConfig::default() };
        prop_assert!(all_losses(b, c, &t, &s, &y, &cfg)[0] >= 0.0);
    }

    #[test]
    fn teacher_receives_no_gradient((b, c, t, s, y) in batch(), tr in triple()) {
        let cfg = DistillConfig { triple: tr, negative_scope: NegativeScope::AllSamples, ..DistillConfig::default() };
        for kind in [KdKind::Ckd, KdKind::Vanilla, KdKind::Combined] {
            let tape = Tape::new();
            let tv = tape.leaf(Tensor::new(vec![b, c], t.clone()).unwrap());
            let sv = tape.leaf(Tensor::new(vec![b, c], s.clone()).unwrap());
            let batch = LogitBatch::new(tv, sv, y.clone()).unwrap();
            let obj = total_objective(&batch, &cfg, kind).unwrap();
            let g = tape.backward(obj.total).unwrap();
            prop_assert!(g.wrt(tv).data().iter().all(|&x| x == 0.0), "{:?}", kind);
        }
    }

    #[test]
    fn g_factor_range_and_monotonicity(
        pos in -1.0..1.0f64,
        negs in prop::collection::vec(-1.0..1.0f64, 1..16),
        tau in 0.05..4.0f64,
        k in any::<prop::sample::Index>(),
        step in 0.01..0.5f64,
    ) {
        let g = g_factor(&GradientFactorInput::new(pos, negs.clone(), tau).unwrap()).unwrap();
        prop_assert!((0.0..1.0).contains(&g));
        let up = g_factor(&GradientFactorInput::new(pos + step, negs.clone(), tau).unwrap()).unwrap();
        prop_assert!(up < g);
        let mut raised = negs.clone();
        raised[k.index(negs.len())] += step;
        let more = g_factor(&GradientFactorInput::new(pos, raised, tau).unwrap()).unwrap();
        prop_assert!(more > g);
    }

    #[test]
    fn gap_form_matches_similarity_form(
        pos in -1.0..1.0f64,
        negs in prop::collection::vec(-1.0..1.0f64, 0..32),
        tau in 0.1..4.0f64,
    ) {
        let input = GradientFactorInput::new(pos, negs, tau).unwrap();
        let a = g_factor(&input).unwrap();
        let b = g_factor_from_gaps(&input.gaps(), tau).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn names_round_trip(
        sim in prop::sample::select(vec![SimilarityKind::CosineOnNormalized, SimilarityKind::NegSquaredEuclidean]),
        tr in triple(),
        scope in prop::sample::select(vec![NegativeScope::AllSamples, NegativeScope::CrossClassOnly]),
        kind in prop::sample::select(vec![KdKind::Ckd, KdKind::Vanilla, KdKind::Combined, KdKind::None]),
    ) {
        prop_assert_eq!(sim.name().parse::<SimilarityKind>().unwrap(), sim);
        prop_assert_eq!(tr.to_string().parse::<TripleStrategy>().unwrap(), tr);
        prop_assert_eq!(scope.name().parse::<NegativeScope>().unwrap(), scope);
        prop_assert_eq!(kind.name().parse::<KdKind>().unwrap(), kind);
    }

    #[test]
    fn cifar_round_trip(records in prop::collection::vec((0u8..20, 0u8..100, any::<u64>()), 0..4)) {
        let records: Vec<CifarRecord> = records
            .into_iter()
            .map(|(coarse, fine, seed)| {
                let mut pixels = Box::new([0u8; PIXEL_BYTES]);
                let mut x = seed;
                for p in pixels.iter_mut() {
                    x = ckd_core::rng::splitmix64(x);
                    *p = x as u8;
                }
                CifarRecord { coarse_label: coarse, fine_label: fine, pixels }
            })
            .collect();
        let bytes = serialize_cifar100(&records);
        let parsed = parse_cifar100(&bytes).unwrap();
        prop_assert_eq!(&parsed, &records);
        prop_assert_eq!(serialize_cifar100(&parsed), bytes);
    }

    #[test]
    fn checkpoint_bytes_round_trip(widths in prop::collection::vec(2..9usize, 2..5), seed in any::<u64>()) {
        let params = MlpParams::<f64>::init(&MlpSpec::new(widths, seed).unwrap()).unwrap();
        let bytes = encode(params.tensors());
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), params.tensors().len());
        for (a, b) in back.iter().zip(params.tensors()) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn mlp_output_shape_and_finiteness(
        widths in prop::collection::vec(2..9usize, 2..5),
        seed in any::<u64>(),
        rows in 1..6usize,
        scale in 0.0..1e3f64,
    ) {
        let spec = MlpSpec::new(widths.clone(), seed).unwrap();
        let params = MlpParams::<f64>::init(&spec).unwrap();
        let d = widths[0];
        let x = Tensor::new(
            vec![rows, d],
            (0..rows * d).map(|k| scale * ((k as f64) * 0.7).sin()).collect(),
        ).unwrap();
        let out = params.predict(&x).unwrap();
        prop_assert_eq!(out.shape(), &[rows, *widths.last().unwrap()][..]);
        prop_assert!(out.all_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_generation_is_pure(
        classes in 2..5usize,
        per_class in 2..20usize,
        dim in 2..6usize,
        seed in any::<u64>(),
    ) {
        let spec = SyntheticSpec { classes, per_class, dim, seed, ..SyntheticSpec::default() };
        let a = spec.generate().unwrap();
        let b = spec.clone().generate().unwrap();
        prop_assert_eq!(a.train.labels(), b.train.labels());
        prop_assert!(a.train.features().data().iter().zip(b.train.features().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.test.features().data().iter().zip(b.test.features().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(a.train.histogram(), vec![per_class; classes]);
    }
}
