use mima_core::adapt::{train_steps, AdaptMethod, AttackKind, Task};
use mima_core::diffusion::{Arch, ConceptSpec, Denoiser, GaussianMixture, NoiseSchedule, ScheduleConfig};
use mima_core::metrics::{
    cosine, msgr, msgr_report, mrsgr, mrsgr_from_batches, trajectory, CosineAggregation, SampleSettings,
    SimilarityKind, SimilarityMetric, ENCODER_DIM,
};
use mima_core::params::ParamSubset;
use mima_core::{Error, Matrix, Rng};
use proptest::prelude::*;

const KINDS: [SimilarityKind; 3] = [
    SimilarityKind::FrozenEncoderCosine,
    SimilarityKind::NegMse,
    SimilarityKind::MmdGaussian,
];

fn gaussian(n: usize, mean: [f64; 2], std: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(n, 2, |_, c| mean[c] + std * rng.normal())
}

#[test]
fn self_similarity_of_cosine_is_one() {
    let mut rng = Rng::new(0);
    let a = gaussian(64, [1.0, 2.0], 0.3, &mut rng);
    for agg in [CosineAggregation::MeanFeature, CosineAggregation::MeanPairwise] {
        let m = SimilarityMetric {
            aggregation: agg,
            ..SimilarityMetric::new(SimilarityKind::FrozenEncoderCosine)
        };
        let s = m.build(2).unwrap().similarity(&a, &a).unwrap();
        if agg == CosineAggregation::MeanFeature {
            assert!((s - 1.0).abs() <= 1e-12);
        } else {
            assert!(s < 1.0 && s > 0.0);
        }
    }
    let mmd = SimilarityMetric::new(SimilarityKind::MmdGaussian).build(2).unwrap();
    assert!((mmd.similarity(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    let mse = SimilarityMetric::new(SimilarityKind::NegMse).build(2).unwrap();
    assert_eq!(mse.similarity(&a, &a).unwrap(), 0.0);
}

#[test]
fn orthogonal_means_have_zero_cosine() {
    let mut a = vec![0.0; ENCODER_DIM];
    let mut b = vec![0.0; ENCODER_DIM];
    a[0] = 3.0;
    a[5] = -1.0;
    b[1] = 2.0;
    b[7] = 4.0;
    assert!(cosine(&a, &b).abs() <= 1e-12);
    assert_eq!(cosine(&a, &vec![0.0; ENCODER_DIM]), 0.0);
}

#[test]
fn similarity_decreases_as_means_drift_apart() {
    for kind in KINDS {
        let metric = SimilarityMetric::new(kind).build(2).unwrap();
        let mut rng = Rng::new(1);
        let base = gaussian(256, [1.0, -0.5], 0.3, &mut rng);
        let noise = gaussian(256, [0.0, 0.0], 0.3, &mut rng);
        let mut last = f64::INFINITY;
        for k in 0..5 {
            let shift = 0.5 * k as f64;
            let moved = Matrix::from_fn(256, 2, |r, c| noise[(r, c)] + [1.0 + shift, -0.5 - 0.5 * shift][c]);
            let s = metric.similarity(&base, &moved).unwrap();
            assert!(s < last, "{kind:?} step {k}: {s} !< {last}");
            last = s;
        }
    }
}

#[test]
fn batch_errors() {
    for kind in KINDS {
        let m = SimilarityMetric::new(kind).build(2).unwrap();
        let a = Matrix::zeros(3, 2);
        assert!(matches!(m.similarity(&Matrix::zeros(0, 2), &a), Err(Error::EmptyBatch)));
        assert!(matches!(m.similarity(&a, &Matrix::zeros(3, 3)), Err(Error::DimensionMismatch(_))));
    }
    let bad = SimilarityMetric {
        bandwidth: 0.0,
        ..SimilarityMetric::new(SimilarityKind::MmdGaussian)
    };
    assert!(bad.build(2).is_err());
}

#[test]
fn encoder_is_frozen_by_seed() {
    let mut rng = Rng::new(2);
    let (a, b) = (gaussian(16, [1.0, 0.0], 0.5, &mut rng), gaussian(16, [0.0, 1.0], 0.5, &mut rng));
    let m = SimilarityMetric::new(SimilarityKind::FrozenEncoderCosine);
    let s1 = m.build(2).unwrap().similarity(&a, &b).unwrap();
    let s2 = m.build(2).unwrap().similarity(&a, &b).unwrap();
    assert_eq!(s1.to_bits(), s2.to_bits());
    let other = SimilarityMetric {
        encoder_seed: 7,
        ..m
    };
    assert_ne!(other.build(2).unwrap().similarity(&a, &b).unwrap(), s1);
}

#[test]
fn msgr_direct_arithmetic() {
    assert_eq!(msgr(&[0.8, 0.5], &[0.8, 0.5]).unwrap(), 0.0);
    assert!((msgr(&[0.8], &[0.6]).unwrap() - 0.25).abs() < 1e-15);
    assert!((msgr(&[0.8, 0.5], &[0.6, 0.5]).unwrap() - 0.125).abs() < 1e-15);
    // Exactly representable inputs give exact outputs.
    assert_eq!(msgr(&[0.5, 0.25], &[0.375, 0.25]).unwrap(), 0.125);
}

#[test]
fn msgr_rejects_degenerate_and_flags_negative_denominators() {
    assert!(matches!(
        msgr(&[0.8, 1e-12], &[0.6, 0.1]),
        Err(Error::DegenerateDenominator { concept: 1, .. })
    ));
    assert!(msgr(&[0.8], &[0.6, 0.1]).is_err());
    assert!(msgr(&[], &[]).is_err());
    let r = msgr_report(&[-0.5, 0.8], &[-1.0, 0.6]).unwrap();
    assert_eq!(r.negative_denominators, vec![0]);
    assert_eq!(r.per_concept[0], -1.0);
}

#[test]
fn msgr_sign_semantics() {
    assert!(msgr(&[0.9, 0.7], &[0.5, 0.6]).unwrap() > 0.0);
    assert!(msgr(&[0.5, 0.6], &[0.9, 0.7]).unwrap() < 0.0);
}

#[test]
fn mrsgr_direct_arithmetic() {
    assert_eq!(mrsgr(&[1.0, 1.0], &[1.0]).unwrap(), 0.0);
    assert!((mrsgr(&[0.45], &[0.9]).unwrap() - 0.5).abs() < 1e-15);
    assert!((mrsgr(&[0.4, 0.5], &[0.8, 1.0]).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(mrsgr(&[0.5], &[0.0]), Err(Error::DegenerateDenominator { .. })));
    assert!(mrsgr(&[], &[1.0]).is_err());
}

#[test]
fn mrsgr_of_identical_batches_is_zero() {
    let mut rng = Rng::new(3);
    let m = SimilarityMetric::new(SimilarityKind::FrozenEncoderCosine).build(2).unwrap();
    let t = gaussian(32, [1.0, 1.0], 0.3, &mut rng);
    let o = gaussian(32, [-1.0, 1.0], 0.3, &mut rng);
    let v = mrsgr_from_batches(&m, &[(t.clone(), t)], &[(o.clone(), o)]).unwrap();
    assert!(v.abs() <= 1e-12);
}

#[test]
fn scale_invariance_on_exactly_scalable_values() {
    // Multiples of 1/64 with short mantissas: scaling by 10 is exact here,
    // so the ratios must match bit for bit for every factor.
    let without = [0.75, 0.5, 0.625, 0.875];
    let with = [0.5, 0.5, 0.25, 0.8125];
    let base_msgr = msgr(&without, &with).unwrap();
    let base_mrsgr = mrsgr(&with, &without).unwrap();
    for lambda in [0.5, 2.0, 10.0] {
        let s = |v: &[f64]| v.iter().map(|x| lambda * x).collect::<Vec<_>>();
        assert_eq!(msgr(&s(&without), &s(&with)).unwrap().to_bits(), base_msgr.to_bits());
        assert_eq!(mrsgr(&s(&with), &s(&without)).unwrap().to_bits(), base_mrsgr.to_bits());
    }
}

proptest! {
    #[test]
    fn scale_invariance(
        without in prop::collection::vec(0.05f64..1.0, 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let with: Vec<f64> = without.iter().map(|_| rng.uniform()).collect();
        let base = msgr(&without, &with).unwrap();
        let base_r = mrsgr(&with, &without).unwrap();
        for lambda in [0.5, 2.0, 10.0] {
            let s = |v: &[f64]| v.iter().map(|x| lambda * x).collect::<Vec<_>>();
            let scaled = msgr(&s(&without), &s(&with)).unwrap();
            let scaled_r = mrsgr(&s(&with), &s(&without)).unwrap();
            if lambda == 10.0 {
                // Not a power of two: the scaled inputs are rounded.
                prop_assert!((scaled - base).abs() <= 1e-14 * (1.0 + base.abs()));
                prop_assert!((scaled_r - base_r).abs() <= 1e-14 * (1.0 + base_r.abs()));
            } else {
                prop_assert_eq!(scaled.to_bits(), base.to_bits());
                prop_assert_eq!(scaled_r.to_bits(), base_r.to_bits());
            }
        }
    }

    #[test]
    fn similarity_is_symmetric(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let a = gaussian(1 + rng.index(20), [shift, 0.0], 0.5, &mut rng);
        let b = gaussian(1 + rng.index(20), [0.0, -shift], 0.5, &mut rng);
        for kind in KINDS {
            for agg in [CosineAggregation::MeanFeature, CosineAggregation::MeanPairwise] {
                let m = SimilarityMetric { aggregation: agg, ..SimilarityMetric::new(kind) }.build(2).unwrap();
                let (ab, ba) = (m.similarity(&a, &b).unwrap(), m.similarity(&b, &a).unwrap());
                prop_assert!((ab - ba).abs() <= 1e-12, "{:?}: {} vs {}", kind, ab, ba);
            }
        }
    }
}

struct Attackable {
    model: Denoiser,
    concept: ConceptSpec,
    data: Matrix,
    schedule: NoiseSchedule,
}

fn attackable() -> Attackable {
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let mut rng = Rng::new(30);
    let model = Denoiser::init(Arch::default(), 50, &mut rng).unwrap();
    // Pre-train on a generic concept so the model is a sensible starting point.
    let generic = rng.normal_matrix(2, 8, 1.0);
    let generic_data = gaussian(256, [-2.0, 0.0], 0.5, &mut rng);
    let tasks = [Task {
        embedding: &generic,
        data: &generic_data,
    }];
    let (model, _) = train_steps(&model, &tasks, &schedule, 0.05, 300, 64, &ParamSubset::All, &mut rng).unwrap();
    let concept = ConceptSpec {
        token_id: 1,
        embedding: rng.normal_matrix(2, 8, 1.0),
        distribution: GaussianMixture::single(vec![2.0, 1.5], 0.3),
    };
    let data = concept.distribution.sample(128, &mut rng);
    Attackable {
        model,
        concept,
        data,
        schedule,
    }
}

#[test]
fn trajectory_examples() {
    let w = attackable();
    let metric = SimilarityMetric::new(SimilarityKind::FrozenEncoderCosine).build(2).unwrap();
    let mut rng = Rng::new(31);
    let reference = w.concept.distribution.sample(128, &mut rng);
    let attack = AdaptMethod::new(AttackKind::FullFineTune, 0.05, 300, 32);
    let sampling = SampleSettings {
        count: 128,
        sampler: Default::default(),
        seed: 5,
    };
    let run = |cks: &[usize]| {
        trajectory(&w.model, &attack, &w.concept, &w.data, &w.schedule, cks, &metric, &reference, &sampling, &mut Rng::new(32))
            .unwrap()
    };
    let start = run(&[0]);
    assert_eq!(start.len(), 1);
    assert_eq!(start[0].step, 0);
    let series = run(&[0, 100, 300]);
    assert_eq!(series, run(&[0, 100, 300]));
    assert_eq!(series[0], start[0]);
    assert!(
        series[2].similarity >= series[0].similarity + 0.1,
        "{:?}",
        series
    );
}
