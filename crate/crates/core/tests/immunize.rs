use mima_core::diffusion::{Arch, ConceptSpec, Denoiser, GaussianMixture, NoiseSchedule, ScheduleConfig};
use mima_core::gradcheck::TinyBiLevel;
use mima_core::immunize::{
    lower_params, merged_params, mima_step, run_cp, run_jt, run_mima, run_sequential, step_variant,
    upper_gradient, upper_objective, GradMode, ImmunizeConfig, Setup, StepDraws, UpperReduction,
    Variant,
};
use mima_core::linalg::{finite_diff_grad_vec, relative_error};
use mima_core::params::{ParamSet, ParamSubset};
use mima_core::{Matrix, Rng};

const VARIANTS: [Variant; 3] = [Variant::Mima, Variant::JointTraining, Variant::ComposeOnly];

fn bits(p: &ParamSet) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

fn cfg(alpha: f64, beta: f64) -> ImmunizeConfig {
    ImmunizeConfig {
        beta,
        ..TinyBiLevel::config(alpha, GradMode::FullUnrolled)
    }
}

#[test]
fn zero_beta_leaves_theta_bitwise() {
    let tiny = TinyBiLevel::new(1).unwrap();
    for variant in VARIANTS {
        let (next, _) = step_variant(&tiny.setup(), &tiny.theta, &cfg(0.3, 0.0), variant, &mut Rng::new(5)).unwrap();
        assert_eq!(bits(&next), bits(&tiny.theta), "{variant:?}");
    }
}

#[test]
fn grad_modes_agree_exactly_at_zero_alpha() {
    let tiny = TinyBiLevel::new(2).unwrap();
    let setup = tiny.setup();
    for variant in VARIANTS {
        let full = cfg(0.0, 0.1);
        let first = ImmunizeConfig {
            grad_mode: GradMode::FirstOrder,
            ..full.clone()
        };
        let draws = StepDraws::draw(&setup, &full, &mut Rng::new(3)).unwrap();
        let a = upper_gradient(&setup, &tiny.theta, &full, variant, &draws).unwrap();
        let b = upper_gradient(&setup, &tiny.theta, &first, variant, &draws).unwrap();
        let ab: Vec<u64> = a.grad.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.grad.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb, "{variant:?}");
    }
}

#[test]
fn first_order_misses_the_hessian_term() {
    // The composite check is only meaningful if dropping the second-order
    // term is detectable at the same tolerance.
    let tiny = TinyBiLevel::new(3).unwrap();
    let setup = tiny.setup();
    let first = ImmunizeConfig {
        grad_mode: GradMode::FirstOrder,
        ..cfg(0.5, 0.1)
    };
    let draws = StepDraws::draw(&setup, &first, &mut Rng::new(4)).unwrap();
    let sig = tiny.theta.signature();
    let g = upper_gradient(&setup, &tiny.theta, &first, Variant::Mima, &draws).unwrap();
    let fd = finite_diff_grad_vec(
        |p| upper_objective(&setup, &ParamSet::from_flat(&sig, p).unwrap(), &first, Variant::Mima, &draws).unwrap(),
        &tiny.theta.flatten(),
        1e-5,
    )
    .unwrap();
    assert!(relative_error(&g.grad, &fd) > 1e-3);
}

/// One concept whose single embedding block is square and invertible, so
/// the merge returns its input.
struct SquareMerge {
    model: Denoiser,
    concepts: Vec<ConceptSpec>,
    data: Vec<Matrix>,
    reg: Matrix,
    schedule: NoiseSchedule,
}

impl SquareMerge {
    fn new() -> Self {
        let arch = Arch {
            data_dim: 1,
            tokens: 2,
            embed_dim: 2,
            kv_dim: 2,
            value_dim: 2,
            hidden: 3,
            time_dim: 2,
            sites: 1,
        };
        let mut rng = Rng::new(8);
        let schedule = NoiseSchedule::linear(&ScheduleConfig {
            num_steps: 10,
            ..ScheduleConfig::default()
        })
        .unwrap();
        let model = Denoiser::init(arch, 10, &mut rng).unwrap();
        let concept = ConceptSpec {
            token_id: 0,
            embedding: Matrix::from_rows(&[&[1.0, 0.5], &[-0.3, 1.2]]),
            distribution: GaussianMixture::single(vec![1.0], 0.3),
        };
        let data = vec![concept.distribution.sample(16, &mut rng)];
        Self {
            model,
            concepts: vec![concept],
            data,
            reg: rng.normal_matrix(3, 2, 1.0),
            schedule,
        }
    }

    fn setup(&self) -> Setup<'_> {
        Setup {
            pretrained: &self.model,
            concepts: &self.concepts,
            data: &self.data,
            reg_embeddings: &self.reg,
            schedule: &self.schedule,
        }
    }
}

#[test]
fn collapsed_inner_loop_is_plain_ascent() {
    let sq = SquareMerge::new();
    let setup = sq.setup();
    let c = cfg(0.0, 0.05);
    let theta = sq.model.params().clone();
    let (next, _) = mima_step(&setup, &theta, &c, &mut Rng::new(9)).unwrap();

    let draws = StepDraws::draw(&setup, &c, &mut Rng::new(9)).unwrap();
    let g = sq
        .model
        .loss_on(&sq.concepts[0].embedding, &draws.upper[0], &sq.schedule)
        .unwrap()
        .grad
        .flatten();
    let expect: Vec<f64> = theta.flatten().iter().zip(&g).map(|(t, g)| t + 0.05 * g).collect();
    assert!(relative_error(&next.flatten(), &expect) < 1e-10);
}

#[test]
fn one_epoch_run_equals_one_step() {
    let tiny = TinyBiLevel::new(4).unwrap();
    let setup = tiny.setup();
    let c = cfg(0.2, 0.1);
    let (theta, trace) = run_mima(&setup, &c, &mut Rng::new(10)).unwrap();
    let (step, record) = mima_step(&setup, tiny.pretrained.params(), &c, &mut Rng::new(10)).unwrap();
    assert_eq!(bits(&theta), bits(&step));
    assert_eq!(trace.len(), 1);
    assert!(trace.records[0].same_values(&record));
}

#[test]
fn runs_are_deterministic() {
    let tiny = TinyBiLevel::new(5).unwrap();
    let setup = tiny.setup();
    let c = ImmunizeConfig {
        epochs: 4,
        ..cfg(0.2, 0.1)
    };
    for run in [run_mima, run_jt, run_cp, run_sequential] {
        let (a, ta) = run(&setup, &c, &mut Rng::new(11)).unwrap();
        let (b, tb) = run(&setup, &c, &mut Rng::new(11)).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert!(ta.same_values(&tb));
    }
}

#[test]
fn trace_shapes() {
    let tiny = TinyBiLevel::new(6).unwrap();
    let setup = tiny.setup();
    let c = ImmunizeConfig {
        epochs: 3,
        ..cfg(0.2, 0.1)
    };
    let (_, t) = run_mima(&setup, &c, &mut Rng::new(1)).unwrap();
    assert_eq!(t.len(), 3);
    for r in &t.records {
        assert_eq!(r.upper_loss.len(), 2);
        assert_eq!(r.lower_loss.len(), 2);
        assert!(r.upper_loss.iter().chain(&r.lower_loss).all(|v| v.is_finite()));
        assert!(r.grad_norm.is_finite() && r.grad_norm > 0.0);
    }
    let (_, s) = run_sequential(&setup, &c, &mut Rng::new(1)).unwrap();
    assert_eq!(s.len(), 6);
    assert_eq!(s.records[0].concepts, vec![0]);
    assert_eq!(s.records[5].concepts, vec![1]);
}

#[test]
fn upper_subset_freezes_other_coordinates() {
    let tiny = TinyBiLevel::new(7).unwrap();
    let setup = tiny.setup();
    let kv = tiny.theta.signature().kv_len();
    for (subset, frozen) in [(ParamSubset::KvOnly, kv..tiny.theta.num_params()), (ParamSubset::RestOnly, 0..kv)] {
        let c = ImmunizeConfig {
            upper_subset: subset,
            ..cfg(0.2, 0.3)
        };
        let (next, _) = mima_step(&setup, &tiny.theta, &c, &mut Rng::new(2)).unwrap();
        let (a, b) = (bits(&next), bits(&tiny.theta));
        assert_eq!(a[frozen.clone()], b[frozen.clone()]);
        assert_ne!(a, b);
    }
}

#[test]
fn lower_subset_is_respected() {
    let tiny = TinyBiLevel::new(8).unwrap();
    let setup = tiny.setup();
    let kv = tiny.theta.signature().kv_len();
    let total = tiny.theta.num_params();
    let mut mask = vec![false; total];
    mask[3] = true;
    mask[kv + 4] = true;
    let c = ImmunizeConfig {
        lower_subset: ParamSubset::Custom(mask.clone()),
        ..cfg(0.4, 0.1)
    };
    let draws = StepDraws::draw(&setup, &c, &mut Rng::new(3)).unwrap();
    let base = bits(&tiny.theta);
    for variant in [Variant::Mima, Variant::JointTraining] {
        for p in lower_params(&setup, &tiny.theta, &c, variant, &draws).unwrap() {
            let b = bits(&p);
            for i in 0..total {
                assert_eq!(b[i] == base[i], !mask[i], "{variant:?} coordinate {i}");
            }
        }
    }
}

#[test]
fn compose_only_freezes_rest_at_pretrained() {
    let tiny = TinyBiLevel::new(9).unwrap();
    let setup = tiny.setup();
    let c = ImmunizeConfig {
        epochs: 3,
        ..cfg(0.3, 0.2)
    };
    let (theta, _) = run_cp(&setup, &c, &mut Rng::new(4)).unwrap();
    assert_eq!(theta.rest, tiny.pretrained.params().rest);
    assert_ne!(theta.kv_weights, tiny.pretrained.params().kv_weights);

    let draws = StepDraws::draw(&setup, &c, &mut Rng::new(4)).unwrap();
    let merged = merged_params(&setup, &tiny.theta, &c, Variant::ComposeOnly, &draws).unwrap();
    assert_eq!(merged.rest, tiny.pretrained.params().rest);
}

#[test]
fn compose_only_single_concept_without_steps_is_identity() {
    let tiny = TinyBiLevel::new(10).unwrap();
    let concepts = vec![tiny.concepts[0].clone()];
    let data = vec![tiny.data[0].clone()];
    let setup = Setup {
        concepts: &concepts,
        data: &data,
        ..tiny.setup()
    };
    let (theta, _) = run_cp(&setup, &cfg(0.0, 0.0), &mut Rng::new(5)).unwrap();
    assert_eq!(bits(&theta), bits(tiny.pretrained.params()));
}

#[test]
fn single_concept_baselines_coincide() {
    let tiny = TinyBiLevel::new(11).unwrap();
    let concepts = vec![tiny.concepts[1].clone()];
    let data = vec![tiny.data[1].clone()];
    let setup = Setup {
        concepts: &concepts,
        data: &data,
        ..tiny.setup()
    };
    let c = ImmunizeConfig {
        epochs: 3,
        ..cfg(0.2, 0.1)
    };
    let (jt, tj) = run_jt(&setup, &c, &mut Rng::new(6)).unwrap();
    let (seq, ts) = run_sequential(&setup, &c, &mut Rng::new(6)).unwrap();
    assert_eq!(bits(&jt), bits(&seq));
    assert!(tj.same_values(&ts));
}

#[test]
fn baselines_take_different_paths() {
    let tiny = TinyBiLevel::new(12).unwrap();
    let setup = tiny.setup();
    let c = ImmunizeConfig {
        epochs: 2,
        ..cfg(0.2, 0.1)
    };
    let (_, mima) = run_mima(&setup, &c, &mut Rng::new(7)).unwrap();
    let (_, jt) = run_jt(&setup, &c, &mut Rng::new(7)).unwrap();
    let (_, cp) = run_cp(&setup, &c, &mut Rng::new(7)).unwrap();
    assert_ne!(mima.records[1].upper_objective, jt.records[1].upper_objective);
    assert_ne!(mima.records[1].upper_objective, cp.records[1].upper_objective);
}

#[test]
fn sequential_order_matters() {
    let tiny = TinyBiLevel::new(13).unwrap();
    let c = ImmunizeConfig {
        epochs: 2,
        ..cfg(0.2, 0.2)
    };
    let forward = tiny.setup();
    let concepts: Vec<_> = tiny.concepts.iter().rev().cloned().collect();
    let data: Vec<_> = tiny.data.iter().rev().cloned().collect();
    let reversed = Setup {
        concepts: &concepts,
        data: &data,
        ..forward
    };
    let (a, _) = run_sequential(&forward, &c, &mut Rng::new(8)).unwrap();
    let (b, _) = run_sequential(&reversed, &c, &mut Rng::new(8)).unwrap();
    assert_ne!(bits(&a), bits(&b));
}

#[test]
fn small_ascent_step_does_not_decrease_objective() {
    let tiny = TinyBiLevel::new(14).unwrap();
    let setup = tiny.setup();
    let beta = 1e-3;
    let c = cfg(0.2, beta);
    let draws = StepDraws::draw(&setup, &c, &mut Rng::new(9)).unwrap();
    let eval = upper_gradient(&setup, &tiny.theta, &c, Variant::Mima, &draws).unwrap();
    let stepped: Vec<f64> = tiny.theta.flatten().iter().zip(&eval.grad).map(|(t, g)| t + beta * g).collect();
    let sig = tiny.theta.signature();
    let after = upper_objective(&setup, &ParamSet::from_flat(&sig, &stepped).unwrap(), &c, Variant::Mima, &draws).unwrap();
    let norm_sq: f64 = eval.grad.iter().map(|g| g * g).sum();
    assert!(after >= eval.objective - beta * norm_sq * 1e-2);
    assert!(after > eval.objective);
}

#[test]
fn sample_one_uses_a_single_concept() {
    let tiny = TinyBiLevel::new(15).unwrap();
    let setup = tiny.setup();
    let c = ImmunizeConfig {
        upper_reduction: UpperReduction::SampleOne,
        ..cfg(0.2, 0.1)
    };
    let draws = StepDraws::draw(&setup, &c, &mut Rng::new(10)).unwrap();
    assert_eq!(draws.upper_concepts.len(), 1);
    let eval = upper_gradient(&setup, &tiny.theta, &c, Variant::Mima, &draws).unwrap();
    assert_eq!(eval.objective, eval.upper_loss[draws.upper_concepts[0]]);
}

#[test]
fn invalid_configs_are_rejected() {
    let tiny = TinyBiLevel::new(16).unwrap();
    let setup = tiny.setup();
    let mut rng = Rng::new(0);
    for bad in [
        ImmunizeConfig { epochs: 0, ..cfg(0.1, 0.1) },
        ImmunizeConfig { alpha: -1.0, ..cfg(0.1, 0.1) },
        ImmunizeConfig { upper_subset: ParamSubset::Custom(vec![false; tiny.theta.num_params()]), ..cfg(0.1, 0.1) },
    ] {
        assert!(run_mima(&setup, &bad, &mut rng).is_err());
    }
}
