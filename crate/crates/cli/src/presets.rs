//! Bundled configurations.

use mima_core::adapt::{AdaptMethod, AttackKind};
use mima_core::diffusion::{Arch, SamplerKind, ScheduleConfig};
use mima_core::immunize::ImmunizeConfig;
use mima_core::metrics::{SimilarityKind, SimilarityMetric};
use mima_core::params::ParamSubset;

use crate::config::{ConceptGroup, EvalConfig, ExperimentConfig, Method, PretrainConfig, WorldConfig, SCHEMA_VERSION};

pub const PRESETS: [&str; 3] = ["2concept", "3concept", "minimal"];

fn group(name: &str, targets: &[usize], others: &[usize]) -> ConceptGroup {
    ConceptGroup {
        name: name.into(),
        targets: targets.to_vec(),
        others: others.to_vec(),
    }
}

fn attacks() -> Vec<AdaptMethod> {
    vec![
        AdaptMethod::new(AttackKind::FullFineTune, 0.01, 200, 32),
        AdaptMethod::new(AttackKind::LowRank, 0.01, 200, 32),
        AdaptMethod::new(AttackKind::KeyValueOnly, 0.01, 200, 32),
        AdaptMethod::new(AttackKind::EmbeddingOnly, 0.05, 200, 32),
    ]
}

fn base(name: &str, groups: Vec<ConceptGroup>) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        output_dir: format!("runs/{name}").into(),
        seeds: vec![0, 1, 2, 3, 4],
        workers: 0,
        methods: Method::ALL.to_vec(),
        arch: Arch::default(),
        schedule: ScheduleConfig::default(),
        world: WorldConfig {
            concept_pool: 8,
            generic_concepts: 4,
            reg_embeddings: 4,
            pool_radius: 3.0,
            generic_radius: 1.0,
            concept_std: 0.3,
            samples_per_concept: 128,
            embedding_std: 1.0,
            max_cosine: 0.5,
            resample_limit: 10_000,
        },
        pretrain: PretrainConfig {
            steps: 2000,
            lr: 0.05,
            batch_size: 64,
        },
        immunize: ImmunizeConfig {
            alpha: 0.05,
            beta: 0.02,
            epochs: 300,
            // Ascent on every parameter grows the output scale without bound;
            // the key/value maps saturate instead.
            upper_subset: ParamSubset::KvOnly,
            ..ImmunizeConfig::default()
        },
        attacks: attacks(),
        evaluation: EvalConfig {
            checkpoints: vec![0, 50, 100, 200],
            sample_count: 128,
            sampler: SamplerKind::Ddim,
            reference_count: 128,
            metrics: vec![
                SimilarityMetric::new(SimilarityKind::FrozenEncoderCosine),
                SimilarityMetric::new(SimilarityKind::NegMse),
                SimilarityMetric::new(SimilarityKind::MmdGaussian),
            ],
        },
        groups,
    }
}

/// Five groups of two targets, each with two other concepts held out for
/// usability scoring.
pub fn two_concept() -> ExperimentConfig {
    base(
        "2concept",
        vec![
            group("g1", &[0, 1], &[4, 5]),
            group("g2", &[2, 3], &[6, 7]),
            group("g3", &[4, 5], &[0, 1]),
            group("g4", &[6, 7], &[2, 3]),
            group("g5", &[0, 4], &[2, 6]),
        ],
    )
}

/// Five groups of three targets and three others.
pub fn three_concept() -> ExperimentConfig {
    base(
        "3concept",
        vec![
            group("g1", &[0, 1, 2], &[4, 5, 6]),
            group("g2", &[3, 4, 5], &[7, 0, 1]),
            group("g3", &[6, 7, 0], &[2, 3, 4]),
            group("g4", &[1, 3, 5], &[2, 4, 6]),
            group("g5", &[0, 2, 4], &[1, 5, 7]),
        ],
    )
}

/// One seed, one concept, one attack, one epoch and one checkpoint.
pub fn minimal() -> ExperimentConfig {
    let mut cfg = base("minimal", vec![group("g1", &[0], &[])]);
    cfg.seeds = vec![0];
    cfg.methods = vec![Method::Mima];
    cfg.world.concept_pool = 1;
    cfg.world.generic_concepts = 1;
    cfg.world.reg_embeddings = 2;
    cfg.world.samples_per_concept = 32;
    cfg.pretrain.steps = 20;
    cfg.immunize.epochs = 1;
    cfg.immunize.lower_batch = 8;
    cfg.immunize.upper_batch = 8;
    cfg.attacks = vec![AdaptMethod::new(AttackKind::FullFineTune, 0.01, 5, 8)];
    cfg.evaluation.checkpoints = vec![5];
    cfg.evaluation.sample_count = 16;
    cfg.evaluation.reference_count = 16;
    cfg.evaluation.metrics = vec![SimilarityMetric::new(SimilarityKind::FrozenEncoderCosine)];
    cfg
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "2concept" => Some(two_concept()),
        "3concept" => Some(three_concept()),
        "minimal" => Some(minimal()),
        _ => None,
    }
}
