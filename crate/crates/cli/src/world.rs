//! Synthetic concepts, embeddings and the pre-trained model for one seed.

use mima_core::adapt::{train_steps, Task};
use mima_core::diffusion::{ConceptSpec, Denoiser, GaussianMixture, NoiseSchedule};
use mima_core::metrics::cosine;
use mima_core::params::ParamSubset;
use mima_core::rng::label_id;
use mima_core::{Matrix, Rng};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRequest {
    /// Number of concept embeddings `N`.
    pub concepts: usize,
    /// Number of regularization embeddings `N'`.
    pub reg: usize,
    /// `l`
    pub tokens: usize,
    /// `c`
    pub dim: usize,
    pub std: f64,
    pub max_cosine: f64,
    /// Total rejected draws allowed before giving up.
    pub resample_limit: usize,
}

impl EmbeddingRequest {
    pub fn new(concepts: usize, reg: usize, tokens: usize, dim: usize) -> Self {
        Self {
            concepts,
            reg,
            tokens,
            dim,
            std: 1.0,
            max_cosine: 0.5,
            resample_limit: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// One `l×c` matrix per concept.
    pub concepts: Vec<Matrix>,
    /// `N'·l × c` stack of regularization rows, drawn from a separate stream
    /// so it does not depend on `N`.
    pub reg: Matrix,
}

/// Seeded Gaussian embeddings. A candidate whose cosine with any accepted
/// concept embedding reaches `max_cosine` is redrawn.
pub fn gen_embeddings(req: &EmbeddingRequest, seed: u64) -> Result<Embeddings> {
    if req.concepts == 0 || req.reg == 0 {
        return Err(CliError::Core(mima_core::Error::InvalidArgument(
            "need at least one concept and one regularization embedding".into(),
        )));
    }
    let mut rng = Rng::derive(seed, &[label_id("concept-embeddings")]);
    let mut concepts: Vec<Matrix> = Vec::with_capacity(req.concepts);
    let mut rejected = 0;
    while concepts.len() < req.concepts {
        let e = rng.normal_matrix(req.tokens, req.dim, req.std);
        if concepts.iter().all(|o| cosine(o.as_slice(), e.as_slice()) < req.max_cosine) {
            concepts.push(e);
        } else {
            rejected += 1;
            if rejected > req.resample_limit {
                return Err(CliError::ResampleLimitExceeded {
                    limit: req.resample_limit,
                });
            }
        }
    }
    let mut reg_rng = Rng::derive(seed, &[label_id("reg-embeddings")]);
    let reg = reg_rng.normal_matrix(req.reg * req.tokens, req.dim, req.std);
    Ok(Embeddings { concepts, reg })
}

/// Everything a seed's cells share.
#[derive(Clone, Debug)]
pub struct World {
    pub seed: u64,
    /// Candidate targets and others, token ids `0..P`.
    pub pool: Vec<ConceptSpec>,
    pub pool_data: Vec<Matrix>,
    /// Fresh draws from each pool concept's distribution, `x^r`.
    pub references: Vec<Matrix>,
    /// Pre-training concepts, token ids `P..P+G`.
    pub generic: Vec<ConceptSpec>,
    pub generic_data: Vec<Matrix>,
    pub reg_embeddings: Matrix,
    pub schedule: NoiseSchedule,
    pub pretrained: Denoiser,
    pub pretrain_losses: Vec<f64>,
}

fn ring_mean(dim: usize, radius: f64, angle: f64) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    m[0] = radius * angle.cos();
    if dim > 1 {
        m[1] = radius * angle.sin();
    }
    m
}

impl World {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<World> {
        let w = &cfg.world;
        let arch = &cfg.arch;
        let (p, g) = (w.concept_pool, w.generic_concepts);
        let emb = gen_embeddings(
            &EmbeddingRequest {
                concepts: p + g,
                reg: w.reg_embeddings,
                tokens: arch.tokens,
                dim: arch.embed_dim,
                std: w.embedding_std,
                max_cosine: w.max_cosine,
                resample_limit: w.resample_limit,
            },
            seed,
        )?;

        // Pool concepts sit evenly on an outer ring, pre-training concepts on
        // an inner one, both with a seeded rotation.
        let mut rot = Rng::derive(seed, &[label_id("concept-means")]);
        let (pool_phase, generic_phase) = (rot.uniform(), rot.uniform());
        let tau = std::f64::consts::TAU;
        let concept = |i: usize, radius: f64, angle: f64| ConceptSpec {
            token_id: i as u32,
            embedding: emb.concepts[i].clone(),
            distribution: GaussianMixture::single(ring_mean(arch.data_dim, radius, angle), w.concept_std),
        };
        let pool: Vec<ConceptSpec> = (0..p)
            .map(|k| concept(k, w.pool_radius, tau * (pool_phase + k as f64 / p as f64)))
            .collect();
        let generic: Vec<ConceptSpec> = (0..g)
            .map(|j| concept(p + j, w.generic_radius, tau * (generic_phase + j as f64 / g as f64)))
            .collect();

        let draw = |c: &ConceptSpec, stream: &str, n: usize| {
            let mut r = Rng::derive(seed, &[label_id(stream), u64::from(c.token_id)]);
            c.distribution.sample(n, &mut r)
        };
        let pool_data = pool.iter().map(|c| draw(c, "data", w.samples_per_concept)).collect();
        let references = pool
            .iter()
            .map(|c| draw(c, "references", cfg.evaluation.reference_count))
            .collect();
        let generic_data: Vec<Matrix> = generic.iter().map(|c| draw(c, "data", w.samples_per_concept)).collect();

        let schedule = NoiseSchedule::linear(&cfg.schedule)?;
        let init = Denoiser::init(
            arch.clone(),
            schedule.num_steps(),
            &mut Rng::derive(seed, &[label_id("init")]),
        )?;
        let tasks: Vec<Task<'_>> = generic
            .iter()
            .zip(&generic_data)
            .map(|(c, d)| Task {
                embedding: &c.embedding,
                data: d,
            })
            .collect();
        let (pretrained, pretrain_losses) = if cfg.pretrain.steps == 0 {
            (init, Vec::new())
        } else {
            train_steps(
                &init,
                &tasks,
                &schedule,
                cfg.pretrain.lr,
                cfg.pretrain.steps,
                cfg.pretrain.batch_size,
                &ParamSubset::All,
                &mut Rng::derive(seed, &[label_id("pretrain")]),
            )?
        };
        Ok(World {
            seed,
            pool,
            pool_data,
            references,
            generic,
            generic_data,
            reg_embeddings: emb.reg,
            schedule,
            pretrained,
            pretrain_losses,
        })
    }

    /// `C_reg` for a group: its other concepts' embeddings, then the
    /// independent regularization rows.
    pub fn c_reg(&self, others: &[usize]) -> Result<Matrix> {
        let mut blocks: Vec<Matrix> = others.iter().map(|&k| self.pool[k].embedding.clone()).collect();
        blocks.push(self.reg_embeddings.clone());
        Ok(Matrix::vstack(&blocks)?)
    }
}
