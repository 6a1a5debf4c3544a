//! Bi-level immunization with a differentiable merge, and its baselines.
//!
//! One epoch of MIMA, for concepts `n = 1..N`:
//!
//! ```text
//! θ'_n = θ − α·P_l·∇L(x^l_n, c_n; θ)                 lower step per concept
//! θ'   = Merge(θ'_1, …, θ'_N)                        constrained kv merge, mean of rest
//! F(θ) = Σ_m L(x^u_m, c_m; θ')                        upper objective
//! θ   ← θ + β·P_u·∇F(θ)                               ascent
//! ```
//!
//! `P_l`, `P_u` are the lower/upper parameter masks. With `u = ∇_θ' F` and
//! `v_n` the merge VJP of `u` onto input `n`, the chain rule through the
//! lower step gives `∇F = Σ_n (v_n − α·H_n·P_l·v_n)` where `H_n` is the
//! Hessian of the lower loss at `θ`. `H_n·w` is computed exactly with
//! forward-over-reverse differentiation; the first-order mode drops it.
//!
//! All randomness for an epoch is drawn up front into [`StepDraws`], so the
//! objective and its gradient are deterministic functions of `θ` given the
//! draws.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::minibatch;
use crate::diffusion::{loss_grad_hvp, predictor_loss, ConceptSpec, Denoiser, NoiseSchedule, NoisedBatch};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::merge::{merge_params, MergeContext, Ridge};
use crate::params::{ParamSet, ParamSubset};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    FullUnrolled,
    FirstOrder,
}

/// Which concepts contribute to the upper gradient each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperReduction {
    /// All of them.
    #[default]
    Sum,
    /// One concept drawn uniformly per epoch.
    SampleOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImmunizeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    #[serde(default)]
    pub lower_subset: ParamSubset,
    #[serde(default)]
    pub upper_subset: ParamSubset,
    #[serde(default)]
    pub grad_mode: GradMode,
    #[serde(default)]
    pub ridge: Ridge,
    pub lower_batch: usize,
    pub upper_batch: usize,
    #[serde(default)]
    pub upper_reduction: UpperReduction,
}

impl Default for ImmunizeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.01,
            epochs: 100,
            lower_subset: ParamSubset::All,
            upper_subset: ParamSubset::All,
            grad_mode: GradMode::FullUnrolled,
            ridge: Ridge::default(),
            lower_batch: 32,
            upper_batch: 32,
            upper_reduction: UpperReduction::Sum,
        }
    }
}

impl ImmunizeConfig {
    /// `α = 0` and `β = 0` are accepted: they are the degenerate cases the
    /// update rules must reduce cleanly to.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.lower_batch == 0 || self.upper_batch == 0 {
            return Err(Error::InvalidArgument("batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Inputs that stay fixed over a whole immunization run.
#[derive(Clone, Copy, Debug)]
pub struct Setup<'a> {
    /// Architecture and the pre-trained weights `θ^p` used as `W^p` by the merge.
    pub pretrained: &'a Denoiser,
    pub concepts: &'a [ConceptSpec],
    /// One data pool per concept.
    pub data: &'a [Matrix],
    /// Stacked regularization embeddings `C_reg`.
    pub reg_embeddings: &'a Matrix,
    pub schedule: &'a NoiseSchedule,
}

impl Setup<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::InvalidArgument("no concepts to immunize".into()));
        }
        if self.data.len() != self.concepts.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} data pools for {} concepts",
                self.data.len(),
                self.concepts.len()
            )));
        }
        if self.data.iter().any(|d| d.rows() == 0) {
            return Err(Error::EmptyBatch);
        }
        self.pretrained.check_schedule(self.schedule)?;
        for c in self.concepts {
            self.pretrained.check_embedding(&c.embedding)?;
        }
        if self.reg_embeddings.cols() != self.pretrained.arch().embed_dim {
            return Err(Error::DimensionMismatch("C_reg width differs from embed_dim".into()));
        }
        Ok(())
    }

    fn subset(&self, concepts: &[usize]) -> (Vec<ConceptSpec>, Vec<Matrix>) {
        (
            concepts.iter().map(|&i| self.concepts[i].clone()).collect(),
            concepts.iter().map(|&i| self.data[i].clone()).collect(),
        )
    }
}

/// Which bi-level objective is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-concept lower steps joined by the merge layer.
    Mima,
    /// One lower step on the pooled loss, no merge.
    JointTraining,
    /// Merge of the kv weights only; everything else frozen at `θ^p`.
    ComposeOnly,
}

/// Every random quantity consumed by one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub lower: Vec<NoisedBatch>,
    pub upper: Vec<NoisedBatch>,
    /// Concepts whose upper loss enters the gradient.
    pub upper_concepts: Vec<usize>,
}

impl StepDraws {
    pub fn draw(setup: &Setup<'_>, cfg: &ImmunizeConfig, rng: &mut Rng) -> Result<Self> {
        let mut lower = Vec::with_capacity(setup.concepts.len());
        let mut upper = Vec::with_capacity(setup.concepts.len());
        for pool in setup.data {
            let x = minibatch(pool, cfg.lower_batch, rng);
            lower.push(NoisedBatch::draw(&x, setup.schedule, rng)?);
            let x = minibatch(pool, cfg.upper_batch, rng);
            upper.push(NoisedBatch::draw(&x, setup.schedule, rng)?);
        }
        let upper_concepts = match cfg.upper_reduction {
            UpperReduction::Sum => (0..setup.concepts.len()).collect(),
            UpperReduction::SampleOne => vec![rng.index(setup.concepts.len())],
        };
        Ok(Self {
            lower,
            upper,
            upper_concepts,
        })
    }
}

/// Upper objective and its gradient at one `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpperEval {
    pub objective: f64,
    /// `∇_θ F`, flat, before masking by the upper subset.
    pub grad: Vec<f64>,
    /// Upper loss of every concept at the merged parameters.
    pub upper_loss: Vec<f64>,
    /// Lower loss of every concept after its own lower step.
    pub lower_loss: Vec<f64>,
}

struct Forward {
    theta: Denoiser,
    /// Parameters after the lower step: one per concept, or one pooled.
    stepped: Vec<ParamSet>,
    merged: Denoiser,
    merge_ctx: Option<MergeContext>,
    upper_loss: Vec<f64>,
    lower_loss: Vec<f64>,
}

fn effective_subsets(cfg: &ImmunizeConfig, variant: Variant) -> (ParamSubset, ParamSubset) {
    match variant {
        Variant::ComposeOnly => (ParamSubset::KvOnly, ParamSubset::KvOnly),
        _ => (cfg.lower_subset.clone(), cfg.upper_subset.clone()),
    }
}

fn forward(
    setup: &Setup<'_>,
    theta: &ParamSet,
    cfg: &ImmunizeConfig,
    variant: Variant,
    draws: &StepDraws,
) -> Result<Forward> {
    let n = setup.concepts.len();
    if draws.lower.len() != n || draws.upper.len() != n {
        return Err(Error::DimensionMismatch("draws do not match the concept count".into()));
    }
    let sig = theta.signature();
    let (lower_subset, _) = effective_subsets(cfg, variant);
    let mask_l = lower_subset.mask(&sig)?;
    let theta_model = setup.pretrained.with_params(theta.clone())?;
    let flat = theta.flatten();

    let mut lower_grads = Vec::with_capacity(n);
    for (c, batch) in setup.concepts.iter().zip(&draws.lower) {
        lower_grads.push(theta_model.loss_on(&c.embedding, batch, setup.schedule)?.grad.flatten());
    }
    let step = |g: &[f64]| -> Result<ParamSet> {
        let mut out = flat.clone();
        for ((v, gv), &m) in out.iter_mut().zip(g).zip(&mask_l) {
            if m {
                *v -= cfg.alpha * gv;
            }
        }
        ParamSet::from_flat(&sig, &out)
    };

    let (stepped, merged_params, merge_ctx) = match variant {
        Variant::JointTraining => {
            let pooled = mean_of(&lower_grads);
            let p = step(&pooled)?;
            (vec![p.clone()], p, None)
        }
        Variant::Mima | Variant::ComposeOnly => {
            let adapted = lower_grads.iter().map(|g| step(g)).collect::<Result<Vec<_>>>()?;
            let embeddings: Vec<Matrix> = setup.concepts.iter().map(|c| c.embedding.clone()).collect();
            let (mut merged, ctx) = merge_params(
                &adapted,
                &embeddings,
                setup.reg_embeddings,
                setup.pretrained.params(),
                cfg.ridge,
            )?;
            if variant == Variant::ComposeOnly {
                merged.rest = setup.pretrained.params().rest.clone();
            }
            (adapted, merged, Some(ctx))
        }
    };
    let merged = setup.pretrained.with_params(merged_params)?;

    let mut upper_loss = Vec::with_capacity(n);
    let mut lower_loss = Vec::with_capacity(n);
    for (i, c) in setup.concepts.iter().enumerate() {
        upper_loss.push(predictor_loss(
            &merged.conditioned(&c.embedding),
            &draws.upper[i],
            setup.schedule,
        )?);
        let own = setup
            .pretrained
            .with_params(stepped[if stepped.len() == 1 { 0 } else { i }].clone())?;
        lower_loss.push(predictor_loss(
            &own.conditioned(&c.embedding),
            &draws.lower[i],
            setup.schedule,
        )?);
    }
    Ok(Forward {
        theta: theta_model,
        stepped,
        merged,
        merge_ctx,
        upper_loss,
        lower_loss,
    })
}

fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let inv = 1.0 / vs.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

fn objective_of(fwd: &Forward, draws: &StepDraws) -> f64 {
    draws.upper_concepts.iter().map(|&m| fwd.upper_loss[m]).sum()
}

/// The upper objective `F(θ)` at fixed draws.
pub fn upper_objective(
    setup: &Setup<'_>,
    theta: &ParamSet,
    cfg: &ImmunizeConfig,
    variant: Variant,
    draws: &StepDraws,
) -> Result<f64> {
    let fwd = forward(setup, theta, cfg, variant, draws)?;
    Ok(objective_of(&fwd, draws))
}

/// Parameters after the lower step at fixed draws: one per concept, or a
/// single pooled set for [`Variant::JointTraining`].
pub fn lower_params(
    setup: &Setup<'_>,
    theta: &ParamSet,
    cfg: &ImmunizeConfig,
    variant: Variant,
    draws: &StepDraws,
) -> Result<Vec<ParamSet>> {
    Ok(forward(setup, theta, cfg, variant, draws)?.stepped)
}

/// Merged parameters `θ'` at fixed draws.
pub fn merged_params(
    setup: &Setup<'_>,
    theta: &ParamSet,
    cfg: &ImmunizeConfig,
    variant: Variant,
    draws: &StepDraws,
) -> Result<ParamSet> {
    Ok(forward(setup, theta, cfg, variant, draws)?.merged.into_params())
}

/// `F(θ)` and `∇_θ F` at fixed draws.
pub fn upper_gradient(
    setup: &Setup<'_>,
    theta: &ParamSet,
    cfg: &ImmunizeConfig,
    variant: Variant,
    draws: &StepDraws,
) -> Result<UpperEval> {
    let fwd = forward(setup, theta, cfg, variant, draws)?;
    let sig = theta.signature();
    let (lower_subset, _) = effective_subsets(cfg, variant);
    let mask_l = lower_subset.mask(&sig)?;

    // u = ∇_θ' F
    let mut u = vec![0.0; sig.num_params()];
    for &m in &draws.upper_concepts {
        let eval = fwd
            .merged
            .loss_on(&setup.concepts[m].embedding, &draws.upper[m], setup.schedule)?;
        for (a, b) in u.iter_mut().zip(eval.grad.flatten()) {
            *a += b;
        }
    }

    // Pull u back to each lower-step output.
    let pulled: Vec<Vec<f64>> = match &fwd.merge_ctx {
        None => vec![u],
        Some(ctx) => {
            let mut per_input = ctx.vjp(&ParamSet::from_flat(&sig, &u)?)?;
            if variant == Variant::ComposeOnly {
                for p in &mut per_input {
                    p.rest.iter_mut().for_each(|r| *r = 0.0);
                }
            }
            per_input.iter().map(ParamSet::flatten).collect()
        }
    };
    debug_assert_eq!(pulled.len(), fwd.stepped.len());

    let flat = theta.flatten();
    let layout = fwd.theta.layout();
    let num_steps = fwd.theta.num_steps();
    let mut grad = vec![0.0; sig.num_params()];
    for (k, v) in pulled.iter().enumerate() {
        let mut w = v.clone();
        if cfg.grad_mode == GradMode::FullUnrolled {
            let dir: Vec<f64> = v
                .iter()
                .zip(&mask_l)
                .map(|(&x, &m)| if m { x } else { 0.0 })
                .collect();
            // Lower losses whose Hessian multiplies this pulled-back vector.
            let owners: Vec<usize> = match variant {
                Variant::JointTraining => (0..setup.concepts.len()).collect(),
                _ => vec![k],
            };
            let share = 1.0 / owners.len() as f64;
            for n in owners {
                let (_, _, hv) = loss_grad_hvp(
                    layout,
                    num_steps,
                    &flat,
                    &dir,
                    setup.concepts[n].embedding.as_slice(),
                    &draws.lower[n],
                    setup.schedule,
                )?;
                for (wi, h) in w.iter_mut().zip(hv) {
                    *wi -= cfg.alpha * share * h;
                }
            }
        }
        for (g, wi) in grad.iter_mut().zip(w) {
            *g += wi;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("{variant:?} upper gradient")));
    }
    Ok(UpperEval {
        objective: objective_of(&fwd, draws),
        grad,
        upper_loss: fwd.upper_loss,
        lower_loss: fwd.lower_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Indices (into the full concept list) this epoch trained on.
    pub concepts: Vec<usize>,
    pub upper_objective: f64,
    pub upper_loss: Vec<f64>,
    pub lower_loss: Vec<f64>,
    /// Norm of the masked upper gradient.
    pub grad_norm: f64,
    pub wall_clock_secs: f64,
}

impl StepRecord {
    /// Equality on everything except timing.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        self.concepts == other.concepts
            && bits(&[self.upper_objective, self.grad_norm]) == bits(&[other.upper_objective, other.grad_norm])
            && bits(&self.upper_loss) == bits(&other.upper_loss)
            && bits(&self.lower_loss) == bits(&other.lower_loss)
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImmunizeTrace {
    pub records: Vec<StepRecord>,
}

impl ImmunizeTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn same_values(&self, other: &ImmunizeTrace) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_values(b))
    }
}

/// One epoch of `variant` starting at `theta`.
pub fn step_variant(
    setup: &Setup<'_>,
    theta: &ParamSet,
    cfg: &ImmunizeConfig,
    variant: Variant,
    rng: &mut Rng,
) -> Result<(ParamSet, StepRecord)> {
    cfg.validate()?;
    setup.validate()?;
    theta.check_compatible(setup.pretrained.params())?;
    let started = Instant::now();
    let draws = StepDraws::draw(setup, cfg, rng)?;
    let eval = upper_gradient(setup, theta, cfg, variant, &draws)?;
    let (_, upper_subset) = effective_subsets(cfg, variant);
    let mask_u = upper_subset.mask(&theta.signature())?;
    let mut flat = theta.flatten();
    let mut norm_sq = 0.0;
    for ((v, g), &m) in flat.iter_mut().zip(&eval.grad).zip(&mask_u) {
        if m {
            *v += cfg.beta * g;
            norm_sq += g * g;
        }
    }
    let next = ParamSet::from_flat(&theta.signature(), &flat)?;
    if !next.is_finite() {
        return Err(Error::NonFiniteGradient("parameters diverged".into()));
    }
    Ok((
        next,
        StepRecord {
            concepts: (0..setup.concepts.len()).collect(),
            upper_objective: eval.objective,
            upper_loss: eval.upper_loss,
            lower_loss: eval.lower_loss,
            grad_norm: norm_sq.sqrt(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// One MIMA epoch.
pub fn mima_step(
    setup: &Setup<'_>,
    theta: &ParamSet,
    cfg: &ImmunizeConfig,
    rng: &mut Rng,
) -> Result<(ParamSet, StepRecord)> {
    step_variant(setup, theta, cfg, Variant::Mima, rng)
}

fn run_variant(
    setup: &Setup<'_>,
    cfg: &ImmunizeConfig,
    variant: Variant,
    rng: &mut Rng,
) -> Result<(ParamSet, ImmunizeTrace)> {
    cfg.validate()?;
    let mut theta = setup.pretrained.params().clone();
    let mut trace = ImmunizeTrace::default();
    for _ in 0..cfg.epochs {
        let (next, record) = step_variant(setup, &theta, cfg, variant, rng)?;
        theta = next;
        trace.records.push(record);
    }
    Ok((theta, trace))
}

/// `cfg.epochs` MIMA epochs from `θ^p`, fresh draws each epoch.
pub fn run_mima(setup: &Setup<'_>, cfg: &ImmunizeConfig, rng: &mut Rng) -> Result<(ParamSet, ImmunizeTrace)> {
    run_variant(setup, cfg, Variant::Mima, rng)
}

/// Joint-training baseline: a single lower step on the pooled loss.
pub fn run_jt(setup: &Setup<'_>, cfg: &ImmunizeConfig, rng: &mut Rng) -> Result<(ParamSet, ImmunizeTrace)> {
    run_variant(setup, cfg, Variant::JointTraining, rng)
}

/// Compose-only baseline: kv weights merged and trained, the rest frozen.
pub fn run_cp(setup: &Setup<'_>, cfg: &ImmunizeConfig, rng: &mut Rng) -> Result<(ParamSet, ImmunizeTrace)> {
    run_variant(setup, cfg, Variant::ComposeOnly, rng)
}

/// Single-concept immunization applied to each concept in turn, each stage
/// starting from the previous stage's output and running `cfg.epochs`
/// epochs. The trace has `N·epochs` records.
pub fn run_sequential(
    setup: &Setup<'_>,
    cfg: &ImmunizeConfig,
    rng: &mut Rng,
) -> Result<(ParamSet, ImmunizeTrace)> {
    cfg.validate()?;
    setup.validate()?;
    let mut theta = setup.pretrained.params().clone();
    let mut trace = ImmunizeTrace::default();
    for i in 0..setup.concepts.len() {
        let (concepts, data) = setup.subset(&[i]);
        let stage = Setup {
            concepts: &concepts,
            data: &data,
            ..*setup
        };
        for _ in 0..cfg.epochs {
            let (next, mut record) = step_variant(&stage, &theta, cfg, Variant::JointTraining, rng)?;
            record.concepts = vec![i];
            theta = next;
            trace.records.push(record);
        }
    }
    Ok((theta, trace))
}
