//! Fine-tuning attacks and the plain gradient-descent runner behind them.
//!
//! Every attack minimizes the denoising loss on one concept's data with
//! fixed-step gradient descent, but over a different set of free variables:
//!
//! | kind            | free variables                          |
//! |-----------------|-----------------------------------------|
//! | `FullFineTune`  | every network parameter                 |
//! | `LowRank`       | additive `A·B` factors on kv (and MLP) weights |
//! | `KeyValueOnly`  | the key/value projections               |
//! | `EmbeddingOnly` | the concept embedding                   |

use serde::{Deserialize, Serialize};

use crate::diffusion::{ConceptSpec, Denoiser, Layout, NoiseSchedule, NoisedBatch};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::{ParamSet, ParamSubset};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    FullFineTune,
    LowRank,
    KeyValueOnly,
    EmbeddingOnly,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::FullFineTune,
        AttackKind::LowRank,
        AttackKind::KeyValueOnly,
        AttackKind::EmbeddingOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::FullFineTune => "full_fine_tune",
            AttackKind::LowRank => "low_rank",
            AttackKind::KeyValueOnly => "key_value_only",
            AttackKind::EmbeddingOnly => "embedding_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptMethod {
    pub kind: AttackKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Adapter rank, `LowRank` only.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Also put adapters on the dense MLP weights, `LowRank` only.
    #[serde(default)]
    pub lowrank_mlp: bool,
    /// Std of the perturbation applied to the starting embedding,
    /// `EmbeddingOnly` only.
    #[serde(default = "default_embedding_noise")]
    pub embedding_noise: f64,
}

fn default_rank() -> usize {
    2
}

fn default_embedding_noise() -> f64 {
    0.1
}

impl AdaptMethod {
    pub fn new(kind: AttackKind, lr: f64, steps: usize, batch_size: usize) -> Self {
        Self {
            kind,
            lr,
            steps,
            batch_size,
            rank: default_rank(),
            lowrank_mlp: false,
            embedding_noise: default_embedding_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.kind == AttackKind::LowRank && self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be >= 1".into()));
        }
        if !(self.embedding_noise >= 0.0) {
            return Err(Error::InvalidArgument("embedding_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// One additive low-rank update `A·B` with `A` `rows×r` and `B` `r×cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactor {
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRankFactor {
    fn delta(&self) -> Result<Matrix> {
        if self.a.cols() != self.b.rows() {
            return Err(Error::ShapeMismatch(format!(
                "A is {:?} but B is {:?}",
                self.a.shape(),
                self.b.shape()
            )));
        }
        self.a.matmul(&self.b)
    }

    /// `(∂/∂A, ∂/∂B)` given the gradient `G` on `W + A·B`.
    fn pullback(&self, g: &Matrix) -> Result<LowRankFactor> {
        Ok(LowRankFactor {
            a: g.matmul(&self.b.transpose())?,
            b: self.a.t_matmul(g)?,
        })
    }
}

/// Adapter on a dense weight stored inside [`ParamSet::rest`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseAdapter {
    /// Offset of the row-major block inside `rest`.
    pub rest_offset: usize,
    pub factor: LowRankFactor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapters {
    /// One factor per kv weight, in [`ParamSet::kv_weights`] order.
    pub kv: Vec<LowRankFactor>,
    pub dense: Vec<DenseAdapter>,
}

impl LowRankAdapters {
    /// Gaussian `A` scaled by `1/r`, zero `B`, so the effective model starts
    /// equal to the base model.
    pub fn init(layout: &Layout, rank: usize, with_mlp: bool, rng: &mut Rng) -> Result<Self> {
        let check = |rows: usize, cols: usize| {
            if rank > rows.min(cols) {
                Err(Error::InvalidArgument(format!(
                    "rank {rank} exceeds min dim of a {rows}x{cols} weight"
                )))
            } else {
                Ok(())
            }
        };
        let scale = 1.0 / rank as f64;
        let factor = |rows: usize, cols: usize, rng: &mut Rng| -> Result<LowRankFactor> {
            check(rows, cols)?;
            Ok(LowRankFactor {
                a: rng.normal_matrix(rows, rank, scale),
                b: Matrix::zeros(rank, cols),
            })
        };
        let mut kv = Vec::new();
        for b in &layout.blocks[..layout.kv_blocks] {
            kv.push(factor(b.rows, b.cols, rng)?);
        }
        let mut dense = Vec::new();
        if with_mlp {
            for b in layout.dense_rest_blocks() {
                dense.push(DenseAdapter {
                    rest_offset: b.offset - layout.kv_len,
                    factor: factor(b.rows, b.cols, rng)?,
                });
            }
        }
        Ok(Self { kv, dense })
    }

    pub fn num_params(&self) -> usize {
        self.factors().map(|f| f.a.len() + f.b.len()).sum()
    }

    fn factors(&self) -> impl Iterator<Item = &LowRankFactor> {
        self.kv.iter().chain(self.dense.iter().map(|d| &d.factor))
    }

    fn factors_mut(&mut self) -> impl Iterator<Item = &mut LowRankFactor> {
        self.kv
            .iter_mut()
            .chain(self.dense.iter_mut().map(|d| &mut d.factor))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for f in self.factors() {
            out.extend_from_slice(f.a.as_slice());
            out.extend_from_slice(f.b.as_slice());
        }
        out
    }

    /// Overwrites the factors from a flat vector in [`LowRankAdapters::flatten`] order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} adapter parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for f in self.factors_mut() {
            for m in [&mut f.a, &mut f.b] {
                let n = m.len();
                m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    /// Adapter gradients given the gradient on the effective parameters.
    pub fn pullback(&self, grad_effective: &ParamSet) -> Result<LowRankAdapters> {
        if grad_effective.kv_weights.len() != self.kv.len() {
            return Err(Error::ShapeMismatch("adapter count does not match kv weights".into()));
        }
        let kv = self
            .kv
            .iter()
            .zip(&grad_effective.kv_weights)
            .map(|(f, g)| f.pullback(g))
            .collect::<Result<Vec<_>>>()?;
        let dense = self
            .dense
            .iter()
            .map(|d| {
                let g = rest_block(&grad_effective.rest, d)?;
                Ok(DenseAdapter {
                    rest_offset: d.rest_offset,
                    factor: d.factor.pullback(&g)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LowRankAdapters { kv, dense })
    }
}

fn rest_block(rest: &[f64], d: &DenseAdapter) -> Result<Matrix> {
    let (rows, cols) = (d.factor.a.rows(), d.factor.b.cols());
    let end = d.rest_offset + rows * cols;
    if end > rest.len() {
        return Err(Error::ShapeMismatch(format!(
            "dense adapter ends at {end}, rest has {}",
            rest.len()
        )));
    }
    Matrix::new(rows, cols, rest[d.rest_offset..end].to_vec())
}

/// Base parameters with every adapted weight replaced by `W + A·B`.
pub fn effective_params(base: &ParamSet, adapters: &LowRankAdapters) -> Result<ParamSet> {
    if adapters.kv.len() != base.kv_weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} kv factors for {} kv weights",
            adapters.kv.len(),
            base.kv_weights.len()
        )));
    }
    let mut out = base.clone();
    for (w, f) in out.kv_weights.iter_mut().zip(&adapters.kv) {
        let delta = f.delta()?;
        if delta.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "factor product {:?} for weight {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        w.axpy(1.0, &delta)?;
    }
    for d in &adapters.dense {
        rest_block(&base.rest, d)?;
        let delta = d.factor.delta()?;
        for (r, v) in out.rest[d.rest_offset..].iter_mut().zip(delta.as_slice()) {
            *r += v;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptResult {
    /// Effective parameters after adaptation (adapters folded in).
    pub adapted_params: ParamSet,
    /// The embedding the attacker conditions on afterwards; the concept's own
    /// embedding unless the attack learns one.
    pub embedding: Matrix,
    pub adapters: Option<LowRankAdapters>,
    /// Minibatch loss before each update.
    pub loss_trajectory: Vec<f64>,
    /// Loss on a fixed draw over the whole data pool, before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl AdaptResult {
    pub fn model(&self, base: &Denoiser) -> Result<Denoiser> {
        base.with_params(self.adapted_params.clone())
    }
}

/// Runs one attack.
pub fn adapt(
    model: &Denoiser,
    method: &AdaptMethod,
    concept: &ConceptSpec,
    data: &Matrix,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<AdaptResult> {
    adapt_observed(model, method, concept, data, schedule, rng, &[], |_, _, _| Ok(()))
}

/// Runs one attack, calling `observer(step, adapted model, embedding)` after
/// `step` updates for every step listed in `checkpoints` (0 = before any
/// update). Checkpoints must be strictly increasing and at most `steps`.
#[allow(clippy::too_many_arguments)]
pub fn adapt_observed(
    model: &Denoiser,
    method: &AdaptMethod,
    concept: &ConceptSpec,
    data: &Matrix,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    checkpoints: &[usize],
    mut observer: impl FnMut(usize, &Denoiser, &Matrix) -> Result<()>,
) -> Result<AdaptResult> {
    method.validate()?;
    model.check_schedule(schedule)?;
    model.check_embedding(&concept.embedding)?;
    if data.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if data.cols() != model.arch().data_dim {
        return Err(Error::ShapeMismatch(format!(
            "data has {} columns, model expects {}",
            data.cols(),
            model.arch().data_dim
        )));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("checkpoints must be strictly increasing".into()));
    }
    if checkpoints.last().is_some_and(|&s| s > method.steps) {
        return Err(Error::InvalidArgument("checkpoint beyond the last step".into()));
    }

    let mut eval_rng = rng.fork();
    let eval_batch = NoisedBatch::draw(data, schedule, &mut eval_rng)?;
    let mut state = AttackState::new(model, method, concept, rng)?;
    let initial_loss = state.current_model(model)?.loss_on(&state.embedding, &eval_batch, schedule)?.loss;

    let mut trajectory = Vec::with_capacity(method.steps);
    let mut next_ck = checkpoints.iter().peekable();
    for step in 0..=method.steps {
        if next_ck.peek() == Some(&&step) {
            next_ck.next();
            observer(step, &state.current_model(model)?, &state.embedding)?;
        }
        if step == method.steps {
            break;
        }
        let x0 = minibatch(data, method.batch_size, rng);
        let batch = NoisedBatch::draw(&x0, schedule, rng)?;
        let current = state.current_model(model)?;
        let eval = current.loss_on(&state.embedding, &batch, schedule)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, trajectory });
        }
        trajectory.push(eval.loss);
        state.update(method, &eval.grad, &eval.grad_embedding)?;
        if !state.is_finite() {
            return Err(Error::NonFiniteLoss { step, trajectory });
        }
    }

    let final_model = state.current_model(model)?;
    let final_loss = final_model.loss_on(&state.embedding, &eval_batch, schedule)?.loss;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: method.steps,
            trajectory,
        });
    }
    Ok(AdaptResult {
        adapted_params: final_model.into_params(),
        embedding: state.embedding,
        adapters: state.adapters,
        loss_trajectory: trajectory,
        initial_loss,
        final_loss,
    })
}

struct AttackState {
    kind: AttackKind,
    params: ParamSet,
    embedding: Matrix,
    adapters: Option<LowRankAdapters>,
}

impl AttackState {
    fn new(model: &Denoiser, method: &AdaptMethod, concept: &ConceptSpec, rng: &mut Rng) -> Result<Self> {
        let mut embedding = concept.embedding.clone();
        let mut adapters = None;
        match method.kind {
            AttackKind::LowRank => {
                adapters = Some(LowRankAdapters::init(
                    model.layout(),
                    method.rank,
                    method.lowrank_mlp,
                    rng,
                )?);
            }
            AttackKind::EmbeddingOnly => {
                let noise = rng.normal_matrix(embedding.rows(), embedding.cols(), method.embedding_noise);
                embedding.axpy(1.0, &noise)?;
            }
            AttackKind::FullFineTune | AttackKind::KeyValueOnly => {}
        }
        Ok(Self {
            kind: method.kind,
            params: model.params().clone(),
            embedding,
            adapters,
        })
    }

    fn current_model(&self, base: &Denoiser) -> Result<Denoiser> {
        match &self.adapters {
            Some(a) => base.with_params(effective_params(&self.params, a)?),
            None => base.with_params(self.params.clone()),
        }
    }

    fn update(&mut self, method: &AdaptMethod, grad: &ParamSet, grad_embedding: &Matrix) -> Result<()> {
        let lr = method.lr;
        match self.kind {
            AttackKind::FullFineTune | AttackKind::KeyValueOnly => {
                let subset = if self.kind == AttackKind::FullFineTune {
                    ParamSubset::All
                } else {
                    ParamSubset::KvOnly
                };
                let mask = subset.mask(&self.params.signature())?;
                let mut flat = self.params.flatten();
                descend(&mut flat, &grad.flatten(), &mask, lr);
                self.params = ParamSet::from_flat(&self.params.signature(), &flat)?;
            }
            AttackKind::LowRank => {
                let adapters = self.adapters.as_mut().expect("low-rank state");
                let g = adapters.pullback(grad)?.flatten();
                let mut flat = adapters.flatten();
                let mask = vec![true; flat.len()];
                descend(&mut flat, &g, &mask, lr);
                adapters.set_flat(&flat)?;
            }
            AttackKind::EmbeddingOnly => {
                self.embedding.axpy(-lr, grad_embedding)?;
            }
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.params.is_finite()
            && self.embedding.is_finite()
            && self
                .adapters
                .as_ref()
                .is_none_or(|a| a.factors().all(|f| f.a.is_finite() && f.b.is_finite()))
    }
}

fn descend(x: &mut [f64], g: &[f64], mask: &[bool], lr: f64) {
    for ((v, gv), &m) in x.iter_mut().zip(g).zip(mask) {
        if m {
            *v -= lr * gv;
        }
    }
}

/// Rows drawn uniformly with replacement.
pub fn minibatch(data: &Matrix, size: usize, rng: &mut Rng) -> Matrix {
    let mut out = Vec::with_capacity(size * data.cols());
    for _ in 0..size {
        out.extend_from_slice(data.row(rng.index(data.rows())));
    }
    Matrix::new(size, data.cols(), out).expect("row copies keep the shape")
}

/// One conditioning embedding and its data pool.
#[derive(Clone, Copy, Debug)]
pub struct Task<'a> {
    pub embedding: &'a Matrix,
    pub data: &'a Matrix,
}

/// Plain gradient descent on the mean of the tasks' denoising losses,
/// restricted to `subset`. Each step draws one minibatch per task. Returns the
/// trained model and the per-step loss.
#[allow(clippy::too_many_arguments)]
pub fn train_steps(
    model: &Denoiser,
    tasks: &[Task<'_>],
    schedule: &NoiseSchedule,
    lr: f64,
    steps: usize,
    batch_size: usize,
    subset: &ParamSubset,
    rng: &mut Rng,
) -> Result<(Denoiser, Vec<f64>)> {
    if tasks.is_empty() || tasks.iter().any(|t| t.data.rows() == 0) || batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let sig = model.params().signature();
    let mask = subset.mask(&sig)?;
    let mut current = model.clone();
    let mut flat = current.params().flatten();
    let mut trajectory = Vec::with_capacity(steps);
    let share = 1.0 / tasks.len() as f64;
    for step in 0..steps {
        let mut loss = 0.0;
        let mut grad = vec![0.0; flat.len()];
        for task in tasks {
            let x0 = minibatch(task.data, batch_size, rng);
            let batch = NoisedBatch::draw(&x0, schedule, rng)?;
            let eval = current.loss_on(task.embedding, &batch, schedule)?;
            loss += share * eval.loss;
            for (g, v) in grad.iter_mut().zip(eval.grad.flatten()) {
                *g += share * v;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, trajectory });
        }
        trajectory.push(loss);
        descend(&mut flat, &grad, &mask, lr);
        current = current.with_params(ParamSet::from_flat(&sig, &flat)?)?;
    }
    Ok((current, trajectory))
}
