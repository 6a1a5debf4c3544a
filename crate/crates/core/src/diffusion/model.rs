use super::dual::{Dual, Real};
use super::net::{self, Arch, Layout, NetGrads, NetInput};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::ParamSet;
use crate::rng::Rng;

/// Anything that predicts the noise in a noised batch.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    /// `x_t` is `B×D`; `t` holds one timestep per row.
    fn predict(&self, x_t: &Matrix, t: &[usize]) -> Result<Matrix>;
}

/// Conditional noise-prediction network with partitioned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    arch: Arch,
    layout: Layout,
    num_steps: usize,
    params: ParamSet,
}

impl Denoiser {
    pub fn new(arch: Arch, num_steps: usize, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        if num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be >= 1".into()));
        }
        if params.signature() != arch.signature() {
            return Err(Error::SignatureMismatch(format!(
                "parameters {:?} do not fit architecture {:?}",
                params.signature(),
                arch.signature()
            )));
        }
        Ok(Self {
            layout: arch.layout(),
            arch,
            num_steps,
            params,
        })
    }

    /// Seeded fan-in scaled Gaussian weights, zero biases.
    pub fn init(arch: Arch, num_steps: usize, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut flat = vec![0.0; layout.total];
        for b in &layout.blocks {
            if b.is_bias {
                continue;
            }
            let std = 1.0 / (b.cols as f64).sqrt();
            for v in &mut flat[b.range()] {
                *v = std * rng.normal();
            }
        }
        let params = ParamSet::from_flat(&arch.signature(), &flat)?;
        Self::new(arch, num_steps, params)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        Self::new(self.arch.clone(), self.num_steps, params)
    }

    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule.num_steps() != self.num_steps {
            return Err(Error::ShapeMismatch(format!(
                "schedule has {} steps, model was built for {}",
                schedule.num_steps(),
                self.num_steps
            )));
        }
        Ok(())
    }

    pub fn check_embedding(&self, embedding: &Matrix) -> Result<()> {
        if embedding.shape() != (self.arch.tokens, self.arch.embed_dim) {
            return Err(Error::ShapeMismatch(format!(
                "embedding {:?}, expected {:?}",
                embedding.shape(),
                (self.arch.tokens, self.arch.embed_dim)
            )));
        }
        Ok(())
    }

    fn check_data(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.data_dim {
            return Err(Error::ShapeMismatch(format!(
                "data has {} columns, expected D={}",
                x.cols(),
                self.arch.data_dim
            )));
        }
        Ok(())
    }

    /// Predicted noise for each row of `x_t`.
    pub fn forward(&self, x_t: &Matrix, embedding: &Matrix, t: &[usize]) -> Result<Matrix> {
        self.check_embedding(embedding)?;
        self.check_data(x_t)?;
        let flat = self.params.flatten();
        let out = net::forward(
            &self.layout,
            &NetInput {
                params: &flat,
                embedding: embedding.as_slice(),
                x: x_t.as_slice(),
                t,
                num_steps: self.num_steps,
            },
        )?;
        Matrix::new(x_t.rows(), self.arch.data_dim, out)
    }

    /// Vector-Jacobian product of the forward pass for upstream `∂L/∂ε̂`.
    pub fn vjp(
        &self,
        x_t: &Matrix,
        embedding: &Matrix,
        t: &[usize],
        upstream: &Matrix,
    ) -> Result<Gradients> {
        self.check_embedding(embedding)?;
        self.check_data(x_t)?;
        if upstream.shape() != x_t.shape() {
            return Err(Error::ShapeMismatch("upstream must match the output shape".into()));
        }
        let flat = self.params.flatten();
        let dim = self.arch.data_dim;
        let (_, g) = net::forward_backward(
            &self.layout,
            &NetInput {
                params: &flat,
                embedding: embedding.as_slice(),
                x: x_t.as_slice(),
                t,
                num_steps: self.num_steps,
            },
            |r, _| upstream.as_slice()[r * dim..(r + 1) * dim].to_vec(),
        )?;
        self.wrap_grads(g, x_t.rows())
    }

    fn wrap_grads(&self, g: NetGrads<f64>, rows: usize) -> Result<Gradients> {
        Ok(Gradients {
            params: ParamSet::from_flat(&self.arch.signature(), &g.params)?,
            embedding: Matrix::new(self.arch.tokens, self.arch.embed_dim, g.embedding)?,
            x: Matrix::new(rows, self.arch.data_dim, g.x)?,
        })
    }

    /// Denoising loss and its gradient at a fixed draw of `(t, ε)`.
    pub fn loss_on(
        &self,
        embedding: &Matrix,
        batch: &NoisedBatch,
        schedule: &NoiseSchedule,
    ) -> Result<LossEval> {
        self.check_schedule(schedule)?;
        self.check_embedding(embedding)?;
        self.check_data(&batch.x0)?;
        let flat = self.params.flatten();
        let (loss, g) = loss_grad_flat(
            &self.layout,
            self.num_steps,
            &flat,
            embedding.as_slice(),
            batch,
            schedule,
        )?;
        let grads = self.wrap_grads(g, batch.len())?;
        Ok(LossEval {
            loss,
            grad: grads.params,
            grad_embedding: grads.embedding,
        })
    }

    /// Monte-Carlo denoising loss: samples `t` and `ε` per row, then
    /// evaluates [`Denoiser::loss_on`].
    pub fn loss(
        &self,
        x0: &Matrix,
        embedding: &Matrix,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<LossEval> {
        let batch = NoisedBatch::draw(x0, schedule, rng)?;
        self.loss_on(embedding, &batch, schedule)
    }

    /// Predictor view of this model under a fixed embedding.
    pub fn conditioned<'a>(&'a self, embedding: &'a Matrix) -> Conditioned<'a> {
        Conditioned {
            model: self,
            embedding,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ParamSet,
    pub embedding: Matrix,
    pub x: Matrix,
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grad: ParamSet,
    pub grad_embedding: Matrix,
}

pub struct Conditioned<'a> {
    model: &'a Denoiser,
    embedding: &'a Matrix,
}

impl NoisePredictor for Conditioned<'_> {
    fn data_dim(&self) -> usize {
        self.model.arch.data_dim
    }

    fn predict(&self, x_t: &Matrix, t: &[usize]) -> Result<Matrix> {
        self.model.forward(x_t, self.embedding, t)
    }
}

/// A data batch with one sampled timestep and noise draw per row.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    pub x0: Matrix,
    pub eps: Matrix,
    pub t: Vec<usize>,
    pub x_t: Matrix,
}

impl NoisedBatch {
    /// `t ~ U{1..T}`, `ε ~ N(0, I)`, `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn draw(x0: &Matrix, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Self> {
        if x0.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if !x0.is_finite() {
            return Err(Error::InvalidArgument("x0 has non-finite entries".into()));
        }
        let dim = x0.cols();
        let mut t = Vec::with_capacity(x0.rows());
        let mut eps = Vec::with_capacity(x0.len());
        for _ in 0..x0.rows() {
            t.push(rng.int_inclusive(1, schedule.num_steps()));
            eps.extend(rng.normal_vec(dim, 1.0));
        }
        let eps = Matrix::new(x0.rows(), dim, eps)?;
        Self::with_noise(x0.clone(), eps, t, schedule)
    }

    pub fn with_noise(
        x0: Matrix,
        eps: Matrix,
        t: Vec<usize>,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        if eps.shape() != x0.shape() || t.len() != x0.rows() {
            return Err(Error::ShapeMismatch("noise does not match batch".into()));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > schedule.num_steps()) {
            return Err(Error::ShapeMismatch(format!("timestep {bad} out of range")));
        }
        let mut x_t = x0.clone();
        for r in 0..x0.rows() {
            let ab = schedule.alpha_bar(t[r]);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (xv, (x0v, ev)) in x_t.row_mut(r).iter_mut().zip(x0.row(r).iter().zip(eps.row(r))) {
                *xv = a * x0v + b * ev;
            }
        }
        Ok(Self { x0, eps, t, x_t })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.rows() == 0
    }
}

/// `(1/B)·Σ_i w_{t_i}·‖ε̂_i − ε_i‖²` and its gradient, generic over the scalar
/// type so the same code yields Hessian-vector products on dual numbers.
pub fn loss_grad_flat<T: Real>(
    layout: &Layout,
    num_steps: usize,
    params: &[T],
    embedding: &[T],
    batch: &NoisedBatch,
    schedule: &NoiseSchedule,
) -> Result<(T, NetGrads<T>)> {
    let dim = layout.arch.data_dim;
    let x: Vec<T> = batch.x_t.as_slice().iter().map(|&v| T::cst(v)).collect();
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = T::zero();
    let (_, grads) = net::forward_backward(
        layout,
        &NetInput {
            params,
            embedding,
            x: &x,
            t: &batch.t,
            num_steps,
        },
        |r, y| {
            let w = schedule.loss_weight(batch.t[r]) * inv_b;
            let eps = batch.eps.row(r);
            let mut dy = Vec::with_capacity(dim);
            for (yi, &ei) in y.iter().zip(eps) {
                let diff = *yi - T::cst(ei);
                loss += T::cst(w) * diff * diff;
                dy.push(T::cst(2.0 * w) * diff);
            }
            dy
        },
    )?;
    Ok((loss, grads))
}

/// Loss, gradient and Hessian-vector product `∇²L·v` with respect to the
/// flat parameters, at a fixed noise draw.
pub fn loss_grad_hvp(
    layout: &Layout,
    num_steps: usize,
    params: &[f64],
    direction: &[f64],
    embedding: &[f64],
    batch: &NoisedBatch,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if direction.len() != params.len() {
        return Err(Error::ShapeMismatch("direction must match parameter count".into()));
    }
    let p: Vec<Dual> = params
        .iter()
        .zip(direction)
        .map(|(&v, &d)| Dual::new(v, d))
        .collect();
    let e: Vec<Dual> = embedding.iter().map(|&v| Dual::cst(v)).collect();
    let (loss, g) = loss_grad_flat(layout, num_steps, &p, &e, batch, schedule)?;
    let grad = g.params.iter().map(|d| d.re).collect();
    let hv = g.params.iter().map(|d| d.eps).collect();
    Ok((loss.re, grad, hv))
}

/// Loss of an arbitrary predictor on a fixed noise draw.
pub fn predictor_loss(
    predictor: &impl NoisePredictor,
    batch: &NoisedBatch,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let pred = predictor.predict(&batch.x_t, &batch.t)?;
    let mut loss = 0.0;
    for r in 0..batch.len() {
        let w = schedule.loss_weight(batch.t[r]);
        let sq: f64 = pred
            .row(r)
            .iter()
            .zip(batch.eps.row(r))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        loss += w * sq;
    }
    Ok(loss / batch.len() as f64)
}
