use serde::{Deserialize, Serialize};

use super::model::{Denoiser, NoisePredictor};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Deterministic DDIM (η = 0) reverse iteration.
    #[default]
    Ddim,
    /// DDPM ancestral sampling with posterior variance.
    Ancestral,
}

/// Runs the reverse process from pure noise through all `T` steps.
pub fn sample_with(
    predictor: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    n: usize,
    kind: SamplerKind,
    rng: &mut Rng,
) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let dim = predictor.data_dim();
    let mut x = rng.normal_matrix(n, dim, 1.0);
    for t in (1..=schedule.num_steps()).rev() {
        let eps = predictor.predict(&x, &vec![t; n])?;
        if eps.shape() != x.shape() {
            return Err(Error::ShapeMismatch("predictor output shape".into()));
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        match kind {
            SamplerKind::Ddim => {
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                for (xv, ev) in x.as_mut_slice().iter_mut().zip(eps.as_slice()) {
                    let x0 = (*xv - sb * ev) / sa;
                    *xv = pa * x0 + pb * ev;
                }
            }
            SamplerKind::Ancestral => {
                let beta = schedule.beta(t);
                let coef = beta / (1.0 - ab).sqrt();
                let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
                let sigma = if t > 1 {
                    (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
                } else {
                    0.0
                };
                for (xv, ev) in x.as_mut_slice().iter_mut().zip(eps.as_slice()) {
                    *xv = inv_sqrt_alpha * (*xv - coef * ev);
                }
                if sigma > 0.0 {
                    for xv in x.as_mut_slice() {
                        *xv += sigma * rng.normal();
                    }
                }
            }
        }
    }
    Ok(x)
}

/// `n` generations of `model` conditioned on `embedding`.
pub fn sample(
    model: &Denoiser,
    embedding: &Matrix,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut Rng,
) -> Result<Matrix> {
    model.check_schedule(schedule)?;
    model.check_embedding(embedding)?;
    sample_with(&model.conditioned(embedding), schedule, n, SamplerKind::Ddim, rng)
}
