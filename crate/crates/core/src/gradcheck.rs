//! Central-difference checks of every analytic gradient path, at sizes small
//! enough to run in seconds.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Arch, ConceptSpec, Denoiser, GaussianMixture, NoiseSchedule, ScheduleConfig};
use crate::error::Result;
use crate::immunize::{upper_gradient, upper_objective, GradMode, ImmunizeConfig, Setup, StepDraws, Variant};
use crate::linalg::{finite_diff_grad, finite_diff_grad_vec, relative_error, Matrix};
use crate::merge::{backward, solve, MergeProblem};
use crate::params::ParamSet;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            max_rel_err: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        // NaN must fail the check, so compare with the NaN-propagating form.
        if !(err <= self.max_rel_err) {
            self.max_rel_err = err;
        }
    }
}

const FD_STEP: f64 = 1e-5;

/// Merge backward vs finite differences of `⟨U, φ*(W_1..W_N)⟩`, `N` cycling
/// through 1, 2, 3.
pub fn check_merge(seed: u64, instances: usize) -> Result<CheckReport> {
    let mut report = CheckReport::new("merge backward", 1e-5);
    for i in 0..instances {
        let mut rng = Rng::derive(seed, &[i as u64]);
        let n = 1 + i % 3;
        let l = 1 + rng.index(2);
        let c = n * l + 2 + rng.index(6);
        let d = 1 + rng.index(6);
        let concepts: Vec<Matrix> = (0..n).map(|_| rng.normal_matrix(l, c, 1.0)).collect();
        let weights: Vec<Matrix> = (0..n).map(|_| rng.normal_matrix(c, d, 1.0)).collect();
        let c_reg = rng.normal_matrix(c + 2, c, 1.0);
        let w_pre = rng.normal_matrix(c, d, 1.0);
        let up = rng.normal_matrix(c, d, 1.0);
        let refs: Vec<&Matrix> = weights.iter().collect();
        let problem = MergeProblem::from_concepts(&concepts, &refs, &c_reg, &w_pre)?;
        let grads = backward(&solve(&problem, 0.0)?, &problem, &up)?;
        for k in 0..n {
            let f = |wk: &Matrix| {
                let mut ws = refs.clone();
                ws[k] = wk;
                MergeProblem::from_concepts(&concepts, &ws, &c_reg, &w_pre)
                    .and_then(|p| solve(&p, 0.0))
                    .and_then(|s| s.phi_star.dot(&up))
                    .unwrap_or(f64::NAN)
            };
            let fd = finite_diff_grad(f, &weights[k], FD_STEP)?;
            report.record(relative_error(grads.grad_w[k].as_slice(), fd.as_slice()));
        }
    }
    Ok(report)
}

/// Small architectures used by [`check_denoiser`]; the first matches the
/// `D=2, l=2, c=4, d=4` reference size.
pub fn denoiser_check_arch(index: usize) -> Arch {
    let mut arch = Arch {
        data_dim: 2,
        tokens: 2,
        embed_dim: 4,
        kv_dim: 4,
        value_dim: 4,
        hidden: 6,
        time_dim: 3,
        sites: 1,
    };
    match index % 5 {
        1 => arch.sites = 2,
        2 => {
            arch.value_dim = 3;
            arch.time_dim = 4;
        }
        3 => {
            arch.tokens = 3;
            arch.hidden = 5;
        }
        4 => {
            arch.sites = 2;
            arch.kv_dim = 3;
            arch.time_dim = 2;
        }
        _ => {}
    }
    arch
}

/// Gradient of `‖ε̂‖²` with respect to parameters, embedding and `x_t`.
pub fn check_denoiser(seed: u64, configs: usize) -> Result<CheckReport> {
    let mut report = CheckReport::new("denoiser forward/backward", 1e-5);
    let num_steps = 10;
    for i in 0..configs {
        let mut rng = Rng::derive(seed, &[i as u64]);
        let arch = denoiser_check_arch(i);
        let model = Denoiser::init(arch.clone(), num_steps, &mut rng)?;
        // Non-zero biases so every path is exercised.
        let mut flat = model.params().flatten();
        for b in model.layout().blocks.iter().filter(|b| b.is_bias) {
            for v in &mut flat[b.range()] {
                *v = 0.3 * rng.normal();
            }
        }
        let sig = model.params().signature();
        let model = model.with_params(ParamSet::from_flat(&sig, &flat)?)?;
        let emb = rng.normal_matrix(arch.tokens, arch.embed_dim, 1.0);
        let rows = 3;
        let x = rng.normal_matrix(rows, arch.data_dim, 1.0);
        let t: Vec<usize> = (0..rows).map(|_| rng.int_inclusive(1, num_steps)).collect();
        let y = model.forward(&x, &emb, &t)?;
        let g = model.vjp(&x, &emb, &t, &y.scale(2.0))?;
        let sq = |m: &Matrix| m.as_slice().iter().map(|v| v * v).sum::<f64>();

        let fd_p = finite_diff_grad_vec(
            |p| {
                ParamSet::from_flat(&sig, p)
                    .and_then(|ps| model.with_params(ps))
                    .and_then(|m| m.forward(&x, &emb, &t))
                    .map(|o| sq(&o))
                    .unwrap_or(f64::NAN)
            },
            &flat,
            FD_STEP,
        )?;
        for b in &model.layout().blocks {
            report.record(relative_error(&g.params.flatten()[b.range()], &fd_p[b.range()]));
        }
        let fd_e = finite_diff_grad(
            |e| model.forward(&x, e, &t).map(|o| sq(&o)).unwrap_or(f64::NAN),
            &emb,
            FD_STEP,
        )?;
        report.record(relative_error(g.embedding.as_slice(), fd_e.as_slice()));
        let fd_x = finite_diff_grad(
            |xx| model.forward(xx, &emb, &t).map(|o| sq(&o)).unwrap_or(f64::NAN),
            &x,
            FD_STEP,
        )?;
        report.record(relative_error(g.x.as_slice(), fd_x.as_slice()));
    }
    Ok(report)
}

/// The smallest immunization setup used for composite checks: 26 network
/// parameters, two two-token concepts in a five-dimensional embedding space
/// (so the merge constraints leave one free direction for `C_reg`).
pub struct TinyBiLevel {
    pub pretrained: Denoiser,
    pub theta: ParamSet,
    pub concepts: Vec<ConceptSpec>,
    pub data: Vec<Matrix>,
    pub reg_embeddings: Matrix,
    pub schedule: NoiseSchedule,
}

impl TinyBiLevel {
    pub fn arch() -> Arch {
        Arch {
            data_dim: 1,
            tokens: 2,
            embed_dim: 5,
            kv_dim: 1,
            value_dim: 1,
            hidden: 2,
            time_dim: 2,
            sites: 1,
        }
    }

    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, &[0x7469_6e79]);
        let schedule = NoiseSchedule::linear(&ScheduleConfig {
            num_steps: 10,
            ..ScheduleConfig::default()
        })?;
        let pretrained = Denoiser::init(Self::arch(), 10, &mut rng)?;
        let mut flat = pretrained.params().flatten();
        for v in &mut flat {
            *v += 0.3 * rng.normal();
        }
        let theta = ParamSet::from_flat(&pretrained.params().signature(), &flat)?;
        let concepts: Vec<ConceptSpec> = (0..2)
            .map(|i| ConceptSpec {
                token_id: i,
                embedding: rng.normal_matrix(2, 5, 1.0),
                distribution: GaussianMixture::single(vec![if i == 0 { 1.5 } else { -1.5 }], 0.3),
            })
            .collect();
        let data = concepts.iter().map(|c| c.distribution.sample(16, &mut rng)).collect();
        let reg_embeddings = rng.normal_matrix(6, 5, 1.0);
        Ok(Self {
            pretrained,
            theta,
            concepts,
            data,
            reg_embeddings,
            schedule,
        })
    }

    pub fn setup(&self) -> Setup<'_> {
        Setup {
            pretrained: &self.pretrained,
            concepts: &self.concepts,
            data: &self.data,
            reg_embeddings: &self.reg_embeddings,
            schedule: &self.schedule,
        }
    }

    pub fn config(alpha: f64, grad_mode: GradMode) -> ImmunizeConfig {
        ImmunizeConfig {
            alpha,
            beta: 0.1,
            epochs: 1,
            grad_mode,
            lower_batch: 4,
            upper_batch: 4,
            ..ImmunizeConfig::default()
        }
    }
}

/// Composite finite differences of `θ ↦ F(θ)` through the lower step and the
/// merge (or pooled step), for every variant.
pub fn check_immunize(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("bi-level upper gradient", 1e-4);
    for variant in [Variant::Mima, Variant::JointTraining, Variant::ComposeOnly] {
        let tiny = TinyBiLevel::new(seed)?;
        let setup = tiny.setup();
        let cfg = TinyBiLevel::config(0.2, GradMode::FullUnrolled);
        let draws = StepDraws::draw(&setup, &cfg, &mut Rng::derive(seed, &[1]))?;
        let eval = upper_gradient(&setup, &tiny.theta, &cfg, variant, &draws)?;
        let sig = tiny.theta.signature();
        let fd = finite_diff_grad_vec(
            |p| {
                ParamSet::from_flat(&sig, p)
                    .and_then(|th| upper_objective(&setup, &th, &cfg, variant, &draws))
                    .unwrap_or(f64::NAN)
            },
            &tiny.theta.flatten(),
            FD_STEP,
        )?;
        report.record(relative_error(&eval.grad, &fd));
    }
    Ok(report)
}
