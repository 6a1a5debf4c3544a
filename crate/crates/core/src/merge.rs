//! Differentiable constrained model merging.
//!
//! For one key/value projection site the merged weight solves
//!
//! ```text
//! φ* = argmin_φ ‖C_reg·φ − C_reg·W_pre‖²_F   s.t.   C·φ = O*
//! ```
//!
//! where `C` stacks the target-concept embeddings and `O*` stacks each
//! concept's output under its own adapted weight, `c_n·W_n`. With
//! `Q = C_regᵀC_reg + λI` and the Schur complement `S = C·Q⁻¹·Cᵀ`, the
//! stationarity and feasibility conditions give
//!
//! ```text
//! M  = 2·S⁻¹·(O* − C·W_pre)
//! φ* = W_pre + ½·Q⁻¹·Cᵀ·M
//! ```
//!
//! `φ*` is affine in `O*`, so the vector-Jacobian product with respect to `O*`
//! is `S⁻¹·C·Q⁻¹·ḡ`, and each concept's share of it is pulled back through
//! `O*_n = c_n·W_n` as `c_nᵀ·G_n`.
//!
//! Parameters outside the key/value set are merged by a plain mean, whose
//! Jacobian is `(1/N)·I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::params::ParamSet;

/// How the ridge added to `Q = C_regᵀC_reg` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Ridge {
    /// `λ = r · trace(Q) / c`.
    Relative(f64),
    /// Fixed `λ`.
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-8)
    }
}

impl Ridge {
    pub fn lambda_for(&self, c_reg: &Matrix) -> f64 {
        match *self {
            Ridge::Absolute(l) => l,
            Ridge::Relative(r) => {
                let trace: f64 = c_reg.as_slice().iter().map(|v| v * v).sum();
                r * trace / c_reg.cols().max(1) as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeProblem {
    /// Stacked target embeddings, `(N·l)×c`.
    pub c: Matrix,
    /// Stacked regularization embeddings, `(N'·l)×c`.
    pub c_reg: Matrix,
    /// Pre-trained weight, `c×d`.
    pub w_pre: Matrix,
    /// Stacked targets `[c_1·W_1; …; c_N·W_N]`, `(N·l)×d`.
    pub o_star: Matrix,
    /// Rows per concept block (`l`).
    pub tokens: usize,
}

impl MergeProblem {
    pub fn new(c: Matrix, c_reg: Matrix, w_pre: Matrix, o_star: Matrix, tokens: usize) -> Result<Self> {
        let p = Self {
            c,
            c_reg,
            w_pre,
            o_star,
            tokens,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds `C` and `O*` from per-concept embeddings and adapted weights.
    pub fn from_concepts(
        concepts: &[Matrix],
        adapted: &[&Matrix],
        c_reg: &Matrix,
        w_pre: &Matrix,
    ) -> Result<Self> {
        if concepts.is_empty() || concepts.len() != adapted.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} concept embeddings for {} adapted weights",
                concepts.len(),
                adapted.len()
            )));
        }
        let tokens = concepts[0].rows();
        let outputs = concepts
            .iter()
            .zip(adapted)
            .map(|(c, w)| c.matmul(w))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            Matrix::vstack(concepts)?,
            c_reg.clone(),
            w_pre.clone(),
            Matrix::vstack(&outputs)?,
            tokens,
        )
    }

    pub fn num_concepts(&self) -> usize {
        self.c.rows() / self.tokens
    }

    fn validate(&self) -> Result<()> {
        let (c, d) = self.w_pre.shape();
        let bad = |what: &str| Err(Error::DimensionMismatch(what.to_string()));
        if self.c.cols() != c {
            return bad("C.cols != W_pre.rows");
        }
        if self.c_reg.cols() != c {
            return bad("C_reg.cols != W_pre.rows");
        }
        if self.o_star.rows() != self.c.rows() {
            return bad("O*.rows != C.rows");
        }
        if self.o_star.cols() != d {
            return bad("O*.cols != W_pre.cols");
        }
        if self.tokens == 0 || self.c.rows() % self.tokens != 0 {
            return bad("C.rows is not a multiple of the token count");
        }
        Ok(())
    }

    fn fingerprint(&self, lambda: f64) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        };
        for m in [&self.c, &self.c_reg, &self.w_pre, &self.o_star] {
            feed(m.rows() as u64);
            feed(m.cols() as u64);
            for v in m.as_slice() {
                feed(v.to_bits());
            }
        }
        feed(self.tokens as u64);
        feed(lambda.to_bits());
        h
    }
}

#[derive(Clone, Debug)]
pub struct MergeSolution {
    pub phi_star: Matrix,
    /// Lagrange multipliers `M`, `(N·l)×d`.
    pub multipliers: Matrix,
    pub ridge_lambda: f64,
    q_factor: Cholesky,
    s_factor: Cholesky,
    fingerprint: u64,
}

impl MergeSolution {
    pub fn q_factor(&self) -> &Cholesky {
        &self.q_factor
    }

    pub fn s_factor(&self) -> &Cholesky {
        &self.s_factor
    }
}

/// Solves the constrained merge for one key/value site.
pub fn solve(problem: &MergeProblem, ridge_lambda: f64) -> Result<MergeSolution> {
    problem.validate()?;
    if !(ridge_lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ridge must be >= 0, got {ridge_lambda}"
        )));
    }
    let mut q = problem.c_reg.t_matmul(&problem.c_reg)?;
    for i in 0..q.rows() {
        q[(i, i)] += ridge_lambda;
    }
    let q_factor = Cholesky::factor(&q).map_err(|_| Error::SingularQ)?;

    // Y = Q⁻¹·Cᵀ, S = C·Y
    let y = q_factor.solve(&problem.c.transpose())?;
    let s = problem.c.matmul(&y)?;
    let s = Matrix::from_fn(s.rows(), s.cols(), |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let s_factor = Cholesky::factor(&s).map_err(|_| Error::SingularSchur)?;

    let residual = problem.o_star.sub(&problem.c.matmul(&problem.w_pre)?)?;
    let z = s_factor.solve(&residual)?;
    let mut phi_star = problem.w_pre.clone();
    phi_star.axpy(1.0, &y.matmul(&z)?)?;
    if !phi_star.is_finite() {
        return Err(Error::SingularSchur);
    }
    Ok(MergeSolution {
        phi_star,
        multipliers: z.scale(2.0),
        ridge_lambda,
        q_factor,
        s_factor,
        fingerprint: problem.fingerprint(ridge_lambda),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeGrads {
    /// `∂L/∂O*`, `(N·l)×d`.
    pub grad_o_star: Matrix,
    /// `∂L/∂W_n` for each concept, `c×d`.
    pub grad_w: Vec<Matrix>,
}

/// Vector-Jacobian product of `φ*` with respect to `O*` and each `W_n`.
pub fn backward(
    solution: &MergeSolution,
    problem: &MergeProblem,
    upstream: &Matrix,
) -> Result<MergeGrads> {
    if problem.fingerprint(solution.ridge_lambda) != solution.fingerprint {
        return Err(Error::StaleFactorization);
    }
    if upstream.shape() != solution.phi_star.shape() {
        return Err(Error::DimensionMismatch(format!(
            "upstream {:?} for φ* {:?}",
            upstream.shape(),
            solution.phi_star.shape()
        )));
    }
    let qz = solution.q_factor.solve(upstream)?;
    let grad_o_star = solution.s_factor.solve(&problem.c.matmul(&qz)?)?;
    let l = problem.tokens;
    let grad_w = (0..problem.num_concepts())
        .map(|n| {
            let c_n = problem.c.row_block(n * l, l);
            c_n.t_matmul(&grad_o_star.row_block(n * l, l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MergeGrads { grad_o_star, grad_w })
}

/// Everything needed to pull a gradient on the merged parameters back to
/// each adapted input.
#[derive(Clone, Debug)]
pub struct MergeContext {
    problems: Vec<MergeProblem>,
    solutions: Vec<MergeSolution>,
    num_inputs: usize,
}

impl MergeContext {
    pub fn solutions(&self) -> &[MergeSolution] {
        &self.solutions
    }

    pub fn problems(&self) -> &[MergeProblem] {
        &self.problems
    }

    /// Per-input gradients given `∂L/∂merged`.
    pub fn vjp(&self, upstream: &ParamSet) -> Result<Vec<ParamSet>> {
        if upstream.kv_weights.len() != self.solutions.len() {
            return Err(Error::SignatureMismatch(format!(
                "upstream has {} kv weights, merge had {}",
                upstream.kv_weights.len(),
                self.solutions.len()
            )));
        }
        let scale = 1.0 / self.num_inputs as f64;
        let rest: Vec<f64> = upstream.rest.iter().map(|g| g * scale).collect();
        let mut out: Vec<ParamSet> = (0..self.num_inputs)
            .map(|_| ParamSet::new(Vec::with_capacity(self.solutions.len()), rest.clone()))
            .collect();
        for ((sol, prob), up) in self
            .solutions
            .iter()
            .zip(&self.problems)
            .zip(&upstream.kv_weights)
        {
            let grads = backward(sol, prob, up)?;
            for (o, g) in out.iter_mut().zip(grads.grad_w) {
                o.kv_weights.push(g);
            }
        }
        Ok(out)
    }
}

/// Merges adapted parameter sets: constrained solve for every key/value
/// weight, arithmetic mean for the rest.
pub fn merge_params(
    adapted: &[ParamSet],
    concepts: &[Matrix],
    reg_embeddings: &Matrix,
    pretrained: &ParamSet,
    ridge: Ridge,
) -> Result<(ParamSet, MergeContext)> {
    if adapted.is_empty() {
        return Err(Error::InvalidArgument("merge of zero parameter sets".into()));
    }
    if adapted.len() != concepts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter sets for {} concepts",
            adapted.len(),
            concepts.len()
        )));
    }
    for a in adapted {
        a.check_compatible(pretrained)?;
    }
    let lambda = ridge.lambda_for(reg_embeddings);
    let mut problems = Vec::with_capacity(pretrained.kv_weights.len());
    let mut solutions = Vec::with_capacity(pretrained.kv_weights.len());
    let mut kv = Vec::with_capacity(pretrained.kv_weights.len());
    for (site, w_pre) in pretrained.kv_weights.iter().enumerate() {
        let inputs: Vec<&Matrix> = adapted.iter().map(|a| &a.kv_weights[site]).collect();
        let problem = MergeProblem::from_concepts(concepts, &inputs, reg_embeddings, w_pre)?;
        let sol = solve(&problem, lambda)?;
        kv.push(sol.phi_star.clone());
        problems.push(problem);
        solutions.push(sol);
    }
    let n = adapted.len() as f64;
    let mut rest = vec![0.0; pretrained.rest.len()];
    for a in adapted {
        for (r, v) in rest.iter_mut().zip(&a.rest) {
            *r += v;
        }
    }
    for r in &mut rest {
        *r /= n;
    }
    Ok((
        ParamSet::new(kv, rest),
        MergeContext {
            problems,
            solutions,
            num_inputs: adapted.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, relative_error};
    use crate::rng::Rng;

    fn two_dim_problem() -> MergeProblem {
        MergeProblem::new(
            Matrix::from_rows(&[&[1.0, 0.0]]),
            Matrix::identity(2),
            Matrix::zeros(2, 1),
            Matrix::from_rows(&[&[1.0]]),
            1,
        )
        .unwrap()
    }

    #[test]
    fn consistent_targets_return_pretrained() {
        let mut rng = Rng::new(1);
        let c = rng.normal_matrix(3, 6, 1.0);
        let c_reg = rng.normal_matrix(10, 6, 1.0);
        let w = rng.normal_matrix(6, 4, 1.0);
        let o = c.matmul(&w).unwrap();
        let p = MergeProblem::new(c, c_reg, w.clone(), o, 1).unwrap();
        let sol = solve(&p, 0.0).unwrap();
        assert!(relative_error(sol.phi_star.as_slice(), w.as_slice()) < 1e-12);
        assert!(sol.multipliers.frobenius_norm() < 1e-10);
    }

    #[test]
    fn constraint_pins_one_coordinate() {
        let sol = solve(&two_dim_problem(), 0.0).unwrap();
        assert!((sol.phi_star[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(sol.phi_star[(1, 0)].abs() < 1e-14);
    }

    #[test]
    fn backward_closed_form_two_dim() {
        let p = two_dim_problem();
        let sol = solve(&p, 0.0).unwrap();
        let up = Matrix::from_rows(&[&[0.7], &[-3.0]]);
        let g = backward(&sol, &p, &up).unwrap();
        assert!((g.grad_o_star[(0, 0)] - 0.7).abs() < 1e-14);
        let zero = backward(&sol, &p, &Matrix::zeros(2, 1)).unwrap();
        assert!(zero.grad_o_star.as_slice().iter().all(|&v| v == 0.0));
        assert!(zero.grad_w.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rank_deficiency_errors() {
        let mut rng = Rng::new(2);
        // C_reg with fewer rows than columns and no ridge
        let c = rng.normal_matrix(2, 4, 1.0);
        let c_reg = rng.normal_matrix(2, 4, 1.0);
        let w = rng.normal_matrix(4, 3, 1.0);
        let o = rng.normal_matrix(2, 3, 1.0);
        let p = MergeProblem::new(c.clone(), c_reg, w.clone(), o.clone(), 1).unwrap();
        assert!(matches!(solve(&p, 0.0), Err(Error::SingularQ)));
        assert!(solve(&p, 1e-6).is_ok());

        // duplicated constraint rows
        let dup = Matrix::vstack(&[c.row_block(0, 1), c.row_block(0, 1)]).unwrap();
        let c_reg = rng.normal_matrix(8, 4, 1.0);
        let p = MergeProblem::new(dup, c_reg, w, o, 1).unwrap();
        assert!(matches!(solve(&p, 0.0), Err(Error::SingularSchur)));
    }

    #[test]
    fn dimension_checks() {
        let err = MergeProblem::new(
            Matrix::zeros(2, 3),
            Matrix::zeros(4, 3),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            1,
        );
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn stale_solution_is_rejected() {
        let p = two_dim_problem();
        let sol = solve(&p, 0.0).unwrap();
        let mut other = p.clone();
        other.o_star[(0, 0)] = 2.0;
        assert!(matches!(
            backward(&sol, &other, &Matrix::zeros(2, 1)),
            Err(Error::StaleFactorization)
        ));
    }

    #[test]
    fn backward_matches_finite_differences_per_concept() {
        let mut rng = Rng::new(33);
        let (c_dim, d, n, l) = (6, 4, 2, 2);
        let concepts: Vec<Matrix> = (0..n).map(|_| rng.normal_matrix(l, c_dim, 1.0)).collect();
        let weights: Vec<Matrix> = (0..n).map(|_| rng.normal_matrix(c_dim, d, 1.0)).collect();
        let c_reg = rng.normal_matrix(10, c_dim, 1.0);
        let w_pre = rng.normal_matrix(c_dim, d, 1.0);
        let up = rng.normal_matrix(c_dim, d, 1.0);
        let refs: Vec<&Matrix> = weights.iter().collect();
        let p = MergeProblem::from_concepts(&concepts, &refs, &c_reg, &w_pre).unwrap();
        let sol = solve(&p, 0.0).unwrap();
        let g = backward(&sol, &p, &up).unwrap();
        for k in 0..n {
            let f = |wk: &Matrix| {
                let mut ws: Vec<&Matrix> = weights.iter().collect();
                ws[k] = wk;
                let p = MergeProblem::from_concepts(&concepts, &ws, &c_reg, &w_pre).unwrap();
                solve(&p, 0.0).unwrap().phi_star.dot(&up).unwrap()
            };
            let fd = finite_diff_grad(f, &weights[k], 1e-5).unwrap();
            let err = relative_error(g.grad_w[k].as_slice(), fd.as_slice());
            assert!(err <= 1e-5, "concept {k}: {err}");
        }
    }

    #[test]
    fn merge_params_single_identity() {
        let mut rng = Rng::new(4);
        let pre = ParamSet::new(vec![rng.normal_matrix(4, 3, 1.0)], rng.normal_vec(5, 1.0));
        let emb = rng.normal_matrix(2, 4, 1.0);
        let c_reg = rng.normal_matrix(6, 4, 1.0);
        let (merged, _) =
            merge_params(&[pre.clone()], &[emb], &c_reg, &pre, Ridge::Absolute(0.0)).unwrap();
        assert_eq!(merged.rest, pre.rest);
        assert!(relative_error(
            merged.kv_weights[0].as_slice(),
            pre.kv_weights[0].as_slice()
        ) < 1e-12);
    }

    #[test]
    fn merge_params_rest_mean() {
        let a = ParamSet::new(vec![], vec![2.0, 4.0]);
        let b = ParamSet::new(vec![], vec![6.0, 8.0]);
        let pre = ParamSet::new(vec![], vec![0.0, 0.0]);
        let emb = Matrix::zeros(1, 1);
        let (merged, ctx) = merge_params(
            &[a, b],
            &[emb.clone(), emb.clone()],
            &Matrix::identity(1),
            &pre,
            Ridge::default(),
        )
        .unwrap();
        assert_eq!(merged.rest, vec![4.0, 6.0]);
        let grads = ctx.vjp(&ParamSet::new(vec![], vec![1.0, -2.0])).unwrap();
        assert_eq!(grads[0].rest, vec![0.5, -1.0]);
        assert_eq!(grads[1].rest, vec![0.5, -1.0]);
    }

    #[test]
    fn merge_params_rejects_mismatch() {
        let a = ParamSet::new(vec![], vec![2.0]);
        let b = ParamSet::new(vec![], vec![6.0, 8.0]);
        let emb = Matrix::zeros(1, 1);
        let r = merge_params(
            &[a, b.clone()],
            &[emb.clone(), emb],
            &Matrix::identity(1),
            &b,
            Ridge::default(),
        );
        assert!(matches!(r, Err(Error::SignatureMismatch(_))));
    }

    #[test]
    fn relative_ridge_scales_with_trace() {
        let c_reg = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let lambda = Ridge::Relative(1e-8).lambda_for(&c_reg);
        assert!((lambda - 1e-8 * 10.0 / 2.0).abs() < 1e-20);
        assert_eq!(Ridge::Absolute(0.5).lambda_for(&c_reg), 0.5);
    }
}
