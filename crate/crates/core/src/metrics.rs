//! Batch similarity measures and the similarity gap ratios.
//!
//! Similarities compare two batches of generations as distributions. The
//! gap ratios:
//!
//! ```text
//! MSGR  = (1/|C|)·Σ_n (M(x^r_n, x^A_n) − M(x^r_n, x^I_n)) / M(x^r_n, x^A_n)
//! MRSGR = (M̄_other − M̄_target) / M̄_other,   M̄ = mean over concepts of M(x^I, x^A)
//! ```
//!
//! `x^A` is generated after attacking the unprotected model, `x^I` after
//! attacking the immunized one, `x^r` are reference samples.

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_observed, AdaptMethod};
use crate::diffusion::{sample_with, ConceptSpec, Denoiser, NoiseSchedule, SamplerKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, Rng};

/// Feature width of the frozen encoder.
pub const ENCODER_DIM: usize = 16;
const ENCODER_HIDDEN: usize = 32;
const PROBE_SAMPLES: usize = 2048;
const PROBE_STD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    FrozenEncoderCosine,
    NegMse,
    MmdGaussian,
}

impl SimilarityKind {
    pub fn name(&self) -> &'static str {
        match self {
            SimilarityKind::FrozenEncoderCosine => "frozen_encoder_cosine",
            SimilarityKind::NegMse => "neg_mse",
            SimilarityKind::MmdGaussian => "mmd_gaussian",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineAggregation {
    /// Cosine between the two batches' mean features.
    #[default]
    MeanFeature,
    /// Mean cosine over all cross-batch pairs.
    MeanPairwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityMetric {
    pub kind: SimilarityKind,
    #[serde(default)]
    pub encoder_seed: u64,
    /// Kernel bandwidth, `MmdGaussian` only.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default)]
    pub aggregation: CosineAggregation,
}

fn default_bandwidth() -> f64 {
    1.0
}

impl SimilarityMetric {
    pub fn new(kind: SimilarityKind) -> Self {
        Self {
            kind,
            encoder_seed: 0,
            bandwidth: default_bandwidth(),
            aggregation: CosineAggregation::default(),
        }
    }

    /// Builds the evaluator for `data_dim`-dimensional batches.
    pub fn build(&self, data_dim: usize) -> Result<Similarity> {
        if self.kind == SimilarityKind::MmdGaussian && !(self.bandwidth > 0.0) {
            return Err(Error::InvalidArgument("bandwidth must be > 0".into()));
        }
        let encoder = match self.kind {
            SimilarityKind::FrozenEncoderCosine => Some(FrozenEncoder::new(self.encoder_seed, data_dim)),
            _ => None,
        };
        Ok(Similarity {
            metric: self.clone(),
            data_dim,
            encoder,
        })
    }
}

/// Seeded random two-layer tanh network, centered by its mean response to a
/// fixed Gaussian probe set. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    center: Vec<f64>,
}

impl FrozenEncoder {
    pub fn new(seed: u64, data_dim: usize) -> Self {
        let mut rng = Rng::derive(seed, &[0x656e_636f_6465_72]);
        let w1 = rng.normal_matrix(ENCODER_HIDDEN, data_dim, 1.0 / (data_dim as f64).sqrt());
        let b1 = rng.normal_vec(ENCODER_HIDDEN, 0.5);
        let w2 = rng.normal_matrix(ENCODER_DIM, ENCODER_HIDDEN, 1.0 / (ENCODER_HIDDEN as f64).sqrt());
        let b2 = rng.normal_vec(ENCODER_DIM, 0.5);
        let mut enc = Self {
            w1,
            b1,
            w2,
            b2,
            center: vec![0.0; ENCODER_DIM],
        };
        let probe = rng.normal_matrix(PROBE_SAMPLES, data_dim, PROBE_STD);
        enc.center = mean_rows(&enc.raw(&probe));
        enc
    }

    fn raw(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), ENCODER_DIM);
        let mut h = vec![0.0; ENCODER_HIDDEN];
        for r in 0..x.rows() {
            let xr = x.row(r);
            for (j, hj) in h.iter_mut().enumerate() {
                let s: f64 = self.w1.row(j).iter().zip(xr).map(|(w, v)| w * v).sum();
                *hj = (s + self.b1[j]).tanh();
            }
            for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                let s: f64 = self.w2.row(k).iter().zip(&h).map(|(w, v)| w * v).sum();
                *o = (s + self.b2[k]).tanh();
            }
        }
        out
    }

    /// Centered features, one row per input row.
    pub fn encode(&self, x: &Matrix) -> Matrix {
        let mut f = self.raw(x);
        for r in 0..f.rows() {
            for (v, c) in f.row_mut(r).iter_mut().zip(&self.center) {
                *v -= c;
            }
        }
        f
    }
}

/// A [`SimilarityMetric`] ready to evaluate.
#[derive(Clone, Debug)]
pub struct Similarity {
    metric: SimilarityMetric,
    data_dim: usize,
    encoder: Option<FrozenEncoder>,
}

impl Similarity {
    pub fn metric(&self) -> &SimilarityMetric {
        &self.metric
    }

    pub fn kind(&self) -> SimilarityKind {
        self.metric.kind
    }

    pub fn similarity(&self, a: &Matrix, b: &Matrix) -> Result<f64> {
        if a.rows() == 0 || b.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if a.cols() != self.data_dim || b.cols() != self.data_dim {
            return Err(Error::DimensionMismatch(format!(
                "batches of width {} and {} for a {}-dimensional metric",
                a.cols(),
                b.cols(),
                self.data_dim
            )));
        }
        Ok(match self.metric.kind {
            SimilarityKind::FrozenEncoderCosine => {
                let enc = self.encoder.as_ref().expect("encoder built for cosine");
                let (fa, fb) = (enc.encode(a), enc.encode(b));
                match self.metric.aggregation {
                    CosineAggregation::MeanFeature => cosine(&mean_rows(&fa), &mean_rows(&fb)),
                    CosineAggregation::MeanPairwise => {
                        let mut s = 0.0;
                        for i in 0..fa.rows() {
                            for j in 0..fb.rows() {
                                s += cosine(fa.row(i), fb.row(j));
                            }
                        }
                        s / (fa.rows() * fb.rows()) as f64
                    }
                }
            }
            SimilarityKind::NegMse => {
                let (ma, mb) = (mean_rows(a), mean_rows(b));
                -ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            }
            SimilarityKind::MmdGaussian => {
                let bw = self.metric.bandwidth;
                let kab = mean_kernel(a, b, bw);
                2.0 * kab / (mean_kernel(a, a, bw) + mean_kernel(b, b, bw))
            }
        })
    }
}

/// Cosine of two vectors; 0 if either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / m.rows() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Mean Gaussian kernel over all pairs (V-statistic). Symmetric in its
/// arguments because the pairs are summed in a fixed `(min, max)` order.
fn mean_kernel(a: &Matrix, b: &Matrix, bw: f64) -> f64 {
    let inv = 1.0 / (2.0 * bw * bw);
    let k = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d * inv).exp()
    };
    // Sum in a canonical order so that swapping a and b is bitwise neutral.
    let (outer, inner) = if a.as_slice() <= b.as_slice() { (a, b) } else { (b, a) };
    let mut s = 0.0;
    for i in 0..outer.rows() {
        for j in 0..inner.rows() {
            s += k(outer.row(i), inner.row(j));
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// Smallest absolute denominator accepted by the gap ratios.
pub const MIN_DENOMINATOR: f64 = 1e-9;

/// Mean similarity gap ratio from per-concept similarities of the attacked
/// unprotected model (`without`) and attacked immunized model (`with`) to
/// the references.
pub fn msgr(without: &[f64], with: &[f64]) -> Result<f64> {
    Ok(msgr_report(without, with)?.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub value: f64,
    pub per_concept: Vec<f64>,
    /// Concepts whose denominator is negative, so the sign of their ratio is
    /// inverted relative to the usual reading.
    pub negative_denominators: Vec<usize>,
}

pub fn msgr_report(without: &[f64], with: &[f64]) -> Result<GapReport> {
    if without.is_empty() {
        return Err(Error::InvalidArgument("no concepts".into()));
    }
    if without.len() != with.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} reference similarities vs {}",
            without.len(),
            with.len()
        )));
    }
    let mut per_concept = Vec::with_capacity(without.len());
    let mut negative_denominators = Vec::new();
    for (n, (&a, &i)) in without.iter().zip(with).enumerate() {
        if !(a.abs() >= MIN_DENOMINATOR) {
            return Err(Error::DegenerateDenominator { concept: n, value: a });
        }
        if a < 0.0 {
            negative_denominators.push(n);
        }
        per_concept.push((a - i) / a);
    }
    let value = per_concept.iter().sum::<f64>() / per_concept.len() as f64;
    Ok(GapReport {
        value,
        per_concept,
        negative_denominators,
    })
}

/// Mean relative similarity gap ratio from per-concept `M(x^I, x^A)` values.
pub fn mrsgr(target: &[f64], other: &[f64]) -> Result<f64> {
    if target.is_empty() || other.is_empty() {
        return Err(Error::InvalidArgument("mrsgr needs target and other concepts".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mt, mo) = (mean(target), mean(other));
    if !(mo.abs() >= MIN_DENOMINATOR) {
        return Err(Error::DegenerateDenominator {
            concept: usize::MAX,
            value: mo,
        });
    }
    Ok((mo - mt) / mo)
}

/// [`mrsgr`] on `(x^I, x^A)` generation pairs.
pub fn mrsgr_from_batches(
    metric: &Similarity,
    target: &[(Matrix, Matrix)],
    other: &[(Matrix, Matrix)],
) -> Result<f64> {
    let sims = |pairs: &[(Matrix, Matrix)]| {
        pairs
            .iter()
            .map(|(i, a)| metric.similarity(i, a))
            .collect::<Result<Vec<_>>>()
    };
    mrsgr(&sims(target)?, &sims(other)?)
}

/// How generations are drawn at each checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSettings {
    pub count: usize,
    #[serde(default)]
    pub sampler: SamplerKind,
    /// Generations at checkpoint `s` use a generator derived from
    /// `(seed, s)`, so arms sharing a seed share their sampling noise.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSamples {
    pub step: usize,
    pub samples: Matrix,
}

/// Runs `attack` and samples generations at every checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn attack_samples(
    model: &Denoiser,
    attack: &AdaptMethod,
    concept: &ConceptSpec,
    data: &Matrix,
    schedule: &NoiseSchedule,
    checkpoints: &[usize],
    sampling: &SampleSettings,
    rng: &mut Rng,
) -> Result<Vec<CheckpointSamples>> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints".into()));
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    adapt_observed(
        model,
        attack,
        concept,
        data,
        schedule,
        rng,
        checkpoints,
        |step, adapted, embedding| {
            let mut srng = Rng::new(derive_seed(sampling.seed, &[step as u64]));
            let samples = sample_with(
                &adapted.conditioned(embedding),
                schedule,
                sampling.count,
                sampling.sampler,
                &mut srng,
            )?;
            out.push(CheckpointSamples { step, samples });
            Ok(())
        },
    )?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub similarity: f64,
}

/// Similarity of the attacked model's generations to `reference` at each
/// checkpoint of the attack.
#[allow(clippy::too_many_arguments)]
pub fn trajectory(
    model: &Denoiser,
    attack: &AdaptMethod,
    concept: &ConceptSpec,
    data: &Matrix,
    schedule: &NoiseSchedule,
    checkpoints: &[usize],
    metric: &Similarity,
    reference: &Matrix,
    sampling: &SampleSettings,
    rng: &mut Rng,
) -> Result<Vec<TrajectoryPoint>> {
    attack_samples(model, attack, concept, data, schedule, checkpoints, sampling, rng)?
        .into_iter()
        .map(|c| {
            Ok(TrajectoryPoint {
                step: c.step,
                similarity: metric.similarity(reference, &c.samples)?,
            })
        })
        .collect()
}
