//! Synthetic concepts: each one is an embedding plus a Gaussian mixture in `ℝ^D`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub components: Vec<Component>,
}

impl GaussianMixture {
    pub fn single(mean: Vec<f64>, std: f64) -> Self {
        Self {
            components: vec![Component {
                weight: 1.0,
                mean,
                std,
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.components.first() else {
            return Err(Error::InvalidArgument("mixture without components".into()));
        };
        for c in &self.components {
            if c.mean.len() != first.mean.len() {
                return Err(Error::InvalidArgument("mixture components differ in dimension".into()));
            }
            if !(c.weight > 0.0) || !(c.std >= 0.0) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidArgument("invalid mixture component".into()));
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight / total * b;
            }
        }
        m
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Matrix {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let dim = self.dim();
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let mut u = rng.uniform() * total;
            let mut pick = &self.components[self.components.len() - 1];
            for c in &self.components {
                if u < c.weight {
                    pick = c;
                    break;
                }
                u -= c.weight;
            }
            for m in &pick.mean {
                data.push(m + pick.std * rng.normal());
            }
        }
        Matrix::new(n, dim, data).expect("shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub token_id: u32,
    /// `l×c` concept embedding.
    pub embedding: Matrix,
    pub distribution: GaussianMixture,
}

/// Draws `per_concept` samples from each concept, in concept order.
pub fn make_toy_dataset(
    concepts: &[ConceptSpec],
    per_concept: usize,
    rng: &mut Rng,
) -> Result<Vec<Matrix>> {
    if per_concept == 0 {
        return Err(Error::InvalidArgument("per_concept must be >= 1".into()));
    }
    let mut ids: Vec<u32> = concepts.iter().map(|c| c.token_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("concept token ids must be unique".into()));
    }
    concepts
        .iter()
        .map(|c| {
            c.distribution.validate()?;
            if !c.embedding.is_finite() {
                return Err(Error::InvalidArgument("embedding must be finite".into()));
            }
            Ok(c.distribution.sample(per_concept, rng))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept(id: u32, mean: Vec<f64>, std: f64) -> ConceptSpec {
        ConceptSpec {
            token_id: id,
            embedding: Matrix::zeros(2, 4),
            distribution: GaussianMixture::single(mean, std),
        }
    }

    #[test]
    fn small_dataset_is_finite() {
        let data = make_toy_dataset(&[concept(0, vec![1.0, 2.0], 0.3)], 3, &mut Rng::new(0)).unwrap();
        assert_eq!(data[0].shape(), (3, 2));
        assert!(data[0].is_finite());
    }

    #[test]
    fn separated_concepts_classify_perfectly() {
        let cs = [concept(0, vec![5.0, 5.0], 0.1), concept(1, vec![-5.0, -5.0], 0.1)];
        let data = make_toy_dataset(&cs, 500, &mut Rng::new(1)).unwrap();
        for (k, batch) in data.iter().enumerate() {
            for r in 0..batch.rows() {
                let row = batch.row(r);
                let nearest = if row[0] + row[1] > 0.0 { 0 } else { 1 };
                assert_eq!(nearest, k);
            }
        }
    }

    #[test]
    fn empirical_mean_within_clt_bound() {
        let (mean, std) = (vec![1.5, -0.5], 0.3);
        let data = make_toy_dataset(&[concept(0, mean.clone(), std)], 10_000, &mut Rng::new(2)).unwrap();
        for j in 0..2 {
            let m: f64 = (0..10_000).map(|r| data[0][(r, j)]).sum::<f64>() / 10_000.0;
            assert!((m - mean[j]).abs() <= 3.0 * std / 100.0);
        }
    }

    #[test]
    fn duplicate_ids_and_zero_count_rejected() {
        let cs = [concept(0, vec![0.0, 0.0], 0.1), concept(0, vec![1.0, 0.0], 0.1)];
        assert!(make_toy_dataset(&cs, 2, &mut Rng::new(0)).is_err());
        assert!(make_toy_dataset(&cs[..1], 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn mixture_sampling_respects_weights() {
        let mix = GaussianMixture {
            components: vec![
                Component { weight: 3.0, mean: vec![-10.0], std: 0.0 },
                Component { weight: 1.0, mean: vec![10.0], std: 0.0 },
            ],
        };
        let s = mix.sample(4000, &mut Rng::new(3));
        let left = s.as_slice().iter().filter(|&&v| v < 0.0).count() as f64 / 4000.0;
        assert!((left - 0.75).abs() < 0.03);
        assert_eq!(mix.mean(), vec![-5.0]);
    }
}
