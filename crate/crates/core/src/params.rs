//! Partitioned denoiser parameters.
//!
//! A [`ParamSet`] splits the weights into the cross-attention key/value
//! projections (merged by the constrained solve) and a flat vector holding
//! everything else (merged by averaging). The flat order used by optimizers
//! and gradient checks is: every kv matrix in declared order, row-major, then
//! `rest`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub kv_shapes: Vec<(usize, usize)>,
    pub rest_len: usize,
}

impl Signature {
    pub fn kv_len(&self) -> usize {
        self.kv_shapes.iter().map(|(r, c)| r * c).sum()
    }

    pub fn num_params(&self) -> usize {
        self.kv_len() + self.rest_len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub kv_weights: Vec<Matrix>,
    pub rest: Vec<f64>,
}

impl ParamSet {
    pub fn new(kv_weights: Vec<Matrix>, rest: Vec<f64>) -> Self {
        Self { kv_weights, rest }
    }

    pub fn zeros(sig: &Signature) -> Self {
        Self {
            kv_weights: sig.kv_shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            rest: vec![0.0; sig.rest_len],
        }
    }

    pub fn signature(&self) -> Signature {
        Signature {
            kv_shapes: self.kv_weights.iter().map(Matrix::shape).collect(),
            rest_len: self.rest.len(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.signature().num_params()
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        let (a, b) = (self.signature(), other.signature());
        if a != b {
            return Err(Error::SignatureMismatch(format!("{a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in &self.kv_weights {
            out.extend_from_slice(w.as_slice());
        }
        out.extend_from_slice(&self.rest);
        out
    }

    pub fn from_flat(sig: &Signature, flat: &[f64]) -> Result<Self> {
        if flat.len() != sig.num_params() {
            return Err(Error::SignatureMismatch(format!(
                "flat vector of length {} for signature with {} parameters",
                flat.len(),
                sig.num_params()
            )));
        }
        let mut offset = 0;
        let mut kv = Vec::with_capacity(sig.kv_shapes.len());
        for &(r, c) in &sig.kv_shapes {
            kv.push(Matrix::new(r, c, flat[offset..offset + r * c].to_vec())?);
            offset += r * c;
        }
        Ok(Self {
            kv_weights: kv,
            rest: flat[offset..].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.kv_weights.iter().all(Matrix::is_finite) && self.rest.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        let kv: f64 = self.kv_weights.iter().map(|w| w.frobenius_norm().powi(2)).sum();
        let rest: f64 = self.rest.iter().map(|v| v * v).sum();
        (kv + rest).sqrt()
    }
}


/// Which parameters an update is allowed to touch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    #[default]
    All,
    KvOnly,
    RestOnly,
    /// Explicit per-parameter mask in flat order.
    Custom(Vec<bool>),
}

impl ParamSubset {
    pub fn mask(&self, sig: &Signature) -> Result<Vec<bool>> {
        let (kv, total) = (sig.kv_len(), sig.num_params());
        let mask = match self {
            ParamSubset::All => vec![true; total],
            ParamSubset::KvOnly => (0..total).map(|i| i < kv).collect(),
            ParamSubset::RestOnly => (0..total).map(|i| i >= kv).collect(),
            ParamSubset::Custom(m) => {
                if m.len() != total {
                    return Err(Error::SignatureMismatch(format!(
                        "mask of length {} for {total} parameters",
                        m.len()
                    )));
                }
                m.clone()
            }
        };
        if !mask.iter().any(|&b| b) {
            return Err(Error::InvalidArgument("parameter subset is empty".into()));
        }
        Ok(mask)
    }
}
