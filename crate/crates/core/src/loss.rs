//! Per-datapoint losses and their closed-form derivatives with respect to
//! the model output `f`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, Matrix, SymMatrix};

/// Lower clamp applied to softmax probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// `(1/m)|y − f|²`
    #[serde(rename = "ms", alias = "MS", alias = "mse")]
    MeanSquared,
    /// `−yᵀ log σ(f)`
    #[serde(rename = "ce", alias = "CE")]
    CrossEntropy,
}

impl LossKind {
    pub fn validate(self, y: &[f64], f: &[f64]) -> Result<()> {
        check_len(y.len(), f.len())?;
        if y.is_empty() {
            return Err(Error::InvalidInputs("output dimension must be >= 1".into()));
        }
        if self == LossKind::CrossEntropy {
            if y.len() < 2 {
                return Err(Error::InvalidInputs("cross-entropy needs m >= 2".into()));
            }
            if y.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidTarget("negative probability".into()));
            }
            let s: f64 = y.iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidTarget(format!("target sums to {s}, not 1")));
            }
        }
        Ok(())
    }

    pub fn value(self, y: &[f64], f: &[f64]) -> Result<f64> {
        self.validate(y, f)?;
        Ok(match self {
            LossKind::MeanSquared => ms_value(y, f),
            LossKind::CrossEntropy => {
                let lse = log_sum_exp(f);
                y.iter()
                    .zip(f)
                    .map(|(yi, fi)| {
                        let log_p = (fi - lse).max(PROB_FLOOR.ln());
                        -yi * log_p
                    })
                    .sum()
            }
        })
    }

    pub fn grad_f(self, y: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        self.validate(y, f)?;
        Ok(match self {
            LossKind::MeanSquared => {
                let c = 2.0 / y.len() as f64;
                f.iter().zip(y).map(|(fi, yi)| c * (fi - yi)).collect()
            }
            LossKind::CrossEntropy => softmax(f).iter().zip(y).map(|(s, yi)| s - yi).collect(),
        })
    }

    pub fn hess_f(self, y: &[f64], f: &[f64]) -> Result<SymMatrix> {
        self.validate(y, f)?;
        let m = y.len();
        Ok(match self {
            LossKind::MeanSquared => SymMatrix::identity(m).scaled(2.0 / m as f64),
            LossKind::CrossEntropy => {
                let s = softmax(f);
                let h = Matrix::from_fn(m, m, |i, j| if i == j { s[i] - s[i] * s[i] } else { -s[i] * s[j] });
                SymMatrix::new(h)?
            }
        })
    }
}

pub(crate) fn ms_value(y: &[f64], f: &[f64]) -> f64 {
    y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

fn log_sum_exp(f: &[f64]) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
