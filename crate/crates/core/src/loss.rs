//! Latent-space training objective.
//!
//! `total = l1 + l2` where `l1` is the mean squared one-step prediction error
//! and `l2 = -(1/d) sum_j (1 + ln s2_j - m_j^2 - s2_j)` is evaluated on the
//! batch moments of the encoder output after standardizing them by the prior.
//! The expression carries no factor one half, so it equals twice the Gaussian
//! KL divergence; its minimizer is the same.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to batch variances before the logarithm.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Per-dimension Gaussian target for the batch moments of the latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mu0: Vec<f64>,
    pub var0: Vec<f64>,
}

impl Prior {
    pub fn standard(d: usize) -> Self {
        Prior {
            mu0: vec![0.0; d],
            var0: vec![1.0; d],
        }
    }

    pub fn from_std(mean: f64, std: f64, d: usize) -> Result<Self> {
        Self::from_var(mean, std * std, d)
    }

    pub fn from_var(mean: f64, var: f64, d: usize) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) || !mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "prior needs finite mean and positive variance, got N({mean}, {var})"
            )));
        }
        Ok(Prior {
            mu0: vec![mean; d],
            var0: vec![var; d],
        })
    }

    /// `N(1, 0.2^2)`, keeps the latent of square-root laws non-negative.
    pub fn torricelli() -> Self {
        Self::from_std(1.0, 0.2, 1).expect("valid prior")
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// Repeats a one-dimensional prior across `d` dimensions.
    pub fn broadcast(&self, d: usize) -> Result<Self> {
        if self.dim() == d {
            return Ok(self.clone());
        }
        if self.dim() == 1 {
            return Ok(Prior {
                mu0: vec![self.mu0[0]; d],
                var0: vec![self.var0[0]; d],
            });
        }
        Err(Error::DimensionMismatch {
            context: "prior dimension",
            expected: d,
            actual: self.dim(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Full,
    /// Drops the divergence term. The latent is then free to collapse.
    MseOnly,
}

/// Encodings at the target times and the physics-block predictions of them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Array2<f64>,
    pub z_hat: Array2<f64>,
    pub mu_z: Array1<f64>,
    pub var_z: Array1<f64>,
}

impl LatentBatch {
    pub fn new(z: Array2<f64>, z_hat: Array2<f64>) -> Result<Self> {
        if z.dim() != z_hat.dim() {
            return Err(Error::DimensionMismatch {
                context: "latent batch rows",
                expected: z.nrows(),
                actual: z_hat.nrows(),
            });
        }
        let (mu_z, var_z) = batch_moments(&z)?;
        Ok(LatentBatch { z, z_hat, mu_z, var_z })
    }

    pub fn rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

/// Column means and population variances.
pub fn batch_moments(z: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let m = z.nrows();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("batch moments need at least 2 rows, got {m}")));
    }
    let mu = z.mean_axis(Axis(0)).expect("non-empty");
    let var = z.var_axis(Axis(0), 0.0);
    Ok((mu, var))
}

pub fn prediction_loss(batch: &LatentBatch) -> f64 {
    let m = batch.rows() as f64;
    batch
        .z
        .iter()
        .zip(batch.z_hat.iter())
        .map(|(z, zh)| (z - zh) * (z - zh))
        .sum::<f64>()
        / m
}

pub fn kl_loss(mu_z: &[f64], var_z: &[f64], prior: &Prior) -> Result<f64> {
    let d = mu_z.len();
    if var_z.len() != d || prior.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "kl_loss moments",
            expected: d,
            actual: if var_z.len() != d { var_z.len() } else { prior.dim() },
        });
    }
    let mut acc = 0.0;
    for j in 0..d {
        let var = var_z[j].max(VARIANCE_FLOOR);
        if !(var > 0.0) || !mu_z[j].is_finite() || !var.is_finite() {
            return Err(Error::NonFinite("kl_loss moments"));
        }
        let mu_std = (mu_z[j] - prior.mu0[j]) / prior.var0[j].sqrt();
        let var_std = var / prior.var0[j];
        acc += 1.0 + var_std.ln() - mu_std * mu_std - var_std;
    }
    Ok(-acc / d as f64)
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
}

pub fn total_loss(batch: &LatentBatch, prior: &Prior, mode: LossMode) -> Result<LossTerms> {
    let l1 = prediction_loss(batch);
    let l2 = match mode {
        LossMode::Full => kl_loss(
            batch.mu_z.as_slice().expect("contiguous"),
            batch.var_z.as_slice().expect("contiguous"),
            prior,
        )?,
        LossMode::MseOnly => 0.0,
    };
    Ok(LossTerms { total: l1 + l2, l1, l2 })
}

/// Gradients of the total loss with respect to every row of `z` and `z_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub d_z: Array2<f64>,
    pub d_z_hat: Array2<f64>,
}

pub fn loss_backward(batch: &LatentBatch, prior: &Prior, mode: LossMode) -> Result<LossGrad> {
    let m = batch.rows() as f64;
    let d = batch.dim();
    let diff = &batch.z - &batch.z_hat;
    let mut d_z = diff.mapv(|x| 2.0 * x / m);
    let d_z_hat = diff.mapv(|x| -2.0 * x / m);
    if mode == LossMode::Full {
        if prior.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "prior dimension",
                expected: d,
                actual: prior.dim(),
            });
        }
        for j in 0..d {
            let mu = batch.mu_z[j];
            let raw_var = batch.var_z[j];
            let d_mu = 2.0 * (mu - prior.mu0[j]) / (prior.var0[j] * d as f64);
            // Below the floor the variance is a constant.
            let d_var = if raw_var > VARIANCE_FLOOR {
                -(1.0 / raw_var - 1.0 / prior.var0[j]) / d as f64
            } else {
                0.0
            };
            for (zij, g) in batch.z.column(j).iter().zip(d_z.column_mut(j).iter_mut()) {
                *g += d_mu / m + d_var * 2.0 * (zij - mu) / m;
            }
        }
    }
    Ok(LossGrad { d_z, d_z_hat })
}
