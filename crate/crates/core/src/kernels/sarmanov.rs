use serde::{Deserialize, Serialize};

use super::beta::{check_mean_precision, ln_beta_pdf};
use crate::{Error, Result};

/// Bivariate beta density with beta margins and a bilinear dependence factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarmanovParams {
    pub mu: [f64; 2],
    pub tau: [f64; 2],
    pub rho: f64,
}

/// Interval of dependence parameters keeping `1 + rho (x1-mu1)(x2-mu2)`
/// nonnegative on the closed unit square.
pub fn rho_bounds(mu1: f64, mu2: f64) -> Result<(f64, f64)> {
    if !(mu1 > 0.0 && mu1 < 1.0 && mu2 > 0.0 && mu2 < 1.0) {
        return Err(Error::Param(format!("margin means ({mu1}, {mu2}) outside (0,1)")));
    }
    let lower = -1.0 / (mu1 * mu2).max((1.0 - mu1) * (1.0 - mu2));
    let upper = -1.0 / (mu1 * (mu2 - 1.0)).min(mu2 * (mu1 - 1.0));
    Ok((lower, upper))
}

pub(crate) fn check(p: &SarmanovParams) -> Result<(f64, f64)> {
    for k in 0..2 {
        check_mean_precision(p.mu[k], p.tau[k])?;
    }
    let (lo, hi) = rho_bounds(p.mu[0], p.mu[1])?;
    if !(p.rho >= lo && p.rho <= hi) {
        return Err(Error::Param(format!("rho {} outside [{lo}, {hi}]", p.rho)));
    }
    Ok((lo, hi))
}

pub fn ln_sarmanov_beta_pdf(x: [f64; 2], p: &SarmanovParams) -> Result<f64> {
    check(p)?;
    let factor = 1.0 + p.rho * (x[0] - p.mu[0]) * (x[1] - p.mu[1]);
    Ok(ln_beta_pdf(x[0], p.mu[0], p.tau[0])? + ln_beta_pdf(x[1], p.mu[1], p.tau[1])? + factor.max(0.0).ln())
}

pub fn sarmanov_beta_pdf(x: [f64; 2], p: &SarmanovParams) -> Result<f64> {
    ln_sarmanov_beta_pdf(x, p).map(f64::exp)
}
