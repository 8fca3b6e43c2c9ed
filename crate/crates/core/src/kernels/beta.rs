use crate::stats::{beta_cdf, ln_beta};
use crate::{Error, Result};

/// Shape parameters of the beta density with mean `mu` and precision `tau`.
pub fn beta_shapes(mu: f64, tau: f64) -> (f64, f64) {
    (mu * tau, tau * (1.0 - mu))
}

/// `c * ln(x)` with the convention `0 * ln(0) = 0`.
pub(crate) fn xlogy(c: f64, x: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c * x.ln()
    }
}

pub(crate) fn check_mean_precision(mu: f64, tau: f64) -> Result<()> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Param(format!("beta mean {mu} outside (0,1)")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Param(format!("beta precision {tau} must be positive")));
    }
    Ok(())
}

/// Log density of the beta distribution in mean/precision form. The closed
/// interval is accepted so endpoint limits can be evaluated.
pub fn ln_beta_pdf(t: f64, mu: f64, tau: f64) -> Result<f64> {
    check_mean_precision(mu, tau)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Param(format!("beta argument {t} outside [0,1]")));
    }
    let (a, b) = beta_shapes(mu, tau);
    Ok(xlogy(a - 1.0, t) + xlogy(b - 1.0, 1.0 - t) - ln_beta(a, b))
}

pub fn beta_pdf(t: f64, mu: f64, tau: f64) -> Result<f64> {
    ln_beta_pdf(t, mu, tau).map(f64::exp)
}

pub fn beta_kernel_cdf(t: f64, mu: f64, tau: f64) -> Result<f64> {
    check_mean_precision(mu, tau)?;
    let (a, b) = beta_shapes(mu, tau);
    Ok(beta_cdf(t, a, b))
}
