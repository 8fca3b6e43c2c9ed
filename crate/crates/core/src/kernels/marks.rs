use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::MarkValue;
use crate::quadrature::integrate_upper;
use crate::stats::{normal_ln_pdf, poisson_ln_pmf, poisson_ln_upper_tail};
use crate::{Error, Result};

/// A single mark kernel with fixed parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MarkKernel {
    Categorical { probs: Vec<f64> },
    Normal { mean: f64, var: f64 },
    TruncPoisson { rate: f64, bound: u64 },
    LogNormalShift { mean: f64, var: f64, offset: f64 },
}

/// `ln Po(y; rate) - ln Pr(Y >= bound)`; the caller guarantees `y >= bound`.
pub fn ln_trunc_poisson(y: u64, rate: f64, bound: u64) -> f64 {
    poisson_ln_pmf(y, rate) - poisson_ln_upper_tail(bound, rate)
}

pub fn ln_mark_kernel_pdf(y: &MarkValue, kernel: &MarkKernel) -> Result<f64> {
    match (kernel, y) {
        (MarkKernel::Categorical { probs }, MarkValue::Category(c)) => probs
            .get(*c)
            .map(|p| p.ln())
            .ok_or_else(|| Error::Support(format!("category {c} with {} levels", probs.len()))),
        (MarkKernel::TruncPoisson { rate, bound }, MarkValue::Count(k)) => {
            if k < bound {
                return Err(Error::Support(format!("count {k} below truncation bound {bound}")));
            }
            if !(*rate > 0.0) {
                return Err(Error::Param(format!("Poisson rate {rate} must be positive")));
            }
            Ok(ln_trunc_poisson(*k, *rate, *bound))
        }
        (MarkKernel::Normal { mean, var }, MarkValue::Real(v)) => Ok(normal_ln_pdf(*v, *mean, *var)),
        (MarkKernel::LogNormalShift { mean, var, offset }, MarkValue::Real(v)) => {
            if *v <= *offset {
                return Err(Error::Support(format!("mark {v} not above offset {offset}")));
            }
            let l = (v - offset).ln();
            Ok(normal_ln_pdf(l, *mean, *var) - l)
        }
        _ => Err(Error::Support(format!("{y:?} does not match kernel {kernel:?}"))),
    }
}

pub fn mark_kernel_pdf(y: &MarkValue, kernel: &MarkKernel) -> Result<f64> {
    ln_mark_kernel_pdf(y, kernel).map(f64::exp)
}

/// Log marginal mass of a (truncated) Poisson count under a `ga(shape, rate)`
/// prior on the Poisson rate. Untruncated counts give the negative binomial
/// closed form; truncated ones are integrated numerically.
pub fn ln_gamma_poisson_marginal(y: u64, bound: u64, shape: f64, rate: f64) -> f64 {
    if y < bound {
        return f64::NEG_INFINITY;
    }
    let yf = y as f64;
    if bound == 0 {
        return ln_gamma(shape + yf) - ln_gamma(shape) - ln_gamma(yf + 1.0)
            + shape * (rate / (rate + 1.0)).ln()
            - yf * (rate + 1.0).ln();
    }
    let ln_prior_norm = shape * rate.ln() - ln_gamma(shape);
    // integrate in log-rate, split at the posterior mode of the untruncated
    // model so both halves decay monotonically
    let centre = ((shape + yf) / (rate + 1.0)).ln();
    let f = |u: f64| {
        let phi = u.exp();
        if !(phi > 0.0 && phi.is_finite()) {
            return 0.0;
        }
        let v = (ln_trunc_poisson(y, phi, bound) + ln_prior_norm + shape * u - rate * phi).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let below = integrate_upper(|s| f(centre - s), 0.0, 1e-11);
    let above = integrate_upper(|s| f(centre + s), 0.0, 1e-11);
    (below + above).ln()
}
