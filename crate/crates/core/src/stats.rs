//! Special functions and random variate helpers shared by the kernels.
//!
//! Gamma distributions are parametrized by shape and rate throughout
//! (mean = shape / rate).

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::{beta::beta_reg, erf::erfc, gamma::ln_gamma};

use crate::{Error, Result, Rng};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

pub fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -LN_SQRT_2PI - 0.5 * var.ln() - 0.5 * d * d / var
}

/// Regularized incomplete beta `I_t(a, b)`, clamped to the closed unit interval.
pub fn beta_cdf(t: f64, a: f64, b: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        beta_reg(a, b, t).clamp(0.0, 1.0)
    }
}

pub fn poisson_ln_pmf(y: u64, rate: f64) -> f64 {
    let y = y as f64;
    if rate == 0.0 {
        return if y == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y * rate.ln() - rate - ln_gamma(y + 1.0)
}

/// `ln Pr(Y >= bound)` for `Y ~ Poisson(rate)`.
///
/// Below the mode the upper tail is accumulated as `Po(bound) * sum_k
/// rate^k bound! / (bound+k)!`; above it the complement of the (short) lower
/// tail is used. Both recursions stay in a well-conditioned regime, which plain
/// summation of the pmf does not for large rates.
pub fn poisson_ln_upper_tail(bound: u64, rate: f64) -> f64 {
    if bound == 0 {
        return 0.0;
    }
    if rate <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let b = bound as f64;
    if rate < b {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= rate / (b + k);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            k += 1.0;
        }
        poisson_ln_pmf(bound, rate) + sum.ln()
    } else {
        // lower tail sum_{k < bound} Po(k), built upward from Po(0)
        let mut term = (-rate).exp();
        let mut lower = term;
        for k in 1..bound {
            term *= rate / k as f64;
            lower += term;
        }
        if lower < 1e-300 || !lower.is_finite() {
            // exp(-rate) underflowed; compute in log space
            let terms: Vec<f64> = (0..bound).map(|k| poisson_ln_pmf(k, rate)).collect();
            let ln_lower = log_sum_exp(&terms);
            return (-ln_lower.exp()).ln_1p();
        }
        (-lower).ln_1p()
    }
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Gamma variate with shape/rate parametrization. Handles shape < 1.
pub fn sample_gamma(rng: &mut Rng, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters must be positive and finite")
        .sample(rng)
}

pub fn sample_beta(rng: &mut Rng, a: f64, b: f64) -> f64 {
    // via gammas so small shapes are handled by the gamma sampler
    let x = sample_gamma(rng, a, 1.0);
    let y = sample_gamma(rng, b, 1.0);
    if x + y == 0.0 {
        // both underflowed: decide by the mean
        return if rng.random::<f64>() < a / (a + b) { 1.0 } else { 0.0 };
    }
    x / (x + y)
}

/// Dirichlet draw from normalized gamma variates.
pub fn sample_dirichlet(rng: &mut Rng, conc: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = conc.iter().map(|&a| sample_gamma(rng, a, 1.0)).collect();
    let total: f64 = g.iter().sum();
    if total > 0.0 {
        g.iter_mut().for_each(|x| *x /= total);
    } else {
        // all shapes tiny and every variate underflowed; mass goes to one
        // coordinate chosen proportionally to the concentration
        let sum_a: f64 = conc.iter().sum();
        let mut u = rng.random::<f64>() * sum_a;
        let mut pick = conc.len() - 1;
        for (k, &a) in conc.iter().enumerate() {
            if u < a {
                pick = k;
                break;
            }
            u -= a;
        }
        g.iter_mut().for_each(|x| *x = 0.0);
        g[pick] = 1.0;
    }
    g
}

pub fn sample_std_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sample an index from unnormalized log weights.
pub fn sample_log_categorical(rng: &mut Rng, log_w: &[f64]) -> usize {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, wk) in w.iter().enumerate() {
        if u < *wk {
            return k;
        }
        u -= wk;
    }
    // rounding: last index with positive weight
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Lower Cholesky factor; failure is reported, never regularized.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Linalg("matrix is not positive definite".into()))
}

pub fn ln_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Standard Wishart draw `W ~ W_d(df, scale)` with `E[W] = df * scale`, via
/// the Bartlett decomposition (real `df > d - 1`).
pub fn sample_wishart(rng: &mut Rng, df: f64, scale_chol: &DMatrix<f64>) -> DMatrix<f64> {
    let d = scale_chol.nrows();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi2 = 2.0 * sample_gamma(rng, 0.5 * (df - i as f64), 1.0);
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = sample_std_normal(rng);
        }
    }
    let la = scale_chol * a;
    &la * la.transpose()
}

/// Multivariate normal draw given the mean and a lower Cholesky factor.
pub fn sample_mvn(rng: &mut Rng, mean: &DVector<f64>, chol: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| sample_std_normal(rng));
    mean + chol * z
}

/// Multivariate log-gamma `ln Gamma_d(a)`.
pub fn ln_mv_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    0.25 * df * (df - 1.0) * std::f64::consts::PI.ln()
        + (0..d).map(|j| ln_gamma(a - 0.5 * j as f64)).sum::<f64>()
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `u` and the
/// uniform CDF on (0,1).
pub fn ks_uniform_statistic(u: &[f64]) -> f64 {
    let mut s = u.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let above = (i as f64 + 1.0) / n - x;
            let below = x - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the one-sample KS statistic, with Stephens'
/// small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = 2.0 * (-1f64).powi(j - 1) * (-2.0 * jf * jf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
