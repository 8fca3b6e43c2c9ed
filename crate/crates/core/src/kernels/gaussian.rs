use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::stats::{cholesky, ln_det_from_chol, logit, sample_mvn, sample_wishart, LN_SQRT_2PI};
use crate::{Error, Result, Rng};

pub const MAX_DIM: usize = 3;

/// Map from a raw coordinate onto the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Unit-interval location coordinate.
    Logit,
    /// Real-valued mark.
    Identity,
    /// Positive mark shifted by an offset, mapped by `ln(y - offset)`.
    LogShift(f64),
}

impl Transform {
    /// Transformed value and log Jacobian `ln |dz/dx|`.
    pub fn apply(&self, x: f64) -> (f64, f64) {
        match *self {
            Transform::Logit => {
                let (lt, l1) = (x.ln(), (-x).ln_1p());
                (lt - l1, -lt - l1)
            }
            Transform::Identity => (x, 0.0),
            Transform::LogShift(o) => {
                let l = (x - o).ln();
                (l, -l)
            }
        }
    }
}

/// `|L^{-1} v|^2` for a lower Cholesky factor `L`, without allocation.
pub(crate) fn mahalanobis(chol: &DMatrix<f64>, diff: &[f64]) -> f64 {
    let d = diff.len();
    let mut w = [0.0; MAX_DIM];
    let mut q = 0.0;
    for i in 0..d {
        let mut s = diff[i];
        for j in 0..i {
            s -= chol[(i, j)] * w[j];
        }
        w[i] = s / chol[(i, i)];
        q += w[i] * w[i];
    }
    q
}

/// Normal log density on the transformed scale given a Cholesky factor.
pub(crate) fn ln_normal_chol(z: &[f64], mean: &[f64], chol: &DMatrix<f64>, ln_det: f64) -> f64 {
    let d = z.len();
    let mut diff = [0.0; MAX_DIM];
    for k in 0..d {
        diff[k] = z[k] - mean[k];
    }
    -(d as f64) * LN_SQRT_2PI - 0.5 * ln_det - 0.5 * mahalanobis(chol, &diff[..d])
}

/// Logit-normal density on `(0,1)^d`, Jacobian included.
pub fn ln_logit_normal_pdf(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let d = x.len();
    if d == 0 || d > MAX_DIM || mean.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(Error::Param("dimension mismatch in logit-normal density".into()));
    }
    if x.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::Param(format!("logit-normal argument {x:?} outside the open unit cube")));
    }
    let chol = cholesky(cov)?;
    let ln_det = ln_det_from_chol(&chol);
    let mut z = [0.0; MAX_DIM];
    let mut jac = 0.0;
    for k in 0..d {
        let (zk, jk) = Transform::Logit.apply(x[k]);
        z[k] = zk;
        jac += jk;
    }
    Ok(ln_normal_chol(&z[..d], mean, &chol, ln_det) + jac)
}

pub fn logit_normal_pdf(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    // the density vanishes at the boundary of the cube
    if x.iter().any(|&t| t == 0.0 || t == 1.0) && x.iter().all(|&t| (0.0..=1.0).contains(&t)) {
        return Ok(0.0);
    }
    ln_logit_normal_pdf(x, mean, cov).map(f64::exp)
}

/// Cumulative distribution of a one-dimensional logit-normal.
pub fn logit_normal_cdf(t: f64, mean: f64, var: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        crate::stats::normal_cdf((logit(t) - mean) / var.sqrt())
    }
}

/// Normal-inverse-Wishart law in the standard form: `Sigma ~ IW(df, psi)`
/// (so `E[Sigma] = psi / (df - d - 1)`) and `mu | Sigma ~ N(mean, Sigma / kappa)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalInvWishart {
    pub mean: DVector<f64>,
    pub kappa: f64,
    pub df: f64,
    pub psi: DMatrix<f64>,
}

/// Sufficient statistics of a set of transformed observations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub n: f64,
    pub sum: DVector<f64>,
    pub outer: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            sum: DVector::zeros(d),
            outer: DMatrix::zeros(d, d),
        }
    }

    pub fn add(&mut self, z: &[f64]) {
        let d = z.len();
        self.n += 1.0;
        for i in 0..d {
            self.sum[i] += z[i];
            for j in 0..d {
                self.outer[(i, j)] += z[i] * z[j];
            }
        }
    }

    pub fn remove(&mut self, z: &[f64]) {
        let d = z.len();
        self.n -= 1.0;
        for i in 0..d {
            self.sum[i] -= z[i];
            for j in 0..d {
                self.outer[(i, j)] -= z[i] * z[j];
            }
        }
    }
}

impl NormalInvWishart {
    /// From the precision-scale form `Sigma^{-1} ~ W(nu, Omega)` with density
    /// proportional to `|Sigma^{-1}|^{nu-(d+1)/2} exp(-tr(Omega Sigma^{-1}))`,
    /// and `mu | Sigma ~ N(mean, Sigma / kappa)`.
    pub fn from_precision_form(mean: DVector<f64>, kappa: f64, nu: f64, omega: &DMatrix<f64>) -> Self {
        Self {
            mean,
            kappa,
            df: 2.0 * nu,
            psi: omega * 2.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn posterior(&self, s: &GaussianStats) -> Self {
        if s.n == 0.0 {
            return self.clone();
        }
        let kappa = self.kappa + s.n;
        let mean = (&self.mean * self.kappa + &s.sum) / kappa;
        let mut psi = &self.psi + &s.outer + &self.mean * self.mean.transpose() * self.kappa
            - &mean * mean.transpose() * kappa;
        psi = (&psi + psi.transpose()) * 0.5;
        Self {
            mean,
            kappa,
            df: self.df + s.n,
            psi,
        }
    }

    /// Law of the sub-vector `idx` of `(mu, Sigma)`: the covariance block is
    /// inverse Wishart with the degrees of freedom reduced by the dropped
    /// dimensions.
    pub fn marginal(&self, idx: &[usize]) -> Self {
        let k = idx.len();
        Self {
            mean: DVector::from_fn(k, |i, _| self.mean[idx[i]]),
            kappa: self.kappa,
            df: self.df - (self.dim() - k) as f64,
            psi: DMatrix::from_fn(k, k, |i, j| self.psi[(idx[i], idx[j])]),
        }
    }

    /// Posterior predictive of one further observation.
    pub fn predictive(&self) -> Result<StudentT> {
        let d = self.dim() as f64;
        let df = self.df - d + 1.0;
        let scale = &self.psi * ((self.kappa + 1.0) / (self.kappa * df));
        StudentT::new(self.mean.clone(), &scale, df)
    }

    /// Draw `(mu, Sigma)`.
    pub fn sample(&self, rng: &mut Rng) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let psi_inv = self
            .psi
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Linalg("inverse-Wishart scale is singular".into()))?;
        let psi_inv = (&psi_inv + psi_inv.transpose()) * 0.5;
        let prec = sample_wishart(rng, self.df, &cholesky(&psi_inv)?);
        let cov = prec
            .try_inverse()
            .ok_or_else(|| Error::Linalg("sampled precision is singular".into()))?;
        let cov = (&cov + cov.transpose()) * 0.5;
        let chol = cholesky(&cov)? / self.kappa.sqrt();
        let mu = sample_mvn(rng, &self.mean, &chol);
        Ok((mu, cov))
    }
}

/// Multivariate Student-t density.
#[derive(Debug, Clone)]
pub struct StudentT {
    pub loc: DVector<f64>,
    pub df: f64,
    chol: DMatrix<f64>,
    ln_norm: f64,
}

impl StudentT {
    pub fn new(loc: DVector<f64>, scale: &DMatrix<f64>, df: f64) -> Result<Self> {
        let d = loc.len() as f64;
        let chol = cholesky(scale)?;
        let ln_norm = ln_gamma(0.5 * (df + d)) - ln_gamma(0.5 * df)
            - 0.5 * d * (df * std::f64::consts::PI).ln()
            - 0.5 * ln_det_from_chol(&chol);
        Ok(Self { loc, df, chol, ln_norm })
    }

    pub fn ln_pdf(&self, z: &[f64]) -> f64 {
        let d = z.len();
        let mut diff = [0.0; MAX_DIM];
        for k in 0..d {
            diff[k] = z[k] - self.loc[k];
        }
        let q = mahalanobis(&self.chol, &diff[..d]);
        self.ln_norm - 0.5 * (self.df + d as f64) * (q / self.df).ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, integrate_real, integrate_upper};
    use crate::stats::normal_ln_pdf;

    #[test]
    fn logit_normal_reference_values() {
        let cov = DMatrix::from_element(1, 1, 1.0);
        let v = logit_normal_pdf(&[0.5], &[0.0], &cov).unwrap();
        assert!((v - 4.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((v - 1.595_769).abs() < 1e-6);
        for t in [0.1, 0.27, 0.4] {
            let a = logit_normal_pdf(&[t], &[0.0], &cov).unwrap();
            let b = logit_normal_pdf(&[1.0 - t], &[0.0], &cov).unwrap();
            assert!((a - b).abs() < 1e-12 * a);
        }
        assert!(logit_normal_pdf(&[1e-8], &[0.0], &cov).unwrap() < 1e-60);
        assert_eq!(logit_normal_pdf(&[0.0], &[0.0], &cov).unwrap(), 0.0);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            logit_normal_pdf(&[0.3, 0.4], &[0.0, 0.0], &singular),
            Err(Error::Linalg(_))
        ));
    }

    #[test]
    fn logit_normal_normalizes_and_cdf_matches() {
        let cov = DMatrix::from_element(1, 1, 2.3);
        let v = integrate(|t| logit_normal_pdf(&[t], &[0.7], &cov).unwrap(), 0.0, 1.0, 1e-12);
        assert!((v - 1.0).abs() < 1e-8);
        for t in [0.05, 0.4, 0.93] {
            let q = integrate(|s| logit_normal_pdf(&[s], &[0.7], &cov).unwrap(), 0.0, t, 1e-12);
            assert!((q - logit_normal_cdf(t, 0.7, 2.3)).abs() < 1e-8);
        }
        let cov2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.7]);
        let v = crate::quadrature::integrate_unit_square(
            |a, b| logit_normal_pdf(&[a, b], &[0.2, -0.3], &cov2).unwrap(),
            1e-10,
        );
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverse_gamma_marginal_matches_quadrature() {
        // precision form (delta 0, kappa 1, nu 2, omega 2); predictive at 0
        let niw = NormalInvWishart::from_precision_form(
            DVector::from_element(1, 0.0),
            1.0,
            2.0,
            &DMatrix::from_element(1, 1, 2.0),
        );
        let pred = niw.predictive().unwrap();
        assert_eq!(pred.df, 4.0);
        let analytic = pred.ln_pdf(&[0.0]).exp();
        // oracle: integrate N(0; mu, 1/lam) N(mu; 0, 1/lam) ga(lam; 2, 2)
        let ln_ga = |lam: f64| 2.0 * 2f64.ln() - ln_gamma(2.0) + lam.ln() - 2.0 * lam;
        let oracle = integrate_upper(
            |lam| {
                let inner = integrate_real(
                    |mu| (normal_ln_pdf(0.0, mu, 1.0 / lam) + normal_ln_pdf(mu, 0.0, 1.0 / lam)).exp(),
                    1e-12,
                );
                inner * ln_ga(lam).exp()
            },
            0.0,
            1e-11,
        );
        assert!((analytic - oracle).abs() < 1e-6, "{analytic} vs {oracle}");
    }

    #[test]
    fn large_kappa_pins_mean() {
        let d = 2;
        let delta = DVector::from_vec(vec![0.3, -1.0]);
        let niw = NormalInvWishart::from_precision_form(
            delta.clone(),
            1e8,
            3.0,
            &DMatrix::identity(d, d),
        );
        let mut s = GaussianStats::new(d);
        for z in [[5.0, 5.0], [6.0, 4.0], [4.0, 7.0]] {
            s.add(&z);
        }
        let post = niw.posterior(&s);
        assert!((&post.mean - &delta).amax() < 1e-3);
        let mut rng = crate::rng_from_seed(3, 0);
        let (mu, _) = post.sample(&mut rng).unwrap();
        assert!((&mu - &delta).amax() < 1e-2);
    }

    #[test]
    fn posterior_cov_mean_by_monte_carlo() {
        let niw = NormalInvWishart::from_precision_form(
            DVector::from_vec(vec![0.0, 0.0]),
            0.5,
            3.0,
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        );
        let mut s = GaussianStats::new(2);
        for z in [[0.5, 1.0], [-0.3, 0.2], [1.2, -0.4], [0.1, 0.1], [0.9, 0.6]] {
            s.add(&z);
        }
        let post = niw.posterior(&s);
        let expect = &post.psi / (post.df - 3.0);
        let mut rng = crate::rng_from_seed(4, 0);
        let n = 10_000;
        let draws: Vec<DMatrix<f64>> = (0..n).map(|_| post.sample(&mut rng).unwrap().1).collect();
        for k in 0..4 {
            let vals: Vec<f64> = draws.iter().map(|m| m[k]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((mean - expect[k]).abs() < 3.0 * sd / (n as f64).sqrt(), "entry {k}: {mean} vs {}", expect[k]);
        }
    }

    #[test]
    fn stats_add_remove() {
        let mut s = GaussianStats::new(2);
        s.add(&[1.0, 2.0]);
        s.add(&[3.0, -1.0]);
        s.remove(&[1.0, 2.0]);
        assert_eq!(s.n, 1.0);
        assert_eq!(s.sum, DVector::from_vec(vec![3.0, -1.0]));
        assert_eq!(s.outer, DMatrix::from_row_slice(2, 2, &[9.0, -3.0, -3.0, 1.0]));
    }
}
