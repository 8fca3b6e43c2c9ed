use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::beta::{beta_shapes, check_mean_precision};
use super::gaussian::{ln_normal_chol, GaussianStats, NormalInvWishart, StudentT, Transform, MAX_DIM};
use super::marks::ln_gamma_poisson_marginal;
use super::sarmanov::{self, rho_bounds, SarmanovParams};
use super::uniform_scale::{uniform_scale_cdf, Direction};
use crate::data::{Event, MarkKind, MarkSchema, MarkValue, Support};
use crate::stats::{
    beta_cdf, cholesky, expit, ln_beta, ln_det_from_chol, logit, normal_cdf, normal_ln_pdf,
    poisson_ln_pmf, poisson_ln_upper_tail, sample_beta, sample_dirichlet, sample_gamma,
    sample_log_categorical, sample_mvn, sample_wishart,
};
use crate::{Error, Result, Rng};

/// A modelled variable: a location coordinate or a mark, by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Var {
    Loc(usize),
    Mark(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// A positive hyperparameter, fixed or with a gamma hyperprior. Without an
/// explicit value the chain starts at the prior mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomScale {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<GammaPrior>,
}

impl RandomScale {
    pub fn fixed(value: f64) -> Self {
        Self { value: Some(value), prior: None }
    }

    pub fn random(shape: f64, rate: f64) -> Self {
        Self { value: None, prior: Some(GammaPrior { shape, rate }) }
    }

    pub fn initial(&self) -> f64 {
        self.value
            .unwrap_or_else(|| self.prior.map(|p| p.shape / p.rate).unwrap_or(f64::NAN))
    }

    fn validate(&self, what: &str, errs: &mut Vec<String>) {
        if let Some(p) = self.prior {
            if !(p.shape > 0.0 && p.rate > 0.0 && p.shape.is_finite() && p.rate.is_finite()) {
                errs.push(format!("{what}: gamma hyperprior needs positive shape and rate"));
            }
        }
        match self.value {
            Some(v) if !(v > 0.0 && v.is_finite()) => errs.push(format!("{what}: value must be positive")),
            None if self.prior.is_none() => errs.push(format!("{what}: needs a value or a prior")),
            _ => {}
        }
    }
}

/// Wishart law in precision-scale form: density proportional to
/// `|W|^{df-(d+1)/2} exp(-tr(scale W))`, so `E[W] = df * scale^{-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WishartPrior {
    pub df: f64,
    pub scale: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMatrix {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<WishartPrior>,
}

impl RandomMatrix {
    pub fn fixed(value: Vec<Vec<f64>>) -> Self {
        Self { value: Some(value), prior: None }
    }

    pub fn random(df: f64, scale: Vec<Vec<f64>>) -> Self {
        Self { value: None, prior: Some(WishartPrior { df, scale }) }
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return None;
    }
    Some(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && m.clone().cholesky().is_some()
}

fn default_beta_shape() -> f64 {
    2.0
}

fn default_pair_shape() -> [f64; 2] {
    [2.0, 2.0]
}

fn one() -> f64 {
    1.0
}

/// One kernel family together with its base measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BlockSpec {
    /// Beta kernel on one location coordinate; base `mu ~ U(0,1)`,
    /// `1/tau ~ ga(shape, scale)`.
    Beta {
        dim: usize,
        #[serde(default = "default_beta_shape")]
        shape: f64,
        scale: RandomScale,
    },
    /// Bivariate beta on both spatial coordinates; per-margin beta bases and
    /// `rho | mu` uniform on its admissible interval.
    Sarmanov {
        #[serde(default = "default_pair_shape")]
        shape: [f64; 2],
        scale: [RandomScale; 2],
    },
    /// Monotone uniform scale kernel with a `Beta(a, b)` base on `theta`.
    UniformScale {
        dim: usize,
        direction: Direction,
        #[serde(default = "one")]
        a: f64,
        #[serde(default = "one")]
        b: f64,
    },
    /// Multivariate normal on transformed variables (logit for locations,
    /// identity for real marks, log of the excess over the offset for
    /// positive marks) with the normal-Wishart base
    /// `N(mu; mean, Sigma/kappa) W(Sigma^{-1}; nu, omega)`.
    Gaussian {
        vars: Vec<Var>,
        mean: Vec<f64>,
        kappa: f64,
        nu: f64,
        omega: RandomMatrix,
    },
    /// Categorical mark with a Dirichlet base.
    Categorical { mark: usize, conc: Vec<f64> },
    /// Poisson count mark, truncated below at the schema bound, with a
    /// `ga(shape, rate)` base on the Poisson rate.
    Poisson { mark: usize, shape: f64, rate: RandomScale },
}

impl BlockSpec {
    pub fn vars(&self, dims: usize) -> Vec<Var> {
        match self {
            BlockSpec::Beta { dim, .. } | BlockSpec::UniformScale { dim, .. } => vec![Var::Loc(*dim)],
            BlockSpec::Sarmanov { .. } => (0..dims.max(2)).map(Var::Loc).collect(),
            BlockSpec::Gaussian { vars, .. } => vars.clone(),
            BlockSpec::Categorical { mark, .. } | BlockSpec::Poisson { mark, .. } => vec![Var::Mark(*mark)],
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            BlockSpec::Beta { .. } => "beta",
            BlockSpec::Sarmanov { .. } => "sarmanov",
            BlockSpec::UniformScale { .. } => "uniform_scale",
            BlockSpec::Gaussian { .. } => "gaussian",
            BlockSpec::Categorical { .. } => "categorical",
            BlockSpec::Poisson { .. } => "poisson",
        }
    }
}

/// Kernel parameters of one block of a mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BlockParams {
    Beta { mu: f64, tau: f64 },
    Sarmanov { mu: [f64; 2], tau: [f64; 2], rho: f64 },
    UniformScale { theta: f64 },
    /// Mean and row-major covariance on the transformed scale.
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
    Categorical { probs: Vec<f64> },
    Poisson { rate: f64 },
}

impl BlockParams {
    pub fn gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let d = mean.len();
        BlockParams::Gaussian {
            mean: mean.iter().copied().collect(),
            cov: (0..d * d).map(|k| cov[(k / d, k % d)]).collect(),
        }
    }
}

/// Parameters of one mixture component, one entry per model block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentParams {
    pub blocks: Vec<BlockParams>,
}

/// Current value of a block's random base-measure hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperValue {
    None,
    Scalar(f64),
    Pair([f64; 2]),
    /// Row-major square matrix.
    Matrix(Vec<f64>),
}

impl HyperValue {
    fn scalar(&self) -> f64 {
        match self {
            HyperValue::Scalar(v) => *v,
            other => panic!("expected a scalar hyperparameter, found {other:?}"),
        }
    }

    fn pair(&self) -> [f64; 2] {
        match self {
            HyperValue::Pair(v) => *v,
            other => panic!("expected a paired hyperparameter, found {other:?}"),
        }
    }

    fn matrix(&self) -> DMatrix<f64> {
        match self {
            HyperValue::Matrix(v) => {
                let d = (v.len() as f64).sqrt().round() as usize;
                DMatrix::from_row_slice(d, d, v)
            }
            other => panic!("expected a matrix hyperparameter, found {other:?}"),
        }
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let d = m.nrows();
        HyperValue::Matrix((0..d * d).map(|k| m[(k / d, k % d)]).collect())
    }
}

/// Which variables are present in a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarMask {
    pub loc: Vec<bool>,
    pub marks: Vec<bool>,
}

impl VarMask {
    pub fn all(dims: usize, n_marks: usize) -> Self {
        Self { loc: vec![true; dims], marks: vec![true; n_marks] }
    }

    pub fn location(dims: usize, n_marks: usize) -> Self {
        Self { loc: vec![true; dims], marks: vec![false; n_marks] }
    }

    pub fn none(dims: usize, n_marks: usize) -> Self {
        Self { loc: vec![false; dims], marks: vec![false; n_marks] }
    }

    pub fn with(mut self, v: Var) -> Self {
        self.set(v, true);
        self
    }

    pub fn without(mut self, v: Var) -> Self {
        self.set(v, false);
        self
    }

    fn set(&mut self, v: Var, on: bool) {
        match v {
            Var::Loc(k) => self.loc[k] = on,
            Var::Mark(k) => self.marks[k] = on,
        }
    }

    pub fn has(&self, v: Var) -> bool {
        match v {
            Var::Loc(k) => self.loc.get(k).copied().unwrap_or(false),
            Var::Mark(k) => self.marks.get(k).copied().unwrap_or(false),
        }
    }
}

/// A query point; marks not involved in the query may be left out.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub loc: Vec<f64>,
    pub marks: Vec<Option<MarkValue>>,
}

impl Point {
    pub fn location(loc: Vec<f64>, n_marks: usize) -> Self {
        Self { loc, marks: vec![None; n_marks] }
    }

    pub fn with_mark(mut self, k: usize, v: MarkValue) -> Self {
        self.marks[k] = Some(v);
        self
    }

    fn raw(&self, v: Var) -> f64 {
        match v {
            Var::Loc(k) => self.loc[k],
            Var::Mark(k) => self.marks[k].expect("query point lacks a required mark").as_f64(),
        }
    }
}

impl From<&Event> for Point {
    fn from(e: &Event) -> Self {
        Self { loc: e.loc.clone(), marks: e.marks.iter().map(|m| Some(*m)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitDatum {
    pub t: f64,
    pub ln_t: f64,
    pub ln_1mt: f64,
}

impl UnitDatum {
    fn new(t: f64) -> Self {
        Self { t, ln_t: t.ln(), ln_1mt: (-t).ln_1p() }
    }
}

/// One block's view of an event, with the transcendental work done once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Datum {
    Unit(UnitDatum),
    Pair([UnitDatum; 2]),
    Vector { z: [f64; MAX_DIM], d: usize, ln_jac: f64 },
    Category(usize),
    Count { y: u64, ln_fact: f64 },
}

impl Datum {
    pub fn vector(&self) -> &[f64] {
        match self {
            Datum::Vector { z, d, .. } => &z[..*d],
            _ => panic!("not a vector datum"),
        }
    }
}

/// An event prepared for a model: one datum per block.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEvent {
    pub data: Vec<Datum>,
}

/// Variables a kernel part reads and how.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    Unit(usize),
    Pair,
    Vector(Vec<(Var, Transform)>),
    Category(usize),
    Count(usize),
}

impl Layout {
    fn extract(&self, p: &Point) -> Datum {
        match self {
            Layout::Unit(k) => Datum::Unit(UnitDatum::new(p.loc[*k])),
            Layout::Pair => Datum::Pair([UnitDatum::new(p.loc[0]), UnitDatum::new(p.loc[1])]),
            Layout::Vector(vs) => {
                let mut z = [0.0; MAX_DIM];
                let mut ln_jac = 0.0;
                for (k, (v, tr)) in vs.iter().enumerate() {
                    let (zk, jk) = tr.apply(p.raw(*v));
                    z[k] = zk;
                    ln_jac += jk;
                }
                Datum::Vector { z, d: vs.len(), ln_jac }
            }
            Layout::Category(j) => match p.marks[*j] {
                Some(MarkValue::Category(c)) => Datum::Category(c),
                other => panic!("expected a category for mark {j}, found {other:?}"),
            },
            Layout::Count(j) => match p.marks[*j] {
                Some(MarkValue::Count(y)) => Datum::Count { y, ln_fact: ln_gamma(y as f64 + 1.0) },
                other => panic!("expected a count for mark {j}, found {other:?}"),
            },
        }
    }
}

fn mul0(c: f64, l: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c * l
    }
}

#[derive(Debug, Clone)]
enum PartKernel {
    Beta { a: f64, b: f64, ln_norm: f64 },
    Sarmanov { a: [f64; 2], b: [f64; 2], ln_norm: [f64; 2], mu: [f64; 2], rho: f64 },
    Uniform { theta: f64, direction: Direction },
    Gaussian { mean: Vec<f64>, cov: DMatrix<f64>, chol: DMatrix<f64>, ln_det: f64 },
    Categorical { ln_probs: Vec<f64> },
    Poisson { rate: f64, ln_rate: f64, bound: u64, ln_tail: f64 },
}

/// A kernel block with parameters fixed and normalizers cached.
#[derive(Debug, Clone)]
pub struct Part {
    layout: Layout,
    kernel: PartKernel,
}

impl Part {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn ln_datum(&self, d: &Datum) -> f64 {
        match (&self.kernel, d) {
            (PartKernel::Beta { a, b, ln_norm }, Datum::Unit(u)) => {
                mul0(a - 1.0, u.ln_t) + mul0(b - 1.0, u.ln_1mt) - ln_norm
            }
            (PartKernel::Sarmanov { a, b, ln_norm, mu, rho }, Datum::Pair(u)) => {
                let mut s = 0.0;
                for k in 0..2 {
                    s += mul0(a[k] - 1.0, u[k].ln_t) + mul0(b[k] - 1.0, u[k].ln_1mt) - ln_norm[k];
                }
                let f = 1.0 + rho * (u[0].t - mu[0]) * (u[1].t - mu[1]);
                s + f.max(0.0).ln()
            }
            (PartKernel::Uniform { theta, direction }, Datum::Unit(u)) => {
                super::uniform_scale::ln_uniform_scale_pdf(u.t, *theta, *direction)
            }
            (PartKernel::Gaussian { mean, chol, ln_det, .. }, Datum::Vector { z, d, ln_jac }) => {
                let z = &z[..*d];
                if z.iter().any(|v| !v.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                ln_normal_chol(z, mean, chol, *ln_det) + ln_jac
            }
            (PartKernel::Categorical { ln_probs }, Datum::Category(c)) => {
                ln_probs.get(*c).copied().unwrap_or(f64::NEG_INFINITY)
            }
            (PartKernel::Poisson { ln_rate, rate, bound, ln_tail }, Datum::Count { y, ln_fact }) => {
                if y < bound {
                    f64::NEG_INFINITY
                } else {
                    *y as f64 * ln_rate - rate - ln_fact - ln_tail
                }
            }
            (k, d) => panic!("datum {d:?} does not fit kernel {k:?}"),
        }
    }

    pub fn ln_point(&self, p: &Point) -> f64 {
        self.ln_datum(&self.layout.extract(p))
    }

    /// Cumulative distribution of a one-dimensional location part.
    pub fn loc_cdf(&self, t: f64) -> Result<f64> {
        match (&self.kernel, &self.layout) {
            (PartKernel::Beta { a, b, .. }, Layout::Unit(_)) => Ok(beta_cdf(t, *a, *b)),
            (PartKernel::Uniform { theta, direction }, Layout::Unit(_)) => {
                Ok(uniform_scale_cdf(t, *theta, *direction))
            }
            (PartKernel::Gaussian { mean, cov, .. }, Layout::Vector(vs))
                if vs.len() == 1 && matches!(vs[0], (Var::Loc(_), Transform::Logit)) =>
            {
                Ok(super::gaussian::logit_normal_cdf(t, mean[0], cov[(0, 0)]))
            }
            _ => Err(Error::Contract("cumulative distribution needs a one-dimensional location part".into())),
        }
    }

    fn restrict(&self, mask: &VarMask) -> Result<Option<Part>> {
        let keep = |v| mask.has(v);
        Ok(match (&self.layout, &self.kernel) {
            (Layout::Unit(k), _) => keep(Var::Loc(*k)).then(|| self.clone()),
            (Layout::Pair, PartKernel::Sarmanov { a, b, ln_norm, .. }) => {
                match (keep(Var::Loc(0)), keep(Var::Loc(1))) {
                    (true, true) => Some(self.clone()),
                    (false, false) => None,
                    (k0, _) => {
                        let k = if k0 { 0 } else { 1 };
                        Some(Part {
                            layout: Layout::Unit(k),
                            kernel: PartKernel::Beta { a: a[k], b: b[k], ln_norm: ln_norm[k] },
                        })
                    }
                }
            }
            (Layout::Vector(vs), PartKernel::Gaussian { mean, cov, .. }) => {
                let idx: Vec<usize> = (0..vs.len()).filter(|&i| keep(vs[i].0)).collect();
                if idx.is_empty() {
                    None
                } else if idx.len() == vs.len() {
                    Some(self.clone())
                } else {
                    let sub_cov = DMatrix::from_fn(idx.len(), idx.len(), |i, j| cov[(idx[i], idx[j])]);
                    let chol = cholesky(&sub_cov)?;
                    Some(Part {
                        layout: Layout::Vector(idx.iter().map(|&i| vs[i]).collect()),
                        kernel: PartKernel::Gaussian {
                            mean: idx.iter().map(|&i| mean[i]).collect(),
                            ln_det: ln_det_from_chol(&chol),
                            cov: sub_cov,
                            chol,
                        },
                    })
                }
            }
            (Layout::Category(j), _) | (Layout::Count(j), _) => keep(Var::Mark(*j)).then(|| self.clone()),
            (l, k) => panic!("inconsistent part {l:?} / {k:?}"),
        })
    }
}

/// A mixture component with all block parts prepared.
#[derive(Debug, Clone)]
pub struct Atom {
    pub parts: Vec<Part>,
}

impl Atom {
    /// Log kernel at a prepared event; only valid for full (unrestricted)
    /// atoms, whose parts align with the model blocks.
    pub fn ln_event(&self, ev: &PreparedEvent) -> f64 {
        self.parts.iter().zip(&ev.data).map(|(p, d)| p.ln_datum(d)).sum()
    }

    pub fn ln_point(&self, p: &Point) -> f64 {
        self.parts.iter().map(|part| part.ln_point(p)).sum()
    }

    pub fn restrict(&self, mask: &VarMask) -> Result<Atom> {
        let mut parts = Vec::new();
        for p in &self.parts {
            if let Some(r) = p.restrict(mask)? {
                parts.push(r);
            }
        }
        Ok(Atom { parts })
    }
}

/// Per-component conditional law of one mark given other variables.
#[derive(Debug, Clone)]
pub enum CondPart {
    Categorical { probs: Vec<f64> },
    Poisson { rate: f64, bound: u64, ln_tail: f64 },
    Normal { given: Vec<(Var, Transform)>, coef: Vec<f64>, intercept: f64, var: f64, target: Transform },
}

impl CondPart {
    fn normal_moments(given: &[(Var, Transform)], coef: &[f64], intercept: f64, p: &Point) -> f64 {
        intercept
            + given
                .iter()
                .zip(coef)
                .map(|((v, tr), c)| c * tr.apply(p.raw(*v)).0)
                .sum::<f64>()
    }

    pub fn ln_pdf(&self, p: &Point, y: &MarkValue) -> f64 {
        match (self, y) {
            (CondPart::Categorical { probs }, MarkValue::Category(c)) => {
                probs.get(*c).map(|q| q.ln()).unwrap_or(f64::NEG_INFINITY)
            }
            (CondPart::Poisson { rate, bound, ln_tail }, MarkValue::Count(k)) => {
                if k < bound {
                    f64::NEG_INFINITY
                } else {
                    poisson_ln_pmf(*k, *rate) - ln_tail
                }
            }
            (CondPart::Normal { given, coef, intercept, var, target }, MarkValue::Real(v)) => {
                let m = Self::normal_moments(given, coef, *intercept, p);
                match target {
                    Transform::LogShift(o) if *v <= *o => f64::NEG_INFINITY,
                    tr => {
                        let (z, jac) = tr.apply(*v);
                        normal_ln_pdf(z, m, *var) + jac
                    }
                }
            }
            _ => f64::NEG_INFINITY,
        }
    }

    /// `Pr(Y <= y)`.
    pub fn cdf(&self, p: &Point, y: &MarkValue) -> f64 {
        match (self, y) {
            (CondPart::Categorical { probs }, MarkValue::Category(c)) => {
                probs.iter().take(c + 1).sum::<f64>().min(1.0)
            }
            (CondPart::Poisson { rate, bound, ln_tail }, MarkValue::Count(k)) => {
                if k < bound {
                    0.0
                } else {
                    (-(poisson_ln_upper_tail(k + 1, *rate) - ln_tail).exp()).max(-1.0) + 1.0
                }
            }
            (CondPart::Normal { given, coef, intercept, var, target }, MarkValue::Real(v)) => {
                let m = Self::normal_moments(given, coef, *intercept, p);
                match target {
                    Transform::LogShift(o) if *v <= *o => 0.0,
                    tr => normal_cdf((tr.apply(*v).0 - m) / var.sqrt()),
                }
            }
            _ => f64::NAN,
        }
    }

    /// `Pr(Y < y)`; equals [`CondPart::cdf`] for continuous marks.
    pub fn cdf_below(&self, p: &Point, y: &MarkValue) -> f64 {
        match y {
            MarkValue::Count(0) | MarkValue::Category(0) => 0.0,
            MarkValue::Count(k) => self.cdf(p, &MarkValue::Count(k - 1)),
            MarkValue::Category(c) => self.cdf(p, &MarkValue::Category(c - 1)),
            MarkValue::Real(_) => self.cdf(p, y),
        }
    }

    /// Conditional mean; for categorical marks the mean level index.
    pub fn mean(&self, p: &Point) -> f64 {
        match self {
            CondPart::Categorical { probs } => probs.iter().enumerate().map(|(c, q)| c as f64 * q).sum(),
            CondPart::Poisson { rate, bound, ln_tail } => {
                if *bound == 0 {
                    *rate
                } else {
                    rate * (poisson_ln_upper_tail(bound - 1, *rate) - ln_tail).exp()
                }
            }
            CondPart::Normal { given, coef, intercept, var, target } => {
                let m = Self::normal_moments(given, coef, *intercept, p);
                match target {
                    Transform::LogShift(o) => o + (m + 0.5 * var).exp(),
                    _ => m,
                }
            }
        }
    }
}

/// Sufficient statistics of a conjugate block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockStats {
    Gaussian(GaussianStats),
    Categorical(Vec<f64>),
    Poisson { n: f64, sum: f64 },
}

impl BlockStats {
    pub fn add(&mut self, d: &Datum) {
        match (self, d) {
            (BlockStats::Gaussian(s), Datum::Vector { z, d, .. }) => s.add(&z[..*d]),
            (BlockStats::Categorical(c), Datum::Category(k)) => c[*k] += 1.0,
            (BlockStats::Poisson { n, sum }, Datum::Count { y, .. }) => {
                *n += 1.0;
                *sum += *y as f64;
            }
            (s, d) => panic!("datum {d:?} does not fit statistics {s:?}"),
        }
    }

    pub fn remove(&mut self, d: &Datum) {
        match (self, d) {
            (BlockStats::Gaussian(s), Datum::Vector { z, d, .. }) => s.remove(&z[..*d]),
            (BlockStats::Categorical(c), Datum::Category(k)) => c[*k] -= 1.0,
            (BlockStats::Poisson { n, sum }, Datum::Count { y, .. }) => {
                *n -= 1.0;
                *sum -= *y as f64;
            }
            (s, d) => panic!("datum {d:?} does not fit statistics {s:?}"),
        }
    }
}

/// Posterior predictive law of one conjugate block.
#[derive(Debug, Clone)]
pub enum Predictive {
    Student(StudentT),
    Categorical(Vec<f64>),
    NegBinomial { shape: f64, rate: f64 },
}

impl Predictive {
    pub fn ln_datum(&self, d: &Datum) -> f64 {
        match (self, d) {
            (Predictive::Student(t), Datum::Vector { z, d, ln_jac }) => t.ln_pdf(&z[..*d]) + ln_jac,
            (Predictive::Categorical(lp), Datum::Category(c)) => lp[*c],
            (Predictive::NegBinomial { shape, rate }, Datum::Count { y, ln_fact }) => {
                let yf = *y as f64;
                ln_gamma(shape + yf) - ln_gamma(*shape) - ln_fact + shape * (rate / (rate + 1.0)).ln()
                    - yf * (rate + 1.0).ln()
            }
            (p, d) => panic!("datum {d:?} does not fit predictive {p:?}"),
        }
    }
}

/// Prior-integrated kernel `int k(z; theta) dG0(theta)` restricted to a set
/// of variables.
#[derive(Debug, Clone)]
pub struct PriorMarginal {
    parts: Vec<(Layout, PriorPart)>,
}

#[derive(Debug, Clone)]
enum PriorPart {
    Closed(Predictive),
    TruncPoisson { mark: usize, bound: u64, shape: f64, rate: f64 },
}

impl PriorMarginal {
    pub fn ln_point(&self, p: &Point) -> f64 {
        self.parts
            .iter()
            .map(|(layout, part)| match part {
                PriorPart::Closed(pred) => pred.ln_datum(&layout.extract(p)),
                PriorPart::TruncPoisson { mark, bound, shape, rate } => match p.marks[*mark] {
                    Some(MarkValue::Count(y)) => ln_gamma_poisson_marginal(y, *bound, *shape, *rate),
                    other => panic!("expected a count for mark {mark}, found {other:?}"),
                },
            })
            .sum()
    }
}

/// A validated product-kernel mixture model.
#[derive(Debug, Clone)]
pub struct Model {
    dims: usize,
    schema: MarkSchema,
    blocks: Vec<BlockSpec>,
    layouts: Vec<Layout>,
}

impl Model {
    /// Validate a block list against the window dimension and mark schema.
    /// Every problem found is reported, not just the first.
    pub fn new(dims: usize, schema: MarkSchema, blocks: Vec<BlockSpec>) -> Result<Self> {
        let mut errs = Vec::new();
        if dims == 0 || dims > 2 {
            errs.push(format!("location dimension must be 1 or 2, got {dims}"));
        }
        let mut loc_cover = vec![0usize; dims];
        let mut mark_cover = vec![0usize; schema.len()];
        let mut layouts = Vec::with_capacity(blocks.len());
        for (bi, block) in blocks.iter().enumerate() {
            let tag = format!("block {bi} ({})", block.family());
            for v in block.vars(dims) {
                match v {
                    Var::Loc(k) if k < dims => loc_cover[k] += 1,
                    Var::Mark(k) if k < schema.len() => mark_cover[k] += 1,
                    _ => errs.push(format!("{tag}: variable {v:?} does not exist")),
                }
            }
            let layout = match block {
                BlockSpec::Beta { dim, shape, scale } => {
                    if !(*shape > 0.0) {
                        errs.push(format!("{tag}: base shape must be positive"));
                    }
                    scale.validate(&format!("{tag} scale"), &mut errs);
                    Layout::Unit(*dim)
                }
                BlockSpec::Sarmanov { shape, scale } => {
                    if dims != 2 {
                        errs.push(format!("{tag}: needs a two-dimensional window"));
                    }
                    for k in 0..2 {
                        if !(shape[k] > 0.0) {
                            errs.push(format!("{tag}: base shape {k} must be positive"));
                        }
                        scale[k].validate(&format!("{tag} scale {k}"), &mut errs);
                    }
                    Layout::Pair
                }
                BlockSpec::UniformScale { dim, a, b, .. } => {
                    if !(*a > 0.0 && *b > 0.0) {
                        errs.push(format!("{tag}: beta base parameters must be positive"));
                    }
                    Layout::Unit(*dim)
                }
                BlockSpec::Gaussian { vars, mean, kappa, nu, omega } => {
                    let d = vars.len();
                    if d == 0 || d > MAX_DIM {
                        errs.push(format!("{tag}: dimension must be between 1 and {MAX_DIM}"));
                    }
                    if mean.len() != d {
                        errs.push(format!("{tag}: mean has length {}, expected {d}", mean.len()));
                    }
                    if !(*kappa > 0.0) {
                        errs.push(format!("{tag}: kappa must be positive"));
                    }
                    if !(2.0 * nu > d as f64 - 1.0) {
                        errs.push(format!("{tag}: Wishart degrees of freedom too small for dimension {d}"));
                    }
                    match (&omega.value, &omega.prior) {
                        (None, None) => errs.push(format!("{tag}: omega needs a value or a prior")),
                        _ => {}
                    }
                    if let Some(v) = &omega.value {
                        match to_matrix(v) {
                            Some(m) if m.nrows() == d && is_spd(&m) => {}
                            _ => errs.push(format!("{tag}: omega must be a symmetric positive definite {d}x{d} matrix")),
                        }
                    }
                    if let Some(p) = &omega.prior {
                        if !(2.0 * p.df > d as f64 - 1.0) {
                            errs.push(format!("{tag}: omega hyperprior degrees of freedom too small"));
                        }
                        match to_matrix(&p.scale) {
                            Some(m) if m.nrows() == d && is_spd(&m) => {}
                            _ => errs.push(format!(
                                "{tag}: omega hyperprior scale must be a symmetric positive definite {d}x{d} matrix"
                            )),
                        }
                    }
                    let mut tvars = Vec::with_capacity(d);
                    for v in vars {
                        let tr = match *v {
                            Var::Loc(_) => Transform::Logit,
                            Var::Mark(k) => match schema.marks.get(k).map(|m| &m.kind) {
                                Some(MarkKind::Continuous(Support::Real)) => Transform::Identity,
                                Some(MarkKind::Continuous(Support::Positive)) => Transform::LogShift(0.0),
                                Some(MarkKind::Continuous(Support::ShiftedPositive { offset })) => {
                                    Transform::LogShift(*offset)
                                }
                                _ => {
                                    errs.push(format!("{tag}: mark {k} is not continuous"));
                                    Transform::Identity
                                }
                            },
                        };
                        tvars.push((*v, tr));
                    }
                    Layout::Vector(tvars)
                }
                BlockSpec::Categorical { mark, conc } => {
                    match schema.marks.get(*mark).map(|m| &m.kind) {
                        Some(MarkKind::Categorical { levels }) if *levels == conc.len() => {}
                        _ => errs.push(format!(
                            "{tag}: mark {mark} must be categorical with {} levels",
                            conc.len()
                        )),
                    }
                    if conc.iter().any(|a| !(*a > 0.0)) {
                        errs.push(format!("{tag}: Dirichlet concentrations must be positive"));
                    }
                    Layout::Category(*mark)
                }
                BlockSpec::Poisson { mark, shape, rate } => {
                    if !matches!(schema.marks.get(*mark).map(|m| &m.kind), Some(MarkKind::Count { .. })) {
                        errs.push(format!("{tag}: mark {mark} is not a count"));
                    }
                    if !(*shape > 0.0) {
                        errs.push(format!("{tag}: gamma base shape must be positive"));
                    }
                    rate.validate(&format!("{tag} rate"), &mut errs);
                    Layout::Count(*mark)
                }
            };
            layouts.push(layout);
        }
        for (k, c) in loc_cover.iter().enumerate() {
            if *c != 1 {
                errs.push(format!("location coordinate {k} is covered by {c} blocks, expected 1"));
            }
        }
        for (k, c) in mark_cover.iter().enumerate() {
            if *c > 1 {
                errs.push(format!("mark {k} is covered by {c} blocks"));
            }
        }
        if errs.is_empty() {
            Ok(Self { dims, schema, blocks, layouts })
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn schema(&self) -> &MarkSchema {
        &self.schema
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn n_marks(&self) -> usize {
        self.schema.len()
    }

    pub fn full_mask(&self) -> VarMask {
        VarMask::all(self.dims, self.n_marks())
    }

    pub fn location_mask(&self) -> VarMask {
        VarMask::location(self.dims, self.n_marks())
    }

    fn bound(&self, mark: usize) -> u64 {
        match self.schema.marks[mark].kind {
            MarkKind::Count { lower } => lower,
            _ => 0,
        }
    }

    pub fn is_conjugate_block(&self, b: usize) -> bool {
        match &self.blocks[b] {
            BlockSpec::Gaussian { .. } | BlockSpec::Categorical { .. } => true,
            BlockSpec::Poisson { mark, .. } => self.bound(*mark) == 0,
            _ => false,
        }
    }

    /// Whether every block admits collapsed sampling.
    pub fn is_conjugate(&self) -> bool {
        (0..self.blocks.len()).all(|b| self.is_conjugate_block(b))
    }

    pub fn initial_hyper(&self) -> Vec<HyperValue> {
        self.blocks
            .iter()
            .map(|b| match b {
                BlockSpec::Beta { scale, .. } => HyperValue::Scalar(scale.initial()),
                BlockSpec::Sarmanov { scale, .. } => HyperValue::Pair([scale[0].initial(), scale[1].initial()]),
                BlockSpec::Gaussian { omega, .. } => {
                    let m = match (&omega.value, &omega.prior) {
                        (Some(v), _) => to_matrix(v).expect("validated"),
                        (None, Some(p)) => {
                            let s = to_matrix(&p.scale).expect("validated");
                            s.try_inverse().expect("validated") * p.df
                        }
                        (None, None) => unreachable!("validated"),
                    };
                    HyperValue::from_matrix(&m)
                }
                BlockSpec::Poisson { rate, .. } => HyperValue::Scalar(rate.initial()),
                BlockSpec::UniformScale { .. } | BlockSpec::Categorical { .. } => HyperValue::None,
            })
            .collect()
    }

    pub fn prepare_event(&self, e: &Event) -> PreparedEvent {
        let p = Point::from(e);
        PreparedEvent { data: self.layouts.iter().map(|l| l.extract(&p)).collect() }
    }

    /// Block `b`'s datum at a query point; the point must carry every
    /// variable of the block.
    pub fn prepare_point(&self, b: usize, p: &Point) -> Datum {
        self.layouts[b].extract(p)
    }

    /// Index of the block modelling variable `v`.
    pub fn block_of(&self, v: Var) -> Option<usize> {
        self.blocks.iter().position(|blk| blk.vars(self.dims).contains(&v))
    }

    pub fn prepare_part(&self, b: usize, params: &BlockParams) -> Result<Part> {
        let layout = self.layouts[b].clone();
        let kernel = match (&self.blocks[b], params) {
            (BlockSpec::Beta { .. }, BlockParams::Beta { mu, tau }) => {
                check_mean_precision(*mu, *tau)?;
                let (a, b) = beta_shapes(*mu, *tau);
                PartKernel::Beta { a, b, ln_norm: ln_beta(a, b) }
            }
            (BlockSpec::Sarmanov { .. }, BlockParams::Sarmanov { mu, tau, rho }) => {
                sarmanov::check(&SarmanovParams { mu: *mu, tau: *tau, rho: *rho })?;
                let (a0, b0) = beta_shapes(mu[0], tau[0]);
                let (a1, b1) = beta_shapes(mu[1], tau[1]);
                PartKernel::Sarmanov {
                    a: [a0, a1],
                    b: [b0, b1],
                    ln_norm: [ln_beta(a0, b0), ln_beta(a1, b1)],
                    mu: *mu,
                    rho: *rho,
                }
            }
            (BlockSpec::UniformScale { direction, .. }, BlockParams::UniformScale { theta }) => {
                if !(*theta > 0.0 && *theta <= 1.0) {
                    return Err(Error::Param(format!("uniform scale {theta} outside (0,1]")));
                }
                PartKernel::Uniform { theta: *theta, direction: *direction }
            }
            (BlockSpec::Gaussian { vars, .. }, BlockParams::Gaussian { mean, cov }) => {
                let d = vars.len();
                if mean.len() != d || cov.len() != d * d {
                    return Err(Error::Param("gaussian parameter dimension mismatch".into()));
                }
                let cov = DMatrix::from_row_slice(d, d, cov);
                let chol = cholesky(&cov)?;
                PartKernel::Gaussian { mean: mean.clone(), ln_det: ln_det_from_chol(&chol), cov, chol }
            }
            (BlockSpec::Categorical { conc, .. }, BlockParams::Categorical { probs }) => {
                if probs.len() != conc.len() || probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::Param("category probabilities invalid".into()));
                }
                PartKernel::Categorical { ln_probs: probs.iter().map(|p| p.ln()).collect() }
            }
            (BlockSpec::Poisson { mark, .. }, BlockParams::Poisson { rate }) => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(Error::Param(format!("Poisson rate {rate} must be positive")));
                }
                let bound = self.bound(*mark);
                PartKernel::Poisson {
                    rate: *rate,
                    ln_rate: rate.ln(),
                    bound,
                    ln_tail: poisson_ln_upper_tail(bound, *rate),
                }
            }
            (spec, p) => {
                return Err(Error::Param(format!("parameters {p:?} do not fit block {}", spec.family())))
            }
        };
        Ok(Part { layout, kernel })
    }

    pub fn atom(&self, params: &ComponentParams) -> Result<Atom> {
        if params.blocks.len() != self.blocks.len() {
            return Err(Error::Param(format!(
                "component has {} blocks, model has {}",
                params.blocks.len(),
                self.blocks.len()
            )));
        }
        let parts = params
            .blocks
            .iter()
            .enumerate()
            .map(|(b, p)| self.prepare_part(b, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Atom { parts })
    }

    /// Kernel density of one component at a point.
    pub fn ln_kernel(&self, params: &ComponentParams, p: &Point) -> Result<f64> {
        Ok(self.atom(params)?.ln_point(p))
    }

    /// Conditional law of mark `target` given the variables in `given`
    /// under one component.
    pub fn conditional(&self, params: &ComponentParams, target: usize, given: &VarMask) -> Result<CondPart> {
        let tv = Var::Mark(target);
        let b = self
            .blocks
            .iter()
            .position(|blk| blk.vars(self.dims).contains(&tv))
            .ok_or_else(|| Error::Contract(format!("mark {target} is not modelled")))?;
        match (&self.blocks[b], &params.blocks[b], &self.layouts[b]) {
            (BlockSpec::Categorical { .. }, BlockParams::Categorical { probs }, _) => {
                Ok(CondPart::Categorical { probs: probs.clone() })
            }
            (BlockSpec::Poisson { mark, .. }, BlockParams::Poisson { rate }, _) => {
                let bound = self.bound(*mark);
                Ok(CondPart::Poisson { rate: *rate, bound, ln_tail: poisson_ln_upper_tail(bound, *rate) })
            }
            (BlockSpec::Gaussian { .. }, BlockParams::Gaussian { mean, cov }, Layout::Vector(vs)) => {
                let d = vs.len();
                let cov = DMatrix::from_row_slice(d, d, cov);
                let ti = vs.iter().position(|(v, _)| *v == tv).expect("target in block");
                let gi: Vec<usize> = (0..d).filter(|&i| i != ti && given.has(vs[i].0)).collect();
                let (coef, var) = if gi.is_empty() {
                    (Vec::new(), cov[(ti, ti)])
                } else {
                    let sgg = DMatrix::from_fn(gi.len(), gi.len(), |i, j| cov[(gi[i], gi[j])]);
                    let sgt = DVector::from_fn(gi.len(), |i, _| cov[(gi[i], ti)]);
                    let chol = sgg
                        .cholesky()
                        .ok_or_else(|| Error::Linalg("conditioning covariance is singular".into()))?;
                    let coef = chol.solve(&sgt);
                    let var = cov[(ti, ti)] - sgt.dot(&coef);
                    (coef.iter().copied().collect(), var)
                };
                let intercept = mean[ti] - gi.iter().zip(&coef).map(|(&i, c)| c * mean[i]).sum::<f64>();
                Ok(CondPart::Normal {
                    given: gi.iter().map(|&i| vs[i]).collect(),
                    coef,
                    intercept,
                    var,
                    target: vs[ti].1,
                })
            }
            _ => Err(Error::Contract("mark block has no conditional form".into())),
        }
    }

    fn niw(&self, b: usize, hyper: &HyperValue) -> NormalInvWishart {
        match &self.blocks[b] {
            BlockSpec::Gaussian { mean, kappa, nu, .. } => NormalInvWishart::from_precision_form(
                DVector::from_column_slice(mean),
                *kappa,
                *nu,
                &hyper.matrix(),
            ),
            _ => unreachable!("not a gaussian block"),
        }
    }

    pub fn empty_stats(&self, b: usize) -> Result<BlockStats> {
        match &self.blocks[b] {
            BlockSpec::Gaussian { vars, .. } => Ok(BlockStats::Gaussian(GaussianStats::new(vars.len()))),
            BlockSpec::Categorical { conc, .. } => Ok(BlockStats::Categorical(vec![0.0; conc.len()])),
            BlockSpec::Poisson { .. } if self.is_conjugate_block(b) => Ok(BlockStats::Poisson { n: 0.0, sum: 0.0 }),
            other => Err(Error::Contract(format!(
                "{} block has no conjugate update; use the Metropolis path",
                other.family()
            ))),
        }
    }

    /// Block statistics of a set of prepared events.
    pub fn block_stats<'a>(&self, b: usize, data: impl IntoIterator<Item = &'a PreparedEvent>) -> Result<BlockStats> {
        let mut s = self.empty_stats(b)?;
        for ev in data {
            s.add(&ev.data[b]);
        }
        Ok(s)
    }

    /// Posterior predictive of a conjugate block given member statistics.
    pub fn predictive(&self, b: usize, hyper: &HyperValue, stats: &BlockStats) -> Result<Predictive> {
        match (&self.blocks[b], stats) {
            (BlockSpec::Gaussian { .. }, BlockStats::Gaussian(s)) => {
                Ok(Predictive::Student(self.niw(b, hyper).posterior(s).predictive()?))
            }
            (BlockSpec::Categorical { conc, .. }, BlockStats::Categorical(c)) => {
                let total: f64 = conc.iter().sum::<f64>() + c.iter().sum::<f64>();
                Ok(Predictive::Categorical(conc.iter().zip(c).map(|(a, n)| ((a + n) / total).ln()).collect()))
            }
            (BlockSpec::Poisson { shape, .. }, BlockStats::Poisson { n, sum }) => {
                Ok(Predictive::NegBinomial { shape: shape + sum, rate: hyper.scalar() + n })
            }
            (spec, _) => Err(Error::Contract(format!("{} block has no conjugate predictive", spec.family()))),
        }
    }

    /// Exact draw from the posterior of a conjugate block given member
    /// statistics; with empty statistics this is a base-measure draw.
    pub fn conjugate_posterior_draw(
        &self,
        b: usize,
        hyper: &HyperValue,
        stats: &BlockStats,
        rng: &mut Rng,
    ) -> Result<BlockParams> {
        if !self.is_conjugate_block(b) {
            return Err(Error::Contract(format!(
                "{} block has no conjugate posterior; use the Metropolis path",
                self.blocks[b].family()
            )));
        }
        match (&self.blocks[b], stats) {
            (BlockSpec::Gaussian { .. }, BlockStats::Gaussian(s)) => {
                let (mu, cov) = self.niw(b, hyper).posterior(s).sample(rng)?;
                Ok(BlockParams::gaussian(&mu, &cov))
            }
            (BlockSpec::Categorical { conc, .. }, BlockStats::Categorical(c)) => {
                let post: Vec<f64> = conc.iter().zip(c).map(|(a, n)| a + n).collect();
                Ok(BlockParams::Categorical { probs: sample_dirichlet(rng, &post) })
            }
            (BlockSpec::Poisson { shape, .. }, BlockStats::Poisson { n, sum }) => {
                Ok(BlockParams::Poisson { rate: sample_gamma(rng, shape + sum, hyper.scalar() + n) })
            }
            (spec, _) => Err(Error::Contract(format!(
                "{} block has no conjugate posterior; use the Metropolis path",
                spec.family()
            ))),
        }
    }

    /// Log of the prior-integrated kernel `int k(z; theta) dG0(theta)`.
    /// Truncated Poisson blocks are integrated numerically; the remaining
    /// non-conjugate families are a contract error.
    pub fn ln_marginal(&self, hyper: &[HyperValue], ev: &PreparedEvent) -> Result<f64> {
        let mut total = 0.0;
        for b in 0..self.blocks.len() {
            total += match (&self.blocks[b], &ev.data[b]) {
                (BlockSpec::Poisson { shape, mark, .. }, Datum::Count { y, .. }) if !self.is_conjugate_block(b) => {
                    ln_gamma_poisson_marginal(*y, self.bound(*mark), *shape, hyper[b].scalar())
                }
                _ => {
                    let s = self.empty_stats(b)?;
                    self.predictive(b, &hyper[b], &s)?.ln_datum(&ev.data[b])
                }
            };
        }
        Ok(total)
    }

    /// Closed-form prior-integrated kernel of the variables in `mask`, or
    /// `None` when a block touching the mask has no closed form.
    pub fn prior_marginal(&self, hyper: &[HyperValue], mask: &VarMask) -> Result<Option<PriorMarginal>> {
        let mut parts = Vec::new();
        for (b, spec) in self.blocks.iter().enumerate() {
            let vars = spec.vars(self.dims);
            if !vars.iter().any(|v| mask.has(*v)) {
                continue;
            }
            match (spec, &self.layouts[b]) {
                (BlockSpec::Gaussian { .. }, Layout::Vector(vs)) => {
                    let idx: Vec<usize> = (0..vs.len()).filter(|&i| mask.has(vs[i].0)).collect();
                    let pred = self.niw(b, &hyper[b]).marginal(&idx).predictive()?;
                    let layout = Layout::Vector(idx.iter().map(|&i| vs[i]).collect());
                    parts.push((layout, PriorPart::Closed(Predictive::Student(pred))));
                }
                (BlockSpec::Poisson { mark, shape, .. }, layout) if !self.is_conjugate_block(b) => {
                    parts.push((
                        layout.clone(),
                        PriorPart::TruncPoisson { mark: *mark, bound: self.bound(*mark), shape: *shape, rate: hyper[b].scalar() },
                    ));
                }
                (BlockSpec::Categorical { .. } | BlockSpec::Poisson { .. }, layout) => {
                    let pred = self.predictive(b, &hyper[b], &self.empty_stats(b)?)?;
                    parts.push((layout.clone(), PriorPart::Closed(pred)));
                }
                _ => return Ok(None),
            }
        }
        Ok(Some(PriorMarginal { parts }))
    }

    pub fn marginal_likelihood(&self, hyper: &[HyperValue], e: &Event) -> Result<f64> {
        self.ln_marginal(hyper, &self.prepare_event(e)).map(f64::exp)
    }

    fn sample_unit_open(rng: &mut Rng) -> f64 {
        loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    fn sample_precision(rng: &mut Rng, shape: f64, scale: f64) -> f64 {
        loop {
            let tau = 1.0 / sample_gamma(rng, shape, scale);
            if tau.is_finite() {
                return tau;
            }
        }
    }

    /// Draw one block's parameters from the base measure.
    pub fn sample_block_prior(&self, b: usize, hyper: &HyperValue, rng: &mut Rng) -> Result<BlockParams> {
        Ok(match &self.blocks[b] {
            BlockSpec::Beta { shape, .. } => BlockParams::Beta {
                mu: Self::sample_unit_open(rng),
                tau: Self::sample_precision(rng, *shape, hyper.scalar()),
            },
            BlockSpec::Sarmanov { shape, .. } => {
                let beta = hyper.pair();
                let mu = [Self::sample_unit_open(rng), Self::sample_unit_open(rng)];
                let tau = [
                    Self::sample_precision(rng, shape[0], beta[0]),
                    Self::sample_precision(rng, shape[1], beta[1]),
                ];
                let (lo, hi) = rho_bounds(mu[0], mu[1])?;
                BlockParams::Sarmanov { mu, tau, rho: lo + rng.random::<f64>() * (hi - lo) }
            }
            BlockSpec::UniformScale { a, b, .. } => {
                let mut theta = sample_beta(rng, *a, *b);
                while !(theta > 0.0) {
                    theta = sample_beta(rng, *a, *b);
                }
                BlockParams::UniformScale { theta }
            }
            BlockSpec::Gaussian { .. } | BlockSpec::Categorical { .. } => {
                self.conjugate_posterior_draw(b, hyper, &self.empty_stats(b)?, rng)?
            }
            BlockSpec::Poisson { shape, .. } => BlockParams::Poisson { rate: sample_gamma(rng, *shape, hyper.scalar()) },
        })
    }

    pub fn sample_prior(&self, hyper: &[HyperValue], rng: &mut Rng) -> Result<ComponentParams> {
        let blocks = (0..self.blocks.len())
            .map(|b| self.sample_block_prior(b, &hyper[b], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ComponentParams { blocks })
    }

    /// Unconstrained coordinates used by the random-walk Metropolis update.
    pub fn free_coords(&self, params: &BlockParams) -> Vec<f64> {
        match params {
            BlockParams::Beta { mu, tau } => vec![logit(*mu), tau.ln()],
            BlockParams::Sarmanov { mu, tau, rho } => {
                let (lo, hi) = rho_bounds(mu[0], mu[1]).expect("valid margins");
                let v = ((rho - lo) / (hi - lo)).clamp(1e-300, 1.0 - 1e-16);
                vec![logit(mu[0]), logit(mu[1]), tau[0].ln(), tau[1].ln(), logit(v)]
            }
            BlockParams::UniformScale { theta } => vec![logit(theta.min(1.0 - 1e-16))],
            BlockParams::Poisson { rate } => vec![rate.ln()],
            other => panic!("no free coordinates for {other:?}"),
        }
    }

    pub fn from_free(&self, b: usize, x: &[f64]) -> BlockParams {
        match &self.blocks[b] {
            BlockSpec::Beta { .. } => BlockParams::Beta { mu: expit(x[0]), tau: x[1].exp() },
            BlockSpec::Sarmanov { .. } => {
                let mu = [expit(x[0]), expit(x[1])];
                let rho = match rho_bounds(mu[0], mu[1]) {
                    Ok((lo, hi)) => lo + expit(x[4]) * (hi - lo),
                    Err(_) => f64::NAN,
                };
                BlockParams::Sarmanov { mu, tau: [x[2].exp(), x[3].exp()], rho }
            }
            BlockSpec::UniformScale { .. } => BlockParams::UniformScale { theta: expit(x[0]) },
            BlockSpec::Poisson { .. } => BlockParams::Poisson { rate: x[0].exp() },
            other => panic!("{} block is updated by conjugate draws", other.family()),
        }
    }

    /// Log base-measure density of a block in its free coordinates
    /// (Jacobian included).
    pub fn ln_prior_free(&self, b: usize, hyper: &HyperValue, params: &BlockParams) -> f64 {
        fn mean_precision(mu: f64, tau: f64, c: f64, beta: f64) -> f64 {
            if !(mu > 0.0 && mu < 1.0 && tau > 0.0 && tau.is_finite()) {
                return f64::NEG_INFINITY;
            }
            mu.ln() + (-mu).ln_1p() + c * beta.ln() - ln_gamma(c) - c * tau.ln() - beta / tau
        }
        match (&self.blocks[b], params) {
            (BlockSpec::Beta { shape, .. }, BlockParams::Beta { mu, tau }) => {
                mean_precision(*mu, *tau, *shape, hyper.scalar())
            }
            (BlockSpec::Sarmanov { shape, .. }, BlockParams::Sarmanov { mu, tau, rho }) => {
                let beta = hyper.pair();
                let Ok((lo, hi)) = rho_bounds(mu[0], mu[1]) else {
                    return f64::NEG_INFINITY;
                };
                let v = (rho - lo) / (hi - lo);
                if !(v > 0.0 && v < 1.0) {
                    return f64::NEG_INFINITY;
                }
                mean_precision(mu[0], tau[0], shape[0], beta[0])
                    + mean_precision(mu[1], tau[1], shape[1], beta[1])
                    + v.ln()
                    + (-v).ln_1p()
            }
            (BlockSpec::UniformScale { a, b, .. }, BlockParams::UniformScale { theta }) => {
                if !(*theta > 0.0 && *theta < 1.0) {
                    return f64::NEG_INFINITY;
                }
                a * theta.ln() + b * (-theta).ln_1p() - ln_beta(*a, *b)
            }
            (BlockSpec::Poisson { shape, .. }, BlockParams::Poisson { rate }) => {
                let r = hyper.scalar();
                if !(*rate > 0.0 && rate.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                shape * r.ln() - ln_gamma(*shape) + shape * rate.ln() - r * rate
            }
            (spec, p) => panic!("{p:?} has no free-coordinate prior under {}", spec.family()),
        }
    }

    /// Draw the block's random hyperparameters given the current component
    /// parameters. Blocks without a hyperprior return the value unchanged.
    pub fn sample_hyper(
        &self,
        b: usize,
        current: &HyperValue,
        params: &[&BlockParams],
        rng: &mut Rng,
    ) -> Result<HyperValue> {
        let m = params.len() as f64;
        Ok(match &self.blocks[b] {
            BlockSpec::Beta { shape, scale: RandomScale { prior: Some(p), .. }, .. } => {
                let inv: f64 = params
                    .iter()
                    .map(|bp| match bp {
                        BlockParams::Beta { tau, .. } => 1.0 / tau,
                        _ => unreachable!(),
                    })
                    .sum();
                HyperValue::Scalar(sample_gamma(rng, p.shape + m * shape, p.rate + inv))
            }
            BlockSpec::Sarmanov { shape, scale } => {
                let mut out = current.pair();
                for k in 0..2 {
                    if let Some(p) = scale[k].prior {
                        let inv: f64 = params
                            .iter()
                            .map(|bp| match bp {
                                BlockParams::Sarmanov { tau, .. } => 1.0 / tau[k],
                                _ => unreachable!(),
                            })
                            .sum();
                        out[k] = sample_gamma(rng, p.shape + m * shape[k], p.rate + inv);
                    }
                }
                HyperValue::Pair(out)
            }
            BlockSpec::Gaussian { nu, omega: RandomMatrix { prior: Some(p), .. }, .. } => {
                let mut scale = to_matrix(&p.scale).expect("validated");
                for bp in params {
                    if let BlockParams::Gaussian { cov, .. } = bp {
                        let d = scale.nrows();
                        let prec = DMatrix::from_row_slice(d, d, cov)
                            .try_inverse()
                            .ok_or_else(|| Error::Linalg("component covariance is singular".into()))?;
                        scale += (&prec + prec.transpose()) * 0.5;
                    }
                }
                // precision form W(df, S) is the standard Wishart with
                // 2 df degrees of freedom and scale (2 S)^{-1}
                let df = p.df + m * nu;
                let std_scale = (scale * 2.0)
                    .try_inverse()
                    .ok_or_else(|| Error::Linalg("Wishart scale is singular".into()))?;
                let std_scale = (&std_scale + std_scale.transpose()) * 0.5;
                let w = sample_wishart(rng, 2.0 * df, &cholesky(&std_scale)?);
                HyperValue::from_matrix(&((&w + w.transpose()) * 0.5))
            }
            BlockSpec::Poisson { shape, rate: RandomScale { prior: Some(p), .. }, .. } => {
                let sum: f64 = params
                    .iter()
                    .map(|bp| match bp {
                        BlockParams::Poisson { rate } => *rate,
                        _ => unreachable!(),
                    })
                    .sum();
                HyperValue::Scalar(sample_gamma(rng, p.shape + m * shape, p.rate + sum))
            }
            _ => current.clone(),
        })
    }

    /// Draw one event from a single component (location in the unit window).
    pub fn sample_component(&self, params: &ComponentParams, rng: &mut Rng) -> Result<Event> {
        let mut loc = vec![f64::NAN; self.dims];
        let mut marks: Vec<MarkValue> = self
            .schema
            .marks
            .iter()
            .map(|m| match m.kind {
                MarkKind::Categorical { .. } => MarkValue::Category(0),
                MarkKind::Count { lower } => MarkValue::Count(lower),
                MarkKind::Continuous(_) => MarkValue::Real(f64::NAN),
            })
            .collect();
        for (b, bp) in params.blocks.iter().enumerate() {
            match (&self.blocks[b], bp) {
                (BlockSpec::Beta { dim, .. }, BlockParams::Beta { mu, tau }) => {
                    let (a, bb) = beta_shapes(*mu, *tau);
                    loc[*dim] = sample_open_beta(rng, a, bb);
                }
                (BlockSpec::Sarmanov { .. }, BlockParams::Sarmanov { mu, tau, rho }) => {
                    let (a0, b0) = beta_shapes(mu[0], tau[0]);
                    let (a1, b1) = beta_shapes(mu[1], tau[1]);
                    let factor = |x: f64, y: f64| 1.0 + rho * (x - mu[0]) * (y - mu[1]);
                    let envelope = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
                        .iter()
                        .map(|&(x, y)| factor(x, y))
                        .fold(0.0, f64::max);
                    loop {
                        let x = sample_open_beta(rng, a0, b0);
                        let y = sample_open_beta(rng, a1, b1);
                        if rng.random::<f64>() * envelope < factor(x, y) {
                            loc[0] = x;
                            loc[1] = y;
                            break;
                        }
                    }
                }
                (BlockSpec::UniformScale { dim, direction, .. }, BlockParams::UniformScale { theta }) => {
                    let s = theta * Self::sample_unit_open(rng);
                    loc[*dim] = match direction {
                        Direction::Nonincreasing => s,
                        Direction::Nondecreasing => 1.0 - s,
                    };
                }
                (BlockSpec::Gaussian { .. }, BlockParams::Gaussian { mean, cov }) => {
                    let Layout::Vector(vs) = &self.layouts[b] else { unreachable!() };
                    let d = vs.len();
                    let chol = cholesky(&DMatrix::from_row_slice(d, d, cov))?;
                    let z = sample_mvn(rng, &DVector::from_column_slice(mean), &chol);
                    for (k, (v, tr)) in vs.iter().enumerate() {
                        let raw = match tr {
                            Transform::Logit => expit(z[k]),
                            Transform::Identity => z[k],
                            Transform::LogShift(o) => o + z[k].exp(),
                        };
                        match v {
                            Var::Loc(j) => loc[*j] = raw,
                            Var::Mark(j) => marks[*j] = MarkValue::Real(raw),
                        }
                    }
                }
                (BlockSpec::Categorical { mark, .. }, BlockParams::Categorical { probs }) => {
                    let lp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
                    marks[*mark] = MarkValue::Category(sample_log_categorical(rng, &lp));
                }
                (BlockSpec::Poisson { mark, .. }, BlockParams::Poisson { rate }) => {
                    marks[*mark] = MarkValue::Count(sample_trunc_poisson(rng, *rate, self.bound(*mark)));
                }
                (spec, p) => {
                    return Err(Error::Param(format!("parameters {p:?} do not fit block {}", spec.family())))
                }
            }
        }
        Ok(Event { loc, marks })
    }
}

/// Beta variate strictly inside the unit interval.
fn sample_open_beta(rng: &mut Rng, a: f64, b: f64) -> f64 {
    loop {
        let x = sample_beta(rng, a, b);
        if x > 0.0 && x < 1.0 {
            return x;
        }
    }
}

/// Poisson variate conditioned on `y >= bound`: rejection when the bound
/// is rarely binding, inversion upward from the bound otherwise.
pub fn sample_trunc_poisson(rng: &mut Rng, rate: f64, bound: u64) -> u64 {
    let ln_tail = poisson_ln_upper_tail(bound, rate);
    if ln_tail > -std::f64::consts::LN_2 {
        let po = rand_distr::Poisson::new(rate).expect("positive finite rate");
        loop {
            let y: f64 = rand_distr::Distribution::sample(&po, rng);
            if y >= bound as f64 {
                return y as u64;
            }
        }
    }
    let u: f64 = rng.random();
    let mut y = bound;
    let mut pmf = (poisson_ln_pmf(bound, rate) - ln_tail).exp();
    let mut cum = pmf;
    while cum < u && pmf > 0.0 {
        y += 1;
        pmf *= rate / y as f64;
        cum += pmf;
    }
    y
}
