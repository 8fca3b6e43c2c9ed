//! Posterior functionals: the integrated intensity, intensity and density
//! curves, Pólya-urn predictive densities and conditional mark laws.
//!
//! Nonlinear functionals (conditional densities, distribution functions and
//! means) are evaluated only through `G_L` draws; the Pólya-urn path is
//! offered for the predictive density alone, which is linear in `G`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{MarkKind, MarkValue};
use crate::kernels::{Atom, CondPart, Model, Point, Var, VarMask};
use crate::measure::{draw_gl, FiniteMixture};
use crate::sampler::ChainState;
use crate::stats::{log_sum_exp, quantile_sorted, sample_gamma};
use crate::{Error, Result, Rng};

/// Prior on the integrated intensity `Lambda_R`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPrior {
    /// `pi(Lambda) ~ 1/Lambda`.
    #[default]
    Reference,
    Gamma { shape: f64, rate: f64 },
}

/// Gamma posterior of `Lambda_R` given the event count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityPosterior {
    pub shape: f64,
    pub rate: f64,
    pub prior: LambdaPrior,
}

impl IntensityPosterior {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        sample_gamma(rng, self.shape, self.rate)
    }
}

pub fn lambda_posterior(n: usize, prior: LambdaPrior) -> Result<IntensityPosterior> {
    match prior {
        LambdaPrior::Reference if n == 0 => {
            Err(Error::ImproperPosterior("the reference prior needs at least one event".into()))
        }
        LambdaPrior::Reference => Ok(IntensityPosterior { shape: n as f64, rate: 1.0, prior }),
        LambdaPrior::Gamma { shape, rate } => {
            if !(shape > 0.0 && rate > 0.0) {
                return Err(Error::Param("gamma prior on the intensity needs positive shape and rate".into()));
            }
            Ok(IntensityPosterior { shape: shape + n as f64, rate: rate + 1.0, prior })
        }
    }
}

/// `G_L` with every atom prepared and restricted to a set of variables.
#[derive(Debug, Clone)]
pub struct Mixture {
    ln_w: Vec<f64>,
    atoms: Vec<Atom>,
}

impl Mixture {
    pub fn new(model: &Model, g: &FiniteMixture, mask: &VarMask) -> Result<Self> {
        let mut ln_w = Vec::with_capacity(g.len());
        let mut atoms = Vec::with_capacity(g.len());
        for (w, p) in g.weights.iter().zip(&g.atoms) {
            if *w > 0.0 {
                ln_w.push(w.ln());
                atoms.push(model.atom(p)?.restrict(mask)?);
            }
        }
        Ok(Self { ln_w, atoms })
    }

    pub fn ln_density(&self, p: &Point) -> f64 {
        let terms: Vec<f64> = self.ln_w.iter().zip(&self.atoms).map(|(w, a)| w + a.ln_point(p)).collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, p: &Point) -> f64 {
        self.ln_density(p).exp()
    }

    /// Distribution function of a one-dimensional restriction.
    pub fn cdf(&self, t: f64) -> Result<f64> {
        let mut total = 0.0;
        for (w, a) in self.ln_w.iter().zip(&self.atoms) {
            let [part] = a.parts.as_slice() else {
                return Err(Error::Contract("distribution function needs a one-dimensional restriction".into()));
            };
            total += w.exp() * part.loc_cdf(t)?;
        }
        Ok(total.min(1.0))
    }
}

/// `f(z; G_L)` for the variables in `mask`; the others are integrated out.
pub fn density_at(model: &Model, g: &FiniteMixture, p: &Point, mask: &VarMask) -> Result<f64> {
    Ok(Mixture::new(model, g, mask)?.density(p))
}

/// Conditional law of one mark given other variables under a `G_L` draw:
/// a mixture of per-component conditionals with weights proportional to
/// `w_a f_a(x)`.
#[derive(Debug, Clone)]
pub struct ConditionalMark {
    given: Mixture,
    parts: Vec<CondPart>,
}

impl ConditionalMark {
    pub fn new(model: &Model, g: &FiniteMixture, target: usize, given: &VarMask) -> Result<Self> {
        if given.has(Var::Mark(target)) {
            return Err(Error::Contract("the conditioning set contains the target mark".into()));
        }
        let mut ln_w = Vec::with_capacity(g.len());
        let mut atoms = Vec::with_capacity(g.len());
        let mut parts = Vec::with_capacity(g.len());
        for (w, p) in g.weights.iter().zip(&g.atoms) {
            if *w > 0.0 {
                ln_w.push(w.ln());
                atoms.push(model.atom(p)?.restrict(given)?);
                parts.push(model.conditional(p, target, given)?);
            }
        }
        Ok(Self { given: Mixture { ln_w, atoms }, parts })
    }

    /// Normalized component weights at `x`.
    pub fn weights(&self, x: &Point) -> Result<Vec<f64>> {
        let terms: Vec<f64> =
            self.given.ln_w.iter().zip(&self.given.atoms).map(|(w, a)| w + a.ln_point(x)).collect();
        let z = log_sum_exp(&terms);
        if !z.is_finite() {
            return Err(Error::MarginalUnderflow(x.loc.clone()));
        }
        Ok(terms.iter().map(|t| (t - z).exp()).collect())
    }

    pub fn density(&self, x: &Point, y: &MarkValue) -> Result<f64> {
        let w = self.weights(x)?;
        Ok(w.iter().zip(&self.parts).map(|(w, c)| w * c.ln_pdf(x, y).exp()).sum())
    }

    pub fn cdf(&self, x: &Point, y: &MarkValue) -> Result<f64> {
        let w = self.weights(x)?;
        Ok(w.iter().zip(&self.parts).map(|(w, c)| w * c.cdf(x, y)).sum::<f64>().clamp(0.0, 1.0))
    }

    /// `Pr(Y < y)`; differs from [`ConditionalMark::cdf`] only for discrete marks.
    pub fn cdf_below(&self, x: &Point, y: &MarkValue) -> Result<f64> {
        let w = self.weights(x)?;
        Ok(w.iter().zip(&self.parts).map(|(w, c)| w * c.cdf_below(x, y)).sum::<f64>().clamp(0.0, 1.0))
    }

    pub fn mean(&self, x: &Point) -> Result<f64> {
        let w = self.weights(x)?;
        Ok(w.iter().zip(&self.parts).map(|(w, c)| w * c.mean(x)).sum())
    }
}

/// `h(y | x; G_L)`, conditioning on every other variable present in `x`.
pub fn conditional_mark_density(model: &Model, g: &FiniteMixture, x: &Point, target: usize, y: &MarkValue) -> Result<f64> {
    ConditionalMark::new(model, g, target, &present(model, x, target))?.density(x, y)
}

pub fn conditional_mark_cdf(model: &Model, g: &FiniteMixture, x: &Point, target: usize, y: &MarkValue) -> Result<f64> {
    ConditionalMark::new(model, g, target, &present(model, x, target))?.cdf(x, y)
}

pub fn conditional_mark_mean(model: &Model, g: &FiniteMixture, x: &Point, target: usize) -> Result<f64> {
    ConditionalMark::new(model, g, target, &present(model, x, target))?.mean(x)
}

fn present(model: &Model, x: &Point, target: usize) -> VarMask {
    let mut mask = VarMask::location(model.dims(), model.n_marks());
    for (k, m) in x.marks.iter().enumerate() {
        if m.is_some() && k != target {
            mask = mask.with(Var::Mark(k));
        }
    }
    mask
}

/// A rectangular evaluation grid over model variables; points enumerate the
/// Cartesian product with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub vars: Vec<Var>,
    pub axes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(vars: Vec<Var>, axes: Vec<Vec<f64>>) -> Result<Self> {
        if vars.is_empty() || vars.len() != axes.len() {
            return Err(Error::Param("grid needs one axis per variable".into()));
        }
        for a in &axes {
            if a.is_empty() || a.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Param("grid axes must be nonempty and strictly increasing".into()));
            }
        }
        Ok(Self { vars, axes })
    }

    /// `n` equally spaced interior points `i/(n+1)` of the unit interval.
    pub fn unit(var: Var, n: usize) -> Self {
        Self { vars: vec![var], axes: vec![(1..=n).map(|i| i as f64 / (n + 1) as f64).collect()] }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for a in &self.axes {
            out = out
                .into_iter()
                .flat_map(|c| {
                    a.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        out
    }

    pub fn mask(&self, model: &Model) -> VarMask {
        self.vars.iter().fold(VarMask::none(model.dims(), model.n_marks()), |m, v| m.with(*v))
    }

    pub fn names(&self, model: &Model) -> Vec<String> {
        self.vars
            .iter()
            .map(|v| match v {
                Var::Loc(_) if model.dims() == 1 => "t".to_string(),
                Var::Loc(k) => format!("x{}", k + 1),
                Var::Mark(k) => model.schema().marks[*k].name.clone(),
            })
            .collect()
    }

    /// Query points; location coordinates not on the grid are set to 1/2 and
    /// are ignored by restricted evaluations.
    pub fn points(&self, model: &Model) -> Result<Vec<Point>> {
        self.coords()
            .into_iter()
            .map(|c| {
                let mut p = Point::location(vec![0.5; model.dims()], model.n_marks());
                for (v, x) in self.vars.iter().zip(c) {
                    match v {
                        Var::Loc(k) => {
                            if !(x > 0.0 && x < 1.0) {
                                return Err(Error::Param(format!("grid location {x} outside (0,1)")));
                            }
                            p.loc[*k] = x;
                        }
                        Var::Mark(k) => p.marks[*k] = Some(mark_value(&model.schema().marks[*k].kind, x)?),
                    }
                }
                Ok(p)
            })
            .collect()
    }
}

/// Interpret a grid coordinate as a value of a mark of the given kind.
pub fn mark_value(kind: &MarkKind, x: f64) -> Result<MarkValue> {
    let integral = x >= 0.0 && x.fract() == 0.0;
    match kind {
        MarkKind::Categorical { levels } if integral && (x as usize) < *levels => Ok(MarkValue::Category(x as usize)),
        MarkKind::Count { .. } if integral => Ok(MarkValue::Count(x as u64)),
        MarkKind::Continuous(_) => Ok(MarkValue::Real(x)),
        _ => Err(Error::Param(format!("{x} is not a valid value for mark kind {kind:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveOptions {
    pub lower: f64,
    pub upper: f64,
    pub keep_draws: bool,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self { lower: 0.05, upper: 0.95, keep_draws: false }
    }
}

/// Pointwise posterior summary of a curve or surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub names: Vec<String>,
    pub coords: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub levels: [f64; 2],
    /// One row per posterior draw, if retained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<Vec<f64>>>,
}

impl CurveSummary {
    /// Summarize per-draw curves (`values[d][g]`) pointwise.
    pub fn from_draws(names: Vec<String>, coords: Vec<Vec<f64>>, values: Vec<Vec<f64>>, opts: &CurveOptions) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("no posterior draws to summarize".into()));
        }
        let g = coords.len();
        if values.iter().any(|v| v.len() != g) {
            return Err(Error::Contract("curve draws disagree with the grid".into()));
        }
        let nd = values.len() as f64;
        let mut mean = vec![0.0; g];
        let mut lower = vec![0.0; g];
        let mut upper = vec![0.0; g];
        let mut col = Vec::with_capacity(values.len());
        for k in 0..g {
            col.clear();
            col.extend(values.iter().map(|v| v[k]));
            mean[k] = col.iter().sum::<f64>() / nd;
            col.sort_by(f64::total_cmp);
            lower[k] = quantile_sorted(&col, opts.lower);
            upper[k] = quantile_sorted(&col, opts.upper);
        }
        Ok(Self {
            names,
            coords,
            mean,
            lower,
            upper,
            levels: [opts.lower, opts.upper],
            draws: opts.keep_draws.then_some(values),
        })
    }

    /// Map grid axis `axis` through `x -> offset + scale * x`.
    pub fn rescale_axis(&mut self, axis: usize, offset: f64, scale: f64) {
        for c in &mut self.coords {
            c[axis] = offset + scale * c[axis];
        }
    }

    /// Multiply every value by `factor`.
    pub fn scale_values(&mut self, factor: f64) {
        for v in self.mean.iter_mut().chain(&mut self.lower).chain(&mut self.upper) {
            *v *= factor;
        }
        if let Some(d) = &mut self.draws {
            d.iter_mut().flatten().for_each(|v| *v *= factor);
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = self.names.clone();
        header.extend(["mean", "lower", "upper"].map(String::from));
        wtr.write_record(&header)?;
        for k in 0..self.coords.len() {
            let mut row: Vec<String> = self.coords[k].iter().map(|v| format!("{v:?}")).collect();
            row.extend([self.mean[k], self.lower[k], self.upper[k]].iter().map(|v| format!("{v:?}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// One posterior realization: a `G_L` draw and an independent `Lambda_R` draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub g: FiniteMixture,
    pub lambda: f64,
}

/// `per_state` realizations for every saved state.
pub fn posterior_draws(
    model: &Model,
    chain: &[ChainState],
    intensity: &IntensityPosterior,
    l: usize,
    per_state: usize,
    rng: &mut Rng,
) -> Result<Vec<PosteriorDraw>> {
    let mut out = Vec::with_capacity(chain.len() * per_state);
    for s in chain {
        for _ in 0..per_state {
            let g = draw_gl(model, s, l, rng)?;
            out.push(PosteriorDraw { g, lambda: intensity.sample(rng) });
        }
    }
    Ok(out)
}

/// `f(z; G_L)` over the grid for every draw.
pub fn density_curve(model: &Model, draws: &[PosteriorDraw], grid: &Grid, opts: &CurveOptions) -> Result<CurveSummary> {
    curve(model, draws, grid, opts, false)
}

/// `lambda(z; G_L) = Lambda_R f(z; G_L)` over the grid, on the unit window.
pub fn intensity_curve(model: &Model, draws: &[PosteriorDraw], grid: &Grid, opts: &CurveOptions) -> Result<CurveSummary> {
    curve(model, draws, grid, opts, true)
}

fn curve(model: &Model, draws: &[PosteriorDraw], grid: &Grid, opts: &CurveOptions, intensity: bool) -> Result<CurveSummary> {
    let mask = grid.mask(model);
    let points = grid.points(model)?;
    let mut values = Vec::with_capacity(draws.len());
    for d in draws {
        let mix = Mixture::new(model, &d.g, &mask)?;
        let scale = if intensity { d.lambda } else { 1.0 };
        values.push(points.iter().map(|p| scale * mix.density(p)).collect());
    }
    CurveSummary::from_draws(grid.names(model), grid.coords(), values, opts)
}

/// Conditional density (or probability) of mark `target` at `y` as a
/// function of the grid variables.
pub fn conditional_density_curve(
    model: &Model,
    draws: &[PosteriorDraw],
    target: usize,
    y: &MarkValue,
    grid: &Grid,
    opts: &CurveOptions,
) -> Result<CurveSummary> {
    conditional_curve(model, draws, target, grid, opts, |c, x| c.density(x, y))
}

/// Conditional mean of mark `target` as a function of the grid variables.
pub fn conditional_mean_curve(
    model: &Model,
    draws: &[PosteriorDraw],
    target: usize,
    grid: &Grid,
    opts: &CurveOptions,
) -> Result<CurveSummary> {
    conditional_curve(model, draws, target, grid, opts, |c, x| c.mean(x))
}

/// `h(y | x; G_L)` for mark `target` over the values `ys`, at one
/// conditioning point whose variables are those in `given`.
pub fn conditional_slice_curve(
    model: &Model,
    draws: &[PosteriorDraw],
    target: usize,
    given: &VarMask,
    x: &Point,
    ys: &[f64],
    opts: &CurveOptions,
) -> Result<CurveSummary> {
    let kind = &model.schema().marks[target].kind;
    let ys_v = ys.iter().map(|&y| mark_value(kind, y)).collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(draws.len());
    for d in draws {
        let cm = ConditionalMark::new(model, &d.g, target, given)?;
        values.push(ys_v.iter().map(|y| cm.density(x, y)).collect::<Result<Vec<f64>>>()?);
    }
    let name = model.schema().marks[target].name.clone();
    CurveSummary::from_draws(vec![name], ys.iter().map(|&y| vec![y]).collect(), values, opts)
}

fn conditional_curve(
    model: &Model,
    draws: &[PosteriorDraw],
    target: usize,
    grid: &Grid,
    opts: &CurveOptions,
    f: impl Fn(&ConditionalMark, &Point) -> Result<f64>,
) -> Result<CurveSummary> {
    let mask = grid.mask(model);
    let points = grid.points(model)?;
    let mut values = Vec::with_capacity(draws.len());
    for d in draws {
        let cm = ConditionalMark::new(model, &d.g, target, &mask)?;
        values.push(points.iter().map(|p| f(&cm, p)).collect::<Result<Vec<f64>>>()?);
    }
    CurveSummary::from_draws(grid.names(model), grid.coords(), values, opts)
}

/// Base-measure draws used when the prior-integrated kernel has no closed
/// form for the query variables.
pub const PREDICTIVE_PRIOR_DRAWS: usize = 500;

/// Pólya-urn predictive density `(alpha + N)^{-1} (alpha int k dG0 +
/// sum_j n_j k(z; theta*_j))`, one curve per saved state.
pub fn predictive_density(
    model: &Model,
    chain: &[ChainState],
    grid: &Grid,
    opts: &CurveOptions,
    rng: &mut Rng,
) -> Result<CurveSummary> {
    let mask = grid.mask(model);
    let points = grid.points(model)?;
    let mut values = Vec::with_capacity(chain.len());
    for s in chain {
        let n: usize = s.clusters.iter().map(|c| c.n).sum();
        let marg = prior_marginal(model, s, &mask, &points, rng)?;
        let atoms: Vec<Atom> = s
            .clusters
            .iter()
            .map(|c| model.atom(&c.params)?.restrict(&mask))
            .collect::<Result<_>>()?;
        let denom = s.alpha + n as f64;
        values.push(
            points
                .iter()
                .zip(&marg)
                .map(|(p, m)| {
                    let occupied: f64 =
                        s.clusters.iter().zip(&atoms).map(|(c, a)| c.n as f64 * a.ln_point(p).exp()).sum();
                    (s.alpha * m + occupied) / denom
                })
                .collect(),
        );
    }
    CurveSummary::from_draws(grid.names(model), grid.coords(), values, opts)
}

/// `int k(z; theta) dG0(theta)` at each point: closed form where every
/// block touching the query has one, otherwise a Monte Carlo average over
/// base-measure draws.
fn prior_marginal(model: &Model, s: &ChainState, mask: &VarMask, points: &[Point], rng: &mut Rng) -> Result<Vec<f64>> {
    if let Some(pm) = model.prior_marginal(&s.hyper, mask)? {
        return Ok(points.iter().map(|p| pm.ln_point(p).exp()).collect());
    }
    let atoms: Vec<Atom> = (0..PREDICTIVE_PRIOR_DRAWS)
        .map(|_| model.atom(&model.sample_prior(&s.hyper, rng)?)?.restrict(mask))
        .collect::<Result<_>>()?;
    Ok(points
        .iter()
        .map(|p| atoms.iter().map(|a| a.ln_point(p).exp()).sum::<f64>() / atoms.len() as f64)
        .collect())
}
