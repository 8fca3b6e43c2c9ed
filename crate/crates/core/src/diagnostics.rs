//! Model checking by time rescaling, marginal spatial rescaling and the
//! probability integral transform of marks, with posterior Q-Q summaries.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{MarkKind, MarkedPointPattern};
use crate::functionals::{ConditionalMark, Mixture, PosteriorDraw};
use crate::kernels::{Model, Point, Var, VarMask};
use crate::measure::FiniteMixture;
use crate::stats::{ks_uniform_statistic, quantile_sorted};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniformKind {
    Temporal,
    SpatialMargin { dim: usize },
    MarkPit { mark: usize },
}

impl UniformKind {
    pub fn label(&self) -> String {
        match self {
            UniformKind::Temporal => "temporal".into(),
            UniformKind::SpatialMargin { dim } => format!("spatial-margin-{}", dim + 1),
            UniformKind::MarkPit { mark } => format!("mark-pit-{mark}"),
        }
    }
}

/// Values that are i.i.d. uniform under a correct model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformizedSample {
    pub kind: UniformKind,
    pub u: Vec<f64>,
}

/// `u_i = 1 - exp(-(c_i - c_{i-1}))` from nondecreasing cumulative
/// intensities, with `c_0 = 0`.
pub fn rescale_gaps(cumulative: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    cumulative
        .iter()
        .map(|&c| {
            let gap = (c - prev).max(0.0);
            prev = c;
            -(-gap).exp_m1()
        })
        .collect()
}

fn rescale(mix: &Mixture, lambda: f64, sorted: &[f64], kind: UniformKind) -> Result<UniformizedSample> {
    let cum = sorted.iter().map(|&t| mix.cdf(t).map(|c| lambda * c)).collect::<Result<Vec<f64>>>()?;
    Ok(UniformizedSample { kind, u: rescale_gaps(&cum) })
}

/// Time rescaling for ascending event times of a temporal pattern.
pub fn time_rescale_uniforms(model: &Model, g: &FiniteMixture, lambda: f64, times: &[f64]) -> Result<UniformizedSample> {
    if model.dims() != 1 {
        return Err(Error::Contract("time rescaling needs a temporal model".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Contract("event times must be sorted ascending".into()));
    }
    let mix = Mixture::new(model, g, &VarMask::none(1, model.n_marks()).with(Var::Loc(0)))?;
    rescale(&mix, lambda, times, UniformKind::Temporal)
}

/// Time rescaling of a temporal pattern in any event order.
pub fn temporal_uniforms(model: &Model, g: &FiniteMixture, lambda: f64, pattern: &MarkedPointPattern) -> Result<UniformizedSample> {
    let mut t: Vec<f64> = pattern.events.iter().map(|e| e.loc[0]).collect();
    t.sort_by(f64::total_cmp);
    time_rescale_uniforms(model, g, lambda, &t)
}

/// Rescaling of one coordinate of a spatial pattern under the marginal
/// intensity `lambda_k(x_k) = int lambda(x) dx_{-k}`.
pub fn marginal_rescale_uniforms(
    model: &Model,
    g: &FiniteMixture,
    lambda: f64,
    pattern: &MarkedPointPattern,
    dim: usize,
) -> Result<UniformizedSample> {
    if model.dims() != 2 || dim > 1 {
        return Err(Error::Contract("marginal rescaling needs a spatial model and dimension 0 or 1".into()));
    }
    let mix = Mixture::new(model, g, &VarMask::none(2, model.n_marks()).with(Var::Loc(dim)))?;
    let mut x: Vec<f64> = pattern.events.iter().map(|e| e.loc[dim]).collect();
    x.sort_by(f64::total_cmp);
    rescale(&mix, lambda, &x, UniformKind::SpatialMargin { dim })
}

/// `u_i = H(y_i | x_i; G_L)` for one mark given the location; discrete marks
/// get the randomized transform, uniform between `H(y_i-)` and `H(y_i)`.
pub fn mark_pit_uniforms(
    model: &Model,
    g: &FiniteMixture,
    pattern: &MarkedPointPattern,
    mark: usize,
    rng: &mut Rng,
) -> Result<UniformizedSample> {
    let cm = ConditionalMark::new(model, g, mark, &model.location_mask())?;
    let discrete = !matches!(model.schema().marks[mark].kind, MarkKind::Continuous(_));
    let mut u = Vec::with_capacity(pattern.len());
    for e in &pattern.events {
        let x = Point::location(e.loc.clone(), model.n_marks());
        let y = &e.marks[mark];
        let hi = cm.cdf(&x, y)?;
        u.push(if discrete {
            let lo = cm.cdf_below(&x, y)?;
            lo + rng.random::<f64>() * (hi - lo)
        } else {
            hi
        });
    }
    Ok(UniformizedSample { kind: UniformKind::MarkPit { mark }, u })
}

/// Posterior Q-Q summary: per-draw order statistics against `i/(N+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqSummary {
    pub kind: UniformKind,
    pub theoretical: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub ks: Vec<f64>,
}

impl QqSummary {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["theoretical", "mean", "lower", "upper"])?;
        for i in 0..self.theoretical.len() {
            wtr.write_record(
                [self.theoretical[i], self.mean[i], self.lower[i], self.upper[i]].map(|v| format!("{v:?}")),
            )?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Summarize uniformized samples from several posterior draws with a
/// central pointwise band of the given level.
pub fn qq_band(samples: &[UniformizedSample], level: f64) -> Result<QqSummary> {
    if samples.len() < 2 {
        return Err(Error::Contract("a Q-Q band needs at least two draws".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Param(format!("band level {level} outside (0,1)")));
    }
    let kind = samples[0].kind;
    let n = samples[0].u.len();
    if samples.iter().any(|s| s.kind != kind || s.u.len() != n) {
        return Err(Error::Contract("Q-Q samples differ in kind or length".into()));
    }
    let sorted: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let mut u = s.u.clone();
            u.sort_by(f64::total_cmp);
            u
        })
        .collect();
    let nd = samples.len() as f64;
    let a = 0.5 * (1.0 - level);
    let mut mean = vec![0.0; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut col = Vec::with_capacity(samples.len());
    for i in 0..n {
        col.clear();
        col.extend(sorted.iter().map(|u| u[i]));
        mean[i] = col.iter().sum::<f64>() / nd;
        col.sort_by(f64::total_cmp);
        lower[i] = quantile_sorted(&col, a);
        upper[i] = quantile_sorted(&col, 1.0 - a);
    }
    Ok(QqSummary {
        kind,
        theoretical: (1..=n).map(|i| i as f64 / (n + 1) as f64).collect(),
        mean,
        lower,
        upper,
        ks: samples.iter().map(|s| ks_uniform_statistic(&s.u)).collect(),
    })
}

/// Every applicable diagnostic for a pattern: time rescaling (temporal) or
/// both marginal rescalings (spatial), and the PIT of each continuous or
/// count mark.
pub fn diagnose(
    model: &Model,
    draws: &[PosteriorDraw],
    pattern: &MarkedPointPattern,
    level: f64,
    rng: &mut Rng,
) -> Result<Vec<QqSummary>> {
    let mut kinds = Vec::new();
    if model.dims() == 1 {
        kinds.push(UniformKind::Temporal);
    } else {
        kinds.extend((0..model.dims()).map(|dim| UniformKind::SpatialMargin { dim }));
    }
    for (k, m) in model.schema().marks.iter().enumerate() {
        if !matches!(m.kind, MarkKind::Categorical { .. }) {
            kinds.push(UniformKind::MarkPit { mark: k });
        }
    }
    kinds
        .into_iter()
        .map(|kind| {
            let samples = draws
                .iter()
                .map(|d| match kind {
                    UniformKind::Temporal => temporal_uniforms(model, &d.g, d.lambda, pattern),
                    UniformKind::SpatialMargin { dim } => marginal_rescale_uniforms(model, &d.g, d.lambda, pattern, dim),
                    UniformKind::MarkPit { mark } => mark_pit_uniforms(model, &d.g, pattern, mark, rng),
                })
                .collect::<Result<Vec<_>>>()?;
            qq_band(&samples, level)
        })
        .collect()
}
