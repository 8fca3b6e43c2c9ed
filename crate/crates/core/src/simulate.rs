//! Ground-truth generators for marked Poisson processes on the unit window.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::data::{Event, MarkDescriptor, MarkKind, MarkSchema, MarkValue, MarkedPointPattern, ObservationWindow, Support};
use crate::kernels::beta_pdf;
use crate::stats::sample_std_normal;
use crate::{rng_from_seed, Error, Result, Rng};

pub type Intensity<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;
pub type MarkGenerator<'a> = Box<dyn Fn(&[f64], &mut Rng) -> Vec<MarkValue> + 'a>;

/// A marked Poisson process on `(0,1)^dims`.
pub struct SimSpec<'a> {
    pub dims: usize,
    pub intensity: Intensity<'a>,
    /// Must dominate the intensity everywhere on the window.
    pub lambda_max: f64,
    pub schema: MarkSchema,
    pub marks: Option<MarkGenerator<'a>>,
    pub seed: u64,
}

impl SimSpec<'_> {
    /// Simulate with the spec's own seed.
    pub fn simulate(&self) -> Result<MarkedPointPattern> {
        let mut rng = rng_from_seed(self.seed, 0);
        let locs = simulate_locations(self.dims, &self.intensity, self.lambda_max, &mut rng)?;
        let marks = match &self.marks {
            Some(gen) => simulate_marks(&locs, gen, &mut rng),
            None => vec![Vec::new(); locs.len()],
        };
        let events = locs.into_iter().zip(marks).map(|(loc, marks)| Event { loc, marks }).collect();
        MarkedPointPattern::new(ObservationWindow::unit(self.dims), self.schema.clone(), events)
    }
}

/// Thinning: a homogeneous process of rate `lambda_max` on the unit window,
/// each candidate kept with probability `lambda(x)/lambda_max`. Temporal
/// output is in increasing time order.
pub fn simulate_locations(
    dims: usize,
    intensity: impl Fn(&[f64]) -> f64,
    lambda_max: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::Param(format!("dominating bound {lambda_max} must be positive and finite")));
    }
    if dims == 0 {
        return Err(Error::Param("window needs at least one dimension".into()));
    }
    let n = Poisson::new(lambda_max).map_err(|e| Error::Param(e.to_string()))?.sample(rng) as usize;
    let mut out = Vec::new();
    for _ in 0..n {
        let x: Vec<f64> = (0..dims).map(|_| open_unit(rng)).collect();
        let v = intensity(&x);
        if !(v >= 0.0) {
            return Err(Error::Param(format!("intensity {v} at {x:?}")));
        }
        if v > lambda_max {
            return Err(Error::DominationViolation { value: v, bound: lambda_max, location: x });
        }
        if rng.random::<f64>() * lambda_max < v {
            out.push(x);
        }
    }
    if dims == 1 {
        out.sort_by(|a, b| a[0].total_cmp(&b[0]));
    }
    Ok(out)
}

fn open_unit(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Unmarked pattern from an intensity on the unit window.
pub fn simulate_nhpp(
    dims: usize,
    intensity: impl Fn(&[f64]) -> f64,
    lambda_max: f64,
    rng: &mut Rng,
) -> Result<MarkedPointPattern> {
    let events = simulate_locations(dims, intensity, lambda_max, rng)?
        .into_iter()
        .map(|loc| Event { loc, marks: Vec::new() })
        .collect();
    MarkedPointPattern::new(ObservationWindow::unit(dims), MarkSchema::default(), events)
}

/// Marks drawn independently at each location.
pub fn simulate_marks(
    locations: &[Vec<f64>],
    generator: impl Fn(&[f64], &mut Rng) -> Vec<MarkValue>,
    rng: &mut Rng,
) -> Vec<Vec<MarkValue>> {
    locations.iter().map(|x| generator(x, rng)).collect()
}

/// Attach marks to an unmarked pattern.
pub fn with_marks(
    pattern: MarkedPointPattern,
    schema: MarkSchema,
    generator: impl Fn(&[f64], &mut Rng) -> Vec<MarkValue>,
    rng: &mut Rng,
) -> Result<MarkedPointPattern> {
    let events = pattern
        .events
        .into_iter()
        .map(|e| {
            let marks = generator(&e.loc, rng);
            Event { loc: e.loc, marks }
        })
        .collect();
    MarkedPointPattern::new(pattern.window, schema, events)
}

/// Total expected count of the synthetic benchmark.
pub const SYNTHETIC_TOTAL: f64 = 500.0;

/// `250 (b(t; 1/11, 11) + b(t; 4/7, 7))`, with `b(t; mu, tau)` the beta
/// density of mean `mu` and precision `tau`.
pub fn synthetic_intensity(t: f64) -> f64 {
    let b = |mu: f64, tau: f64| beta_pdf(t, mu, tau).unwrap_or(0.0);
    0.5 * SYNTHETIC_TOTAL * (b(1.0 / 11.0, 11.0) + b(4.0 / 7.0, 7.0))
}

/// Grid maximum of [`synthetic_intensity`] with a 1% margin.
pub fn synthetic_lambda_max() -> f64 {
    let n = 10_000;
    let grid_max = (0..=n)
        .map(|i| synthetic_intensity((i as f64 / n as f64).clamp(1e-12, 1.0 - 1e-12)))
        .fold(0.0, f64::max);
    1.01 * grid_max
}

/// `Pr(z = 1 | t) = t^2`.
pub fn synthetic_z_prob(t: f64) -> f64 {
    t * t
}

/// `E[y | t, z]`: `-10 (1 - t)^4` plus the error mean (0 or 4).
pub fn synthetic_y_mean(t: f64, z: usize) -> f64 {
    -10.0 * (1.0 - t).powi(4) + if z == 1 { 4.0 } else { 0.0 }
}

pub fn synthetic_schema() -> MarkSchema {
    MarkSchema::new(vec![
        MarkDescriptor { name: "z".into(), kind: MarkKind::Categorical { levels: 2 } },
        MarkDescriptor { name: "y".into(), kind: MarkKind::Continuous(Support::Real) },
    ])
    .expect("valid schema")
}

/// Marks of the synthetic benchmark: `z ~ Bernoulli(t^2)`, then
/// `y = -10 (1 - t)^4 + e` with `e ~ N(0, 1)` when `z = 0` and
/// `e ~ ga(4, 1)` when `z = 1`.
pub fn synthetic_marks(x: &[f64], rng: &mut Rng) -> Vec<MarkValue> {
    let t = x[0];
    let z = usize::from(rng.random::<f64>() < synthetic_z_prob(t));
    let e = if z == 1 {
        Gamma::new(4.0, 1.0).expect("valid gamma").sample(rng)
    } else {
        sample_std_normal(rng)
    };
    vec![MarkValue::Category(z), MarkValue::Real(-10.0 * (1.0 - t).powi(4) + e)]
}

/// One realization of the synthetic temporal benchmark.
pub fn simulate_synthetic(seed: u64) -> Result<MarkedPointPattern> {
    SimSpec {
        dims: 1,
        intensity: Box::new(|x| synthetic_intensity(x[0])),
        lambda_max: synthetic_lambda_max(),
        schema: synthetic_schema(),
        marks: Some(Box::new(synthetic_marks)),
        seed,
    }
    .simulate()
}
