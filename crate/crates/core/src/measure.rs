//! Truncated draws of the posterior mixing measure.
//!
//! Given a chain state, `G_L = q0 G* + sum_j q_j delta(theta*_j)` with
//! `(q0, q_1..q_m) ~ Dir(alpha, n_1..n_m)` and `G*` replaced by an `L`-atom
//! stick-breaking draw from `DP(alpha, G0)`.

use serde::{Deserialize, Serialize};

use crate::kernels::{ComponentParams, Model};
use crate::sampler::{AlphaPrior, ChainState};
use crate::stats::{sample_beta, sample_dirichlet, sample_gamma};
use crate::{Error, Result, Rng};

/// Number of prior draws used to average the uncovered stick mass over a
/// random precision.
pub const TRUNCATION_PRIOR_DRAWS: usize = 10_000;

const MAX_TRUNCATION: usize = 100_000;

/// A finite weighted atom list: the first `stick_len` atoms come from the
/// stick-breaking part, the rest are the occupied components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMixture {
    pub q0: f64,
    pub stick_len: usize,
    pub weights: Vec<f64>,
    pub atoms: Vec<ComponentParams>,
}

impl FiniteMixture {
    /// A mixture with explicit weights, all treated as occupied components.
    pub fn from_atoms(weights: Vec<f64>, atoms: Vec<ComponentParams>) -> Result<Self> {
        let g = Self { q0: 0.0, stick_len: 0, weights, atoms };
        g.check()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.weights.len() != self.atoms.len() || self.atoms.is_empty() {
            return Err(Error::Contract("mixture needs one weight per atom and at least one atom".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Contract("mixture weights must be nonnegative".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("mixture weights sum to {s}")));
        }
        Ok(())
    }
}

/// Stick-breaking weights from `L-1` fractions; the last weight takes the
/// remainder.
pub fn stick_break(zeta: &[f64]) -> Vec<f64> {
    debug_assert!(zeta.iter().all(|z| *z > 0.0 && *z < 1.0));
    let mut p = Vec::with_capacity(zeta.len() + 1);
    let mut left = 1.0;
    for &z in zeta {
        p.push(z * left);
        left *= 1.0 - z;
    }
    let used: f64 = p.iter().sum();
    p.push((1.0 - used).max(0.0));
    p
}

/// `L` stick-breaking weights with `zeta ~ Beta(1, alpha)`.
pub fn sample_stick(alpha: f64, l: usize, rng: &mut Rng) -> Vec<f64> {
    let zeta: Vec<f64> = (1..l)
        .map(|_| sample_beta(rng, 1.0, alpha).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
        .collect();
    stick_break(&zeta)
}

/// Smallest `L` whose expected uncovered stick mass `E[(alpha/(alpha+1))^L]`
/// is at most `tol`, averaging over the prior when `alpha` is random.
pub fn choose_truncation(alpha: &AlphaPrior, tol: f64, rng: &mut Rng) -> Result<usize> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Param(format!("truncation tolerance {tol} outside (0,1)")));
    }
    let ratios: Vec<f64> = match alpha {
        AlphaPrior::Fixed(a) => vec![a / (a + 1.0)],
        AlphaPrior::Gamma(p) => (0..TRUNCATION_PRIOR_DRAWS)
            .map(|_| {
                let a = sample_gamma(rng, p.shape, p.rate);
                a / (a + 1.0)
            })
            .collect(),
    };
    let mut pow = ratios.clone();
    for l in 1..=MAX_TRUNCATION {
        let mean = pow.iter().sum::<f64>() / pow.len() as f64;
        if mean <= tol {
            return Ok(l);
        }
        for (p, r) in pow.iter_mut().zip(&ratios) {
            *p *= r;
        }
    }
    Ok(MAX_TRUNCATION)
}

/// Draw `G_L` given a chain state.
pub fn draw_gl(model: &Model, state: &ChainState, l: usize, rng: &mut Rng) -> Result<FiniteMixture> {
    if l == 0 {
        return Err(Error::Param("truncation level must be at least 1".into()));
    }
    let q = if state.clusters.is_empty() {
        vec![1.0]
    } else {
        let mut conc = Vec::with_capacity(state.clusters.len() + 1);
        conc.push(state.alpha);
        conc.extend(state.clusters.iter().map(|c| c.n as f64));
        sample_dirichlet(rng, &conc)
    };
    let p = sample_stick(state.alpha, l, rng);
    let mut weights = Vec::with_capacity(l + state.clusters.len());
    let mut atoms = Vec::with_capacity(l + state.clusters.len());
    for pl in p {
        weights.push(q[0] * pl);
        atoms.push(model.sample_prior(&state.hyper, rng)?);
    }
    for (c, qj) in state.clusters.iter().zip(&q[1..]) {
        weights.push(*qj);
        atoms.push(c.params.clone());
    }
    Ok(FiniteMixture { q0: q[0], stick_len: l, weights, atoms })
}
