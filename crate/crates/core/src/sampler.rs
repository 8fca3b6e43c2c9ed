//! MCMC for the finite-dimensional DP mixture posterior: allocations,
//! distinct component parameters, base-measure hyperparameters and the DP
//! precision.
//!
//! Allocations are updated either by collapsed Gibbs (every block conjugate)
//! or by the auxiliary-component method, which needs only base-measure draws
//! and kernel evaluations. Component parameters of non-conjugate blocks move
//! by random-walk Metropolis in unconstrained coordinates.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::MarkedPointPattern;
use crate::kernels::{Atom, BlockParams, BlockStats, ComponentParams, GammaPrior, HyperValue, Model, PreparedEvent, Predictive};
use crate::stats::{sample_beta, sample_gamma, sample_log_categorical, sample_std_normal};
use crate::{rng_from_seed, Error, Result, Rng};

/// Prior on the DP precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPrior {
    Fixed(f64),
    Gamma(GammaPrior),
}

impl AlphaPrior {
    fn initial(&self) -> f64 {
        match self {
            AlphaPrior::Fixed(a) => *a,
            AlphaPrior::Gamma(p) => p.shape / p.rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMethod {
    /// Collapsed Gibbs when every block is conjugate, auxiliary otherwise.
    #[default]
    Auto,
    Collapsed,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Independent RNG stream, e.g. the chain index.
    pub stream: u64,
    /// Initial random-walk scale on unconstrained coordinates.
    pub proposal_scale: f64,
    /// Adapt proposal scales during burn-in (frozen afterwards).
    pub adapt: bool,
    pub metropolis_steps: usize,
    /// Number of auxiliary components in the non-conjugate allocation step.
    pub aux_count: usize,
    pub alpha: AlphaPrior,
    pub allocation: AllocationMethod,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            burn_in: 1000,
            thin: 4,
            seed: 0,
            stream: 0,
            proposal_scale: 0.25,
            adapt: true,
            metropolis_steps: 1,
            aux_count: 3,
            alpha: AlphaPrior::Gamma(GammaPrior { shape: 2.0, rate: 1.0 }),
            allocation: AllocationMethod::Auto,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.burn_in >= self.iterations {
            errs.push(format!("burn-in {} must be below iterations {}", self.burn_in, self.iterations));
        }
        if self.thin == 0 {
            errs.push("thinning must be at least 1".to_string());
        }
        if self.aux_count == 0 {
            errs.push("auxiliary component count must be at least 1".to_string());
        }
        if !(self.proposal_scale > 0.0) {
            errs.push("proposal scale must be positive".to_string());
        }
        match self.alpha {
            AlphaPrior::Fixed(a) if !(a > 0.0) => errs.push("fixed alpha must be positive".to_string()),
            AlphaPrior::Gamma(p) if !(p.shape > 0.0 && p.rate > 0.0) => {
                errs.push("alpha prior needs positive shape and rate".to_string())
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Number of saved states.
    pub fn saved(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub n: usize,
    pub params: ComponentParams,
}

/// One state of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub iteration: usize,
    pub alpha: f64,
    pub hyper: Vec<HyperValue>,
    pub m: usize,
    pub clusters: Vec<Cluster>,
    pub allocations: Vec<usize>,
}

impl ChainState {
    pub fn n_events(&self) -> usize {
        self.allocations.len()
    }

    /// Check partition bookkeeping.
    pub fn validate(&self) -> Result<()> {
        let k = self.clusters.len();
        if self.m != k {
            return Err(Error::Contract(format!("m = {} but {k} clusters stored", self.m)));
        }
        let mut counts = vec![0usize; k];
        for (i, &s) in self.allocations.iter().enumerate() {
            if s >= k {
                return Err(Error::Contract(format!("event {i} allocated to missing cluster {s}")));
            }
            counts[s] += 1;
        }
        for (j, c) in self.clusters.iter().enumerate() {
            if c.n == 0 || c.n != counts[j] {
                return Err(Error::Contract(format!("cluster {j} stores n = {} but has {} members", c.n, counts[j])));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Contract(format!("alpha = {}", self.alpha)));
        }
        Ok(())
    }
}

/// Escobar-West update of the DP precision given `m` occupied clusters among
/// `n` events. Without data the prior is returned.
pub fn update_alpha(alpha: f64, m: usize, n: usize, prior: GammaPrior, rng: &mut Rng) -> f64 {
    loop {
        let draw = if n == 0 {
            sample_gamma(rng, prior.shape, prior.rate)
        } else {
            let eta = sample_beta(rng, alpha + 1.0, n as f64);
            let rate = prior.rate - eta.ln();
            let mf = m as f64;
            let odds = (prior.shape + mf - 1.0) / (n as f64 * rate);
            let shape = if rand::Rng::random::<f64>(rng) * (1.0 + odds) < odds {
                prior.shape + mf
            } else {
                prior.shape + mf - 1.0
            };
            sample_gamma(rng, shape, rate)
        };
        if draw > 0.0 && draw.is_finite() {
            return draw;
        }
    }
}

/// Prior expected number of clusters among `n` events, `alpha ln((alpha+n)/alpha)`.
pub fn expected_clusters(alpha: f64, n: usize) -> f64 {
    alpha * ((alpha + n as f64) / alpha).ln()
}

const ADAPT_BATCH: usize = 50;
const TARGET_ACCEPT: f64 = 0.3;

/// A running chain.
pub struct Sampler<'m> {
    model: &'m Model,
    data: Vec<PreparedEvent>,
    config: McmcConfig,
    state: ChainState,
    atoms: Vec<Atom>,
    rng: Rng,
    scales: Vec<f64>,
    accepted: Vec<usize>,
    proposed: Vec<usize>,
    batches: usize,
}

impl<'m> Sampler<'m> {
    /// Start a chain with every event in a single component whose parameters
    /// are fitted to the data.
    pub fn new(model: &'m Model, pattern: &MarkedPointPattern, config: McmcConfig) -> Result<Self> {
        let mut s = Self::empty(model, pattern, config)?;
        let n = s.data.len();
        if n > 0 {
            let params = s.initial_params()?;
            s.atoms = vec![model.atom(&params)?];
            s.state.clusters = vec![Cluster { n, params }];
            s.state.m = 1;
            s.state.allocations = vec![0; n];
        }
        s.check_finite()?;
        Ok(s)
    }

    /// Continue from a given state.
    pub fn from_state(
        model: &'m Model,
        pattern: &MarkedPointPattern,
        config: McmcConfig,
        state: ChainState,
    ) -> Result<Self> {
        let mut s = Self::empty(model, pattern, config)?;
        state.validate()?;
        if state.n_events() != s.data.len() {
            return Err(Error::Contract("state and pattern disagree on the event count".into()));
        }
        s.atoms = state.clusters.iter().map(|c| model.atom(&c.params)).collect::<Result<_>>()?;
        s.state = state;
        Ok(s)
    }

    fn empty(model: &'m Model, pattern: &MarkedPointPattern, config: McmcConfig) -> Result<Self> {
        config.validate()?;
        if pattern.dims() != model.dims() || pattern.schema != *model.schema() {
            return Err(Error::Contract("pattern window or mark schema does not match the model".into()));
        }
        let method_ok = match config.allocation {
            AllocationMethod::Collapsed => model.is_conjugate(),
            _ => true,
        };
        if !method_ok {
            return Err(Error::Contract("collapsed allocation needs every block to be conjugate".into()));
        }
        let nb = model.blocks().len();
        Ok(Self {
            model,
            data: pattern.events.iter().map(|e| model.prepare_event(e)).collect(),
            state: ChainState {
                iteration: 0,
                alpha: config.alpha.initial(),
                hyper: model.initial_hyper(),
                m: 0,
                clusters: Vec::new(),
                allocations: Vec::new(),
            },
            atoms: Vec::new(),
            rng: rng_from_seed(config.seed, config.stream),
            scales: vec![config.proposal_scale; nb],
            accepted: vec![0; nb],
            proposed: vec![0; nb],
            batches: 0,
            config,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn config(&self) -> &McmcConfig {
        &self.config
    }

    pub fn proposal_scales(&self) -> &[f64] {
        &self.scales
    }

    /// Moment-matched single-component starting values.
    fn initial_params(&mut self) -> Result<ComponentParams> {
        let model = self.model;
        let n = self.data.len() as f64;
        let events: Vec<usize> = (0..self.data.len()).collect();
        let mut blocks = Vec::new();
        for (b, spec) in model.blocks().iter().enumerate() {
            use crate::kernels::{BlockSpec, Datum, Direction};
            let coord = |k: usize| -> Vec<f64> {
                self.data
                    .iter()
                    .map(|ev| match &ev.data[b] {
                        Datum::Unit(u) => u.t,
                        Datum::Pair(p) => p[k].t,
                        _ => unreachable!(),
                    })
                    .collect()
            };
            let moments = |xs: &[f64]| {
                let m = xs.iter().sum::<f64>() / n;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                let mu = m.clamp(0.01, 0.99);
                let tau = if v > 0.0 { (mu * (1.0 - mu) / v - 1.0).clamp(1.0, 1e4) } else { 1e4 };
                (mu, tau)
            };
            let p = match spec {
                BlockSpec::Beta { .. } => {
                    let (mu, tau) = moments(&coord(0));
                    BlockParams::Beta { mu, tau }
                }
                BlockSpec::Sarmanov { .. } => {
                    let (m0, t0) = moments(&coord(0));
                    let (m1, t1) = moments(&coord(1));
                    BlockParams::Sarmanov { mu: [m0, m1], tau: [t0, t1], rho: 0.0 }
                }
                BlockSpec::UniformScale { direction, .. } => {
                    let xs = coord(0);
                    let theta = match direction {
                        Direction::Nonincreasing => {
                            let hi = xs.iter().copied().fold(0.0, f64::max);
                            hi + 0.5 * (1.0 - hi)
                        }
                        Direction::Nondecreasing => {
                            let lo = xs.iter().copied().fold(1.0, f64::min);
                            1.0 - 0.5 * lo
                        }
                    };
                    BlockParams::UniformScale { theta }
                }
                BlockSpec::Poisson { .. } if !model.is_conjugate_block(b) => {
                    let mean = self
                        .data
                        .iter()
                        .map(|ev| match ev.data[b] {
                            Datum::Count { y, .. } => y as f64,
                            _ => unreachable!(),
                        })
                        .sum::<f64>()
                        / n;
                    BlockParams::Poisson { rate: mean.max(1e-3) }
                }
                _ => {
                    let stats = model.block_stats(b, events.iter().map(|&i| &self.data[i]))?;
                    model.conjugate_posterior_draw(b, &self.state.hyper[b], &stats, &mut self.rng)?
                }
            };
            blocks.push(p);
        }
        Ok(ComponentParams { blocks })
    }

    fn collapsed(&self) -> bool {
        match self.config.allocation {
            AllocationMethod::Auto => self.model.is_conjugate(),
            AllocationMethod::Collapsed => true,
            AllocationMethod::Auxiliary => false,
        }
    }

    /// One full sweep: allocations, component parameters, hyperparameters,
    /// then the DP precision.
    pub fn sweep(&mut self) -> Result<()> {
        if self.collapsed() {
            self.gibbs_allocation_step()?;
        } else {
            self.neal_aux_allocation_step()?;
        }
        self.update_cluster_params()?;
        self.update_hyperparams()?;
        if let AlphaPrior::Gamma(p) = self.config.alpha {
            self.state.alpha = update_alpha(self.state.alpha, self.state.m, self.data.len(), p, &mut self.rng);
        }
        self.state.iteration += 1;
        self.adapt();
        debug_assert!(self.state.validate().is_ok(), "{:?}", self.state.validate());
        self.check_finite()
    }

    fn adapt(&mut self) {
        if !self.config.adapt || self.state.iteration > self.config.burn_in || self.state.iteration % ADAPT_BATCH != 0 {
            return;
        }
        self.batches += 1;
        let step = (1.0 / (self.batches as f64).sqrt()).min(0.5);
        for b in 0..self.scales.len() {
            if self.proposed[b] > 0 {
                let rate = self.accepted[b] as f64 / self.proposed[b] as f64;
                self.scales[b] *= if rate > TARGET_ACCEPT { step.exp() } else { (-step).exp() };
            }
            self.accepted[b] = 0;
            self.proposed[b] = 0;
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (i, &s) in self.state.allocations.iter().enumerate() {
            if !self.atoms[s].ln_event(&self.data[i]).is_finite() {
                return Err(Error::NonFinite { iteration: self.state.iteration, event: i });
            }
        }
        Ok(())
    }

    fn free_slot(&mut self) -> Option<usize> {
        self.state.clusters.iter().position(|c| c.n == 0)
    }

    /// Drop empty clusters and relabel allocations in order of first use.
    fn compact(&mut self) {
        let k = self.state.clusters.len();
        let mut map = vec![usize::MAX; k];
        let mut next = 0;
        for j in 0..k {
            if self.state.clusters[j].n > 0 {
                map[j] = next;
                next += 1;
            }
        }
        let mut j = 0;
        self.state.clusters.retain(|c| c.n > 0);
        self.atoms.retain(|_| {
            let keep = map[j] != usize::MAX;
            j += 1;
            keep
        });
        for s in &mut self.state.allocations {
            *s = map[*s];
        }
        self.state.m = self.state.clusters.len();
    }

    /// Collapsed Gibbs allocation sweep with component parameters integrated
    /// out. Requires every block to be conjugate.
    pub fn gibbs_allocation_step(&mut self) -> Result<()> {
        let model = self.model;
        if !model.is_conjugate() {
            return Err(Error::Contract("collapsed allocation needs every block to be conjugate".into()));
        }
        let nb = model.blocks().len();
        let hyper = self.state.hyper.clone();
        let new_stats = |j: usize| -> Result<Vec<BlockStats>> {
            let _ = j;
            (0..nb).map(|b| model.empty_stats(b)).collect()
        };
        let preds_of = |stats: &[BlockStats]| -> Result<Vec<Predictive>> {
            (0..nb).map(|b| model.predictive(b, &hyper[b], &stats[b])).collect()
        };
        let k0 = self.state.clusters.len();
        let mut stats: Vec<Vec<BlockStats>> = (0..k0).map(new_stats).collect::<Result<_>>()?;
        for (i, &s) in self.state.allocations.iter().enumerate() {
            for b in 0..nb {
                stats[s][b].add(&self.data[i].data[b]);
            }
        }
        let mut preds: Vec<Vec<Predictive>> = stats.iter().map(|s| preds_of(s)).collect::<Result<_>>()?;
        let prior_preds = preds_of(&new_stats(0)?)?;
        let ln_alpha = self.state.alpha.ln();
        let mut logw = Vec::new();
        for i in 0..self.data.len() {
            let ev = &self.data[i];
            let c = self.state.allocations[i];
            self.state.clusters[c].n -= 1;
            for b in 0..nb {
                stats[c][b].remove(&ev.data[b]);
            }
            if self.state.clusters[c].n > 0 {
                preds[c] = preds_of(&stats[c])?;
            }
            logw.clear();
            for (j, cl) in self.state.clusters.iter().enumerate() {
                if cl.n == 0 {
                    logw.push(f64::NEG_INFINITY);
                } else {
                    let ll: f64 = preds[j].iter().zip(&ev.data).map(|(p, d)| p.ln_datum(d)).sum();
                    logw.push((cl.n as f64).ln() + ll);
                }
            }
            let ll_new: f64 = prior_preds.iter().zip(&ev.data).map(|(p, d)| p.ln_datum(d)).sum();
            logw.push(ln_alpha + ll_new);
            let pick = sample_log_categorical(&mut self.rng, &logw);
            let j = if pick == self.state.clusters.len() {
                // a new component; its parameters are drawn given its single
                // member so the state stays complete
                let mut s_new = new_stats(0)?;
                for b in 0..nb {
                    s_new[b].add(&ev.data[b]);
                }
                let blocks = (0..nb)
                    .map(|b| model.conjugate_posterior_draw(b, &hyper[b], &s_new[b], &mut self.rng))
                    .collect::<Result<Vec<_>>>()?;
                let params = ComponentParams { blocks };
                let atom = model.atom(&params)?;
                for b in 0..nb {
                    s_new[b].remove(&ev.data[b]);
                }
                let slot = match self.state.clusters.iter().position(|c| c.n == 0) {
                    Some(slot) => {
                        self.state.clusters[slot].params = params;
                        self.atoms[slot] = atom;
                        stats[slot] = s_new;
                        slot
                    }
                    None => {
                        self.state.clusters.push(Cluster { n: 0, params });
                        self.atoms.push(atom);
                        stats.push(s_new);
                        preds.push(Vec::new());
                        self.state.clusters.len() - 1
                    }
                };
                slot
            } else {
                pick
            };
            self.state.clusters[j].n += 1;
            for b in 0..nb {
                stats[j][b].add(&ev.data[b]);
            }
            preds[j] = preds_of(&stats[j])?;
            self.state.allocations[i] = j;
        }
        self.compact();
        Ok(())
    }

    /// Auxiliary-component allocation sweep: candidate new components are
    /// fresh base-measure draws (the current parameters when the event was a
    /// singleton), each weighted by `alpha / aux_count`.
    pub fn neal_aux_allocation_step(&mut self) -> Result<()> {
        let model = self.model;
        let a = self.config.aux_count;
        if a == 0 {
            return Err(Error::Config("auxiliary component count must be at least 1".into()));
        }
        let ln_aux = (self.state.alpha / a as f64).ln();
        let mut aux: Vec<(ComponentParams, Atom)> = Vec::with_capacity(a);
        let mut logw = Vec::new();
        for i in 0..self.data.len() {
            let c = self.state.allocations[i];
            self.state.clusters[c].n -= 1;
            aux.clear();
            if self.state.clusters[c].n == 0 {
                let atom = std::mem::replace(&mut self.atoms[c], Atom { parts: Vec::new() });
                aux.push((self.state.clusters[c].params.clone(), atom));
            }
            while aux.len() < a {
                let p = model.sample_prior(&self.state.hyper, &mut self.rng)?;
                let atom = model.atom(&p)?;
                aux.push((p, atom));
            }
            let ev = &self.data[i];
            logw.clear();
            for (j, cl) in self.state.clusters.iter().enumerate() {
                if cl.n == 0 {
                    logw.push(f64::NEG_INFINITY);
                } else {
                    logw.push((cl.n as f64).ln() + self.atoms[j].ln_event(ev));
                }
            }
            for (_, atom) in &aux {
                logw.push(ln_aux + atom.ln_event(ev));
            }
            let k = self.state.clusters.len();
            let pick = sample_log_categorical(&mut self.rng, &logw);
            let j = if pick >= k {
                let (params, atom) = aux.swap_remove(pick - k);
                match self.free_slot() {
                    Some(slot) => {
                        self.state.clusters[slot].params = params;
                        self.atoms[slot] = atom;
                        slot
                    }
                    None => {
                        self.state.clusters.push(Cluster { n: 0, params });
                        self.atoms.push(atom);
                        k
                    }
                }
            } else {
                pick
            };
            self.state.clusters[j].n += 1;
            self.state.allocations[i] = j;
        }
        self.compact();
        Ok(())
    }

    fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.state.clusters.len()];
        for (i, &s) in self.state.allocations.iter().enumerate() {
            m[s].push(i);
        }
        m
    }

    /// Draw every component's parameters from its full conditional (exactly
    /// for conjugate blocks, by Metropolis otherwise).
    pub fn update_cluster_params(&mut self) -> Result<()> {
        let model = self.model;
        let members = self.members();
        for (j, mem) in members.iter().enumerate() {
            for b in 0..model.blocks().len() {
                if model.is_conjugate_block(b) {
                    let stats = model.block_stats(b, mem.iter().map(|&i| &self.data[i]))?;
                    self.state.clusters[j].params.blocks[b] =
                        model.conjugate_posterior_draw(b, &self.state.hyper[b], &stats, &mut self.rng)?;
                } else {
                    self.metropolis(j, b, mem);
                }
            }
            self.atoms[j] = model.atom(&self.state.clusters[j].params)?;
        }
        Ok(())
    }

    fn ln_block_target(&self, b: usize, params: &BlockParams, members: &[usize]) -> f64 {
        let Ok(part) = self.model.prepare_part(b, params) else {
            return f64::NEG_INFINITY;
        };
        let prior = self.model.ln_prior_free(b, &self.state.hyper[b], params);
        if !prior.is_finite() {
            return f64::NEG_INFINITY;
        }
        prior + members.iter().map(|&i| part.ln_datum(&self.data[i].data[b])).sum::<f64>()
    }

    fn metropolis(&mut self, j: usize, b: usize, members: &[usize]) {
        let model = self.model;
        let mut current = self.state.clusters[j].params.blocks[b].clone();
        let mut x = model.free_coords(&current);
        let mut lp = self.ln_block_target(b, &current, members);
        for _ in 0..self.config.metropolis_steps {
            let xp: Vec<f64> = x.iter().map(|v| v + self.scales[b] * sample_std_normal(&mut self.rng)).collect();
            let prop = model.from_free(b, &xp);
            let lp_prop = self.ln_block_target(b, &prop, members);
            self.proposed[b] += 1;
            let u: f64 = rand::Rng::random(&mut self.rng);
            if lp_prop.is_finite() && (lp_prop - lp >= 0.0 || u.ln() < lp_prop - lp) {
                current = prop;
                x = xp;
                lp = lp_prop;
                self.accepted[b] += 1;
            }
        }
        self.state.clusters[j].params.blocks[b] = current;
    }

    /// Draw random base-measure hyperparameters given the components.
    pub fn update_hyperparams(&mut self) -> Result<()> {
        for b in 0..self.model.blocks().len() {
            let params: Vec<&BlockParams> = self.state.clusters.iter().map(|c| &c.params.blocks[b]).collect();
            self.state.hyper[b] = self.model.sample_hyper(b, &self.state.hyper[b], &params, &mut self.rng)?;
        }
        // atoms depend only on component parameters, not on the base measure
        Ok(())
    }
}

/// Run a chain and return the post-burn-in, thinned states.
pub fn run_mcmc(model: &Model, pattern: &MarkedPointPattern, config: McmcConfig) -> Result<Vec<ChainState>> {
    let mut sampler = Sampler::new(model, pattern, config.clone())?;
    let mut out = Vec::with_capacity(config.saved());
    for t in 1..=config.iterations {
        sampler.sweep()?;
        if t > config.burn_in && (t - config.burn_in) % config.thin == 0 {
            out.push(sampler.state().clone());
        }
    }
    Ok(out)
}

/// Write states as JSON lines.
pub fn write_chain<W: Write>(mut w: W, states: &[ChainState]) -> Result<()> {
    for s in states {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_chain<R: BufRead>(r: R) -> Result<Vec<ChainState>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ChainState = serde_json::from_str(&line)?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
