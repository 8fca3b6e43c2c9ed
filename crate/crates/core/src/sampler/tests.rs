use std::collections::HashMap;

use super::*;
use crate::data::{Event, MarkDescriptor, MarkKind, MarkSchema, MarkValue, ObservationWindow};
use crate::kernels::{BlockSpec, RandomMatrix, RandomScale, Var};
use crate::quadrature::integrate_upper;
use crate::stats::ln_beta;

fn labelled() -> Model {
    let schema = MarkSchema::new(vec![MarkDescriptor { name: "z".into(), kind: MarkKind::Categorical { levels: 2 } }]).unwrap();
    Model::new(
        1,
        schema,
        vec![
            BlockSpec::Gaussian {
                vars: vec![Var::Loc(0)],
                mean: vec![0.0],
                kappa: 1.0,
                nu: 2.0,
                omega: RandomMatrix::fixed(vec![vec![2.0]]),
            },
            BlockSpec::Categorical { mark: 0, conc: vec![1.0, 1.0] },
        ],
    )
    .unwrap()
}

fn pattern(model: &Model, pts: &[(f64, usize)]) -> MarkedPointPattern {
    let events = pts
        .iter()
        .map(|&(t, z)| Event { loc: vec![t], marks: vec![MarkValue::Category(z)] })
        .collect();
    MarkedPointPattern::new(ObservationWindow::unit(1), model.schema().clone(), events).unwrap()
}

fn beta_model() -> Model {
    Model::new(
        1,
        MarkSchema::new(vec![]).unwrap(),
        vec![BlockSpec::Beta { dim: 0, shape: 2.0, scale: RandomScale::random(1.0, 0.05) }],
    )
    .unwrap()
}

fn beta_pattern(model: &Model, n: usize) -> MarkedPointPattern {
    let events = (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            Event { loc: vec![if i % 2 == 0 { 0.15 * u + 0.02 } else { 0.6 + 0.3 * u }], marks: vec![] }
        })
        .collect();
    MarkedPointPattern::new(ObservationWindow::unit(1), model.schema().clone(), events).unwrap()
}

/// Canonical labels in order of first appearance.
fn canonical(alloc: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    alloc
        .iter()
        .map(|s| {
            let next = map.len();
            *map.entry(*s).or_insert(next)
        })
        .collect()
}

/// Exact posterior over the five partitions of three events.
fn exact_partition_probs(model: &Model, pat: &MarkedPointPattern, alpha: f64) -> HashMap<Vec<usize>, f64> {
    let data: Vec<_> = pat.events.iter().map(|e| model.prepare_event(e)).collect();
    let hyper = model.initial_hyper();
    let ln_cluster = |members: &[usize]| -> f64 {
        let mut total = 0.0;
        for b in 0..model.blocks().len() {
            let mut st = model.empty_stats(b).unwrap();
            for &i in members {
                total += model.predictive(b, &hyper[b], &st).unwrap().ln_datum(&data[i].data[b]);
                st.add(&data[i].data[b]);
            }
        }
        total
    };
    let parts = [vec![0, 0, 0], vec![0, 0, 1], vec![0, 1, 0], vec![0, 1, 1], vec![0, 1, 2]];
    let mut lw = Vec::new();
    for p in &parts {
        let k = p.iter().max().unwrap() + 1;
        let mut w = k as f64 * alpha.ln();
        for j in 0..k {
            let mem: Vec<usize> = (0..3).filter(|&i| p[i] == j).collect();
            w += statrs::function::gamma::ln_gamma(mem.len() as f64) + ln_cluster(&mem);
        }
        lw.push(w);
    }
    let z = crate::stats::log_sum_exp(&lw);
    parts.iter().cloned().zip(lw.iter().map(|w| (w - z).exp())).collect()
}

fn partition_frequencies(method: AllocationMethod) -> (HashMap<Vec<usize>, f64>, HashMap<Vec<usize>, f64>) {
    let model = labelled();
    let pat = pattern(&model, &[(0.2, 0), (0.25, 0), (0.8, 1)]);
    let config = McmcConfig {
        iterations: 40_000,
        burn_in: 100,
        thin: 1,
        seed: 5,
        alpha: AlphaPrior::Fixed(1.0),
        allocation: method,
        ..McmcConfig::default()
    };
    let states = run_mcmc(&model, &pat, config).unwrap();
    let mut freq: HashMap<Vec<usize>, f64> = HashMap::new();
    for s in &states {
        *freq.entry(canonical(&s.allocations)).or_default() += 1.0 / states.len() as f64;
    }
    (freq, exact_partition_probs(&model, &pat, 1.0))
}

#[test]
fn collapsed_gibbs_matches_partition_enumeration() {
    let (freq, exact) = partition_frequencies(AllocationMethod::Collapsed);
    for (p, pr) in &exact {
        let f = freq.get(p).copied().unwrap_or(0.0);
        assert!((f - pr).abs() < 0.015, "{p:?}: {f} vs {pr}");
    }
}

#[test]
fn auxiliary_method_matches_partition_enumeration() {
    let (freq, exact) = partition_frequencies(AllocationMethod::Auxiliary);
    for (p, pr) in &exact {
        let f = freq.get(p).copied().unwrap_or(0.0);
        assert!((f - pr).abs() < 0.015, "{p:?}: {f} vs {pr}");
    }
}

#[test]
fn alpha_update_leaves_its_conditional_invariant() {
    let prior = GammaPrior { shape: 2.0, rate: 1.0 };
    let (m, n) = (3usize, 20usize);
    // p(alpha | m, n) is proportional to pi(alpha) alpha^m B(alpha, n)
    let ln_post = |a: f64| (prior.shape - 1.0 + m as f64) * a.ln() - prior.rate * a + ln_beta(a, n as f64);
    let z = integrate_upper(|a| ln_post(a).exp(), 0.0, 1e-12);
    let mean = integrate_upper(|a| a * ln_post(a).exp(), 0.0, 1e-12) / z;
    let mut rng = rng_from_seed(3, 0);
    let mut a = 1.0;
    let mut acc = 0.0;
    let steps = 200_000;
    for _ in 0..steps {
        a = update_alpha(a, m, n, prior, &mut rng);
        acc += a;
    }
    let est = acc / steps as f64;
    assert!((est - mean).abs() < 0.02, "{est} vs {mean}");
}

#[test]
fn alpha_without_data_is_a_prior_draw() {
    let prior = GammaPrior { shape: 2.0, rate: 4.0 };
    let mut rng = rng_from_seed(8, 0);
    let draws: Vec<f64> = (0..50_000).map(|_| update_alpha(1.0, 0, 0, prior, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

#[test]
fn expected_cluster_count() {
    assert!((expected_clusters(1.0, 1) - 2f64.ln()).abs() < 1e-15);
    assert!(expected_clusters(2.0, 481) > 10.0 && expected_clusters(2.0, 481) < 12.0);
}

#[test]
fn chain_is_reproducible_and_serializes_exactly() {
    let model = beta_model();
    let pat = beta_pattern(&model, 40);
    let config = McmcConfig { iterations: 300, burn_in: 100, thin: 5, seed: 21, ..McmcConfig::default() };
    let a = run_mcmc(&model, &pat, config.clone()).unwrap();
    let b = run_mcmc(&model, &pat, config.clone()).unwrap();
    assert_eq!(a.len(), config.saved());
    assert_eq!(a, b);
    let c = run_mcmc(&model, &pat, McmcConfig { stream: 1, ..config }).unwrap();
    assert_ne!(a, c);
    let mut buf = Vec::new();
    write_chain(&mut buf, &a).unwrap();
    let back = read_chain(buf.as_slice()).unwrap();
    assert_eq!(a, back);
    for s in &a {
        s.validate().unwrap();
        assert!(s.m >= 1);
    }
}

#[test]
fn nonconjugate_chain_separates_two_groups() {
    let model = beta_model();
    let pat = beta_pattern(&model, 60);
    let config = McmcConfig { iterations: 1500, burn_in: 500, thin: 10, seed: 2, ..McmcConfig::default() };
    let states = run_mcmc(&model, &pat, config).unwrap();
    // events in different groups share a component rarely
    let together = states.iter().filter(|s| s.allocations[0] == s.allocations[1]).count();
    assert!(together * 10 < states.len(), "{together} of {}", states.len());
}

#[test]
fn empty_pattern_samples_the_prior() {
    let model = beta_model();
    let pat = beta_pattern(&model, 0);
    let config = McmcConfig { iterations: 4000, burn_in: 0, thin: 1, seed: 4, ..McmcConfig::default() };
    let states = run_mcmc(&model, &pat, config).unwrap();
    assert!(states.iter().all(|s| s.m == 0 && s.clusters.is_empty()));
    let mean_alpha = states.iter().map(|s| s.alpha).sum::<f64>() / states.len() as f64;
    assert!((mean_alpha - 2.0).abs() < 0.1, "{mean_alpha}");
    // beta_tau hyper ~ ga(1, 0.05) with no components
    let mean_beta = states
        .iter()
        .map(|s| match s.hyper[0] {
            HyperValue::Scalar(v) => v,
            _ => unreachable!(),
        })
        .sum::<f64>()
        / states.len() as f64;
    assert!((mean_beta - 20.0).abs() < 1.0, "{mean_beta}");
}

#[test]
fn adaptation_stops_after_burn_in() {
    let model = beta_model();
    let pat = beta_pattern(&model, 30);
    let config = McmcConfig { iterations: 400, burn_in: 200, thin: 1, seed: 9, ..McmcConfig::default() };
    let mut s = Sampler::new(&model, &pat, config).unwrap();
    for _ in 0..200 {
        s.sweep().unwrap();
    }
    let frozen = s.proposal_scales().to_vec();
    assert_ne!(frozen[0], 0.25);
    for _ in 0..200 {
        s.sweep().unwrap();
    }
    assert_eq!(s.proposal_scales(), frozen.as_slice());
}

#[test]
fn configuration_errors() {
    let bad = McmcConfig { iterations: 10, burn_in: 10, thin: 0, aux_count: 0, ..McmcConfig::default() };
    let Err(Error::Config(msg)) = bad.validate() else { panic!() };
    assert!(msg.contains("burn-in") && msg.contains("thinning") && msg.contains("auxiliary"), "{msg}");
    let model = beta_model();
    let pat = beta_pattern(&model, 5);
    let collapsed = McmcConfig { allocation: AllocationMethod::Collapsed, ..McmcConfig::default() };
    assert!(matches!(Sampler::new(&model, &pat, collapsed), Err(Error::Contract(_))));
}

#[test]
fn state_validation_catches_bookkeeping_errors() {
    let model = beta_model();
    let pat = beta_pattern(&model, 6);
    let s = Sampler::new(&model, &pat, McmcConfig::default()).unwrap();
    let mut st = s.state().clone();
    st.validate().unwrap();
    st.clusters[0].n += 1;
    assert!(st.validate().is_err());
    let mut st = s.state().clone();
    st.allocations[2] = 4;
    assert!(st.validate().is_err());
    assert!(Sampler::from_state(&model, &pat, McmcConfig::default(), st).is_err());
}

#[test]
fn metropolis_component_update_matches_quadrature() {
    use crate::kernels::beta_pdf;
    use crate::quadrature::integrate;
    let model = Model::new(
        1,
        MarkSchema::new(vec![]).unwrap(),
        vec![BlockSpec::Beta { dim: 0, shape: 2.0, scale: RandomScale::fixed(1.0) }],
    )
    .unwrap();
    let xs = [0.1, 0.2, 0.25, 0.3, 0.4];
    let events = xs.iter().map(|&t| Event { loc: vec![t], marks: vec![] }).collect();
    let pat = MarkedPointPattern::new(ObservationWindow::unit(1), model.schema().clone(), events).unwrap();
    // mu ~ U(0,1), s = 1/tau ~ ga(2, 1)
    let joint = |mu: f64, s: f64| {
        s * (-s).exp() * xs.iter().map(|&t| beta_pdf(t, mu, 1.0 / s).unwrap()).product::<f64>()
    };
    let z = integrate(|mu| integrate_upper(|s| joint(mu, s), 0.0, 1e-10), 0.0, 1.0, 1e-10);
    let m1 = integrate(|mu| mu * integrate_upper(|s| joint(mu, s), 0.0, 1e-10), 0.0, 1.0, 1e-10) / z;
    let config = McmcConfig {
        iterations: 30_000,
        burn_in: 2000,
        thin: 1,
        seed: 13,
        metropolis_steps: 4,
        alpha: AlphaPrior::Fixed(1e-12),
        ..McmcConfig::default()
    };
    let states = run_mcmc(&model, &pat, config).unwrap();
    assert!(states.iter().all(|s| s.m == 1));
    let est = states
        .iter()
        .map(|s| match s.clusters[0].params.blocks[0] {
            BlockParams::Beta { mu, .. } => mu,
            _ => unreachable!(),
        })
        .sum::<f64>()
        / states.len() as f64;
    assert!((est - m1).abs() < 0.006, "{est} vs {m1}");
}
