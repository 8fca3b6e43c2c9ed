//! Acceptance criteria. Prints one line per criterion and exits non-zero if
//! any criterion fails. Run with `cargo test -p ppmix-cli --test acceptance`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ppmix::data::{Event, MarkDescriptor, MarkKind, MarkSchema, MarkValue, MarkedPointPattern, ObservationWindow, Support};
use ppmix::diagnostics::{mark_pit_uniforms, temporal_uniforms};
use ppmix::functionals::{
    density_curve, lambda_posterior, posterior_draws, predictive_density, ConditionalMark, CurveOptions, Grid,
    LambdaPrior, Mixture,
};
use ppmix::kernels::{
    BlockParams, BlockSpec, ComponentParams, Direction, Model, Point, RandomMatrix, RandomScale, Var,
};
use ppmix::measure::{choose_truncation, sample_stick, FiniteMixture};
use ppmix::quadrature::{integrate, integrate_real, integrate_unit_square, integrate_upper};
use ppmix::sampler::{run_mcmc, AllocationMethod, AlphaPrior, McmcConfig};
use ppmix::stats::{ks_p_value, ks_uniform_statistic};
use ppmix::{rng_from_seed, Rng};
use ppmix_cli::manifest::Manifest;
use ppmix_cli::{preset, run_experiment, Overrides, RunConfig};
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use statrs::function::gamma::ln_gamma;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Result<Outcome, String>;

fn outcome(pass: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() {
    let checks: [(&str, Check); 9] = [
        ("1 integrated-intensity posterior", integrated_intensity),
        ("2 truncation stick mass", truncation_mass),
        ("3 urn predictive vs G_L average", urn_vs_gl),
        ("4 collapsed vs auxiliary sampler", sampler_cross_validation),
        ("5 partition posterior vs enumeration", partition_enumeration),
        ("6 synthetic benchmark fit", synthetic_benchmark),
        ("7 normalization suite", normalization),
        ("8 diagnostics self-consistency", diagnostics_self_consistency),
        ("9 dataset pipelines", dataset_pipelines),
    ];
    // optional criterion numbers on the command line select a subset
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: Vec<_> = checks
        .into_iter()
        .filter(|(name, _)| only.is_empty() || only.iter().any(|o| name.split(' ').next() == Some(o.as_str())))
        .collect();
    let results: Vec<Result<Outcome, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = checks.iter().map(|(_, f)| s.spawn(f)).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("panicked".into())))
            .collect()
    });
    let mut failed = 0;
    for ((name, _), r) in checks.iter().zip(results) {
        match r {
            Ok(o) if o.pass => println!("criterion {name}: PASS ({})", o.detail),
            Ok(o) => {
                failed += 1;
                println!("criterion {name}: FAIL ({})", o.detail)
            }
            Err(e) => {
                failed += 1;
                println!("criterion {name}: FAIL (error: {e})")
            }
        }
    }
    if only.is_empty() || only.iter().any(|o| o == "10") {
        println!("criterion 10 published figure values: INFO (not reproducible bit-for-bit; covered by 6-9)");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn schema(marks: Vec<(&str, MarkKind)>) -> MarkSchema {
    MarkSchema::new(marks.into_iter().map(|(n, k)| MarkDescriptor { name: n.into(), kind: k }).collect()).unwrap()
}

fn unit_pattern(model: &Model, events: Vec<Event>) -> Result<MarkedPointPattern, String> {
    MarkedPointPattern::new(ObservationWindow::unit(model.dims()), model.schema().clone(), events).map_err(err)
}

fn expit(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit_normal_location() -> Model {
    Model::new(
        1,
        schema(vec![]),
        vec![BlockSpec::Gaussian {
            vars: vec![Var::Loc(0)],
            mean: vec![0.0],
            kappa: 0.5,
            nu: 2.0,
            omega: RandomMatrix::random(2.0, vec![vec![1.0]]),
        }],
    )
    .unwrap()
}

/// Events at `expit(N(m, s^2))`, alternating between the given components.
fn logit_normal_events(n: usize, comps: &[(f64, f64)], rng: &mut Rng) -> Vec<Event> {
    (0..n)
        .map(|i| {
            let (m, s) = comps[i % comps.len()];
            let u = Normal::new(m, s).unwrap().sample(rng);
            Event { loc: vec![expit(u)], marks: vec![] }
        })
        .collect()
}

fn quick_config(iterations: usize, burn_in: usize, thin: usize, seed: u64) -> McmcConfig {
    McmcConfig { iterations, burn_in, thin, seed, ..McmcConfig::default() }
}

fn truncation(alpha: f64) -> Result<usize, String> {
    let mut rng = rng_from_seed(0, 0);
    choose_truncation(&AlphaPrior::Fixed(alpha), 1e-6, &mut rng).map_err(err)
}

/// Batch-means standard error of the mean of a correlated series.
fn batch_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

// --------------------------------------------------------------- criteria

fn integrated_intensity() -> Result<Outcome, String> {
    let p = lambda_posterior(191, LambdaPrior::Reference).map_err(err)?;
    outcome(
        p.shape == 191.0 && p.rate == 1.0 && p.mean() == 191.0 && p.variance() == 191.0,
        format!("gamma({}, {}), mean {}, variance {}", p.shape, p.rate, p.mean(), p.variance()),
    )
}

fn truncation_mass() -> Result<Outcome, String> {
    let mut rng = rng_from_seed(2, 0);
    let n = 100_000;
    // 21 weights: the first 20 sticks plus the remainder
    let mean = (0..n).map(|_| sample_stick(1.0, 21, &mut rng)[..20].iter().sum::<f64>()).sum::<f64>() / n as f64;
    let want = 1.0 - 0.5f64.powi(20);
    let diff = (mean - want).abs();
    outcome(diff < 1e-3, format!("mean {mean:.9} vs {want:.9}, |diff| {diff:.2e}"))
}

fn urn_vs_gl() -> Result<Outcome, String> {
    let model = logit_normal_location();
    let mut rng = rng_from_seed(3, 0);
    let events = logit_normal_events(20, &[(-1.0, 0.5), (1.0, 0.7)], &mut rng);
    let pattern = unit_pattern(&model, events)?;
    let chain = run_mcmc(&model, &pattern, quick_config(2000, 1000, 10, 3)).map_err(err)?;
    let state = chain.last().unwrap().clone();
    let grid = Grid::unit(Var::Loc(0), 20);
    let urn = predictive_density(&model, std::slice::from_ref(&state), &grid, &CurveOptions::default(), &mut rng)
        .map_err(err)?;
    let post = lambda_posterior(20, LambdaPrior::Reference).map_err(err)?;
    let l = truncation(state.alpha)?;
    let draws = posterior_draws(&model, &[state], &post, l, 500, &mut rng).map_err(err)?;
    let opts = CurveOptions { keep_draws: true, ..CurveOptions::default() };
    let gl = density_curve(&model, &draws, &grid, &opts).map_err(err)?;
    let rows = gl.draws.as_ref().unwrap();
    let n = rows.len() as f64;
    let mut worst: f64 = 0.0;
    for k in 0..grid.len() {
        let var = rows.iter().map(|r| (r[k] - gl.mean[k]).powi(2)).sum::<f64>() / (n - 1.0);
        worst = worst.max((gl.mean[k] - urn.mean[k]).abs() / (var / n).sqrt());
    }
    outcome(worst < 3.0, format!("max |diff|/se {worst:.2} over 20 points, L = {l}, 500 draws"))
}

fn sampler_cross_validation() -> Result<Outcome, String> {
    let model = logit_normal_location();
    let mut rng = rng_from_seed(4, 0);
    let events = logit_normal_events(100, &[(-1.5, 0.4), (0.5, 0.6), (1.5, 0.3)], &mut rng);
    let pattern = unit_pattern(&model, events)?;
    let grid = Grid::unit(Var::Loc(0), 50);
    let opts = CurveOptions { keep_draws: true, ..CurveOptions::default() };
    let curve = |method, seed| -> Result<(Vec<f64>, Vec<f64>), String> {
        let config = McmcConfig { allocation: method, ..quick_config(42_000, 2_000, 4, seed) };
        let chain = run_mcmc(&model, &pattern, config).map_err(err)?;
        let mut rng = rng_from_seed(seed, 1);
        let c = predictive_density(&model, &chain, &grid, &opts, &mut rng).map_err(err)?;
        let rows = c.draws.unwrap();
        let se = (0..grid.len()).map(|k| batch_se(&rows.iter().map(|r| r[k]).collect::<Vec<_>>(), 25)).collect();
        Ok((c.mean, se))
    };
    let (m1, s1) = curve(AllocationMethod::Collapsed, 41)?;
    let (m2, s2) = curve(AllocationMethod::Auxiliary, 42)?;
    let worst = (0..grid.len())
        .map(|k| (m1[k] - m2[k]).abs() / (s1[k].powi(2) + s2[k].powi(2)).sqrt())
        .fold(0.0, f64::max);
    outcome(worst < 3.0, format!("max |diff|/se {worst:.2} over 50 points, 10000 states each"))
}

/// All set partitions of `n` elements as restricted growth strings.
fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0; n];
    fn rec(i: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=max + 1 {
            cur[i] = v;
            rec(i + 1, max.max(v), cur, out);
        }
    }
    rec(1, 0, &mut cur, &mut out);
    out
}

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

/// Log marginal likelihood of `xs` under `x ~ N(mu, 1/p)`,
/// `mu | p ~ N(m, 1/(kappa p))`, `p ~ ga(a, b)`.
fn normal_gamma_marginal(xs: &[f64], m: f64, kappa: f64, a: f64, b: f64) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    let kn = kappa + n;
    let an = a + n / 2.0;
    let bn = b + ss / 2.0 + kappa * n * (mean - m).powi(2) / (2.0 * kn);
    ln_gamma(an) - ln_gamma(a) + a * b.ln() - an * bn.ln() + 0.5 * (kappa / kn).ln()
        - n / 2.0 * (2.0 * std::f64::consts::PI).ln()
}

fn dirichlet_multinomial(counts: &[usize], conc: &[f64]) -> f64 {
    let total: f64 = conc.iter().sum();
    let n: usize = counts.iter().sum();
    ln_gamma(total) - ln_gamma(total + n as f64)
        + counts.iter().zip(conc).map(|(&c, &a)| ln_gamma(a + c as f64) - ln_gamma(a)).sum::<f64>()
}

fn partition_enumeration() -> Result<Outcome, String> {
    // precision-form Wishart W(nu, omega) in one dimension is ga(nu, omega)
    let (kappa, nu, omega) = (1.0, 2.0, 2.0);
    let model = Model::new(
        1,
        schema(vec![("z", MarkKind::Categorical { levels: 2 })]),
        vec![
            BlockSpec::Gaussian {
                vars: vec![Var::Loc(0)],
                mean: vec![0.0],
                kappa,
                nu,
                omega: RandomMatrix::fixed(vec![vec![omega]]),
            },
            BlockSpec::Categorical { mark: 0, conc: vec![1.0, 1.0] },
        ],
    )
    .map_err(err)?;
    let pts = [(0.2, 0), (0.3, 0), (0.4, 1), (0.55, 0), (0.7, 1), (0.8, 1)];
    let events = pts.iter().map(|&(t, z)| Event { loc: vec![t], marks: vec![MarkValue::Category(z)] }).collect();
    let pattern = unit_pattern(&model, events)?;
    let logits: Vec<f64> = pts.iter().map(|&(t, _): &(f64, usize)| (t / (1.0 - t)).ln()).collect();

    let alpha: f64 = 1.0;
    let parts = set_partitions(6);
    let lw: Vec<f64> = parts
        .iter()
        .map(|p| {
            let k = p.iter().max().unwrap() + 1;
            (0..k)
                .map(|j| {
                    let mem: Vec<usize> = (0..6).filter(|&i| p[i] == j).collect();
                    let xs: Vec<f64> = mem.iter().map(|&i| logits[i]).collect();
                    let mut counts = [0, 0];
                    for &i in &mem {
                        counts[pts[i].1] += 1;
                    }
                    alpha.ln()
                        + ln_gamma(mem.len() as f64)
                        + normal_gamma_marginal(&xs, 0.0, kappa, nu, omega)
                        + dirichlet_multinomial(&counts, &[1.0, 1.0])
                })
                .sum()
        })
        .collect();
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = lw.iter().map(|w| (w - max).exp()).sum();
    let exact: HashMap<Vec<usize>, f64> = parts.iter().cloned().zip(lw.iter().map(|w| (w - max).exp() / z)).collect();

    let config = McmcConfig {
        iterations: 201_000,
        burn_in: 1_000,
        thin: 1,
        seed: 5,
        alpha: AlphaPrior::Fixed(alpha),
        allocation: AllocationMethod::Collapsed,
        ..McmcConfig::default()
    };
    let chain = run_mcmc(&model, &pattern, config).map_err(err)?;
    let mut freq: HashMap<Vec<usize>, f64> = HashMap::new();
    for s in &chain {
        *freq.entry(canonical(&s.allocations)).or_default() += 1.0 / chain.len() as f64;
    }
    let tv = 0.5 * exact.iter().map(|(p, pr)| (freq.get(p).copied().unwrap_or(0.0) - pr).abs()).sum::<f64>();
    outcome(
        parts.len() == 203 && freq.len() <= 203 && tv < 0.02,
        format!("{} partitions, {} sweeps, TV {tv:.4}", parts.len(), chain.len()),
    )
}

fn read_curve(path: &Path) -> Result<Vec<[f64; 4]>, String> {
    let text = std::fs::read_to_string(path).map_err(err)?;
    text.lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().map_err(err)).collect::<Result<_, _>>()?;
            Ok([v[0], v[1], v[2], v[3]])
        })
        .collect()
}

fn synthetic_benchmark() -> Result<Outcome, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut cfg = preset("sim51").unwrap();
    cfg.output = tmp.path().to_path_buf();
    let report = run_experiment(&cfg, Path::new(".")).map_err(err)?;
    let events = report.summary["events"].as_u64().unwrap_or(0);
    let m_mean = report.summary["m"]["mean"].as_f64().unwrap_or(f64::NAN);

    let truth = |t: f64| 250.0 * (10.0 * (1.0 - t).powi(9) + 60.0 * t.powi(3) * (1.0 - t).powi(2));
    let intensity = read_curve(&tmp.path().join("intensity.csv"))?;
    let covered = intensity.iter().filter(|r| r[2] <= truth(r[0]) && truth(r[0]) <= r[3]).count();
    let coverage = covered as f64 / intensity.len() as f64;

    let zprob = read_curve(&tmp.path().join("z-probability.csv"))?;
    let mut z_ok = true;
    let mut z_text = Vec::new();
    for t in [0.25, 0.5, 0.75] {
        let row = zprob.iter().min_by(|a, b| (a[0] - t).abs().total_cmp(&(b[0] - t).abs())).unwrap();
        z_ok &= (row[0] - t).abs() < 1e-9 && (row[1] - t * t).abs() <= 0.15;
        z_text.push(format!("{:.3}", row[1]));
    }
    let pass = intensity.len() == 100 && coverage >= 0.8 && (6.0..=25.0).contains(&m_mean) && z_ok;
    outcome(
        pass,
        format!(
            "N = {events}, coverage {coverage:.2}, mean m {m_mean:.2}, Pr(z=1|t) at 0.25/0.5/0.75 = {}",
            z_text.join("/")
        ),
    )
}

/// Location and conditional-mark normalization for 50 posterior draws of
/// one model.
struct Family {
    name: &'static str,
    model: Model,
    events: Vec<Event>,
}

fn families(rng: &mut Rng) -> Vec<Family> {
    let real = MarkKind::Continuous(Support::Real);
    let shifted = MarkKind::Continuous(Support::ShiftedPositive { offset: 9.5 });
    let positive = MarkKind::Continuous(Support::Positive);
    let beta = Beta::new(2.0, 3.0).unwrap();
    let std = Normal::new(0.0, 1.0).unwrap();
    let n = 80;
    let t1 = |rng: &mut Rng| beta.sample(rng);
    let mut out = Vec::new();

    let events = (0..n)
        .map(|_| {
            let t = t1(rng);
            let z = usize::from(rng.random::<f64>() < t);
            Event { loc: vec![t], marks: vec![MarkValue::Category(z), MarkValue::Real(4.0 * t + std.sample(rng))] }
        })
        .collect();
    out.push(Family {
        name: "beta",
        model: Model::new(
            1,
            schema(vec![("z", MarkKind::Categorical { levels: 2 }), ("y", real.clone())]),
            vec![
                BlockSpec::Beta { dim: 0, shape: 2.0, scale: RandomScale::random(1.0, 0.05) },
                BlockSpec::Categorical { mark: 0, conc: vec![0.5, 0.5] },
                BlockSpec::Gaussian {
                    vars: vec![Var::Mark(1)],
                    mean: vec![0.0],
                    kappa: 0.05,
                    nu: 2.0,
                    omega: RandomMatrix::random(1.0, vec![vec![1.0]]),
                },
            ],
        )
        .unwrap(),
        events,
    });

    let events = (0..n)
        .map(|_| {
            let t = 0.8 * rng.random::<f64>().powi(2);
            let y = Poisson::new(3.0 + 10.0 * t).unwrap().sample(rng) as u64;
            Event { loc: vec![t], marks: vec![MarkValue::Count(y)] }
        })
        .collect();
    out.push(Family {
        name: "uniform-scale",
        model: Model::new(
            1,
            schema(vec![("y", MarkKind::Count { lower: 0 })]),
            vec![
                BlockSpec::UniformScale { dim: 0, direction: Direction::Nonincreasing, a: 1.0, b: 1.0 },
                BlockSpec::Poisson { mark: 0, shape: 1.0, rate: RandomScale::fixed(0.2) },
            ],
        )
        .unwrap(),
        events,
    });

    let events = (0..n)
        .map(|_| {
            let t = t1(rng);
            let y = 10.0 + Poisson::new(5.0 + 30.0 * t).unwrap().sample(rng) as f64;
            Event { loc: vec![t], marks: vec![MarkValue::Real(y)] }
        })
        .collect();
    out.push(Family {
        name: "logit-normal joint",
        model: Model::new(
            1,
            schema(vec![("y", shifted)]),
            vec![BlockSpec::Gaussian {
                vars: vec![Var::Loc(0), Var::Mark(0)],
                mean: vec![0.0, 2.5],
                kappa: 0.1,
                nu: 3.0,
                omega: RandomMatrix::random(3.0, vec![vec![10.0, 0.0], vec![0.0, 20.0]]),
            }],
        )
        .unwrap(),
        events,
    });

    let events = (0..n)
        .map(|_| {
            let x = vec![t1(rng), rng.random::<f64>()];
            let y = (x[0] + std.sample(rng)).exp();
            Event { loc: x, marks: vec![MarkValue::Real(y)] }
        })
        .collect();
    out.push(Family {
        name: "sarmanov",
        model: Model::new(
            2,
            schema(vec![("y", positive.clone())]),
            vec![
                BlockSpec::Sarmanov { shape: [2.0, 2.0], scale: [RandomScale::random(1.0, 0.05), RandomScale::random(1.0, 0.05)] },
                BlockSpec::Gaussian {
                    vars: vec![Var::Mark(0)],
                    mean: vec![0.0],
                    kappa: 0.1,
                    nu: 2.0,
                    omega: RandomMatrix::random(1.0, vec![vec![1.0]]),
                },
            ],
        )
        .unwrap(),
        events,
    });

    let events = (0..n)
        .map(|_| {
            let x = vec![t1(rng), t1(rng)];
            let y = 2.0 + (2.0 + x[1] + 0.5 * std.sample(rng)).exp();
            Event { loc: x, marks: vec![MarkValue::Real(y)] }
        })
        .collect();
    out.push(Family {
        name: "logit-normal 3-d",
        model: Model::new(
            2,
            schema(vec![("y", MarkKind::Continuous(Support::ShiftedPositive { offset: 2.0 }))]),
            vec![BlockSpec::Gaussian {
                vars: vec![Var::Loc(0), Var::Loc(1), Var::Mark(0)],
                mean: vec![0.0, 0.0, 1.0],
                kappa: 0.01,
                nu: 4.0,
                omega: RandomMatrix::random(4.0, vec![vec![0.1, 0.0, 0.0], vec![0.0, 0.1, 0.0], vec![0.0, 0.0, 0.1]]),
            }],
        )
        .unwrap(),
        events,
    });
    out
}

/// Drop atoms whose location mass lies where no double can reach it: beta
/// margins with lower shape under 0.05 (mass below the smallest normal) or
/// upper shape under 0.5 (mass within an ulp of 1), and logit-normal
/// coordinates reaching beyond |logit t| = 25. Returns the renormalized
/// mixture and the dropped weight.
fn representable(g: &FiniteMixture) -> (FiniteMixture, f64) {
    let beta_ok = |mu: f64, tau: f64| mu * tau >= 0.05 && (1.0 - mu) * tau >= 0.5;
    let keep: Vec<usize> = (0..g.len())
        .filter(|&i| match &g.atoms[i].blocks[0] {
            BlockParams::Beta { mu, tau } => beta_ok(*mu, *tau),
            BlockParams::Sarmanov { mu, tau, .. } => beta_ok(mu[0], tau[0]) && beta_ok(mu[1], tau[1]),
            BlockParams::Gaussian { mean, cov } => {
                let d = mean.len();
                (0..d).all(|k| mean[k].abs() + 8.0 * cov[k * d + k].sqrt() <= 25.0)
            }
            _ => true,
        })
        .collect();
    let total: f64 = keep.iter().map(|&i| g.weights[i]).sum();
    let g = FiniteMixture::from_atoms(
        keep.iter().map(|&i| g.weights[i] / total).collect(),
        keep.iter().map(|&i| g.atoms[i].clone()).collect(),
    )
    .unwrap();
    (g, 1.0 - total)
}

/// Interval end points plus the jumps of any uniform-scale atoms, so that
/// each quadrature piece is smooth.
fn jump_points(g: &FiniteMixture) -> Vec<f64> {
    let mut cuts = vec![0.0, 1.0];
    for atom in &g.atoms {
        for b in &atom.blocks {
            if let BlockParams::UniformScale { theta } = b {
                cuts.extend([*theta, 1.0 - theta]);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts
}

fn mark_mass(cm: &ConditionalMark, kind: &MarkKind, x: &Point) -> Result<f64, String> {
    let h = |y: MarkValue| cm.density(x, &y).unwrap_or(f64::NAN);
    Ok(match kind {
        MarkKind::Categorical { levels } => (0..*levels).map(|k| h(MarkValue::Category(k))).sum(),
        MarkKind::Count { lower } => (*lower..*lower + 2000).map(|k| h(MarkValue::Count(k))).sum(),
        MarkKind::Continuous(Support::Real) => integrate_real(|y| h(MarkValue::Real(y)), 1e-9),
        MarkKind::Continuous(s) => integrate_upper(|y| h(MarkValue::Real(y)), s.offset().unwrap(), 1e-9),
    })
}

fn normalization() -> Result<Outcome, String> {
    let mut rng = rng_from_seed(7, 0);
    let mut worst_loc: f64 = 0.0;
    let mut worst_mark: f64 = 0.0;
    let mut checked = Vec::new();
    for fam in families(&mut rng) {
        let model = &fam.model;
        let pattern = unit_pattern(model, fam.events)?;
        let chain = run_mcmc(model, &pattern, quick_config(1100, 100, 20, 7)).map_err(err)?;
        let post = lambda_posterior(pattern.len(), LambdaPrior::Reference).map_err(err)?;
        let draws = posterior_draws(model, &chain, &post, 30, 1, &mut rng).map_err(err)?;
        let mut fam_loc: f64 = 0.0;
        let mut fam_mark: f64 = 0.0;
        let mut fam_dropped: f64 = 0.0;
        for d in &draws {
            let (g, dropped) = representable(&d.g);
            fam_dropped = fam_dropped.max(dropped);
            let mix = Mixture::new(model, &g, &model.location_mask()).map_err(err)?;
            let nm = model.n_marks();
            let total = if model.dims() == 1 {
                let cuts = jump_points(&d.g);
                cuts.windows(2).map(|w| integrate(|t| mix.density(&Point::location(vec![t], nm)), w[0], w[1], 1e-10)).sum()
            } else {
                integrate_unit_square(|a, b| mix.density(&Point::location(vec![a, b], nm)), 1e-6)
            };
            fam_loc = fam_loc.max((total - 1.0).abs());
            let x = Point::location((0..model.dims()).map(|_| 0.05 + 0.9 * rng.random::<f64>()).collect(), nm);
            for (k, m) in model.schema().marks.iter().enumerate() {
                let cm = ConditionalMark::new(model, &d.g, k, &model.location_mask()).map_err(err)?;
                fam_mark = fam_mark.max((mark_mass(&cm, &m.kind, &x)? - 1.0).abs());
            }
        }
        checked.push(format!("{} {:.1e}/{:.1e} (screened weight <= {:.1e})", fam.name, fam_loc, fam_mark, fam_dropped));
        worst_loc = worst_loc.max(fam_loc);
        worst_mark = worst_mark.max(fam_mark);
    }
    outcome(
        worst_loc < 1e-4 && worst_mark < 1e-3,
        format!("50 draws per family, max error location/mark: {}", checked.join(", ")),
    )
}

/// Known marked model: beta locations with independent normal and Poisson
/// marks per component, as (weight, mu, tau, mark mean, mark variance, rate).
const TRUTH: [(f64, f64, f64, f64, f64, f64); 3] =
    [(0.5, 0.2, 15.0, -2.0, 1.0, 2.0), (0.3, 0.6, 8.0, 1.0, 0.25, 6.0), (0.2, 0.85, 30.0, 4.0, 2.0, 12.0)];

fn known_truth() -> (Model, FiniteMixture) {
    let model = Model::new(
        1,
        schema(vec![("y", MarkKind::Continuous(Support::Real)), ("c", MarkKind::Count { lower: 0 })]),
        vec![
            BlockSpec::Beta { dim: 0, shape: 2.0, scale: RandomScale::fixed(20.0) },
            BlockSpec::Gaussian {
                vars: vec![Var::Mark(0)],
                mean: vec![0.0],
                kappa: 0.1,
                nu: 2.0,
                omega: RandomMatrix::fixed(vec![vec![1.0]]),
            },
            BlockSpec::Poisson { mark: 1, shape: 1.0, rate: RandomScale::fixed(0.2) },
        ],
    )
    .unwrap();
    let g = FiniteMixture::from_atoms(
        TRUTH.iter().map(|c| c.0).collect(),
        TRUTH
            .iter()
            .map(|&(_, mu, tau, m, v, rate)| ComponentParams {
                blocks: vec![
                    BlockParams::Beta { mu, tau },
                    BlockParams::Gaussian { mean: vec![m], cov: vec![v] },
                    BlockParams::Poisson { rate },
                ],
            })
            .collect(),
    )
    .unwrap();
    (model, g)
}

fn diagnostics_self_consistency() -> Result<Outcome, String> {
    let (model, g) = known_truth();
    let lambda = 300.0;
    let reps = 100;
    let mut pass = [0usize; 3];
    for r in 0..reps {
        let mut rng = rng_from_seed(800 + r, 0);
        let n = Poisson::new(lambda).unwrap().sample(&mut rng) as usize;
        let events = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let j = if u < TRUTH[0].0 { 0 } else if u < TRUTH[0].0 + TRUTH[1].0 { 1 } else { 2 };
                let (_, mu, tau, m, v, rate) = TRUTH[j];
                let t = Beta::new(mu * tau, (1.0 - mu) * tau).unwrap().sample(&mut rng);
                let y = Normal::new(m, v.sqrt()).unwrap().sample(&mut rng);
                let c = Poisson::new(rate).unwrap().sample(&mut rng) as u64;
                Event { loc: vec![t], marks: vec![MarkValue::Real(y), MarkValue::Count(c)] }
            })
            .collect();
        let pattern = unit_pattern(&model, events)?;
        let samples = [
            temporal_uniforms(&model, &g, lambda, &pattern).map_err(err)?,
            mark_pit_uniforms(&model, &g, &pattern, 0, &mut rng).map_err(err)?,
            mark_pit_uniforms(&model, &g, &pattern, 1, &mut rng).map_err(err)?,
        ];
        for (k, s) in samples.iter().enumerate() {
            if ks_p_value(ks_uniform_statistic(&s.u), s.u.len()) > 0.05 {
                pass[k] += 1;
            }
        }
    }
    outcome(
        pass.iter().all(|&p| p * 10 >= reps as usize * 9),
        format!("KS pass counts of {reps}: temporal {}, normal-mark PIT {}, count-mark PIT {}", pass[0], pass[1], pass[2]),
    )
}

// ------------------------------------------------------- dataset pipelines

/// Days from the start of the coal-mining record to 1914-01-01 and to
/// 1919-01-01.
const WW1_DAYS: (f64, f64) = (22937.0, 24763.0);

fn data_dir() -> PathBuf {
    std::env::var_os("PPMIX_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
            root.canonicalize().unwrap_or(root)
        })
}

fn run_preset(name: &str, base: &Path, out: &Path) -> Result<RunConfig, String> {
    let mut cfg = preset(name).unwrap();
    cfg.apply(&Overrides { output: Some(out.to_path_buf()), ..Default::default() });
    run_experiment(&cfg, base).map_err(|e| format!("{name}: {e}"))?;
    Ok(cfg)
}

fn dataset_pipelines() -> Result<Outcome, String> {
    let base = data_dir();
    let missing: Vec<String> = ["data/coal.csv", "data/longleaf.csv"]
        .iter()
        .filter(|f| !base.join(f).is_file())
        .map(|f| base.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return outcome(
            false,
            format!("dataset files not found: {}; set PPMIX_DATA_DIR to a directory containing data/", missing.join(", ")),
        );
    }
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut notes = Vec::new();
    for name in ["coal-direct", "coal-transformed", "pines"] {
        let out = tmp.path().join(name);
        run_preset(name, &base, &out)?;
        let m = Manifest::read(&out).map_err(err)?;
        let has = |p: &str| m.outputs.iter().any(|f| f.path.starts_with(p));
        if !(has("chain") && has("qq-") && m.outputs.len() > 4) {
            return outcome(false, format!("{name}: missing artifacts"));
        }
        notes.push(format!("{name} {} files", m.outputs.len()));
    }
    // determinism: rerun the cheapest preset and compare every artifact
    let again = tmp.path().join("coal-direct-again");
    run_preset("coal-direct", &base, &again)?;
    let first = Manifest::read(&tmp.path().join("coal-direct")).map_err(err)?;
    let second = Manifest::read(&again).map_err(err)?;
    let same = first.outputs.iter().zip(&second.outputs).all(|(a, b)| a.sha256 == b.sha256 || a.path == "manifest.json");
    if !same {
        return outcome(false, "coal-direct rerun differs".into());
    }
    let curve = read_curve(&tmp.path().join("coal-transformed").join("deaths-mean.csv"))?;
    let peak = (1..curve.len() - 1).find(|&k| {
        let t = curve[k][0];
        t > WW1_DAYS.0 && t < WW1_DAYS.1 && curve[k][1] > curve[k - 1][1] && curve[k][1] >= curve[k + 1][1]
    });
    notes.push(match peak {
        Some(k) => format!("deaths-mean peak at day {:.0}", curve[k][0]),
        None => "no deaths-mean peak inside 1914-1918".into(),
    });
    outcome(peak.is_some(), notes.join(", "))
}
