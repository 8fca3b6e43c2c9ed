//! The experiment pipeline: data, MCMC, functionals, diagnostics, manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ppmix::data::{load_pattern, MarkedPointPattern};
use ppmix::diagnostics::{diagnose, QqSummary};
use ppmix::functionals::{
    conditional_density_curve, conditional_mean_curve, conditional_slice_curve, density_curve, intensity_curve,
    lambda_posterior, mark_value, posterior_draws, predictive_density, CurveOptions, CurveSummary, Grid,
    PosteriorDraw,
};
use ppmix::kernels::{Model, Point, Var, VarMask};
use ppmix::measure::choose_truncation;
use ppmix::sampler::{read_chain, run_mcmc, write_chain, ChainState, McmcConfig};
use ppmix::simulate::simulate_synthetic;
use ppmix::stats::{ks_p_value, quantile_sorted};
use ppmix::{rng_from_seed, Error};
use serde_json::{json, Value};

use crate::config::{resolve_var, AxisSpec, Command, CurveKind, CurveSpec, DataSource, RunConfig};
use crate::manifest::{sha256_hex, FileEntry, Manifest};
use crate::CliError;

/// RNG streams of the post-processing stages; chains use stream 0.
pub const FUNCTIONALS_STREAM: u64 = 1 << 20;
pub const DIAGNOSTICS_STREAM: u64 = (1 << 20) + 1;

pub const DATA_FILE: &str = "data.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output: PathBuf,
    pub files: Vec<String>,
    pub summary: Value,
}

pub fn chain_file(c: usize, chains: usize) -> String {
    if chains == 1 {
        "chain.jsonl".into()
    } else {
        format!("chain-{c}.jsonl")
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    inputs: Vec<FileEntry>,
    outputs: Vec<String>,
    summary: serde_json::Map<String, Value>,
}

impl Run<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn input(&mut self, path: &Path, label: String) -> Result<(), CliError> {
        self.inputs.push(FileEntry::of(path, label)?);
        Ok(())
    }
}

/// Run the configured command. Relative data paths resolve against `base`;
/// the output directory is taken as given.
pub fn run_experiment(cfg: &RunConfig, base: &Path) -> Result<RunReport, CliError> {
    let mut errs = cfg.validate(base);
    if cfg.command == Command::Simulate && !matches!(cfg.data.source, DataSource::Synthetic { .. }) {
        errs.push("simulate needs the synthetic data source".into());
    }
    if !errs.is_empty() {
        return Err(CliError::Invalid(errs));
    }
    let model = cfg.model()?;
    std::fs::create_dir_all(&cfg.output)?;
    let mut run = Run { cfg, out: cfg.output.clone(), inputs: Vec::new(), outputs: Vec::new(), summary: Default::default() };

    let pattern = match &cfg.data.source {
        DataSource::File { .. } => {
            let path = cfg.data_path(base).expect("file source");
            let p = load_pattern(&path, cfg.window()?, cfg.schema()?)?;
            run.input(&path, path.display().to_string())?;
            p
        }
        DataSource::Synthetic { seed } => {
            let p = simulate_synthetic(*seed)?;
            let w = run.create(DATA_FILE)?;
            p.write_csv(w)?;
            p
        }
    };
    run.summary.insert("events".into(), json!(pattern.len()));

    match cfg.command {
        Command::Simulate => {}
        Command::Fit => {
            let chains = fit(&mut run, &model, &pattern)?;
            let draws = draws(&mut run, &model, &pattern, &chains)?;
            curves(&mut run, &model, &chains, &draws)?;
            if cfg.diagnostics.enabled {
                diagnostics(&mut run, &model, &pattern, &draws)?;
            }
        }
        Command::Functionals | Command::Diagnose => {
            let chains = load_chains(&mut run)?;
            chain_summary(&mut run, &chains);
            let draws = draws(&mut run, &model, &pattern, &chains)?;
            if cfg.command == Command::Functionals {
                curves(&mut run, &model, &chains, &draws)?;
            } else {
                diagnostics(&mut run, &model, &pattern, &draws)?;
            }
        }
    }

    let summary = Value::Object(std::mem::take(&mut run.summary));
    let mut w = run.create(SUMMARY_FILE)?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(Error::from)?;
    writeln!(w)?;
    drop(w);

    let config = cfg.to_toml();
    let outputs = run
        .outputs
        .iter()
        .map(|f| FileEntry::of(&run.out.join(f), f.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        command: cfg.command,
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.mcmc.seed,
        chains: cfg.chains,
        config_sha256: sha256_hex(config.as_bytes()),
        config,
        notes: cfg.notes.clone(),
        inputs: run.inputs,
        outputs,
    };
    manifest.write(&run.out)?;
    Ok(RunReport { output: run.out, files: run.outputs, summary })
}

fn chain_config(cfg: &McmcConfig, c: usize) -> McmcConfig {
    McmcConfig { seed: cfg.seed.wrapping_add(c as u64), ..cfg.clone() }
}

fn fit(run: &mut Run, model: &Model, pattern: &MarkedPointPattern) -> Result<Vec<Vec<ChainState>>, CliError> {
    let k = run.cfg.chains;
    let results: Vec<ppmix::Result<Vec<ChainState>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..k)
            .map(|c| {
                let cfg = chain_config(&run.cfg.mcmc, c);
                s.spawn(move || run_mcmc(model, pattern, cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let chains = results.into_iter().collect::<ppmix::Result<Vec<_>>>()?;
    for (c, states) in chains.iter().enumerate() {
        let w = run.create(&chain_file(c, k))?;
        write_chain(w, states)?;
    }
    let mut w = csv::Writer::from_writer(run.create(TRACE_FILE)?);
    w.write_record(["chain", "iteration", "alpha", "m"]).map_err(Error::from)?;
    for (c, states) in chains.iter().enumerate() {
        for s in states {
            w.write_record([c.to_string(), s.iteration.to_string(), format!("{:?}", s.alpha), s.m.to_string()])
                .map_err(Error::from)?;
        }
    }
    w.flush()?;
    chain_summary(run, &chains);
    Ok(chains)
}

fn load_chains(run: &mut Run) -> Result<Vec<Vec<ChainState>>, CliError> {
    let k = run.cfg.chains;
    (0..k)
        .map(|c| {
            let name = chain_file(c, k);
            let path = run.out.join(&name);
            if !path.is_file() {
                return Err(CliError::Invalid(vec![format!(
                    "chain file {} not found; run `fit` first",
                    path.display()
                )]));
            }
            run.input(&path, name)?;
            Ok(read_chain(BufReader::new(File::open(&path)?))?)
        })
        .collect()
}

fn stats(mut v: Vec<f64>) -> Value {
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    json!({ "mean": mean, "q05": quantile_sorted(&v, 0.05), "q95": quantile_sorted(&v, 0.95) })
}

fn chain_summary(run: &mut Run, chains: &[Vec<ChainState>]) {
    let all: Vec<&ChainState> = chains.iter().flatten().collect();
    run.summary.insert("saved_states".into(), json!(all.len()));
    if all.is_empty() {
        return;
    }
    run.summary.insert("m".into(), stats(all.iter().map(|s| s.m as f64).collect()));
    run.summary.insert("alpha".into(), stats(all.iter().map(|s| s.alpha).collect()));
}

fn draws(
    run: &mut Run,
    model: &Model,
    pattern: &MarkedPointPattern,
    chains: &[Vec<ChainState>],
) -> Result<Vec<PosteriorDraw>, CliError> {
    let f = &run.cfg.functionals;
    let mut rng = rng_from_seed(run.cfg.mcmc.seed, FUNCTIONALS_STREAM);
    let l = choose_truncation(&run.cfg.mcmc.alpha, f.truncation_tol, &mut rng)?;
    let post = lambda_posterior(pattern.len(), f.lambda_prior)?;
    run.summary.insert("truncation".into(), json!(l));
    let scale = pattern.window.volume();
    run.summary.insert(
        "integrated_intensity".into(),
        json!({ "shape": post.shape, "rate": post.rate, "mean": post.mean(), "window_volume": scale }),
    );
    let pooled: Vec<ChainState> = chains.iter().flatten().cloned().collect();
    Ok(posterior_draws(model, &pooled, &post, l, f.draws_per_state, &mut rng)?)
}

/// Unit-window grid of an axis, plus its native offset and width for
/// location axes.
fn axis_values(cfg: &RunConfig, a: &AxisSpec, v: Var) -> (Vec<f64>, Option<(f64, f64)>) {
    let native: Vec<f64> = match (&a.values, a.points, a.range) {
        (Some(vals), _, _) => vals.clone(),
        (None, Some(n), Some([lo, hi])) => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        (None, Some(n), None) => {
            let unit = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
            let Var::Loc(d) = v else { unreachable!("validated") };
            let [lo, hi] = cfg.data.window[d];
            return (unit, Some((lo, hi - lo)));
        }
        _ => unreachable!("validated"),
    };
    match v {
        Var::Loc(d) => {
            let [lo, hi] = cfg.data.window[d];
            (native.iter().map(|x| (x - lo) / (hi - lo)).collect(), Some((lo, hi - lo)))
        }
        Var::Mark(_) => (native, None),
    }
}

fn curve(
    cfg: &RunConfig,
    model: &Model,
    chains: &[Vec<ChainState>],
    draws: &[PosteriorDraw],
    spec: &CurveSpec,
) -> Result<CurveSummary, CliError> {
    let dims = cfg.dims();
    let schema = model.schema();
    let opts = CurveOptions { lower: cfg.functionals.band[0], upper: cfg.functionals.band[1], keep_draws: false };
    let vars: Vec<Var> = spec.axes.iter().map(|a| resolve_var(&a.var, dims, schema).expect("validated")).collect();
    let axes: Vec<(Vec<f64>, Option<(f64, f64)>)> =
        spec.axes.iter().zip(&vars).map(|(a, &v)| axis_values(cfg, a, v)).collect();
    let target = spec.target.as_ref().and_then(|t| match resolve_var(t, dims, schema) {
        Some(Var::Mark(k)) => Some(k),
        _ => None,
    });
    let mut summary = if spec.kind == CurveKind::ConditionalSlice {
        let k = target.expect("validated");
        let mut x = Point::location(vec![0.5; dims], model.n_marks());
        let mut given = VarMask::none(dims, model.n_marks());
        for (name, &v) in &spec.at {
            match resolve_var(name, dims, schema).expect("validated") {
                Var::Loc(d) => {
                    let [lo, hi] = cfg.data.window[d];
                    x.loc[d] = (v - lo) / (hi - lo);
                    given = given.with(Var::Loc(d));
                }
                Var::Mark(j) => {
                    x.marks[j] = Some(mark_value(&schema.marks[j].kind, v)?);
                    given = given.with(Var::Mark(j));
                }
            }
        }
        conditional_slice_curve(model, draws, k, &given, &x, &axes[0].0, &opts)?
    } else {
        let grid = Grid::new(vars.clone(), axes.iter().map(|a| a.0.clone()).collect())?;
        match spec.kind {
            CurveKind::Density => density_curve(model, draws, &grid, &opts)?,
            CurveKind::Intensity => intensity_curve(model, draws, &grid, &opts)?,
            CurveKind::Predictive => {
                let pooled: Vec<ChainState> = chains.iter().flatten().cloned().collect();
                let mut rng = rng_from_seed(cfg.mcmc.seed, FUNCTIONALS_STREAM + 2);
                predictive_density(model, &pooled, &grid, &opts, &mut rng)?
            }
            CurveKind::ConditionalDensity => {
                let k = target.expect("validated");
                let y = mark_value(&schema.marks[k].kind, spec.value.expect("validated"))?;
                conditional_density_curve(model, draws, k, &y, &grid, &opts)?
            }
            CurveKind::ConditionalMean => conditional_mean_curve(model, draws, target.expect("validated"), &grid, &opts)?,
            CurveKind::ConditionalSlice => unreachable!(),
        }
    };
    if spec.kind != CurveKind::ConditionalSlice {
        let mut width = 1.0;
        for (i, (_, native)) in axes.iter().enumerate() {
            if let Some((lo, w)) = native {
                summary.rescale_axis(i, *lo, *w);
                width *= w;
            }
        }
        if matches!(spec.kind, CurveKind::Density | CurveKind::Intensity | CurveKind::Predictive) {
            summary.scale_values(1.0 / width);
        }
    }
    Ok(summary)
}

fn curves(
    run: &mut Run,
    model: &Model,
    chains: &[Vec<ChainState>],
    draws: &[PosteriorDraw],
) -> Result<(), CliError> {
    for spec in &run.cfg.curves {
        let summary = curve(run.cfg, model, chains, draws, spec)?;
        let w = run.create(&format!("{}.csv", spec.name))?;
        summary.write_csv(w)?;
    }
    Ok(())
}

fn qq_file(q: &QqSummary) -> String {
    format!("qq-{}.csv", q.kind.label())
}

fn diagnostics(
    run: &mut Run,
    model: &Model,
    pattern: &MarkedPointPattern,
    draws: &[PosteriorDraw],
) -> Result<(), CliError> {
    if pattern.is_empty() {
        return Ok(());
    }
    let mut rng = rng_from_seed(run.cfg.mcmc.seed, DIAGNOSTICS_STREAM);
    let qs = diagnose(model, draws, pattern, run.cfg.diagnostics.level, &mut rng)?;
    let mut ks = serde_json::Map::new();
    for q in &qs {
        let w = run.create(&qq_file(q))?;
        q.write_csv(w)?;
        let pass = q.ks.iter().filter(|&&d| ks_p_value(d, pattern.len()) > 0.05).count();
        ks.insert(
            q.kind.label(),
            json!({ "ks_mean": q.ks.iter().sum::<f64>() / q.ks.len() as f64, "pass_rate_5pct": pass as f64 / q.ks.len() as f64 }),
        );
    }
    run.summary.insert("diagnostics".into(), Value::Object(ks));
    Ok(())
}
