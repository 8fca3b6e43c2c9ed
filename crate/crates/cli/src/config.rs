//! Run configuration: data, model, sampler, functionals and diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ppmix::data::{MarkDescriptor, MarkKind, MarkSchema, ObservationWindow};
use ppmix::functionals::LambdaPrior;
use ppmix::kernels::{BlockSpec, Model, Var};
use ppmix::sampler::McmcConfig;
use ppmix::simulate::synthetic_schema;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    #[default]
    Fit,
    Functionals,
    Diagnose,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Functionals => "functionals",
            Command::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Command,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "one")]
    pub chains: usize,
    pub data: DataSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub functionals: FunctionalSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<CurveSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub source: DataSource,
    /// Native bounds per location coordinate.
    pub window: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub marks: Vec<MarkDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CSV file; relative paths resolve against the config file's directory.
    File { path: PathBuf },
    /// The synthetic temporal benchmark with binary and continuous marks.
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalSpec {
    pub truncation_tol: f64,
    pub draws_per_state: usize,
    pub lambda_prior: LambdaPrior,
    pub band: [f64; 2],
}

impl Default for FunctionalSpec {
    fn default() -> Self {
        Self { truncation_tol: 1e-6, draws_per_state: 1, lambda_prior: LambdaPrior::Reference, band: [0.05, 0.95] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticSpec {
    pub enabled: bool,
    pub level: f64,
}

impl Default for DiagnosticSpec {
    fn default() -> Self {
        Self { enabled: true, level: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Density,
    Intensity,
    Predictive,
    ConditionalDensity,
    ConditionalMean,
    ConditionalSlice,
}

/// One curve or surface to summarize; written to `<name>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub name: String,
    pub kind: CurveKind,
    pub axes: Vec<AxisSpec>,
    /// Mark whose conditional law is summarized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Mark value for `conditional_density`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Conditioning point for `conditional_slice`, in native units.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub at: BTreeMap<String, f64>,
}

/// Grid axis in native units: `values`, or `points` equally spaced interior
/// points of a location coordinate, or `points` spanning `range` inclusively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub var: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

/// Command-line overrides of config fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub chains: Option<usize>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Invalid(vec![e.to_string()]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(c) = o.command {
            self.command = c;
        }
        if let Some(s) = o.seed {
            self.mcmc.seed = s;
        }
        if let Some(n) = o.iterations {
            self.mcmc.iterations = n;
        }
        if let Some(b) = o.burn_in {
            self.mcmc.burn_in = b;
        }
        if let Some(t) = o.thin {
            self.mcmc.thin = t;
        }
        if let Some(k) = o.chains {
            self.chains = k;
        }
        if let Some(p) = &o.output {
            self.output = p.clone();
        }
    }

    pub fn dims(&self) -> usize {
        self.data.window.len()
    }

    pub fn window(&self) -> ppmix::Result<ObservationWindow> {
        ObservationWindow::new(self.data.window.iter().map(|b| (b[0], b[1])).collect())
    }

    pub fn schema(&self) -> ppmix::Result<MarkSchema> {
        MarkSchema::new(self.data.marks.clone())
    }

    pub fn model(&self) -> ppmix::Result<Model> {
        Model::new(self.dims(), self.schema()?, self.model.blocks.clone())
    }

    pub fn data_path(&self, base: &Path) -> Option<PathBuf> {
        match &self.data.source {
            DataSource::File { path } if path.is_relative() => Some(base.join(path)),
            DataSource::File { path } => Some(path.clone()),
            DataSource::Synthetic { .. } => None,
        }
    }

    /// Every problem with the configuration, not only the first.
    pub fn validate(&self, base: &Path) -> Vec<String> {
        let mut errs = Vec::new();
        match self.mcmc.validate() {
            Err(ppmix::Error::Config(msg)) => errs.extend(msg.split("; ").map(|m| format!("mcmc: {m}"))),
            Err(e) => errs.push(e.to_string()),
            Ok(()) => {}
        }
        if self.chains == 0 {
            errs.push("chains must be at least 1".into());
        }
        let dims = self.dims();
        if let Err(e) = self.window() {
            errs.push(e.to_string());
        }
        let schema = match self.schema() {
            Ok(s) => Some(s),
            Err(e) => {
                errs.push(e.to_string());
                None
            }
        };
        if let Some(s) = &schema {
            if let Err(e) = Model::new(dims, s.clone(), self.model.blocks.clone()) {
                errs.push(e.to_string());
            }
        }
        match &self.data.source {
            DataSource::File { .. } => {
                let p = self.data_path(base).expect("file source");
                if !p.is_file() {
                    errs.push(format!("data file {} does not exist", p.display()));
                }
            }
            DataSource::Synthetic { .. } => {
                if self.data.window != [[0.0, 1.0]] {
                    errs.push("the synthetic source needs window [[0.0, 1.0]]".into());
                }
                if schema.as_ref().is_some_and(|s| *s != synthetic_schema()) {
                    errs.push("the synthetic source needs marks z (categorical, 2 levels) and y (real)".into());
                }
            }
        }
        let f = &self.functionals;
        if !(f.truncation_tol > 0.0 && f.truncation_tol < 1.0) {
            errs.push(format!("functionals.truncation_tol {} outside (0,1)", f.truncation_tol));
        }
        if f.draws_per_state == 0 {
            errs.push("functionals.draws_per_state must be at least 1".into());
        }
        if !(f.band[0] > 0.0 && f.band[0] < f.band[1] && f.band[1] < 1.0) {
            errs.push(format!("functionals.band {:?} must satisfy 0 < lower < upper < 1", f.band));
        }
        if let LambdaPrior::Gamma { shape, rate } = f.lambda_prior {
            if !(shape > 0.0 && rate > 0.0) {
                errs.push("functionals.lambda_prior needs positive shape and rate".into());
            }
        }
        if !(self.diagnostics.level > 0.0 && self.diagnostics.level < 1.0) {
            errs.push(format!("diagnostics.level {} outside (0,1)", self.diagnostics.level));
        }
        if let Some(s) = &schema {
            let mut names = BTreeSet::new();
            for c in &self.curves {
                if !names.insert(c.name.as_str()) {
                    errs.push(format!("curve `{}` is defined twice", c.name));
                }
                self.check_curve(c, s, &mut errs);
            }
        }
        errs
    }

    fn check_curve(&self, c: &CurveSpec, schema: &MarkSchema, errs: &mut Vec<String>) {
        let tag = format!("curve `{}`", c.name);
        if c.name.is_empty() || !c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
            errs.push(format!("{tag}: names may use only letters, digits, '-' and '_'"));
        }
        let dims = self.dims();
        let mut vars = Vec::new();
        for a in &c.axes {
            match resolve_var(&a.var, dims, schema) {
                Some(v) => {
                    if vars.contains(&v) {
                        errs.push(format!("{tag}: variable `{}` appears twice", a.var));
                    }
                    vars.push(v);
                    check_axis(a, v, &tag, errs);
                }
                None => errs.push(format!("{tag}: unknown variable `{}`", a.var)),
            }
        }
        if c.axes.is_empty() {
            errs.push(format!("{tag}: needs at least one axis"));
        }
        let conditional = matches!(
            c.kind,
            CurveKind::ConditionalDensity | CurveKind::ConditionalMean | CurveKind::ConditionalSlice
        );
        let target = match (&c.target, conditional) {
            (Some(t), true) => match resolve_var(t, dims, schema) {
                Some(Var::Mark(k)) => Some(k),
                _ => {
                    errs.push(format!("{tag}: target `{t}` is not a mark"));
                    None
                }
            },
            (None, true) => {
                errs.push(format!("{tag}: conditional curves need a target mark"));
                None
            }
            (Some(_), false) => {
                errs.push(format!("{tag}: only conditional curves take a target"));
                None
            }
            (None, false) => None,
        };
        match c.kind {
            CurveKind::ConditionalDensity if c.value.is_none() => {
                errs.push(format!("{tag}: conditional_density needs a mark value"))
            }
            CurveKind::ConditionalDensity | CurveKind::ConditionalMean => {
                if let Some(k) = target {
                    if vars.contains(&Var::Mark(k)) {
                        errs.push(format!("{tag}: the target cannot also be a grid variable"));
                    }
                    if matches!(c.kind, CurveKind::ConditionalMean)
                        && matches!(schema.marks[k].kind, MarkKind::Categorical { .. })
                    {
                        errs.push(format!("{tag}: categorical marks have no conditional mean"));
                    }
                }
            }
            CurveKind::ConditionalSlice => {
                if let Some(k) = target {
                    if vars != [Var::Mark(k)] {
                        errs.push(format!("{tag}: a slice has exactly one axis, over the target mark"));
                    }
                }
                for d in 0..dims {
                    if !c.at.contains_key(&loc_name(d, dims)) {
                        errs.push(format!("{tag}: the slice point needs `{}`", loc_name(d, dims)));
                    }
                }
                for (name, v) in &c.at {
                    match resolve_var(name, dims, schema) {
                        Some(Var::Mark(j)) if Some(j) == target => {
                            errs.push(format!("{tag}: the slice point cannot fix the target"))
                        }
                        Some(Var::Loc(d)) => {
                            let [lo, hi] = self.data.window.get(d).copied().unwrap_or([0.0, 1.0]);
                            if !(*v > lo && *v < hi) {
                                errs.push(format!("{tag}: `{name}` = {v} lies outside the window"));
                            }
                        }
                        Some(_) => {}
                        None => errs.push(format!("{tag}: unknown variable `{name}`")),
                    }
                }
            }
            _ => {
                if c.value.is_some() || !c.at.is_empty() {
                    errs.push(format!("{tag}: `value` and `at` apply only to conditional curves"));
                }
            }
        }
    }
}

fn check_axis(a: &AxisSpec, v: Var, tag: &str, errs: &mut Vec<String>) {
    let ok = match (&a.values, a.points, a.range) {
        (Some(vals), None, None) => !vals.is_empty(),
        (None, Some(n), None) => n > 0 && matches!(v, Var::Loc(_)),
        (None, Some(n), Some(r)) => n > 1 && r[0] < r[1],
        _ => false,
    };
    if !ok {
        errs.push(format!(
            "{tag}: axis `{}` needs `values`, `points` (locations only) or `points` with `range`",
            a.var
        ));
    }
}

pub fn loc_name(d: usize, dims: usize) -> String {
    if dims == 1 {
        "t".into()
    } else {
        format!("x{}", d + 1)
    }
}

/// `t` (temporal) or `x1`, `x2` (spatial) for locations, otherwise a mark name.
pub fn resolve_var(name: &str, dims: usize, schema: &MarkSchema) -> Option<Var> {
    if let Some(d) = (0..dims).find(|&d| loc_name(d, dims) == name) {
        return Some(Var::Loc(d));
    }
    schema.marks.iter().position(|m| m.name == name).map(Var::Mark)
}
