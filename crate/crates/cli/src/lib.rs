//! Configuration-driven front end: simulate, fit, summarize and diagnose
//! marked Poisson process data with DP mixture models.

pub mod config;
pub mod manifest;
pub mod run;

use std::path::{Path, PathBuf};

pub use config::{Command, Overrides, RunConfig};
pub use run::{run_experiment, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Core(#[from] ppmix::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for configuration and input problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        use ppmix::Error as E;
        match self {
            CliError::Invalid(_) => 1,
            CliError::Core(
                E::Boundary { .. }
                | E::Parse { .. }
                | E::MissingColumn(_)
                | E::Support(_)
                | E::Param(_)
                | E::Contract(_)
                | E::Config(_)
                | E::Csv(_),
            ) => 1,
            CliError::Core(_) | CliError::Io(_) => 2,
        }
    }
}

/// Bundled experiment configurations.
pub const PRESETS: [(&str, &str); 4] = [
    ("sim51", include_str!("../presets/sim51.toml")),
    ("coal-direct", include_str!("../presets/coal-direct.toml")),
    ("coal-transformed", include_str!("../presets/coal-transformed.toml")),
    ("pines", include_str!("../presets/pines.toml")),
];

pub fn preset(name: &str) -> Option<RunConfig> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| RunConfig::parse(text).expect("bundled preset parses"))
}

/// Load a config file, or a bundled preset when no such file exists.
/// Returns the config and the directory relative data paths resolve against.
pub fn load_config(arg: &str) -> Result<(RunConfig, PathBuf), CliError> {
    let path = Path::new(arg);
    if path.is_file() {
        let cfg = RunConfig::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        return Ok((cfg, base));
    }
    preset(arg).map(|c| (c, PathBuf::from("."))).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
        CliError::Invalid(vec![format!("no config file `{arg}` and no preset of that name ({})", names.join(", "))])
    })
}
