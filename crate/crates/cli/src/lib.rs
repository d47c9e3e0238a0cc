//! Experiment driver: configuration, execution and result emission.
//!
//! Every run writes its CSV/JSON artifacts plus a `manifest.json` into one
//! output directory. Numeric outputs depend only on the config and seed.

pub mod config;
pub mod experiments;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub use config::{Experiment, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: ntk_core::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// 1 for configuration and input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Core { source, .. } => match source {
                ntk_core::Error::Numerical(_)
                | ntk_core::Error::Divergence { .. }
                | ntk_core::Error::Undefined(_) => 2,
                _ => 1,
            },
            _ => 1,
        }
    }
}

/// Attaches experiment context to core errors.
pub(crate) trait Context<T> {
    fn context(self, what: &str) -> Result<T, RunError>;
}

impl<T> Context<T> for ntk_core::Result<T> {
    fn context(self, what: &str) -> Result<T, RunError> {
        self.map_err(|source| RunError::Core {
            context: what.to_string(),
            source,
        })
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config_sha256: String,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    started_unix_seconds: u64,
    wall_clock_seconds: f64,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

/// Resolves the output directory: explicit value, else `results/<experiment>`.
pub fn output_dir(cfg: &ExperimentConfig, experiment: Experiment) -> PathBuf {
    cfg.out
        .clone()
        .unwrap_or_else(|| Path::new("results").join(experiment.name()))
}

/// Validates `cfg`, runs `experiment` and writes the manifest. Returns the
/// names of the files written (manifest excluded).
pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<Vec<String>, RunError> {
    let mut cfg = cfg.clone();
    if let Some(file_exp) = cfg.experiment {
        if file_exp != experiment {
            return Err(RunError::Config(format!(
                "experiment: config names '{}' but the subcommand is '{}'",
                file_exp.name(),
                experiment.name()
            )));
        }
    }
    cfg.experiment = Some(experiment);
    cfg.validate()?;
    let out = output_dir(&cfg, experiment);
    std::fs::create_dir_all(&out).map_err(|source| RunError::Io {
        path: out.clone(),
        source,
    })?;

    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    let mut files = experiments::dispatch(experiment, &cfg, &out)?;
    files.sort();

    let manifest = Manifest {
        experiment: experiment.name(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        versions: BTreeMap::from([
            ("ntk-lab", env!("CARGO_PKG_VERSION")),
            ("ntk-core", ntk_core::VERSION),
        ]),
        started_unix_seconds: started,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        files: files.clone(),
        config: &cfg,
    };
    let path = out.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, body).map_err(|source| RunError::Io { path, source })?;
    Ok(files)
}
