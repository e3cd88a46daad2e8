//! Resolved per-subcommand settings, loaded from TOML and overlaid by flags.

use std::path::{Path, PathBuf};

use acopf::evaluation::DEFAULT_FEASIBILITY_TOL;
use acopf::powerflow::DEFAULT_TOL;
use acopf::training::TrainConfig;
use acopf::SolverKind;
use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

const DEFAULT_SAMPLES: usize = 5000;
const DEFAULT_SPLIT: [u32; 3] = [10, 1, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub case: Option<PathBuf>,
    pub samples: usize,
    pub seed: u64,
    pub split_ratio: [u32; 3],
    pub out: Option<PathBuf>,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        GenDataSettings {
            case: None,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            split_ratio: DEFAULT_SPLIT,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfSettings {
    pub case: Option<PathBuf>,
    pub solver: SolverKind,
    pub tol: f64,
    /// Solver default when unset
    pub max_iter: Option<usize>,
}

impl Default for PfSettings {
    fn default() -> Self {
        PfSettings {
            case: None,
            solver: SolverKind::Nr,
            tol: DEFAULT_TOL,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub case: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Sample count when no dataset file is given; the seed is `train.seed`
    pub samples: usize,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            case: None,
            data: None,
            samples: DEFAULT_SAMPLES,
            out: None,
            log: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub case: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub samples: usize,
    pub seed: Option<u64>,
    pub split_ratio: [u32; 3],
    pub split: Split,
    pub solver: SolverKind,
    pub pf_tol: f64,
    pub feasibility_tol: f64,
    pub label: Option<String>,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            checkpoint: None,
            case: None,
            data: None,
            samples: DEFAULT_SAMPLES,
            seed: None,
            split_ratio: DEFAULT_SPLIT,
            split: Split::Test,
            solver: SolverKind::Nr,
            pf_tol: DEFAULT_TOL,
            feasibility_tol: DEFAULT_FEASIBILITY_TOL,
            label: None,
            out: None,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub inputs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("reading config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.message())))
}

pub fn overlay<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

pub fn overlay_value<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Where the resolved config of a run writing `out` is stored.
pub fn echo_path(out: &Path) -> PathBuf {
    out.with_extension("config.toml")
}

/// Writes the resolved settings next to `out`, creating its directory.
pub fn echo<T: Serialize>(settings: &T, out: &Path) -> Result<(), CliError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = toml::to_string(settings).context("serializing the config")?;
    let path = echo_path(out);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
