use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{CliError, CliResult};
use crate::sim::DgpConfig;

/// Values read from `--config`. A `[dgp]` table may override simulation
/// coefficients, e.g. `[dgp.cross] rp_scale = 0.2`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub treatment: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub outcomes: Option<Vec<String>>,
    pub strata: Option<String>,
    pub missing_token: Option<String>,
    pub estimators: Option<String>,
    pub basis: Option<String>,
    pub calibration_moments: Option<String>,
    pub ci: Option<String>,
    #[serde(rename = "B")]
    pub b: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub level: Option<f64>,
    pub out: Option<PathBuf>,
    pub nuisance_override: Option<PathBuf>,
    pub drop_nonmonotone: Option<bool>,
    pub drop_missing_strata: Option<bool>,
    pub setting: Option<String>,
    pub n: Option<usize>,
    pub cells: Option<String>,
    pub draws: Option<usize>,
    pub method: Option<String>,
    pub dgp: Option<DgpConfig>,
}

impl FileConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config file: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
