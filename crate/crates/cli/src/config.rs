//! Config plumbing: failure classes with their exit codes, JSON config
//! loading with flag overrides, and the `--data` / `--schedule` grammars.

use df_lab::{DfError, DiracDataset, GaussianInitial, NoiseSchedule};
use serde::de::DeserializeOwned;
use std::path::{Path, PathBuf};

/// CLI failure classes; `main` maps `Config` to exit code 2 and `Numeric`
/// to exit code 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<DfError> for CliError {
    fn from(e: DfError) -> Self {
        match &e {
            DfError::NonFinite { .. } | DfError::NotSpd { .. } | DfError::Training(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parse the JSON config file into a command's config struct, or start
/// from defaults when no file is given. Unknown keys are rejected.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
}

/// The merged `--out` path; absent everywhere is a config error.
pub fn require_out(out: Option<PathBuf>) -> CliResult<PathBuf> {
    out.ok_or_else(|| CliError::Config("an output path is required (--out or config `out`)".into()))
}

/// Schedule names accepted by `--schedule`.
pub fn parse_schedule(name: &str) -> CliResult<NoiseSchedule> {
    match name {
        "ve" => Ok(NoiseSchedule::ve_default()),
        "vp" => Ok(NoiseSchedule::vp_default()),
        "subvp" => Ok(NoiseSchedule::sub_vp_default()),
        "edm" => Ok(NoiseSchedule::edm()),
        other => Err(CliError::Config(format!(
            "unknown schedule '{other}' (expected ve|vp|subvp|edm)"
        ))),
    }
}

/// The `--data` grammar: a builtin name or a path to a CSV of points.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Affine3,
    Nonaffine3,
    Chessboard,
    Gaussian,
    Csv(PathBuf),
}

impl DataSource {
    pub fn parse(arg: &str) -> CliResult<Self> {
        match arg {
            "" => Err(CliError::Config(
                "a data source is required (--data or config `data`)".into(),
            )),
            "affine3" => Ok(DataSource::Affine3),
            "nonaffine3" => Ok(DataSource::Nonaffine3),
            "chessboard" => Ok(DataSource::Chessboard),
            "gaussian" => Ok(DataSource::Gaussian),
            other if other.ends_with(".csv") => Ok(DataSource::Csv(PathBuf::from(other))),
            other => Err(CliError::Config(format!(
                "unknown data source '{other}' \
                 (expected affine3|nonaffine3|chessboard|gaussian|<path>.csv)"
            ))),
        }
    }

    /// Materialize a point dataset. `chessboard` draws `chessboard_n`
    /// points from the given seed; the Gaussian law has no points.
    pub fn load_points(&self, chessboard_n: usize, seed: u64) -> CliResult<DiracDataset> {
        match self {
            DataSource::Affine3 => Ok(DiracDataset::affine3()),
            DataSource::Nonaffine3 => Ok(DiracDataset::nonaffine3()),
            DataSource::Chessboard => Ok(df_lab::train::gen_chessboard(chessboard_n, seed)?),
            DataSource::Csv(path) => Ok(DiracDataset::read_csv(path)?),
            DataSource::Gaussian => Err(CliError::Config(
                "this command needs point data; 'gaussian' is a parametric law".into(),
            )),
        }
    }

    /// The probe Gaussian when this source names it.
    pub fn gaussian(&self) -> Option<GaussianInitial> {
        matches!(self, DataSource::Gaussian).then(GaussianInitial::probe)
    }
}

/// Parse a comma-separated float list (`--t-grid`, `--x-ref`).
pub fn parse_float_list(arg: &str, what: &str) -> CliResult<Vec<f64>> {
    arg.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad {what} entry '{s}'")))
        })
        .collect()
}
