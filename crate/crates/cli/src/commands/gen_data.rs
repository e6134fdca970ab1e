//! `gen-data`: write a dataset CSV, or the Gaussian law as JSON.

use crate::config::{load_config, require_out, CliError, CliResult, DataSource};
use crate::output::{fmt_f, write_summary, CsvOut};
use crate::CommonArgs;
use clap::Args;
use df_lab::DiracDataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset kind: affine3|nonaffine3|chessboard|gaussian|<path>.csv.
    #[arg(long)]
    pub data: Option<String>,
    /// Sample count for chessboard or Gaussian draws (0 with gaussian
    /// writes the law itself as JSON).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub data: String,
    pub n: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            data: String::new(),
            n: 5000,
            seed: 0,
            out: None,
        }
    }
}

fn write_points_csv(out: &Path, ds: &DiracDataset) -> CliResult<()> {
    let mut csv = CsvOut::create(out)?;
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    csv.header(&header_refs)?;
    for row in ds.points().rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt_f(*v)).collect();
        csv.row(&cells)?;
    }
    csv.finish()?;
    Ok(())
}

pub fn run(args: &GenDataArgs) -> CliResult<()> {
    let mut cfg: GenDataConfig = load_config(args.common.config.as_deref())?;
    if let Some(v) = &args.data {
        cfg.data = v.clone();
    }
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(v) = args.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.common.out {
        cfg.out = Some(v.clone());
    }
    let out = require_out(cfg.out.clone())?;
    let source = DataSource::parse(&cfg.data)?;

    if let Some(g) = source.gaussian() {
        if cfg.n == 0 {
            // No samples requested: the law itself is the artifact.
            let value = serde_json::json!({
                "command": "gen-data",
                "config": cfg,
                "mean": g.mean().to_vec(),
                "cov": g.cov().rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            });
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&value).expect("law serializes") + "\n",
            )
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", out.display())))?;
            write_summary(&out, &value)?;
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rows: Vec<Vec<f64>> = (0..cfg.n).map(|_| g.sample(&mut rng).to_vec()).collect();
        let ds = DiracDataset::from_rows(&rows)?;
        write_points_csv(&out, &ds)?;
        let value = serde_json::json!({
            "command": "gen-data",
            "config": cfg,
            "rows": ds.n(),
            "dim": ds.dim(),
        });
        write_summary(&out, &value)?;
        return Ok(());
    }

    let ds = source.load_points(cfg.n, cfg.seed)?;
    write_points_csv(&out, &ds)?;
    let value = serde_json::json!({
        "command": "gen-data",
        "config": cfg,
        "rows": ds.n(),
        "dim": ds.dim(),
    });
    write_summary(&out, &value)?;
    Ok(())
}
