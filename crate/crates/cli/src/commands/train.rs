//! `train`: fit a noise-prediction (`eps`) or squared-norm (`tm`) net on a
//! point dataset and save its checkpoint, with the loss curve as CSV.

use crate::config::{load_config, parse_schedule, require_out, CliError, CliResult, DataSource};
use crate::output::{fmt_f, write_summary, CsvOut};
use crate::CommonArgs;
use clap::Args;
use df_lab::train::{train_eps, train_tm, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Which net to fit: eps|tm.
    #[arg(long)]
    pub net: Option<String>,
    /// Point data source.
    #[arg(long)]
    pub data: Option<String>,
    /// Chessboard sample count when --data chessboard.
    #[arg(long)]
    pub data_n: Option<usize>,
    /// Noise schedule: ve|vp|subvp|edm.
    #[arg(long)]
    pub schedule: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub net: String,
    pub data: String,
    pub data_n: usize,
    pub schedule: String,
    pub out: Option<PathBuf>,
    /// Optimizer and architecture settings.
    pub train: TrainConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            net: "eps".into(),
            data: String::new(),
            data_n: 5000,
            schedule: "ve".into(),
            out: None,
            train: TrainConfig::default(),
        }
    }
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut cfg: TrainCmdConfig = load_config(args.common.config.as_deref())?;
    if let Some(v) = &args.net {
        cfg.net = v.clone();
    }
    if let Some(v) = &args.data {
        cfg.data = v.clone();
    }
    if let Some(v) = args.data_n {
        cfg.data_n = v;
    }
    if let Some(v) = &args.schedule {
        cfg.schedule = v.clone();
    }
    if let Some(v) = args.common.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = &args.common.out {
        cfg.out = Some(v.clone());
    }
    let out = require_out(cfg.out.clone())?;
    let sched = parse_schedule(&cfg.schedule)?;
    let source = DataSource::parse(&cfg.data)?;
    let ds = source.load_points(cfg.data_n, cfg.train.seed)?;

    let outcome = match cfg.net.as_str() {
        "eps" => train_eps(&ds, &sched, &cfg.train)?,
        "tm" => train_tm(&ds, &sched, &cfg.train)?,
        other => {
            return Err(CliError::Config(format!(
                "unknown net '{other}' (expected eps|tm)"
            )))
        }
    };
    outcome.net.save(&out)?;

    let loss_path = PathBuf::from(format!("{}.loss.csv", out.display()));
    let mut csv = CsvOut::create(&loss_path)?;
    csv.header(&["step", "loss"])?;
    for (step, loss) in outcome.loss_history.iter().enumerate() {
        csv.row(&[step.to_string(), fmt_f(*loss)])?;
    }
    csv.finish()?;

    let value = serde_json::json!({
        "command": "train",
        "config": cfg,
        "param_count": outcome.net.param_count(),
        "final_loss": outcome.loss_history.last().copied().unwrap_or(f64::NAN),
    });
    write_summary(&out, &value)?;
    Ok(())
}
