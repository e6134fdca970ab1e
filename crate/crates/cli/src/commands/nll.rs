//! `nll`: per-sample negative log likelihood and bits-per-dimension along
//! the probability flow.

use crate::config::{load_config, parse_schedule, require_out, CliError, CliResult, DataSource};
use crate::output::{fmt_f, write_summary, CsvOut};
use crate::CommonArgs;
use clap::Args;
use df_lab::access::{
    DiracScoreOracle, DiracTraceOracle, ExactDiracTrace, ExactGaussianTrace, GaussianScoreOracle,
    HutchinsonTrace, ScoreProvider, TraceEval, VjpTrace,
};
use df_lab::ode::{nll_solve, NllResult};
use df_lab::{DiracDataset, Result as DfResult};
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct NllArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Initial law: point data or `gaussian`.
    #[arg(long)]
    pub data: Option<String>,
    /// Chessboard sample count when --data chessboard.
    #[arg(long)]
    pub data_n: Option<usize>,
    /// Noise schedule: ve|vp|subvp|edm.
    #[arg(long)]
    pub schedule: Option<String>,
    /// CSV of evaluation points; defaults to the data points themselves
    /// (the law's mean for gaussian).
    #[arg(long)]
    pub x_csv: Option<PathBuf>,
    /// Euler steps of the likelihood integration.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Trace accessor: exact|df-tm|vjp|hutchinson.
    #[arg(long)]
    pub trace_method: Option<String>,
    /// Hutchinson probe count.
    #[arg(long)]
    pub probes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NllConfig {
    pub data: String,
    pub data_n: usize,
    pub schedule: String,
    pub x_csv: Option<PathBuf>,
    pub steps: usize,
    pub trace_method: String,
    pub probes: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for NllConfig {
    fn default() -> Self {
        NllConfig {
            data: String::new(),
            data_n: 5000,
            schedule: "ve".into(),
            x_csv: None,
            steps: 1000,
            trace_method: "exact".into(),
            probes: 351,
            seed: 0,
            out: None,
        }
    }
}

fn solve_all<S: ScoreProvider + ?Sized, E: TraceEval + ?Sized>(
    sp: &S,
    te: &E,
    xs: &[Array1<f64>],
    steps: usize,
) -> DfResult<Vec<NllResult>> {
    xs.par_iter().map(|x| nll_solve(sp, te, x, steps)).collect()
}

pub fn run(args: &NllArgs) -> CliResult<()> {
    let mut cfg: NllConfig = load_config(args.common.config.as_deref())?;
    if let Some(v) = &args.data {
        cfg.data = v.clone();
    }
    if let Some(v) = args.data_n {
        cfg.data_n = v;
    }
    if let Some(v) = &args.schedule {
        cfg.schedule = v.clone();
    }
    if let Some(v) = &args.x_csv {
        cfg.x_csv = Some(v.clone());
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = &args.trace_method {
        cfg.trace_method = v.clone();
    }
    if let Some(v) = args.probes {
        cfg.probes = v;
    }
    if let Some(v) = args.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.common.out {
        cfg.out = Some(v.clone());
    }
    let out = require_out(cfg.out.clone())?;
    let sched = parse_schedule(&cfg.schedule)?;
    let source = DataSource::parse(&cfg.data)?;
    let gauss = source.gaussian();

    let xs: Vec<Array1<f64>> = match (&cfg.x_csv, &gauss) {
        (Some(path), _) => {
            let pts = DiracDataset::read_csv(path)?;
            pts.points()
                .rows()
                .into_iter()
                .map(|r| r.to_owned())
                .collect()
        }
        (None, Some(g)) => vec![g.mean().clone()],
        (None, None) => Vec::new(), // filled from the dataset below
    };

    let results: Vec<NllResult> = match &gauss {
        Some(g) => {
            let sp = GaussianScoreOracle::new(g, sched);
            if xs.iter().any(|x| x.len() != g.dim()) {
                return Err(CliError::Config(format!(
                    "evaluation points must have dimension {}",
                    g.dim()
                )));
            }
            match cfg.trace_method.as_str() {
                "exact" => solve_all(&sp, &ExactGaussianTrace { g, sched }, &xs, cfg.steps)?,
                "vjp" => solve_all(&sp, &VjpTrace { sp: &sp }, &xs, cfg.steps)?,
                "hutchinson" => solve_all(
                    &sp,
                    &HutchinsonTrace {
                        sp: &sp,
                        probes: cfg.probes,
                        seed: cfg.seed,
                    },
                    &xs,
                    cfg.steps,
                )?,
                "df-tm" => {
                    return Err(CliError::Config(
                        "df-tm needs point data (its trace oracle is empirical)".into(),
                    ))
                }
                other => {
                    return Err(CliError::Config(format!(
                        "unknown trace method '{other}' (expected exact|df-tm|vjp|hutchinson)"
                    )))
                }
            }
        }
        None => {
            let ds = source.load_points(cfg.data_n, cfg.seed)?;
            let xs: Vec<Array1<f64>> = if xs.is_empty() {
                ds.points()
                    .rows()
                    .into_iter()
                    .map(|r| r.to_owned())
                    .collect()
            } else {
                xs
            };
            if xs.iter().any(|x| x.len() != ds.dim()) {
                return Err(CliError::Config(format!(
                    "evaluation points must have dimension {}",
                    ds.dim()
                )));
            }
            let sp = DiracScoreOracle::new(&ds, sched);
            match cfg.trace_method.as_str() {
                "exact" => solve_all(&sp, &ExactDiracTrace { ds: &ds, sched }, &xs, cfg.steps)?,
                "df-tm" => {
                    let tp = DiracTraceOracle::new(&ds, sched);
                    solve_all(
                        &sp,
                        &df_lab::access::DfTmTrace { tp: &tp, sp: &sp },
                        &xs,
                        cfg.steps,
                    )?
                }
                "vjp" => solve_all(&sp, &VjpTrace { sp: &sp }, &xs, cfg.steps)?,
                "hutchinson" => solve_all(
                    &sp,
                    &HutchinsonTrace {
                        sp: &sp,
                        probes: cfg.probes,
                        seed: cfg.seed,
                    },
                    &xs,
                    cfg.steps,
                )?,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown trace method '{other}' (expected exact|df-tm|vjp|hutchinson)"
                    )))
                }
            }
        }
    };

    let mut csv = CsvOut::create(&out)?;
    csv.header(&["sample", "nll_nats", "bpd"])?;
    for (i, r) in results.iter().enumerate() {
        csv.row(&[i.to_string(), fmt_f(r.nll_nats), fmt_f(r.bpd)])?;
    }
    csv.finish()?;

    let n = results.len().max(1) as f64;
    let value = serde_json::json!({
        "command": "nll",
        "config": cfg,
        "samples": results.len(),
        "mean_nll_nats": results.iter().map(|r| r.nll_nats).sum::<f64>() / n,
        "mean_bpd": results.iter().map(|r| r.bpd).sum::<f64>() / n,
    });
    write_summary(&out, &value)?;
    Ok(())
}
