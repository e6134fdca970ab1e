//! `trace-bench`: compare the trace accessors (exact, two-net surrogate,
//! VJP diagonal probing, Hutchinson) on diffused draws, with per-method
//! kernel timings.
//!
//! Without checkpoints the surrogate and VJP routes run on the oracle
//! providers (so their errors reflect the route, not a trained net); with
//! `--eps-net`/`--tm-net` they run on the loaded nets.

use crate::config::{
    load_config, parse_float_list, parse_schedule, require_out, CliError, CliResult, DataSource,
};
use crate::output::{fmt_f, ms_since, write_summary, CsvOut};
use crate::CommonArgs;
use clap::Args;
use df_lab::access::{
    df_tm_trace, trace_hutchinson, trace_via_vjp, DiracScoreOracle, DiracTraceOracle,
    ScoreProvider, TraceProvider,
};
use df_lab::oracle::fisher_trace;
use df_lab::train::{MlpNet, MlpScoreProvider, MlpTraceProvider};
use df_lab::Result as DfResult;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Args)]
pub struct TraceBenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Point data source.
    #[arg(long)]
    pub data: Option<String>,
    /// Chessboard sample count when --data chessboard.
    #[arg(long)]
    pub data_n: Option<usize>,
    /// Noise schedule: ve|vp|subvp|edm.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Comma-separated evaluation times.
    #[arg(long)]
    pub t_grid: Option<String>,
    /// Diffused evaluation points per time.
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Hutchinson probe count.
    #[arg(long)]
    pub probes: Option<usize>,
    /// Trained noise-prediction net checkpoint.
    #[arg(long)]
    pub eps_net: Option<PathBuf>,
    /// Trained trace-prediction net checkpoint.
    #[arg(long)]
    pub tm_net: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceBenchConfig {
    pub data: String,
    pub data_n: usize,
    pub schedule: String,
    pub t_grid: Vec<f64>,
    pub n_points: usize,
    pub probes: usize,
    pub eps_net: Option<PathBuf>,
    pub tm_net: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for TraceBenchConfig {
    fn default() -> Self {
        TraceBenchConfig {
            data: String::new(),
            data_n: 5000,
            schedule: "ve".into(),
            t_grid: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            n_points: 64,
            probes: 351,
            eps_net: None,
            tm_net: None,
            seed: 0,
            out: None,
        }
    }
}

struct MethodResult {
    rel_err: f64,
    wall_ms: f64,
}

/// Aggregate relative error against `exact` (summed absolute error over
/// summed absolute trace, which stays meaningful where the exact trace
/// crosses zero), timing only the estimator loop.
fn bench<F>(points: &[Array1<f64>], exact: &[f64], eval: F) -> DfResult<MethodResult>
where
    F: Fn(usize, &Array1<f64>) -> DfResult<f64> + Sync,
{
    let start = Instant::now();
    let estimates: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| eval(i, x))
        .collect::<DfResult<_>>()?;
    let wall_ms = ms_since(start);
    let denom = exact
        .iter()
        .map(|ex| ex.abs())
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let rel_err = estimates
        .iter()
        .zip(exact.iter())
        .map(|(est, ex)| (est - ex).abs())
        .sum::<f64>()
        / denom;
    Ok(MethodResult { rel_err, wall_ms })
}

pub fn run(args: &TraceBenchArgs) -> CliResult<()> {
    let mut cfg: TraceBenchConfig = load_config(args.common.config.as_deref())?;
    if let Some(v) = &args.data {
        cfg.data = v.clone();
    }
    if let Some(v) = args.data_n {
        cfg.data_n = v;
    }
    if let Some(v) = &args.schedule {
        cfg.schedule = v.clone();
    }
    if let Some(v) = &args.t_grid {
        cfg.t_grid = parse_float_list(v, "t-grid")?;
    }
    if let Some(v) = args.n_points {
        cfg.n_points = v;
    }
    if let Some(v) = args.probes {
        cfg.probes = v;
    }
    if let Some(v) = &args.eps_net {
        cfg.eps_net = Some(v.clone());
    }
    if let Some(v) = &args.tm_net {
        cfg.tm_net = Some(v.clone());
    }
    if let Some(v) = args.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.common.out {
        cfg.out = Some(v.clone());
    }
    if cfg.n_points == 0 || cfg.t_grid.is_empty() || cfg.probes == 0 {
        return Err(CliError::Config(
            "t_grid, n_points and probes must be non-empty/positive".into(),
        ));
    }
    let out = require_out(cfg.out.clone())?;
    let sched = parse_schedule(&cfg.schedule)?;
    let source = DataSource::parse(&cfg.data)?;
    let ds = source.load_points(cfg.data_n, cfg.seed)?;

    let nets = match (&cfg.eps_net, &cfg.tm_net) {
        (Some(e), Some(t)) => Some((MlpNet::load(e)?, MlpNet::load(t)?)),
        (None, None) => None,
        _ => {
            return Err(CliError::Config(
                "provide both --eps-net and --tm-net, or neither".into(),
            ))
        }
    };
    let oracle_sp;
    let oracle_tp;
    let net_sp;
    let net_tp;
    let (sp, tp): (&dyn ScoreProvider, &dyn TraceProvider) = match &nets {
        Some((eps, tm)) => {
            net_sp = MlpScoreProvider::new(eps, sched)?;
            net_tp = MlpTraceProvider::new(tm, sched)?;
            (&net_sp, &net_tp)
        }
        None => {
            oracle_sp = DiracScoreOracle::new(&ds, sched);
            oracle_tp = DiracTraceOracle::new(&ds, sched);
            (&oracle_sp, &oracle_tp)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = CsvOut::create(&out)?;
    csv.header(&["t", "method", "rel_err"])?;
    let mut timings: Vec<(f64, &str, f64)> = Vec::new();
    let mut summary_rows = Vec::new();

    for (ti, &t) in cfg.t_grid.iter().enumerate() {
        sched.check_time(t)?;
        let alpha = sched.alpha(t)?;
        let sigma = sched.sigma(t)?;
        // Sequential draws keep the point set independent of thread count.
        let points: Vec<Array1<f64>> = (0..cfg.n_points)
            .map(|_| {
                let y = ds.point(rng.random_range(0..ds.n()));
                y.iter()
                    .map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        alpha * v + sigma * z
                    })
                    .collect()
            })
            .collect();

        let start = Instant::now();
        let exact: Vec<f64> = points
            .par_iter()
            .map(|x| fisher_trace(&ds, &sched, x, t))
            .collect::<DfResult<_>>()?;
        let exact_ms = ms_since(start);

        let df_tm = bench(&points, &exact, |_, x| df_tm_trace(tp, sp, x, t))?;
        let vjp = bench(&points, &exact, |_, x| trace_via_vjp(sp, x, t))?;
        let hutch = bench(&points, &exact, |i, x| {
            let probe_seed = cfg
                .seed
                .wrapping_add(((ti * cfg.n_points + i) as u64).wrapping_mul(0x9e3779b97f4a7c15));
            trace_hutchinson(sp, x, t, cfg.probes, probe_seed)
        })?;

        for (method, err, ms) in [
            ("exact", 0.0, exact_ms),
            ("df-tm", df_tm.rel_err, df_tm.wall_ms),
            ("vjp", vjp.rel_err, vjp.wall_ms),
            ("hutchinson", hutch.rel_err, hutch.wall_ms),
        ] {
            csv.row(&[fmt_f(t), method.to_string(), fmt_f(err)])?;
            timings.push((t, method, ms));
            summary_rows.push(serde_json::json!({
                "t": t,
                "method": method,
                "rel_err": err,
                "wall_ms": ms,
            }));
        }
    }
    // Wall-clock lives in metadata so the CSV body stays byte-identical
    // across reruns.
    for (t, method, ms) in &timings {
        csv.comment(&format!("timing_ms,{},{method},{}", fmt_f(*t), fmt_f(*ms)))?;
    }
    csv.finish()?;

    let value = serde_json::json!({
        "command": "trace-bench",
        "config": cfg,
        "rows": summary_rows,
    });
    write_summary(&out, &value)?;
    Ok(())
}
