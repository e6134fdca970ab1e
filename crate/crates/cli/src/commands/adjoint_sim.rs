//! `adjoint-sim`: adjoint-guided sampling runs per operator, with the
//! operator's terminal sensitivity checked against a finite-difference
//! gradient of the whole discrete flow.

use crate::config::{
    load_config, parse_float_list, parse_schedule, require_out, CliError, CliResult, DataSource,
};
use crate::output::{fmt_f, ms_since, write_summary, CsvOut};
use crate::CommonArgs;
use clap::Args;
use df_lab::access::{DiracScoreOracle, GaussianScoreOracle, ScoreProvider};
use df_lab::ode::{
    adjoint_solve, flow_grad_fd, guided_sample, pf_ode_solve, AdjointOperator, GuidanceConfig,
};
use df_lab::{DiracDataset, GaussianInitial, NoiseSchedule, Result as DfResult};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Args)]
pub struct AdjointSimArgs {
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
    /// Adjoint operator: exact|vjp|df-ea.
    #[arg(long)]
    pub op: Option<String>,
    /// Euler steps of the outer sampling pass.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of sampled terminal states.
    #[arg(long)]
    pub n_traj: Option<usize>,
    /// Step size of the normalized guidance update.
    #[arg(long)]
    pub strength: Option<f64>,
    /// Guidance target, comma-separated; defaults to the data centroid
    /// (the law's mean for gaussian).
    #[arg(long)]
    pub x_ref: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointSimConfig {
    pub data: String,
    pub data_n: usize,
    pub schedule: String,
    pub op: String,
    pub steps: usize,
    pub n_traj: usize,
    pub strength: f64,
    pub x_ref: Option<Vec<f64>>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for AdjointSimConfig {
    fn default() -> Self {
        AdjointSimConfig {
            data: String::new(),
            data_n: 5000,
            schedule: "ve".into(),
            op: "exact".into(),
            steps: 100,
            n_traj: 8,
            strength: 0.1,
            x_ref: None,
            seed: 0,
            out: None,
        }
    }
}

struct TrajRow {
    seed: u64,
    lambda_rel_err: f64,
    final_loss: f64,
    updates: usize,
    wall_ms: f64,
}

fn run_trajectories<S: ScoreProvider + ?Sized>(
    sp: &S,
    op: &AdjointOperator<'_>,
    sched: &NoiseSchedule,
    x_ref: &Array1<f64>,
    cfg: &AdjointSimConfig,
) -> DfResult<Vec<TrajRow>> {
    let d = x_ref.len();
    let sigma_t = sched.sigma(sched.t_max)?;
    (0..cfg.n_traj)
        .into_par_iter()
        .map(|k| -> DfResult<TrajRow> {
            let seed = cfg.seed.wrapping_add(k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x_terminal: Array1<f64> = (0..d)
                .map(|_| sigma_t * rng.sample::<f64, _>(StandardNormal))
                .collect();

            // Sensitivity check: adjoint multiplier at t_max against the
            // finite-difference gradient of the same discrete flow.
            let start = Instant::now();
            let traj = pf_ode_solve(sp, &x_terminal, cfg.steps)?;
            let x0 = traj.endpoint().clone();
            let grad: Array1<f64> = x0
                .iter()
                .zip(x_ref.iter())
                .map(|(a, b)| a - b)
                .collect();
            let anchored = op.anchored_to(&x0);
            let lambdas = adjoint_solve(&anchored, sched, &traj, &grad)?;
            let wall_ms = ms_since(start);
            let fd = flow_grad_fd(sp, &x_terminal, cfg.steps, x_ref)?;
            let fd_norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = (&lambdas[0] - &fd).iter().map(|v| v * v).sum::<f64>().sqrt();
            let lambda_rel_err = diff / fd_norm.max(f64::MIN_POSITIVE);

            let guided = guided_sample(
                sp,
                op,
                &x_terminal,
                &GuidanceConfig {
                    steps: cfg.steps,
                    x_ref: x_ref.clone(),
                    strength: cfg.strength,
                    guide_from: 0,
                    guide_to: cfg.steps,
                },
            )?;
            Ok(TrajRow {
                seed,
                lambda_rel_err,
                final_loss: guided.final_loss,
                updates: guided.updates,
                wall_ms,
            })
        })
        .collect()
}

pub fn run(args: &AdjointSimArgs) -> CliResult<()> {
    let mut cfg: AdjointSimConfig = load_config(args.common.config.as_deref())?;
    if let Some(v) = &args.data {
        cfg.data = v.clone();
    }
    if let Some(v) = args.data_n {
        cfg.data_n = v;
    }
    if let Some(v) = &args.schedule {
        cfg.schedule = v.clone();
    }
    if let Some(v) = &args.op {
        cfg.op = v.clone();
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.n_traj {
        cfg.n_traj = v;
    }
    if let Some(v) = args.strength {
        cfg.strength = v;
    }
    if let Some(v) = &args.x_ref {
        cfg.x_ref = Some(parse_float_list(v, "x-ref")?);
    }
    if let Some(v) = args.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.common.out {
        cfg.out = Some(v.clone());
    }
    if cfg.steps == 0 || cfg.n_traj == 0 {
        return Err(CliError::Config("steps and n_traj must be positive".into()));
    }
    let out = require_out(cfg.out.clone())?;
    let sched = parse_schedule(&cfg.schedule)?;
    let source = DataSource::parse(&cfg.data)?;

    let gauss = source.gaussian();
    let points: Option<DiracDataset> = match &gauss {
        Some(_) => None,
        None => Some(source.load_points(cfg.data_n, cfg.seed)?),
    };
    let default_ref: Array1<f64> = match (&gauss, &points) {
        (Some(g), _) => g.mean().clone(),
        (None, Some(ds)) => {
            let mut c = Array1::<f64>::zeros(ds.dim());
            for row in ds.points().rows() {
                c = c + &row;
            }
            c / ds.n() as f64
        }
        _ => unreachable!("source is either a law or points"),
    };
    let x_ref = match &cfg.x_ref {
        Some(v) => Array1::from_vec(v.clone()),
        None => default_ref,
    };
    let dim = gauss
        .as_ref()
        .map(GaussianInitial::dim)
        .or(points.as_ref().map(DiracDataset::dim))
        .expect("source is either a law or points");
    if x_ref.len() != dim {
        return Err(CliError::Config(format!(
            "x_ref must have dimension {dim}"
        )));
    }

    let rows = match (&gauss, &points) {
        (Some(g), _) => {
            let sp = GaussianScoreOracle::new(g, sched);
            let op = match cfg.op.as_str() {
                "exact" => AdjointOperator::ExactGaussian { g, sched },
                "vjp" => AdjointOperator::Vjp { sp: &sp },
                "df-ea" => AdjointOperator::DfEa {
                    sp: &sp,
                    x0: Array1::zeros(dim),
                },
                other => {
                    return Err(CliError::Config(format!(
                        "unknown operator '{other}' (expected exact|vjp|df-ea)"
                    )))
                }
            };
            run_trajectories(&sp, &op, &sched, &x_ref, &cfg)?
        }
        (None, Some(ds)) => {
            let sp = DiracScoreOracle::new(ds, sched);
            let op = match cfg.op.as_str() {
                "exact" => AdjointOperator::ExactDirac { ds, sched },
                "vjp" => AdjointOperator::Vjp { sp: &sp },
                "df-ea" => AdjointOperator::DfEa {
                    sp: &sp,
                    x0: Array1::zeros(dim),
                },
                other => {
                    return Err(CliError::Config(format!(
                        "unknown operator '{other}' (expected exact|vjp|df-ea)"
                    )))
                }
            };
            run_trajectories(&sp, &op, &sched, &x_ref, &cfg)?
        }
        _ => unreachable!("source is either a law or points"),
    };

    let mut csv = CsvOut::create(&out)?;
    csv.header(&["traj", "seed", "lambda_rel_err", "final_loss", "updates"])?;
    for (k, r) in rows.iter().enumerate() {
        csv.row(&[
            k.to_string(),
            r.seed.to_string(),
            fmt_f(r.lambda_rel_err),
            fmt_f(r.final_loss),
            r.updates.to_string(),
        ])?;
    }
    for (k, r) in rows.iter().enumerate() {
        csv.comment(&format!("timing_ms,{k},{}", fmt_f(r.wall_ms)))?;
    }
    csv.finish()?;

    let n = rows.len() as f64;
    let value = serde_json::json!({
        "command": "adjoint-sim",
        "config": cfg,
        "mean_lambda_rel_err": rows.iter().map(|r| r.lambda_rel_err).sum::<f64>() / n,
        "mean_final_loss": rows.iter().map(|r| r.final_loss).sum::<f64>() / n,
        "mean_wall_ms": rows.iter().map(|r| r.wall_ms).sum::<f64>() / n,
    });
    write_summary(&out, &value)?;
    Ok(())
}
