//! `fisher-check`: score and Fisher oracles against finite differences of
//! the closed-form log density, plus the trace/matrix identity.
//!
//! The run fails (exit 3) if any grid point exceeds the pinned tolerances.

use crate::config::{load_config, parse_schedule, require_out, CliError, CliResult, DataSource};
use crate::output::{fmt_f, write_summary, CsvOut};
use crate::CommonArgs;
use clap::Args;
use df_lab::oracle::{self, FisherEval, GaussianInitial};
use df_lab::{DiracDataset, NoiseSchedule, Result as DfResult};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Score must match the finite-difference gradient to this relative error.
const SCORE_RTOL: f64 = 1e-4;
/// Fisher entries must match the negated FD Hessian to this absolute error.
const FISHER_ATOL: f64 = 1e-3;
/// The standalone trace must match the matrix diagonal sum to this
/// relative error.
const TRACE_RTOL: f64 = 1e-10;

#[derive(Debug, Args)]
pub struct FisherCheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Point data or `gaussian`.
    #[arg(long)]
    pub data: Option<String>,
    /// Chessboard sample count when --data chessboard.
    #[arg(long)]
    pub data_n: Option<usize>,
    /// Noise schedule: ve|vp|subvp|edm.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Diffused evaluation points per grid time.
    #[arg(long)]
    pub n_x: Option<usize>,
    /// Grid times.
    #[arg(long)]
    pub n_t: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherCheckConfig {
    pub data: String,
    pub data_n: usize,
    pub schedule: String,
    pub n_x: usize,
    pub n_t: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for FisherCheckConfig {
    fn default() -> Self {
        FisherCheckConfig {
            data: String::new(),
            data_n: 5000,
            schedule: "ve".into(),
            n_x: 20,
            n_t: 10,
            seed: 0,
            out: None,
        }
    }
}

/// Central-difference gradient of `f`.
fn fd_grad(
    f: &dyn Fn(&Array1<f64>) -> DfResult<f64>,
    x: &Array1<f64>,
    h: f64,
) -> DfResult<Array1<f64>> {
    let d = x.len();
    let mut g = Array1::<f64>::zeros(d);
    for i in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp)? - f(&xm)?) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Hessian of `f`.
fn fd_hessian(
    f: &dyn Fn(&Array1<f64>) -> DfResult<f64>,
    x: &Array1<f64>,
    h: f64,
) -> DfResult<Array2<f64>> {
    let d = x.len();
    let f0 = f(x)?;
    let mut hess = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        hess[[i, i]] = (f(&xp)? - 2.0 * f0 + f(&xm)?) / (h * h);
        for j in (i + 1)..d {
            let mut xpp = x.clone();
            let mut xpm = x.clone();
            let mut xmp = x.clone();
            let mut xmm = x.clone();
            xpp[i] += h;
            xpp[j] += h;
            xpm[i] += h;
            xpm[j] -= h;
            xmp[i] -= h;
            xmp[j] += h;
            xmm[i] -= h;
            xmm[j] -= h;
            let v = (f(&xpp)? - f(&xpm)? - f(&xmp)? + f(&xmm)?) / (4.0 * h * h);
            hess[[i, j]] = v;
            hess[[j, i]] = v;
        }
    }
    Ok(hess)
}

/// The oracle triple under test at one `(x, t)`.
struct Kernels<'a> {
    logq: Box<dyn Fn(&Array1<f64>, f64) -> DfResult<f64> + 'a>,
    score: Box<dyn Fn(&Array1<f64>, f64) -> DfResult<Array1<f64>> + 'a>,
    fisher: Box<dyn Fn(&Array1<f64>, f64) -> DfResult<FisherEval> + 'a>,
    /// A representative clean draw used to center the diffused grid point.
    draw_center: Box<dyn Fn(&mut ChaCha8Rng) -> Array1<f64> + 'a>,
    dim: usize,
}

fn dirac_kernels<'a>(ds: &'a DiracDataset, sched: &'a NoiseSchedule) -> Kernels<'a> {
    Kernels {
        logq: Box::new(move |x, t| oracle::log_density(ds, sched, x, t)),
        score: Box::new(move |x, t| oracle::score(ds, sched, x, t)),
        fisher: Box::new(move |x, t| oracle::fisher_matrix(ds, sched, x, t)),
        draw_center: Box::new(move |rng| ds.point(rng.random_range(0..ds.n())).to_owned()),
        dim: ds.dim(),
    }
}

fn gaussian_kernels<'a>(g: &'a GaussianInitial, sched: &'a NoiseSchedule) -> Kernels<'a> {
    Kernels {
        logq: Box::new(move |x, t| oracle::gaussian_log_density(g, sched, x, t)),
        score: Box::new(move |x, t| oracle::gaussian_score(g, sched, x, t)),
        fisher: Box::new(move |_x, t| oracle::gaussian_fisher(g, sched, t)),
        draw_center: Box::new(move |rng| g.sample(rng)),
        dim: g.dim(),
    }
}

pub fn run(args: &FisherCheckArgs) -> CliResult<()> {
    let mut cfg: FisherCheckConfig = load_config(args.common.config.as_deref())?;
    if let Some(v) = &args.data {
        cfg.data = v.clone();
    }
    if let Some(v) = args.data_n {
        cfg.data_n = v;
    }
    if let Some(v) = &args.schedule {
        cfg.schedule = v.clone();
    }
    if let Some(v) = args.n_x {
        cfg.n_x = v;
    }
    if let Some(v) = args.n_t {
        cfg.n_t = v;
    }
    if let Some(v) = args.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.common.out {
        cfg.out = Some(v.clone());
    }
    if cfg.n_x == 0 || cfg.n_t == 0 {
        return Err(CliError::Config("n_x and n_t must be positive".into()));
    }
    let out = require_out(cfg.out.clone())?;
    let sched = parse_schedule(&cfg.schedule)?;
    let source = DataSource::parse(&cfg.data)?;

    let gauss = source.gaussian();
    let points;
    let kernels = match &gauss {
        Some(g) => gaussian_kernels(g, &sched),
        None => {
            points = source.load_points(cfg.data_n, cfg.seed)?;
            dirac_kernels(&points, &sched)
        }
    };

    // Stay a little away from t_min: the smallest sigmas make the density
    // too sharp for honest finite differences.
    let lo = sched.t_min + 0.05 * (sched.t_max - sched.t_min);
    let t_grid: Vec<f64> = (0..cfg.n_t)
        .map(|j| {
            if cfg.n_t == 1 {
                lo
            } else {
                lo + (sched.t_max - lo) * j as f64 / (cfg.n_t - 1) as f64
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = CsvOut::create(&out)?;
    csv.header(&[
        "point",
        "t",
        "score_rel_err",
        "fisher_max_abs_err",
        "trace_rel_err",
    ])?;

    let mut max_score = 0.0f64;
    let mut max_fisher = 0.0f64;
    let mut max_trace = 0.0f64;
    for &t in &t_grid {
        let alpha = sched.alpha(t)?;
        let sigma = sched.sigma(t)?;
        for i in 0..cfg.n_x {
            let center = (kernels.draw_center)(&mut rng);
            let x: Array1<f64> = center
                .iter()
                .map(|v| {
                    let z: f64 = rng.sample(StandardNormal);
                    alpha * v + sigma * z
                })
                .collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();

            let score = (kernels.score)(&x, t)?;
            let f = |y: &Array1<f64>| (kernels.logq)(y, t);
            let grad = fd_grad(&f, &x, 1e-5 * (1.0 + norm))?;
            let score_norm = score.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = (&score - &grad).iter().map(|v| v * v).sum::<f64>().sqrt();
            let score_rel = diff / score_norm.max(f64::MIN_POSITIVE);

            let fe = (kernels.fisher)(&x, t)?;
            let hess = fd_hessian(&f, &x, 1e-4 * (1.0 + norm))?;
            let mut fisher_abs = 0.0f64;
            for a in 0..kernels.dim {
                for b in 0..kernels.dim {
                    fisher_abs = fisher_abs.max((fe.matrix[[a, b]] + hess[[a, b]]).abs());
                }
            }

            let diag_sum = (0..kernels.dim).map(|a| fe.matrix[[a, a]]).sum::<f64>();
            let trace_rel = (fe.trace - diag_sum).abs() / fe.trace.abs().max(f64::MIN_POSITIVE);

            max_score = max_score.max(score_rel);
            max_fisher = max_fisher.max(fisher_abs);
            max_trace = max_trace.max(trace_rel);
            csv.row(&[
                i.to_string(),
                fmt_f(t),
                fmt_f(score_rel),
                fmt_f(fisher_abs),
                fmt_f(trace_rel),
            ])?;
        }
    }
    csv.finish()?;

    let pass = max_score <= SCORE_RTOL && max_fisher <= FISHER_ATOL && max_trace <= TRACE_RTOL;
    let value = serde_json::json!({
        "command": "fisher-check",
        "config": cfg,
        "max_score_rel_err": max_score,
        "max_fisher_abs_err": max_fisher,
        "max_trace_rel_err": max_trace,
        "score_rtol": SCORE_RTOL,
        "fisher_atol": FISHER_ATOL,
        "trace_rtol": TRACE_RTOL,
        "pass": pass,
    });
    write_summary(&out, &value)?;
    if !pass {
        return Err(CliError::Numeric(format!(
            "oracle/finite-difference mismatch: score rel {max_score:.3e} (tol {SCORE_RTOL:.0e}), \
             fisher abs {max_fisher:.3e} (tol {FISHER_ATOL:.0e}), \
             trace rel {max_trace:.3e} (tol {TRACE_RTOL:.0e})"
        )));
    }
    Ok(())
}
