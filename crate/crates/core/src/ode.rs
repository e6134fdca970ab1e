//! Probability-flow ODE tooling: sampling trajectories, likelihood
//! integration, and adjoint sensitivities.
//!
//! The probability-flow ODE associated with the forward SDE is
//!
//! ```text
//! dx/dt = h(x, t) = f(t) x + (g^2(t) / (2 sigma_t)) eps(x, t)
//! ```
//!
//! integrated downward from `t_max` to `t_min` for sampling. Along the same
//! grid, the log likelihood evolves as `d log q / dt = -f d - (g^2/2) tr F`,
//! and first-order sensitivities of an endpoint loss satisfy the adjoint
//! equation `d lam / dt = -(f lam + (g^2/2) F^T lam)`.
//!
//! Discretization policy: the state always advances by explicit Euler. The
//! scalar likelihood integral is accumulated with the trapezoid rule over
//! the same nodes (the integrand is evaluated anyway, and first-order
//! quadrature would dominate the error budget). The adjoint walks the stored
//! trajectory upward with the Jacobian evaluated at the target node of each
//! interval, which makes the exact-operator adjoint the exact transpose of
//! the discrete forward map.

use ndarray::Array1;

use crate::access::{df_ea_apply, vjp_apply, ScoreProvider, TraceEval};
use crate::error::{DfError, Result};
use crate::oracle::{self, DiracDataset, GaussianInitial};
use crate::schedule::NoiseSchedule;

/// A solved path of the probability-flow ODE. `times` is strictly
/// decreasing: index 0 holds the start (usually `t_max`), the last index the
/// stop (usually `t_min`). `states[i]` is the state at `times[i]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Array1<f64>>,
}

impl Trajectory {
    /// Number of nodes (steps + 1).
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// The state at the smallest time on the grid.
    pub fn endpoint(&self) -> &Array1<f64> {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Uniform time grid from `t_start` down to `t_stop` with `steps` intervals.
/// Both endpoints are placed exactly to avoid drifting out of the schedule
/// window through float accumulation.
fn time_grid(t_start: f64, t_stop: f64, steps: usize) -> Vec<f64> {
    let span = t_start - t_stop;
    (0..=steps)
        .map(|i| {
            if i == 0 {
                t_start
            } else if i == steps {
                t_stop
            } else {
                t_stop + span * ((steps - i) as f64) / (steps as f64)
            }
        })
        .collect()
}

/// Integrate the probability-flow ODE from `(t_start, x_at_start)` down to
/// `t_stop` with `steps` explicit Euler steps, recording every node.
pub fn pf_ode_solve_between<S: ScoreProvider + ?Sized>(
    sp: &S,
    x_at_start: &Array1<f64>,
    t_start: f64,
    t_stop: f64,
    steps: usize,
) -> Result<Trajectory> {
    let sched = sp.schedule();
    sched.check_time(t_start)?;
    sched.check_time(t_stop)?;
    if !(t_start > t_stop) {
        return Err(DfError::InvalidArgument(format!(
            "pf-ode integrates downward; need t_start > t_stop, got {t_start} <= {t_stop}"
        )));
    }
    if steps == 0 {
        return Err(DfError::InvalidArgument(
            "pf-ode needs at least one step".into(),
        ));
    }
    if x_at_start.iter().any(|v| !v.is_finite()) {
        return Err(DfError::InvalidArgument(
            "non-finite initial state for pf-ode".into(),
        ));
    }
    let times = time_grid(t_start, t_stop, steps);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x_at_start.clone();
    states.push(x.clone());
    for k in 0..steps {
        let t = times[k];
        let dt = times[k + 1] - times[k];
        let f = sched.drift_coeff_unchecked(t);
        let g2 = sched.diffusion_coeff_sq_unchecked(t);
        let sigma = sched.sigma_unchecked(t);
        let eps = sp.eps(&x, t)?;
        for i in 0..x.len() {
            x[i] += dt * (f * x[i] + g2 / (2.0 * sigma) * eps[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DfError::NonFinite {
                context: "pf-ode state",
                step: k + 1,
            });
        }
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Integrate the probability-flow ODE over the full schedule window,
/// `t_max` down to `t_min`.
pub fn pf_ode_solve<S: ScoreProvider + ?Sized>(
    sp: &S,
    x_terminal: &Array1<f64>,
    steps: usize,
) -> Result<Trajectory> {
    let sched = *sp.schedule();
    pf_ode_solve_between(sp, x_terminal, sched.t_max, sched.t_min, steps)
}

/// Result of a likelihood integration.
#[derive(Debug, Clone)]
pub struct NllResult {
    /// Negative log likelihood at the input point, in nats.
    pub nll_nats: f64,
    /// Bits per dimension, `nll / (d ln 2)`.
    pub bpd: f64,
    /// The state the forward integration reached at `t_max`.
    pub terminal_state: Array1<f64>,
}

/// Compute the negative log likelihood of `x_at_t_min` by integrating the
/// probability-flow ODE up to `t_max` and accumulating the likelihood
/// integrand with the trapezoid rule, then closing with the schedule's
/// stationary terminal prior.
pub fn nll_solve<S: ScoreProvider + ?Sized, E: TraceEval + ?Sized>(
    sp: &S,
    te: &E,
    x_at_t_min: &Array1<f64>,
    steps: usize,
) -> Result<NllResult> {
    let sched = sp.schedule();
    if steps == 0 {
        return Err(DfError::InvalidArgument(
            "likelihood integration needs at least one step".into(),
        ));
    }
    if x_at_t_min.iter().any(|v| !v.is_finite()) {
        return Err(DfError::InvalidArgument(
            "non-finite input state for likelihood integration".into(),
        ));
    }
    let d = x_at_t_min.len();
    let d_f = d as f64;
    // Ascending grid: node k at t_min + span k / steps.
    let mut times: Vec<f64> = time_grid(sched.t_max, sched.t_min, steps);
    times.reverse();

    let mut x = x_at_t_min.clone();
    let mut integral = 0.0;
    let mut h_prev = 0.0;
    for (k, &t) in times.iter().enumerate() {
        let f = sched.drift_coeff_unchecked(t);
        let g2 = sched.diffusion_coeff_sq_unchecked(t);
        let trace = te.eval(&x, t, k)?;
        let h = f * d_f + 0.5 * g2 * trace;
        if !h.is_finite() {
            return Err(DfError::NonFinite {
                context: "likelihood integrand",
                step: k,
            });
        }
        if k > 0 {
            integral += 0.5 * (h_prev + h) * (times[k] - times[k - 1]);
        }
        h_prev = h;
        if k < steps {
            let dt = times[k + 1] - times[k];
            let sigma = sched.sigma_unchecked(t);
            let eps = sp.eps(&x, t)?;
            for i in 0..d {
                x[i] += dt * (f * x[i] + g2 / (2.0 * sigma) * eps[i]);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DfError::NonFinite {
                    context: "likelihood state",
                    step: k + 1,
                });
            }
        }
    }
    let log_q = sched.terminal_prior_log_density(&x) + integral;
    let nll = -log_q;
    Ok(NllResult {
        nll_nats: nll,
        bpd: nll / (d_f * std::f64::consts::LN_2),
        terminal_state: x,
    })
}

/// The linear operator `lam |-> F(x, t)^T lam` used by the adjoint
/// integrator, in its exact and approximate variants.
pub enum AdjointOperator<'a> {
    /// Exact Fisher operator of an empirical dataset.
    ExactDirac {
        ds: &'a DiracDataset,
        sched: NoiseSchedule,
    },
    /// Exact Fisher operator of a Gaussian initial law.
    ExactGaussian {
        g: &'a GaussianInitial,
        sched: NoiseSchedule,
    },
    /// Fisher-vector products through the provider's vector-Jacobian probe.
    Vjp { sp: &'a dyn ScoreProvider },
    /// Rank-two surrogate anchored at a flow endpoint `x0`.
    DfEa {
        sp: &'a dyn ScoreProvider,
        x0: Array1<f64>,
    },
}

impl AdjointOperator<'_> {
    /// Apply the operator at `(x, t)`.
    pub fn apply(&self, x: &Array1<f64>, t: f64, lam: &Array1<f64>) -> Result<Array1<f64>> {
        match self {
            AdjointOperator::ExactDirac { ds, sched } => {
                let fe = oracle::fisher_matrix(ds, sched, x, t)?;
                Ok(fe.matrix.dot(lam))
            }
            AdjointOperator::ExactGaussian { g, sched } => {
                let fe = oracle::gaussian_fisher(g, sched, t)?;
                Ok(fe.matrix.dot(lam))
            }
            AdjointOperator::Vjp { sp } => vjp_apply(*sp, x, t, lam),
            AdjointOperator::DfEa { sp, x0 } => {
                let yhat = sp.y_pred(x, t)?;
                df_ea_apply(x0, &yhat, lam, sp.schedule(), t)
            }
        }
    }

    /// The same operator with the rank-two surrogate re-anchored at `x0`;
    /// other variants are returned unchanged.
    pub fn anchored_to(&self, x0: &Array1<f64>) -> AdjointOperator<'_> {
        match self {
            AdjointOperator::ExactDirac { ds, sched } => AdjointOperator::ExactDirac {
                ds,
                sched: *sched,
            },
            AdjointOperator::ExactGaussian { g, sched } => AdjointOperator::ExactGaussian {
                g,
                sched: *sched,
            },
            AdjointOperator::Vjp { sp } => AdjointOperator::Vjp { sp: *sp },
            AdjointOperator::DfEa { sp, .. } => AdjointOperator::DfEa {
                sp: *sp,
                x0: x0.clone(),
            },
        }
    }

    /// Short label for CSV output.
    pub fn label(&self) -> &'static str {
        match self {
            AdjointOperator::ExactDirac { .. } | AdjointOperator::ExactGaussian { .. } => "exact",
            AdjointOperator::Vjp { .. } => "vjp",
            AdjointOperator::DfEa { .. } => "df-ea",
        }
    }
}

/// Integrate the adjoint equation upward along a stored trajectory.
///
/// `grad_at_end` is the loss gradient at the trajectory endpoint (smallest
/// time). Returns one multiplier per trajectory node, aligned with
/// `traj.times` (so index 0 is the sensitivity at the start time). The
/// Jacobian of each Euler interval is evaluated at the interval's upper
/// node, which makes the exact operator the exact transpose of the discrete
/// forward map.
pub fn adjoint_solve(
    op: &AdjointOperator<'_>,
    sched: &NoiseSchedule,
    traj: &Trajectory,
    grad_at_end: &Array1<f64>,
) -> Result<Vec<Array1<f64>>> {
    let n = traj.len();
    if n < 2 {
        return Err(DfError::GridMismatch(
            "trajectory needs at least two nodes".into(),
        ));
    }
    if traj.states.len() != n {
        return Err(DfError::GridMismatch(
            "trajectory times and states have different lengths".into(),
        ));
    }
    let d = traj.states[0].len();
    if grad_at_end.len() != d {
        return Err(DfError::DimensionMismatch {
            context: "adjoint seed gradient",
            expected: d,
            got: grad_at_end.len(),
        });
    }
    for w in traj.times.windows(2) {
        if !(w[0] > w[1]) {
            return Err(DfError::GridMismatch(
                "trajectory times must be strictly decreasing".into(),
            ));
        }
    }
    for &t in &traj.times {
        sched.check_time(t).map_err(|_| {
            DfError::GridMismatch(format!("trajectory time {t} outside schedule window"))
        })?;
    }

    let mut lambdas = vec![Array1::<f64>::zeros(d); n];
    lambdas[n - 1] = grad_at_end.clone();
    for k in (1..n).rev() {
        let t_hi = traj.times[k - 1];
        let dt = t_hi - traj.times[k]; // positive
        let f = sched.drift_coeff_unchecked(t_hi);
        let g2 = sched.diffusion_coeff_sq_unchecked(t_hi);
        let lam = &lambdas[k];
        let f_lam = op.apply(&traj.states[k - 1], t_hi, lam)?;
        let mut next = lam.clone();
        for i in 0..d {
            next[i] -= dt * (f * lam[i] + 0.5 * g2 * f_lam[i]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DfError::NonFinite {
                context: "adjoint state",
                step: k,
            });
        }
        lambdas[k - 1] = next;
    }
    Ok(lambdas)
}

/// Finite-difference oracle for the gradient of the endpoint loss
/// `L(x_T) = 1/2 |x_end(x_T) - x_ref|^2` with respect to the terminal state,
/// obtained by re-integrating the full flow `2 d` times.
pub fn flow_grad_fd<S: ScoreProvider + ?Sized>(
    sp: &S,
    x_terminal: &Array1<f64>,
    steps: usize,
    x_ref: &Array1<f64>,
) -> Result<Array1<f64>> {
    let d = x_terminal.len();
    if x_ref.len() != d {
        return Err(DfError::DimensionMismatch {
            context: "flow_grad_fd reference point",
            expected: d,
            got: x_ref.len(),
        });
    }
    let norm = x_terminal.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = crate::access::FD_STEP * (1.0 + norm);
    let loss = |x0: &Array1<f64>| -> f64 {
        0.5 * x0
            .iter()
            .zip(x_ref.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let mut grad = Array1::<f64>::zeros(d);
    for i in 0..d {
        let mut xp = x_terminal.clone();
        let mut xm = x_terminal.clone();
        xp[i] += h;
        xm[i] -= h;
        let lp = loss(pf_ode_solve(sp, &xp, steps)?.endpoint());
        let lm = loss(pf_ode_solve(sp, &xm, steps)?.endpoint());
        grad[i] = (lp - lm) / (2.0 * h);
    }
    Ok(grad)
}

/// Configuration of adjoint-guided sampling toward a reference point.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// Total Euler steps of the outer sampling pass.
    pub steps: usize,
    /// Pull the endpoint toward this point.
    pub x_ref: Array1<f64>,
    /// Step size of the normalized gradient update.
    pub strength: f64,
    /// First outer step index (0-based, counted from `t_max`) at which
    /// guidance is applied.
    pub guide_from: usize,
    /// One past the last outer step index receiving guidance.
    pub guide_to: usize,
}

/// Result of a guided sampling run.
#[derive(Debug, Clone)]
pub struct GuidedSampleResult {
    pub trajectory: Trajectory,
    /// `1/2 |x_end - x_ref|^2` of the guided run.
    pub final_loss: f64,
    /// Number of guidance updates actually applied.
    pub updates: usize,
}

/// Sample with adjoint guidance: at each selected outer step, estimate the
/// endpoint-loss sensitivity at the current state by solving an inner flow
/// plus adjoint pass, then take one normalized gradient-descent step on the
/// state before continuing the ordinary Euler update.
pub fn guided_sample<S: ScoreProvider + ?Sized>(
    sp: &S,
    op: &AdjointOperator<'_>,
    x_terminal: &Array1<f64>,
    cfg: &GuidanceConfig,
) -> Result<GuidedSampleResult> {
    let sched = *sp.schedule();
    if cfg.steps == 0 {
        return Err(DfError::InvalidArgument(
            "guided sampling needs at least one step".into(),
        ));
    }
    if cfg.guide_to > cfg.steps || cfg.guide_from > cfg.guide_to {
        return Err(DfError::InvalidArgument(format!(
            "guidance window [{}, {}) outside step range 0..{}",
            cfg.guide_from, cfg.guide_to, cfg.steps
        )));
    }
    if cfg.x_ref.len() != x_terminal.len() {
        return Err(DfError::DimensionMismatch {
            context: "guidance reference point",
            expected: x_terminal.len(),
            got: cfg.x_ref.len(),
        });
    }
    let times = time_grid(sched.t_max, sched.t_min, cfg.steps);
    let span = sched.t_max - sched.t_min;
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut x = x_terminal.clone();
    let mut updates = 0usize;
    states.push(x.clone());
    for k in 0..cfg.steps {
        let t = times[k];
        if k >= cfg.guide_from && k < cfg.guide_to {
            // Inner pass: flow to t_min, seed the adjoint with the loss
            // gradient at the inner endpoint, read the multiplier at t.
            let inner_steps =
                (((cfg.steps as f64) * (t - sched.t_min) / span).ceil() as usize).max(1);
            let inner = pf_ode_solve_between(sp, &x, t, sched.t_min, inner_steps)?;
            let x0 = inner.endpoint().clone();
            let grad: Array1<f64> = x0
                .iter()
                .zip(cfg.x_ref.iter())
                .map(|(a, b)| a - b)
                .collect();
            let anchored = op.anchored_to(&x0);
            let lambdas = adjoint_solve(&anchored, &sched, &inner, &grad)?;
            let lam = &lambdas[0];
            let lam_norm = lam.iter().map(|v| v * v).sum::<f64>().sqrt();
            if lam_norm > 1e-30 {
                for i in 0..x.len() {
                    x[i] -= cfg.strength * lam[i] / lam_norm;
                }
                updates += 1;
            }
        }
        let dt = times[k + 1] - times[k];
        let f = sched.drift_coeff_unchecked(t);
        let g2 = sched.diffusion_coeff_sq_unchecked(t);
        let sigma = sched.sigma_unchecked(t);
        let eps = sp.eps(&x, t)?;
        for i in 0..x.len() {
            x[i] += dt * (f * x[i] + g2 / (2.0 * sigma) * eps[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DfError::NonFinite {
                context: "guided sampling state",
                step: k + 1,
            });
        }
        states.push(x.clone());
    }
    let final_loss = 0.5
        * states
            .last()
            .unwrap()
            .iter()
            .zip(cfg.x_ref.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    Ok(GuidedSampleResult {
        trajectory: Trajectory { times, states },
        final_loss,
        updates,
    })
}
