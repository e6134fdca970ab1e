//! Score/trace providers and cheap Fisher accessors.
//!
//! Downstream solvers only ever talk to two small traits: a
//! [`ScoreProvider`] exposing the noise prediction `eps(x, t)` (plus
//! Jacobian probes with finite-difference defaults) and a [`TraceProvider`]
//! exposing the scalar squared-norm prediction `t_pred(x, t)`. Exact oracles
//! for point-cloud and Gaussian data implement both; trained networks
//! implement them in [`crate::train`].
//!
//! On top of the traits sit the accessors:
//! - [`trace_via_vjp`]: the reference estimator `tr F = (1/sigma) tr J_eps`
//!   obtained from `d` Jacobian probes;
//! - [`trace_hutchinson`]: Rademacher-probe stochastic trace estimation;
//! - [`df_tm_trace`]: the two-prediction closed form
//!   `d/sigma^2 - (alpha^2/sigma^4) (d t_pred - |y_pred|^2)`;
//! - [`df_ea_apply`]: the rank-two surrogate for Fisher-vector products
//!   `lam/sigma^2 - (alpha^2/sigma^4) (<x0, lam> x0 - <yhat, lam> yhat)`;
//! - [`bound_trace_error`] / [`bound_ea_error`]: a-priori error bounds for
//!   the two approximations in terms of provider error budgets.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DfError, Result};
use crate::oracle::{self, DiracDataset, GaussianInitial};
use crate::schedule::NoiseSchedule;

/// Step used by the finite-difference defaults, scaled by `1 + |x|`.
pub const FD_STEP: f64 = 1e-4;

/// Noise-prediction model of a diffused marginal.
///
/// The scalar contract: `eps(x, t) = -sigma_t * score(x, t)` for the exact
/// model of the data. `y_pred` is the induced denoising prediction; the
/// Jacobian probes default to central finite differences of `eps` and should
/// be overridden when an analytic Jacobian is available.
///
/// All methods assume `t` inside the provider's schedule window; the public
/// accessor functions validate once before entering their loops.
pub trait ScoreProvider: Sync {
    /// The schedule this provider was built against.
    fn schedule(&self) -> &NoiseSchedule;

    /// Noise prediction `eps(x, t)`.
    fn eps(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>>;

    /// Denoising prediction `(x - sigma eps)/alpha`.
    fn y_pred(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
        let alpha = self.schedule().alpha_unchecked(t);
        let sigma = self.schedule().sigma_unchecked(t);
        let e = self.eps(x, t)?;
        Ok(x.iter()
            .zip(e.iter())
            .map(|(xi, ei)| (xi - sigma * ei) / alpha)
            .collect())
    }

    /// Jacobian-vector product `J_eps(x, t) v`.
    fn eps_jvp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(Array1::zeros(x.len()));
        }
        let h = FD_STEP * (1.0 + x.iter().map(|a| a * a).sum::<f64>().sqrt());
        let mut xp = x.clone();
        let mut xm = x.clone();
        for i in 0..x.len() {
            let step = h * v[i] / norm;
            xp[i] += step;
            xm[i] -= step;
        }
        let ep = self.eps(&xp, t)?;
        let em = self.eps(&xm, t)?;
        Ok(ep
            .iter()
            .zip(em.iter())
            .map(|(p, m)| (p - m) * norm / (2.0 * h))
            .collect())
    }

    /// Vector-Jacobian product `J_eps(x, t)^T v`, i.e. the gradient of
    /// `x |-> <eps(x, t), v>`.
    fn eps_vjp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        let h = FD_STEP * (1.0 + x.iter().map(|a| a * a).sum::<f64>().sqrt());
        let d = x.len();
        let mut out = Array1::<f64>::zeros(d);
        let mut xp = x.clone();
        let mut xm = x.clone();
        for i in 0..d {
            xp[i] += h;
            xm[i] -= h;
            let ep = self.eps(&xp, t)?;
            let em = self.eps(&xm, t)?;
            let dp: f64 = ep.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let dm: f64 = em.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            out[i] = (dp - dm) / (2.0 * h);
            xp[i] = x[i];
            xm[i] = x[i];
        }
        Ok(out)
    }

    /// Sum of the diagonal of `J_eps(x, t)`.
    fn eps_jac_diag_sum(&self, x: &Array1<f64>, t: f64) -> Result<f64> {
        let h = FD_STEP * (1.0 + x.iter().map(|a| a * a).sum::<f64>().sqrt());
        let d = x.len();
        let mut acc = 0.0;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for i in 0..d {
            xp[i] += h;
            xm[i] -= h;
            let ep = self.eps(&xp, t)?;
            let em = self.eps(&xm, t)?;
            acc += (ep[i] - em[i]) / (2.0 * h);
            xp[i] = x[i];
            xm[i] = x[i];
        }
        Ok(acc)
    }
}

/// Squared-norm prediction model: `t_pred(x, t)` approximates
/// `(1/d) sum_i w_i |y_i|^2`.
pub trait TraceProvider: Sync {
    fn t_pred(&self, x: &Array1<f64>, t: f64) -> Result<f64>;
}

/// Exact noise prediction for an empirical dataset; all Jacobian probes are
/// analytic (the eps Jacobian is `sigma` times the Fisher matrix).
#[derive(Debug, Clone)]
pub struct DiracScoreOracle<'a> {
    ds: &'a DiracDataset,
    sched: NoiseSchedule,
}

impl<'a> DiracScoreOracle<'a> {
    pub fn new(ds: &'a DiracDataset, sched: NoiseSchedule) -> Self {
        Self { ds, sched }
    }

    pub fn dataset(&self) -> &'a DiracDataset {
        self.ds
    }
}

impl ScoreProvider for DiracScoreOracle<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn eps(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
        let m = oracle::y_oracle(self.ds, &self.sched, x, t)?;
        let alpha = self.sched.alpha_unchecked(t);
        let sigma = self.sched.sigma_unchecked(t);
        Ok(x.iter()
            .zip(m.iter())
            .map(|(xi, mi)| (xi - alpha * mi) / sigma)
            .collect())
    }

    fn y_pred(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
        oracle::y_oracle(self.ds, &self.sched, x, t)
    }

    fn eps_jvp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        self.fisher_product(x, t, v)
    }

    fn eps_vjp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        // The eps Jacobian is symmetric for the exact model.
        self.fisher_product(x, t, v)
    }

    fn eps_jac_diag_sum(&self, x: &Array1<f64>, t: f64) -> Result<f64> {
        let sigma = self.sched.sigma_unchecked(t);
        Ok(sigma * oracle::fisher_trace(self.ds, &self.sched, x, t)?)
    }
}

impl DiracScoreOracle<'_> {
    /// `sigma * F(x, t) v`, the analytic eps-Jacobian product.
    fn fisher_product(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        if v.len() != x.len() {
            return Err(DfError::DimensionMismatch {
                context: "jacobian probe vector",
                expected: x.len(),
                got: v.len(),
            });
        }
        let fe = oracle::fisher_matrix(self.ds, &self.sched, x, t)?;
        let sigma = self.sched.sigma_unchecked(t);
        let fv = fe.matrix.dot(v);
        Ok(fv.mapv(|a| sigma * a))
    }
}

/// Exact squared-norm prediction for an empirical dataset.
#[derive(Debug, Clone)]
pub struct DiracTraceOracle<'a> {
    ds: &'a DiracDataset,
    sched: NoiseSchedule,
}

impl<'a> DiracTraceOracle<'a> {
    pub fn new(ds: &'a DiracDataset, sched: NoiseSchedule) -> Self {
        Self { ds, sched }
    }
}

impl TraceProvider for DiracTraceOracle<'_> {
    fn t_pred(&self, x: &Array1<f64>, t: f64) -> Result<f64> {
        oracle::t_oracle(self.ds, &self.sched, x, t)
    }
}

/// Exact noise prediction for a Gaussian initial law.
#[derive(Debug, Clone)]
pub struct GaussianScoreOracle<'a> {
    g: &'a GaussianInitial,
    sched: NoiseSchedule,
}

impl<'a> GaussianScoreOracle<'a> {
    pub fn new(g: &'a GaussianInitial, sched: NoiseSchedule) -> Self {
        Self { g, sched }
    }
}

impl ScoreProvider for GaussianScoreOracle<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn eps(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
        let s = oracle::gaussian_score(self.g, &self.sched, x, t)?;
        let sigma = self.sched.sigma_unchecked(t);
        Ok(s.mapv(|v| -sigma * v))
    }

    fn y_pred(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
        // Posterior-mean identity: ybar = (x + sigma^2 score)/alpha.
        let s = oracle::gaussian_score(self.g, &self.sched, x, t)?;
        let alpha = self.sched.alpha_unchecked(t);
        let sigma = self.sched.sigma_unchecked(t);
        Ok(x.iter()
            .zip(s.iter())
            .map(|(xi, si)| (xi + sigma * sigma * si) / alpha)
            .collect())
    }

    fn eps_jvp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        self.fisher_product(x, t, v)
    }

    fn eps_vjp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        self.fisher_product(x, t, v)
    }

    fn eps_jac_diag_sum(&self, x: &Array1<f64>, t: f64) -> Result<f64> {
        let _ = x;
        let fe = oracle::gaussian_fisher(self.g, &self.sched, t)?;
        let sigma = self.sched.sigma_unchecked(t);
        Ok(sigma * fe.trace)
    }
}

impl GaussianScoreOracle<'_> {
    fn fisher_product(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        if v.len() != x.len() {
            return Err(DfError::DimensionMismatch {
                context: "jacobian probe vector",
                expected: x.len(),
                got: v.len(),
            });
        }
        let fe = oracle::gaussian_fisher(self.g, &self.sched, t)?;
        let sigma = self.sched.sigma_unchecked(t);
        Ok(fe.matrix.dot(v).mapv(|a| sigma * a))
    }
}

/// A score provider with a constant vector offset injected into `eps`,
/// used to emulate a model with a known error budget. The offset is
/// constant in `x`, so Jacobian probes forward to the inner provider.
pub struct PerturbedScore<S: ScoreProvider> {
    inner: S,
    delta: f64,
    direction: Array1<f64>,
}

impl<S: ScoreProvider> PerturbedScore<S> {
    /// `direction` is normalized; `delta` is the Euclidean size of the
    /// injected eps error.
    pub fn new(inner: S, delta: f64, direction: Array1<f64>) -> Result<Self> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(DfError::InvalidArgument(
                "perturbation direction must be nonzero and finite".into(),
            ));
        }
        Ok(Self {
            inner,
            delta,
            direction: direction.mapv(|v| v / norm),
        })
    }
}

impl<S: ScoreProvider> ScoreProvider for PerturbedScore<S> {
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn eps(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
        let mut e = self.inner.eps(x, t)?;
        for (ei, di) in e.iter_mut().zip(self.direction.iter()) {
            *ei += self.delta * di;
        }
        Ok(e)
    }

    fn eps_jvp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        self.inner.eps_jvp(x, t, v)
    }

    fn eps_vjp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        self.inner.eps_vjp(x, t, v)
    }

    fn eps_jac_diag_sum(&self, x: &Array1<f64>, t: f64) -> Result<f64> {
        self.inner.eps_jac_diag_sum(x, t)
    }
}

/// A trace provider with a constant scalar offset on `t_pred`.
pub struct PerturbedTrace<T: TraceProvider> {
    inner: T,
    delta: f64,
}

impl<T: TraceProvider> PerturbedTrace<T> {
    pub fn new(inner: T, delta: f64) -> Self {
        Self { inner, delta }
    }
}

impl<T: TraceProvider> TraceProvider for PerturbedTrace<T> {
    fn t_pred(&self, x: &Array1<f64>, t: f64) -> Result<f64> {
        Ok(self.inner.t_pred(x, t)? + self.delta)
    }
}

/// Fisher-vector product through the provider:
/// `F v ~= (1/sigma) J_eps^T v`.
pub fn vjp_apply<S: ScoreProvider + ?Sized>(
    sp: &S,
    x: &Array1<f64>,
    t: f64,
    v: &Array1<f64>,
) -> Result<Array1<f64>> {
    sp.schedule().check_time(t)?;
    if v.len() != x.len() {
        return Err(DfError::DimensionMismatch {
            context: "vjp_apply vector",
            expected: x.len(),
            got: v.len(),
        });
    }
    let sigma = sp.schedule().sigma_unchecked(t);
    let jv = sp.eps_vjp(x, t, v)?;
    Ok(jv.mapv(|a| a / sigma))
}

/// Fisher trace through the provider's Jacobian diagonal:
/// `tr F ~= (1/sigma) tr J_eps`, costing `d` probes by default.
pub fn trace_via_vjp<S: ScoreProvider + ?Sized>(sp: &S, x: &Array1<f64>, t: f64) -> Result<f64> {
    sp.schedule().check_time(t)?;
    let sigma = sp.schedule().sigma_unchecked(t);
    Ok(sp.eps_jac_diag_sum(x, t)? / sigma)
}

/// Hutchinson trace estimate with `probes` Rademacher probes:
/// `tr F ~= (1/sigma) mean_k z_k . (J_eps z_k)`.
pub fn trace_hutchinson<S: ScoreProvider + ?Sized>(
    sp: &S,
    x: &Array1<f64>,
    t: f64,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    sp.schedule().check_time(t)?;
    if probes == 0 {
        return Err(DfError::InvalidArgument(
            "hutchinson estimator needs at least one probe".into(),
        ));
    }
    let sigma = sp.schedule().sigma_unchecked(t);
    let d = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut z = Array1::<f64>::zeros(d);
    for _ in 0..probes {
        for zi in z.iter_mut() {
            *zi = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let jz = sp.eps_jvp(x, t, &z)?;
        acc += z.iter().zip(jz.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc / probes as f64 / sigma)
}

/// Two-prediction trace accessor:
/// `d/sigma^2 - (alpha^2/sigma^4) (d t_pred - |y_pred|^2)`.
///
/// With exact providers this reproduces the oracle Fisher trace identically.
pub fn df_tm_trace<T: TraceProvider + ?Sized, S: ScoreProvider + ?Sized>(
    tp: &T,
    sp: &S,
    x: &Array1<f64>,
    t: f64,
) -> Result<f64> {
    let sched = sp.schedule();
    sched.check_time(t)?;
    let alpha = sched.alpha_unchecked(t);
    let sigma = sched.sigma_unchecked(t);
    let s2 = sigma * sigma;
    let d = x.len() as f64;
    let y = sp.y_pred(x, t)?;
    let tpred = tp.t_pred(x, t)?;
    let norm_sq: f64 = y.iter().map(|v| v * v).sum();
    Ok(d / s2 - alpha * alpha / (s2 * s2) * (d * tpred - norm_sq))
}

/// Rank-two surrogate for the Fisher-vector product:
/// `lam/sigma^2 - (alpha^2/sigma^4) (<x0, lam> x0 - <yhat, lam> yhat)`.
///
/// `x0` is the flow endpoint the adjoint pass is anchored to and `yhat` the
/// denoising prediction at `(x, t)`; in the exact single-point setting both
/// equal the data point and the surrogate is exact.
pub fn df_ea_apply(
    x0: &Array1<f64>,
    yhat: &Array1<f64>,
    lam: &Array1<f64>,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<Array1<f64>> {
    sched.check_time(t)?;
    let d = lam.len();
    if x0.len() != d || yhat.len() != d {
        return Err(DfError::DimensionMismatch {
            context: "df_ea_apply operands",
            expected: d,
            got: x0.len().max(yhat.len()),
        });
    }
    let alpha = sched.alpha_unchecked(t);
    let sigma = sched.sigma_unchecked(t);
    let s2 = sigma * sigma;
    let coef = alpha * alpha / (s2 * s2);
    let dot_x0: f64 = x0.iter().zip(lam.iter()).map(|(a, b)| a * b).sum();
    let dot_y: f64 = yhat.iter().zip(lam.iter()).map(|(a, b)| a * b).sum();
    Ok((0..d)
        .map(|i| lam[i] / s2 - coef * (dot_x0 * x0[i] - dot_y * yhat[i]))
        .collect())
}

/// A-priori error bound for [`df_tm_trace`] given provider error budgets:
/// `(alpha^2/sigma^4) delta1 + delta2^2 / sigma^2`, where `delta1` budgets
/// the weighted-squared-norm prediction and `delta2` the eps prediction.
pub fn bound_trace_error(delta1: f64, delta2: f64, sched: &NoiseSchedule, t: f64) -> Result<f64> {
    sched.check_time(t)?;
    if !(delta1 >= 0.0 && delta2 >= 0.0) {
        return Err(DfError::InvalidArgument(
            "error budgets must be nonnegative".into(),
        ));
    }
    let alpha = sched.alpha_unchecked(t);
    let sigma = sched.sigma_unchecked(t);
    let s2 = sigma * sigma;
    Ok(alpha * alpha / (s2 * s2) * delta1 + delta2 * delta2 / s2)
}

/// A-priori Hilbert-Schmidt error bound for the [`df_ea_apply`] operator:
/// `(alpha^2/sigma^3) (2 D_y^2 + sqrt(d) delta2)` with `D_y` the data radius.
pub fn bound_ea_error(
    delta2: f64,
    data_radius: f64,
    d: usize,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<f64> {
    sched.check_time(t)?;
    if !(delta2 >= 0.0 && data_radius >= 0.0) {
        return Err(DfError::InvalidArgument(
            "error budgets must be nonnegative".into(),
        ));
    }
    let alpha = sched.alpha_unchecked(t);
    let sigma = sched.sigma_unchecked(t);
    Ok(alpha * alpha / (sigma * sigma * sigma)
        * (2.0 * data_radius * data_radius + (d as f64).sqrt() * delta2))
}

/// Node-indexed trace evaluation used by the likelihood integrator. The node
/// index keeps stochastic estimators (Hutchinson) deterministic per grid
/// node regardless of evaluation order.
pub trait TraceEval: Sync {
    fn eval(&self, x: &Array1<f64>, t: f64, node: usize) -> Result<f64>;
}

/// Exact Fisher trace of an empirical dataset.
pub struct ExactDiracTrace<'a> {
    pub ds: &'a DiracDataset,
    pub sched: NoiseSchedule,
}

impl TraceEval for ExactDiracTrace<'_> {
    fn eval(&self, x: &Array1<f64>, t: f64, _node: usize) -> Result<f64> {
        oracle::fisher_trace(self.ds, &self.sched, x, t)
    }
}

/// Exact Fisher trace of a Gaussian initial law (independent of `x`).
pub struct ExactGaussianTrace<'a> {
    pub g: &'a GaussianInitial,
    pub sched: NoiseSchedule,
}

impl TraceEval for ExactGaussianTrace<'_> {
    fn eval(&self, _x: &Array1<f64>, t: f64, _node: usize) -> Result<f64> {
        Ok(oracle::gaussian_fisher(self.g, &self.sched, t)?.trace)
    }
}

/// Trace via [`df_tm_trace`] on a provider pair.
pub struct DfTmTrace<'a, T: TraceProvider + ?Sized, S: ScoreProvider + ?Sized> {
    pub tp: &'a T,
    pub sp: &'a S,
}

impl<T: TraceProvider + ?Sized, S: ScoreProvider + ?Sized> TraceEval for DfTmTrace<'_, T, S> {
    fn eval(&self, x: &Array1<f64>, t: f64, _node: usize) -> Result<f64> {
        df_tm_trace(self.tp, self.sp, x, t)
    }
}

/// Trace via [`trace_via_vjp`] on a score provider.
pub struct VjpTrace<'a, S: ScoreProvider + ?Sized> {
    pub sp: &'a S,
}

impl<S: ScoreProvider + ?Sized> TraceEval for VjpTrace<'_, S> {
    fn eval(&self, x: &Array1<f64>, t: f64, _node: usize) -> Result<f64> {
        trace_via_vjp(self.sp, x, t)
    }
}

/// Trace via [`trace_hutchinson`]; each grid node gets its own derived seed.
pub struct HutchinsonTrace<'a, S: ScoreProvider + ?Sized> {
    pub sp: &'a S,
    pub probes: usize,
    pub seed: u64,
}

impl<S: ScoreProvider + ?Sized> TraceEval for HutchinsonTrace<'_, S> {
    fn eval(&self, x: &Array1<f64>, t: f64, node: usize) -> Result<f64> {
        let node_seed = self
            .seed
            .wrapping_add((node as u64).wrapping_mul(0x9e3779b97f4a7c15));
        trace_hutchinson(self.sp, x, t, self.probes, node_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{fisher_matrix, fisher_trace};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::arr1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn three_points() -> DiracDataset {
        DiracDataset::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap()
    }

    #[test]
    fn exact_provider_eps_matches_score_scaling() {
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let x = arr1(&[0.3, 0.3]);
        let t = 0.5;
        let e = sp.eps(&x, t).unwrap();
        let s = crate::oracle::score(&ds, &sched, &x, t).unwrap();
        let sigma = sched.sigma_unchecked(t);
        for i in 0..2 {
            assert_relative_eq!(e[i], -sigma * s[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn default_y_pred_recovers_oracle_mean() {
        // Route the exact eps through the default trait implementation and
        // compare against the direct weighted mean.
        struct DefaultOnly<'a>(DiracScoreOracle<'a>);
        impl ScoreProvider for DefaultOnly<'_> {
            fn schedule(&self) -> &NoiseSchedule {
                self.0.schedule()
            }
            fn eps(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
                self.0.eps(x, t)
            }
        }
        let ds = three_points();
        let sched = NoiseSchedule::vp_default();
        let wrapped = DefaultOnly(DiracScoreOracle::new(&ds, sched));
        let x = arr1(&[0.2, -0.1]);
        let t = 0.4;
        let via_default = wrapped.y_pred(&x, t).unwrap();
        let direct = crate::oracle::y_oracle(&ds, &sched, &x, t).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(via_default[i], direct[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn fd_jacobian_defaults_agree_with_analytic_overrides() {
        struct DefaultOnly<'a>(DiracScoreOracle<'a>);
        impl ScoreProvider for DefaultOnly<'_> {
            fn schedule(&self) -> &NoiseSchedule {
                self.0.schedule()
            }
            fn eps(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
                self.0.eps(x, t)
            }
        }
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let exact = DiracScoreOracle::new(&ds, sched);
        let fd = DefaultOnly(DiracScoreOracle::new(&ds, sched));
        let x = arr1(&[0.25, 0.1]);
        let t = 0.5;
        let v = arr1(&[0.7, -0.4]);

        let jv_exact = exact.eps_jvp(&x, t, &v).unwrap();
        let jv_fd = fd.eps_jvp(&x, t, &v).unwrap();
        for i in 0..2 {
            assert_relative_eq!(jv_fd[i], jv_exact[i], max_relative = 1e-5);
        }
        let vj_exact = exact.eps_vjp(&x, t, &v).unwrap();
        let vj_fd = fd.eps_vjp(&x, t, &v).unwrap();
        for i in 0..2 {
            assert_relative_eq!(vj_fd[i], vj_exact[i], max_relative = 1e-5);
        }
        assert_relative_eq!(
            fd.eps_jac_diag_sum(&x, t).unwrap(),
            exact.eps_jac_diag_sum(&x, t).unwrap(),
            max_relative = 1e-5
        );
    }

    #[test]
    fn vjp_apply_reproduces_fisher_product() {
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let x = arr1(&[0.1, 0.4]);
        let t = 0.35;
        let v = arr1(&[1.0, 2.0]);
        let got = vjp_apply(&sp, &x, t, &v).unwrap();
        let fe = fisher_matrix(&ds, &sched, &x, t).unwrap();
        let want = fe.matrix.dot(&v);
        let scale = want.iter().map(|a| a * a).sum::<f64>().sqrt();
        for i in 0..2 {
            assert_abs_diff_eq!(got[i], want[i], epsilon = 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn df_tm_trace_with_oracles_is_bitwise_equal_to_fisher_trace() {
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let tp = DiracTraceOracle::new(&ds, sched);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t =
                sched.t_min + (sched.t_max - sched.t_min) * rand::Rng::random::<f64>(&mut rng);
            let x = arr1(&[
                2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0,
                2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0,
            ]);
            let approx_trace = df_tm_trace(&tp, &sp, &x, t).unwrap();
            let exact = fisher_trace(&ds, &sched, &x, t).unwrap();
            // In dimension 2 the (1/d) scaling round-trips exactly, so the
            // two formulas are the same floating-point expression.
            assert_eq!(approx_trace.to_bits(), exact.to_bits());
        }
    }

    #[test]
    fn hutchinson_single_probe_is_exact_in_one_dimension() {
        let ds = DiracDataset::from_rows(&[vec![0.4]]).unwrap();
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let x = arr1(&[0.2]);
        let t = 0.6;
        let est = trace_hutchinson(&sp, &x, t, 1, 42).unwrap();
        let exact = fisher_trace(&ds, &sched, &x, t).unwrap();
        assert_eq!(est.to_bits(), exact.to_bits());
    }

    #[test]
    fn hutchinson_is_unbiased_across_probes() {
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let x = arr1(&[0.3, 0.1]);
        let t = 0.4;
        let exact = fisher_trace(&ds, &sched, &x, t).unwrap();
        let n = 10_000usize;
        let mut sum = 0.0;
        let mut sq_sum = 0.0;
        for k in 0..n {
            let e = trace_hutchinson(&sp, &x, t, 1, k as u64).unwrap();
            sum += e;
            sq_sum += e * e;
        }
        let mean = sum / n as f64;
        let var = (sq_sum / n as f64 - mean * mean).max(0.0);
        let stderr = (var / n as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * stderr + 1e-12,
            "hutchinson mean {mean} vs exact {exact} (stderr {stderr})"
        );
    }

    #[test]
    fn hutchinson_requires_probes_and_respects_seeding() {
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let x = arr1(&[0.3, 0.1]);
        assert!(trace_hutchinson(&sp, &x, 0.4, 0, 7).is_err());
        let a = trace_hutchinson(&sp, &x, 0.4, 16, 7).unwrap();
        let b = trace_hutchinson(&sp, &x, 0.4, 16, 7).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn df_ea_is_exact_for_a_single_point() {
        let y = arr1(&[0.7, -0.2]);
        let ds = DiracDataset::from_rows(&[vec![0.7, -0.2]]).unwrap();
        let sched = NoiseSchedule::ve_default();
        let x = arr1(&[0.5, 0.3]);
        let t = 0.45;
        let lam = arr1(&[1.0, -1.5]);
        let got = df_ea_apply(&y, &y, &lam, &sched, t).unwrap();
        let fe = fisher_matrix(&ds, &sched, &x, t).unwrap();
        let want = fe.matrix.dot(&lam);
        for i in 0..2 {
            assert_relative_eq!(got[i], want[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn trace_error_bound_is_tight_for_pure_t_pred_error() {
        // Inject an error of exactly delta1 into the weighted squared-norm
        // prediction (i.e. delta1/d into t_pred); the measured trace error
        // must equal the delta1 part of the bound.
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let d = ds.dim() as f64;
        let x = arr1(&[0.2, 0.3]);
        for t in [0.2, 0.5, 0.9] {
            for delta1 in [0.01, 0.1, 1.0] {
                let tp = PerturbedTrace::new(DiracTraceOracle::new(&ds, sched), delta1 / d);
                let est = df_tm_trace(&tp, &sp, &x, t).unwrap();
                let exact = fisher_trace(&ds, &sched, &x, t).unwrap();
                let bound = bound_trace_error(delta1, 0.0, &sched, t).unwrap();
                let measured = (est - exact).abs();
                assert!(
                    measured <= bound * (1.0 + 1e-9),
                    "measured {measured} > bound {bound} at t={t}, delta1={delta1}"
                );
                assert_relative_eq!(measured, bound, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn ea_error_bound_dominates_single_point_operator_gap() {
        // Single data point, perturbed eps: assemble both operators column
        // by column and compare the HS gap against the bound.
        let ds = DiracDataset::from_rows(&[vec![3.0, -4.0]]).unwrap(); // D_y = 5
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let delta2 = 0.1;
        let dir = arr1(&[0.6, 0.8]);
        let perturbed = PerturbedScore::new(DiracScoreOracle::new(&ds, sched), delta2, dir).unwrap();
        let x = arr1(&[2.5, -3.0]);
        let t = 0.5;
        let x0 = ds.point(0).to_owned();
        let yhat = perturbed.y_pred(&x, t).unwrap();
        let fe = fisher_matrix(&ds, &sched, &x, t).unwrap();
        let mut gap_sq = 0.0;
        for j in 0..2 {
            let mut e = Array1::<f64>::zeros(2);
            e[j] = 1.0;
            let ea_col = df_ea_apply(&x0, &yhat, &e, &sched, t).unwrap();
            for i in 0..2 {
                let diff = fe.matrix[[i, j]] - ea_col[i];
                gap_sq += diff * diff;
            }
        }
        let gap = gap_sq.sqrt();
        let bound = bound_ea_error(delta2, ds.max_norm(), 2, &sched, t).unwrap();
        assert!(gap <= bound, "gap {gap} exceeds bound {bound}");
        let _ = sp;
    }

    #[test]
    fn perturbed_score_shifts_eps_by_delta() {
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let delta = 0.25;
        let p =
            PerturbedScore::new(DiracScoreOracle::new(&ds, sched), delta, arr1(&[3.0, 4.0]))
                .unwrap();
        let clean = DiracScoreOracle::new(&ds, sched);
        let x = arr1(&[0.1, 0.1]);
        let t = 0.3;
        let e0 = clean.eps(&x, t).unwrap();
        let e1 = p.eps(&x, t).unwrap();
        let diff: f64 = e0
            .iter()
            .zip(e1.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert_relative_eq!(diff, delta, max_relative = 1e-12);
        assert!(PerturbedScore::new(DiracScoreOracle::new(&ds, sched), 0.1, arr1(&[0.0, 0.0]))
            .is_err());
    }

    #[test]
    fn accessors_validate_time_and_dimensions() {
        let ds = three_points();
        let sched = NoiseSchedule::ve_default();
        let sp = DiracScoreOracle::new(&ds, sched);
        let x = arr1(&[0.0, 0.0]);
        assert!(vjp_apply(&sp, &x, 2.0, &x).is_err());
        assert!(vjp_apply(&sp, &x, 0.5, &arr1(&[1.0])).is_err());
        assert!(df_ea_apply(&x, &x, &arr1(&[1.0]), &sched, 0.5).is_err());
        assert!(bound_trace_error(-0.1, 0.0, &sched, 0.5).is_err());
    }
}
