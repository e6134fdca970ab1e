//! Python bindings for the df-lab toolkit.
//!
//! Exposes the noise schedules, point-cloud and Gaussian initial laws, the
//! closed-form density/score/Fisher oracles, the cheap trace and operator
//! accessors with their a-priori error bounds, probability-flow ODE tooling
//! (likelihoods and adjoint gradients), the optimal-transport diagnostic,
//! and the MLP training entry points. Vectors and matrices cross the
//! boundary as plain Python lists; long-running work releases the GIL.

use df_lab::access::{
    self, DiracScoreOracle, DiracTraceOracle, ExactDiracTrace, ExactGaussianTrace,
    GaussianScoreOracle,
};
use df_lab::ode::{self, AdjointOperator};
use df_lab::oracle;
use df_lab::ot::{self, OtConfig, OtInitial};
use df_lab::schedule::NoiseSchedule;
use df_lab::train::{self, LossWeight, MlpNet, TrainConfig};
use df_lab::{DfError, DiracDataset, GaussianInitial};
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIndexError, PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn err(e: DfError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, m), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// A diffusion noise schedule `x_t = alpha(t) y + sigma(t) z`.
#[pyclass(module = "dflab", skip_from_py_object)]
#[derive(Clone)]
struct Schedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl Schedule {
    /// Variance-exploding schedule: `alpha = 1`, geometric `sigma`.
    #[staticmethod]
    #[pyo3(signature = (sigma_min=0.01, sigma_max=50.0))]
    fn ve(sigma_min: f64, sigma_max: f64) -> Self {
        Schedule {
            inner: NoiseSchedule::ve(sigma_min, sigma_max),
        }
    }

    /// Variance-preserving schedule with a linear beta ramp.
    #[staticmethod]
    #[pyo3(signature = (beta_min=0.1, beta_max=20.0))]
    fn vp(beta_min: f64, beta_max: f64) -> Self {
        Schedule {
            inner: NoiseSchedule::vp(beta_min, beta_max),
        }
    }

    /// Sub-variance-preserving schedule with a linear beta ramp.
    #[staticmethod]
    #[pyo3(signature = (beta_min=0.1, beta_max=20.0))]
    fn sub_vp(beta_min: f64, beta_max: f64) -> Self {
        Schedule {
            inner: NoiseSchedule::sub_vp(beta_min, beta_max),
        }
    }

    /// EDM-style schedule: `alpha = 1`, `sigma = 80 t`.
    #[staticmethod]
    fn edm() -> Self {
        Schedule {
            inner: NoiseSchedule::edm(),
        }
    }

    /// Copy of this schedule restricted to `[t_min, t_max]`.
    fn with_time_range(&self, t_min: f64, t_max: f64) -> Self {
        Schedule {
            inner: self.inner.with_time_range(t_min, t_max),
        }
    }

    fn alpha(&self, t: f64) -> PyResult<f64> {
        self.inner.check_time(t).map_err(err)?;
        Ok(self.inner.alpha_unchecked(t))
    }

    fn sigma(&self, t: f64) -> PyResult<f64> {
        self.inner.check_time(t).map_err(err)?;
        Ok(self.inner.sigma_unchecked(t))
    }

    #[getter]
    fn t_min(&self) -> f64 {
        self.inner.t_min
    }

    #[getter]
    fn t_max(&self) -> f64 {
        self.inner.t_max
    }

    #[getter]
    fn label(&self) -> &'static str {
        self.inner.kind.label()
    }

    fn __repr__(&self) -> String {
        format!(
            "Schedule({}, t in [{}, {}])",
            self.inner.kind.label(),
            self.inner.t_min,
            self.inner.t_max
        )
    }
}

/// An empirical point-cloud initial law (equal-weight Dirac mixture).
#[pyclass(module = "dflab", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: DiracDataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        DiracDataset::from_rows(&rows)
            .map(|inner| Dataset { inner })
            .map_err(err)
    }

    /// Three collinear points in the plane.
    #[staticmethod]
    fn affine3() -> Self {
        Dataset {
            inner: DiracDataset::affine3(),
        }
    }

    /// Three non-collinear points in the plane.
    #[staticmethod]
    fn nonaffine3() -> Self {
        Dataset {
            inner: DiracDataset::nonaffine3(),
        }
    }

    /// `n` points sampled uniformly from the black squares of a chessboard.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0))]
    fn chessboard(n: usize, seed: u64) -> PyResult<Self> {
        train::gen_chessboard(n, seed)
            .map(|inner| Dataset { inner })
            .map_err(err)
    }

    /// Load a headerless CSV of points, one row per point.
    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        DiracDataset::read_csv(&path)
            .map(|inner| Dataset { inner })
            .map_err(err)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn point(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n() {
            return Err(PyIndexError::new_err(format!(
                "point index {i} out of range for {} points",
                self.inner.n()
            )));
        }
        Ok(self.inner.point(i).to_vec())
    }

    fn points(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.inner.points())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} points, dim {})",
            self.inner.n(),
            self.inner.dim()
        )
    }
}

/// A Gaussian initial law with closed-form diffused marginals.
#[pyclass(module = "dflab", skip_from_py_object)]
#[derive(Clone)]
struct Gaussian {
    inner: GaussianInitial,
}

#[pymethods]
impl Gaussian {
    #[new]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        GaussianInitial::new(Array1::from_vec(mean), to_matrix(&cov)?)
            .map(|inner| Gaussian { inner })
            .map_err(err)
    }

    /// Gaussian with covariance `variance * I`.
    #[staticmethod]
    fn isotropic(mean: Vec<f64>, variance: f64) -> PyResult<Self> {
        GaussianInitial::isotropic(Array1::from_vec(mean), variance)
            .map(|inner| Gaussian { inner })
            .map_err(err)
    }

    /// The standard 2-d probe Gaussian.
    #[staticmethod]
    fn probe() -> Self {
        Gaussian {
            inner: GaussianInitial::probe(),
        }
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().to_vec()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.inner.cov())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Covariance of the diffused marginal at time `t`.
    fn marginal_cov(&self, sched: &Schedule, t: f64) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .marginal_cov(&sched.inner, t)
            .map(|m| matrix_rows(&m))
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Gaussian(dim {})", self.inner.dim())
    }
}

/// A trained multi-layer perceptron (tanh hidden layers, linear output).
#[pyclass(module = "dflab", skip_from_py_object)]
struct Mlp {
    inner: MlpNet,
}

#[pymethods]
impl Mlp {
    /// Load a checkpoint written by `save`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        MlpNet::load(&path).map(|inner| Mlp { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Forward pass on a single raw input row (state features plus time
    /// features, as assembled by the training stack).
    fn forward(&self, input: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .forward(&Array1::from_vec(input))
            .map(|v| v.to_vec())
            .map_err(err)
    }

    #[getter]
    fn n_in(&self) -> usize {
        self.inner.n_in()
    }

    #[getter]
    fn n_out(&self) -> usize {
        self.inner.n_out()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mlp({} -> {}, {} params)",
            self.inner.n_in(),
            self.inner.n_out(),
            self.inner.param_count()
        )
    }
}

/// Score `grad log q_t(x)` of the diffused point cloud.
#[pyfunction]
fn score(ds: &Dataset, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    oracle::score(&ds.inner, &sched.inner, &Array1::from_vec(x), t)
        .map(|v| v.to_vec())
        .map_err(err)
}

/// Log density `log q_t(x)` of the diffused point cloud.
#[pyfunction]
fn log_density(ds: &Dataset, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<f64> {
    oracle::log_density(&ds.inner, &sched.inner, &Array1::from_vec(x), t).map_err(err)
}

/// Posterior mean of the clean sample given `x` at time `t`.
#[pyfunction]
fn y_oracle(ds: &Dataset, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    oracle::y_oracle(&ds.inner, &sched.inner, &Array1::from_vec(x), t)
        .map(|v| v.to_vec())
        .map_err(err)
}

/// Posterior mean of `|y|^2 / d` given `x` at time `t`.
#[pyfunction]
fn t_oracle(ds: &Dataset, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<f64> {
    oracle::t_oracle(&ds.inner, &sched.inner, &Array1::from_vec(x), t).map_err(err)
}

/// Exact Fisher information matrix `-hessian log q_t(x)` as nested lists.
#[pyfunction]
fn fisher_matrix(ds: &Dataset, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<Vec<Vec<f64>>> {
    oracle::fisher_matrix(&ds.inner, &sched.inner, &Array1::from_vec(x), t)
        .map(|fe| matrix_rows(&fe.matrix))
        .map_err(err)
}

/// Exact Fisher trace at `(x, t)`.
#[pyfunction]
fn fisher_trace(ds: &Dataset, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<f64> {
    oracle::fisher_trace(&ds.inner, &sched.inner, &Array1::from_vec(x), t).map_err(err)
}

/// Score of the diffused Gaussian law.
#[pyfunction]
fn gaussian_score(g: &Gaussian, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    oracle::gaussian_score(&g.inner, &sched.inner, &Array1::from_vec(x), t)
        .map(|v| v.to_vec())
        .map_err(err)
}

/// Log density of the diffused Gaussian law.
#[pyfunction]
fn gaussian_log_density(g: &Gaussian, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<f64> {
    oracle::gaussian_log_density(&g.inner, &sched.inner, &Array1::from_vec(x), t).map_err(err)
}

/// Fisher matrix of the diffused Gaussian law (independent of `x`).
#[pyfunction]
fn gaussian_fisher_matrix(g: &Gaussian, sched: &Schedule, t: f64) -> PyResult<Vec<Vec<f64>>> {
    oracle::gaussian_fisher(&g.inner, &sched.inner, t)
        .map(|fe| matrix_rows(&fe.matrix))
        .map_err(err)
}

/// Fisher trace of the diffused Gaussian law.
#[pyfunction]
fn gaussian_fisher_trace(g: &Gaussian, sched: &Schedule, t: f64) -> PyResult<f64> {
    oracle::gaussian_fisher(&g.inner, &sched.inner, t)
        .map(|fe| fe.trace)
        .map_err(err)
}

/// Two-prediction trace surrogate evaluated with the exact oracles.
#[pyfunction]
fn df_tm_trace(ds: &Dataset, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<f64> {
    let tp = DiracTraceOracle::new(&ds.inner, sched.inner);
    let sp = DiracScoreOracle::new(&ds.inner, sched.inner);
    access::df_tm_trace(&tp, &sp, &Array1::from_vec(x), t).map_err(err)
}

/// Fisher trace via the diagonal of the analytic noise-prediction Jacobian.
#[pyfunction]
fn trace_via_vjp(ds: &Dataset, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<f64> {
    let sp = DiracScoreOracle::new(&ds.inner, sched.inner);
    access::trace_via_vjp(&sp, &Array1::from_vec(x), t).map_err(err)
}

/// Hutchinson trace estimate with Rademacher probes on the exact oracle.
#[pyfunction]
#[pyo3(signature = (ds, sched, x, t, probes=64, seed=0))]
fn trace_hutchinson(
    ds: &Dataset,
    sched: &Schedule,
    x: Vec<f64>,
    t: f64,
    probes: usize,
    seed: u64,
) -> PyResult<f64> {
    let sp = DiracScoreOracle::new(&ds.inner, sched.inner);
    access::trace_hutchinson(&sp, &Array1::from_vec(x), t, probes, seed).map_err(err)
}

/// Rank-two surrogate of the Fisher-vector product.
#[pyfunction]
fn df_ea_apply(
    x0: Vec<f64>,
    yhat: Vec<f64>,
    lam: Vec<f64>,
    sched: &Schedule,
    t: f64,
) -> PyResult<Vec<f64>> {
    access::df_ea_apply(
        &Array1::from_vec(x0),
        &Array1::from_vec(yhat),
        &Array1::from_vec(lam),
        &sched.inner,
        t,
    )
    .map(|v| v.to_vec())
    .map_err(err)
}

/// A-priori error bound of the two-prediction trace surrogate.
#[pyfunction]
fn bound_trace_error(delta1: f64, delta2: f64, sched: &Schedule, t: f64) -> PyResult<f64> {
    access::bound_trace_error(delta1, delta2, &sched.inner, t).map_err(err)
}

/// A-priori Hilbert-Schmidt error bound of the rank-two operator surrogate.
#[pyfunction]
fn bound_ea_error(
    delta2: f64,
    data_radius: f64,
    d: usize,
    sched: &Schedule,
    t: f64,
) -> PyResult<f64> {
    access::bound_ea_error(delta2, data_radius, d, &sched.inner, t).map_err(err)
}

/// Integrate the probability-flow ODE from `t_max` down to `t_min` and
/// return the endpoint.
#[pyfunction]
#[pyo3(signature = (ds, sched, x_terminal, steps=200))]
fn pf_ode_endpoint(
    py: Python<'_>,
    ds: &Dataset,
    sched: &Schedule,
    x_terminal: Vec<f64>,
    steps: usize,
) -> PyResult<Vec<f64>> {
    let ds = ds.inner.clone();
    let sched = sched.inner;
    let x = Array1::from_vec(x_terminal);
    py.detach(move || {
        let sp = DiracScoreOracle::new(&ds, sched);
        ode::pf_ode_solve(&sp, &x, steps).map(|traj| traj.endpoint().to_vec())
    })
    .map_err(err)
}

/// Integrate the probability-flow ODE between two times (`t_start` above
/// `t_stop`) and return the endpoint.
#[pyfunction]
#[pyo3(signature = (ds, sched, x_at_start, t_start, t_stop, steps=200))]
fn pf_ode_endpoint_between(
    py: Python<'_>,
    ds: &Dataset,
    sched: &Schedule,
    x_at_start: Vec<f64>,
    t_start: f64,
    t_stop: f64,
    steps: usize,
) -> PyResult<Vec<f64>> {
    let ds = ds.inner.clone();
    let sched = sched.inner;
    let x = Array1::from_vec(x_at_start);
    py.detach(move || {
        let sp = DiracScoreOracle::new(&ds, sched);
        ode::pf_ode_solve_between(&sp, &x, t_start, t_stop, steps)
            .map(|traj| traj.endpoint().to_vec())
    })
    .map_err(err)
}

/// Negative log likelihood of a point under the point-cloud flow, with the
/// exact Fisher trace in the likelihood integrand. Returns
/// `(nll_nats, bits_per_dim)`.
#[pyfunction]
#[pyo3(signature = (ds, sched, x, steps=500))]
fn nll(
    py: Python<'_>,
    ds: &Dataset,
    sched: &Schedule,
    x: Vec<f64>,
    steps: usize,
) -> PyResult<(f64, f64)> {
    let ds = ds.inner.clone();
    let sched = sched.inner;
    let x = Array1::from_vec(x);
    py.detach(move || {
        let sp = DiracScoreOracle::new(&ds, sched);
        let te = ExactDiracTrace { ds: &ds, sched };
        ode::nll_solve(&sp, &te, &x, steps).map(|r| (r.nll_nats, r.bpd))
    })
    .map_err(err)
}

/// Negative log likelihood of a point under the Gaussian flow. Returns
/// `(nll_nats, bits_per_dim)`.
#[pyfunction]
#[pyo3(signature = (g, sched, x, steps=500))]
fn gaussian_nll(
    py: Python<'_>,
    g: &Gaussian,
    sched: &Schedule,
    x: Vec<f64>,
    steps: usize,
) -> PyResult<(f64, f64)> {
    let g = g.inner.clone();
    let sched = sched.inner;
    let x = Array1::from_vec(x);
    py.detach(move || {
        let sp = GaussianScoreOracle::new(&g, sched);
        let te = ExactGaussianTrace { g: &g, sched };
        ode::nll_solve(&sp, &te, &x, steps).map(|r| (r.nll_nats, r.bpd))
    })
    .map_err(err)
}

/// Gradient of the endpoint loss `1/2 |x_end - x_ref|^2` with respect to the
/// terminal state, via the adjoint ODE with the exact Fisher operator.
#[pyfunction]
#[pyo3(signature = (ds, sched, x_terminal, x_ref, steps=200))]
fn adjoint_flow_grad(
    py: Python<'_>,
    ds: &Dataset,
    sched: &Schedule,
    x_terminal: Vec<f64>,
    x_ref: Vec<f64>,
    steps: usize,
) -> PyResult<Vec<f64>> {
    let ds = ds.inner.clone();
    let sched = sched.inner;
    let x = Array1::from_vec(x_terminal);
    let x_ref = Array1::from_vec(x_ref);
    py.detach(move || {
        let sp = DiracScoreOracle::new(&ds, sched);
        let traj = ode::pf_ode_solve(&sp, &x, steps)?;
        let grad_end = traj.endpoint() - &x_ref;
        let op = AdjointOperator::ExactDirac { ds: &ds, sched };
        let lambdas = ode::adjoint_solve(&op, &sched, &traj, &grad_end)?;
        Ok(lambdas[0].to_vec())
    })
    .map_err(err)
}

/// Finite-difference oracle for the same endpoint-loss gradient.
#[pyfunction]
#[pyo3(signature = (ds, sched, x_terminal, x_ref, steps=200))]
fn flow_grad_fd(
    py: Python<'_>,
    ds: &Dataset,
    sched: &Schedule,
    x_terminal: Vec<f64>,
    x_ref: Vec<f64>,
    steps: usize,
) -> PyResult<Vec<f64>> {
    let ds = ds.inner.clone();
    let sched = sched.inner;
    let x = Array1::from_vec(x_terminal);
    let x_ref = Array1::from_vec(x_ref);
    py.detach(move || {
        let sp = DiracScoreOracle::new(&ds, sched);
        ode::flow_grad_fd(&sp, &x, steps, &x_ref).map(|g| g.to_vec())
    })
    .map_err(err)
}

/// Fundamental-matrix symmetry diagnostic of the flow map. `data` is a
/// `Dataset` or a `Gaussian`; returns a dict with the per-experiment
/// aggregates and verdict.
#[pyfunction]
#[pyo3(signature = (data, sched, m=1000, n_traj=16, seed=0, s_stop=None, transpose_variant=false, sym_tol=1e-6, eig_tol=1e-8))]
#[allow(clippy::too_many_arguments)]
fn ot_check<'py>(
    py: Python<'py>,
    data: &Bound<'py, PyAny>,
    sched: &Schedule,
    m: usize,
    n_traj: usize,
    seed: u64,
    s_stop: Option<f64>,
    transpose_variant: bool,
    sym_tol: f64,
    eig_tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    enum Init {
        Points(DiracDataset),
        Gauss(GaussianInitial),
    }
    let (init, label) = if let Ok(d) = data.extract::<PyRef<Dataset>>() {
        (Init::Points(d.inner.clone()), "points")
    } else if let Ok(g) = data.extract::<PyRef<Gaussian>>() {
        (Init::Gauss(g.inner.clone()), "gaussian")
    } else {
        return Err(PyTypeError::new_err(
            "data must be a dflab.Dataset or dflab.Gaussian",
        ));
    };
    let sched = sched.inner;
    let cfg = OtConfig {
        data_label: label.to_string(),
        m,
        s_stop: s_stop.unwrap_or(sched.t_min),
        n_traj,
        seed,
        transpose_variant,
        sym_tol,
        eig_tol,
    };
    let report = py
        .detach(move || {
            let init = match &init {
                Init::Points(ds) => OtInitial::Dirac(ds),
                Init::Gauss(g) => OtInitial::Gaussian(g),
            };
            ot::ot_experiment(&init, &sched, &cfg)
        })
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("schedule", report.schedule)?;
    out.set_item("data", report.data)?;
    out.set_item("m", report.m)?;
    out.set_item("n_traj", report.n_traj)?;
    out.set_item("seed", report.seed)?;
    out.set_item("s_stop", report.s_stop)?;
    out.set_item("transpose_variant", report.transpose_variant)?;
    out.set_item("max_asym", report.max_asym)?;
    out.set_item("min_eig_sym", report.min_eig_sym)?;
    out.set_item("ot_consistent", report.ot_consistent)?;
    out.set_item("verdict", report.verdict)?;
    out.set_item("note", report.note)?;
    Ok(out)
}

fn build_cfg(
    n_steps: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    seed: u64,
    hidden: Option<Vec<usize>>,
    sigma_weighted: bool,
) -> TrainConfig {
    TrainConfig {
        batch_size,
        n_steps,
        learning_rate,
        weight_decay,
        seed,
        hidden: hidden.unwrap_or_else(|| vec![64, 64, 64]),
        loss_weight: if sigma_weighted {
            LossWeight::SigmaSquared
        } else {
            LossWeight::Constant(1.0)
        },
    }
}

/// Train the noise-prediction net. Returns `(Mlp, loss_history)`.
#[pyfunction]
#[pyo3(signature = (ds, sched, n_steps=20_000, batch_size=256, learning_rate=1e-4,
                    weight_decay=0.0, seed=0, hidden=None, sigma_weighted=false))]
#[allow(clippy::too_many_arguments)]
fn train_eps(
    py: Python<'_>,
    ds: &Dataset,
    sched: &Schedule,
    n_steps: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    seed: u64,
    hidden: Option<Vec<usize>>,
    sigma_weighted: bool,
) -> PyResult<(Mlp, Vec<f64>)> {
    let ds = ds.inner.clone();
    let sched = sched.inner;
    let cfg = build_cfg(
        n_steps,
        batch_size,
        learning_rate,
        weight_decay,
        seed,
        hidden,
        sigma_weighted,
    );
    py.detach(move || train::train_eps(&ds, &sched, &cfg))
        .map(|out| (Mlp { inner: out.net }, out.loss_history))
        .map_err(err)
}

/// Train the squared-norm net. Returns `(Mlp, loss_history)`.
#[pyfunction]
#[pyo3(signature = (ds, sched, n_steps=20_000, batch_size=256, learning_rate=1e-4,
                    weight_decay=0.0, seed=0, hidden=None, sigma_weighted=false))]
#[allow(clippy::too_many_arguments)]
fn train_tm(
    py: Python<'_>,
    ds: &Dataset,
    sched: &Schedule,
    n_steps: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    seed: u64,
    hidden: Option<Vec<usize>>,
    sigma_weighted: bool,
) -> PyResult<(Mlp, Vec<f64>)> {
    let ds = ds.inner.clone();
    let sched = sched.inner;
    let cfg = build_cfg(
        n_steps,
        batch_size,
        learning_rate,
        weight_decay,
        seed,
        hidden,
        sigma_weighted,
    );
    py.detach(move || train::train_tm(&ds, &sched, &cfg))
        .map(|out| (Mlp { inner: out.net }, out.loss_history))
        .map_err(err)
}

/// Noise prediction of a trained eps net at `(x, t)`.
#[pyfunction]
fn mlp_eps(net: &Mlp, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    let sp = train::MlpScoreProvider::new(&net.inner, sched.inner).map_err(err)?;
    use df_lab::access::ScoreProvider;
    sp.eps(&Array1::from_vec(x), t).map(|v| v.to_vec()).map_err(err)
}

/// Squared-norm prediction of a trained scalar net at `(x, t)`.
#[pyfunction]
fn mlp_t_pred(net: &Mlp, sched: &Schedule, x: Vec<f64>, t: f64) -> PyResult<f64> {
    let tp = train::MlpTraceProvider::new(&net.inner, sched.inner).map_err(err)?;
    use df_lab::access::TraceProvider;
    tp.t_pred(&Array1::from_vec(x), t).map_err(err)
}

/// Relative trace errors of the finite-difference VJP route and the two-net
/// surrogate against the exact trace, on diffused draws at each grid time.
/// Returns rows `(t, vjp_rel_err, df_tm_rel_err)`.
#[pyfunction]
#[pyo3(signature = (eps_net, tm_net, ds, sched, t_grid, n_eval_points=64, seed=0))]
fn eval_trace_table(
    py: Python<'_>,
    eps_net: &Mlp,
    tm_net: &Mlp,
    ds: &Dataset,
    sched: &Schedule,
    t_grid: Vec<f64>,
    n_eval_points: usize,
    seed: u64,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let eps = eps_net.inner.clone();
    let tm = tm_net.inner.clone();
    let ds = ds.inner.clone();
    let sched = sched.inner;
    py.detach(move || {
        train::eval_trace_table(&eps, &tm, &ds, &sched, &t_grid, n_eval_points, seed)
    })
    .map(|rows| {
        rows.into_iter()
            .map(|r| (r.t, r.vjp_rel_err, r.df_tm_rel_err))
            .collect()
    })
    .map_err(err)
}

#[pymodule]
fn dflab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Schedule>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Gaussian>()?;
    m.add_class::<Mlp>()?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(log_density, m)?)?;
    m.add_function(wrap_pyfunction!(y_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(t_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_trace, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_score, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_log_density, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_fisher_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_fisher_trace, m)?)?;
    m.add_function(wrap_pyfunction!(df_tm_trace, m)?)?;
    m.add_function(wrap_pyfunction!(trace_via_vjp, m)?)?;
    m.add_function(wrap_pyfunction!(trace_hutchinson, m)?)?;
    m.add_function(wrap_pyfunction!(df_ea_apply, m)?)?;
    m.add_function(wrap_pyfunction!(bound_trace_error, m)?)?;
    m.add_function(wrap_pyfunction!(bound_ea_error, m)?)?;
    m.add_function(wrap_pyfunction!(pf_ode_endpoint, m)?)?;
    m.add_function(wrap_pyfunction!(pf_ode_endpoint_between, m)?)?;
    m.add_function(wrap_pyfunction!(nll, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_nll, m)?)?;
    m.add_function(wrap_pyfunction!(adjoint_flow_grad, m)?)?;
    m.add_function(wrap_pyfunction!(flow_grad_fd, m)?)?;
    m.add_function(wrap_pyfunction!(ot_check, m)?)?;
    m.add_function(wrap_pyfunction!(train_eps, m)?)?;
    m.add_function(wrap_pyfunction!(train_tm, m)?)?;
    m.add_function(wrap_pyfunction!(mlp_eps, m)?)?;
    m.add_function(wrap_pyfunction!(mlp_t_pred, m)?)?;
    m.add_function(wrap_pyfunction!(eval_trace_table, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
