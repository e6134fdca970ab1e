//! Exact marginal quantities for analytically tractable initial data.
//!
//! When the data distribution is an empirical point cloud, the diffused
//! marginal at time `t` is a finite Gaussian mixture with equal component
//! weights, so its log density, score, and Hessian all have closed forms in
//! terms of softmax weights over the data points:
//!
//! ```text
//! w_i(x, t) ∝ exp(-|x - alpha_t y_i|^2 / (2 sigma_t^2))
//! score(x, t)  = -(x - alpha_t ybar) / sigma_t^2,        ybar = sum_i w_i y_i
//! fisher(x, t) = I/sigma^2 - (alpha^2/sigma^4) (sum_i w_i y_i y_i^T - ybar ybar^T)
//! ```
//!
//! where "fisher" denotes the negative Hessian of the log marginal. The same
//! quantities are provided for a Gaussian initial law, where the marginal
//! stays Gaussian with covariance `alpha^2 Sigma + sigma^2 I`.
//!
//! All weight computations run in log space with a max shift, so collapsed
//! mixtures (tiny `sigma`) stay finite.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{DfError, Result};
use crate::linalg;
use crate::schedule::NoiseSchedule;

/// An empirical dataset of `n` points in `R^d`, treated as an equal-weight
/// mixture of Dirac masses.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracDataset {
    points: Array2<f64>,
    max_norm: f64,
}

impl DiracDataset {
    /// Wrap an `n x d` matrix of points. Requires at least one point, at
    /// least one coordinate, and finite entries.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(DfError::InvalidArgument(
                "dataset must contain at least one point".into(),
            ));
        }
        if points.ncols() == 0 {
            return Err(DfError::InvalidArgument(
                "dataset points must have at least one coordinate".into(),
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(DfError::InvalidArgument(
                "dataset contains non-finite coordinates".into(),
            ));
        }
        let max_norm = points
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Ok(Self { points, max_norm })
    }

    /// Build from a row-per-point nested vector.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(DfError::InvalidArgument(
                "dataset must contain at least one point".into(),
            ));
        }
        let d = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(DfError::DimensionMismatch {
                    context: "ragged dataset rows",
                    expected: d,
                    got: rows[i].len(),
                });
            }
        }
        let mut points = Array2::<f64>::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                points[[i, j]] = *v;
            }
        }
        Self::new(points)
    }

    /// Three collinear probe points; every flow-map diagnostic on this set
    /// should come out symmetric.
    pub fn affine3() -> Self {
        Self::from_rows(&[vec![0.2, -0.4], vec![0.2, 0.0], vec![0.2, 0.9]])
            .expect("static probe points are well formed")
    }

    /// Three non-collinear probe points; the smallest set on which the
    /// flow-map diagnostics pick up asymmetry.
    pub fn nonaffine3() -> Self {
        Self::from_rows(&[vec![0.0, 0.5], vec![0.0, 0.0], vec![0.5, 0.0]])
            .expect("static probe points are well formed")
    }

    /// Number of points.
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// View of point `i`.
    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    /// The full `n x d` point matrix.
    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    /// Largest Euclidean norm among the points (the data radius `D_y`).
    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    /// Read a dataset from a CSV file with header `x0,x1,...,x{d-1}`.
    /// Lines starting with `#` are treated as comments.
    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        {
            let headers = reader.headers()?;
            for (j, h) in headers.iter().enumerate() {
                let expected = format!("x{j}");
                if h != expected {
                    return Err(DfError::Parse {
                        path: path_str,
                        reason: format!("expected header column '{expected}', found '{h}'"),
                    });
                }
            }
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row: std::result::Result<Vec<f64>, _> =
                record.iter().map(|s| s.parse::<f64>()).collect();
            match row {
                Ok(r) => rows.push(r),
                Err(e) => {
                    return Err(DfError::Parse {
                        path: path_str,
                        reason: format!("non-numeric field: {e}"),
                    })
                }
            }
        }
        if rows.is_empty() {
            return Err(DfError::Parse {
                path: path_str,
                reason: "no data rows".into(),
            });
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(DfError::Parse {
                path: path_str,
                reason: "ragged rows".into(),
            });
        }
        Self::from_rows(&rows)
    }

    /// Write the dataset in the same CSV format `read_csv` accepts.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        writeln!(file, "{}", header.join(","))?;
        for row in self.points.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(file, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Softmax weights of the mixture components at one `(x, t)`, kept together
/// with their log-space representation.
#[derive(Debug, Clone)]
pub struct SoftWeights {
    /// Unnormalized log weights `-|x - alpha y_i|^2 / (2 sigma^2)`.
    pub log_v: Vec<f64>,
    /// Normalized weights, summing to one.
    pub w: Vec<f64>,
}

impl SoftWeights {
    /// Normalize a vector of log weights with a max shift.
    pub fn from_log_v(log_v: Vec<f64>) -> Self {
        let lse = linalg::logsumexp(&log_v);
        let w = log_v.iter().map(|lv| (lv - lse).exp()).collect();
        Self { log_v, w }
    }

    /// Weighted mean `sum_i w_i y_i`.
    pub fn mean(&self, ds: &DiracDataset) -> Array1<f64> {
        let d = ds.dim();
        let mut m = Array1::<f64>::zeros(d);
        for (i, wi) in self.w.iter().enumerate() {
            if *wi == 0.0 {
                continue;
            }
            let y = ds.point(i);
            for j in 0..d {
                m[j] += wi * y[j];
            }
        }
        m
    }

    /// Weighted mean of squared norms `sum_i w_i |y_i|^2`.
    pub fn mean_sq_norm(&self, ds: &DiracDataset) -> f64 {
        self.w
            .iter()
            .enumerate()
            .map(|(i, wi)| {
                if *wi == 0.0 {
                    0.0
                } else {
                    wi * ds.point(i).iter().map(|v| v * v).sum::<f64>()
                }
            })
            .sum()
    }

    /// Weighted covariance of the points,
    /// `sum_i w_i y_i y_i^T - mean mean^T`, built exactly symmetric.
    pub fn covariance(&self, ds: &DiracDataset) -> Array2<f64> {
        let d = ds.dim();
        let m = self.mean(ds);
        let mut c = Array2::<f64>::zeros((d, d));
        for (i, wi) in self.w.iter().enumerate() {
            if *wi == 0.0 {
                continue;
            }
            let y = ds.point(i);
            for a in 0..d {
                for b in a..d {
                    c[[a, b]] += wi * y[a] * y[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = c[[a, b]] - m[a] * m[b];
                c[[a, b]] = v;
                c[[b, a]] = v;
            }
        }
        c
    }
}

fn check_state(dim: usize, x: &Array1<f64>, context: &'static str) -> Result<()> {
    if x.len() != dim {
        return Err(DfError::DimensionMismatch {
            context,
            expected: dim,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DfError::InvalidArgument(format!(
            "non-finite state vector in {context}"
        )));
    }
    Ok(())
}

/// Mixture weights `w_i(x, t)` for an empirical dataset.
pub fn weights(ds: &DiracDataset, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<SoftWeights> {
    sched.check_time(t)?;
    check_state(ds.dim(), x, "weights")?;
    let alpha = sched.alpha_unchecked(t);
    let sigma = sched.sigma_unchecked(t);
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let log_v = ds
        .points()
        .rows()
        .into_iter()
        .map(|y| {
            let sq: f64 = x
                .iter()
                .zip(y.iter())
                .map(|(xi, yi)| {
                    let r = xi - alpha * yi;
                    r * r
                })
                .sum();
            -sq * inv_two_var
        })
        .collect();
    Ok(SoftWeights::from_log_v(log_v))
}

/// Log density of the diffused marginal `q_t` at `x`.
pub fn log_density(ds: &DiracDataset, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<f64> {
    let sw = weights(ds, sched, x, t)?;
    let sigma = sched.sigma_unchecked(t);
    let d = ds.dim() as f64;
    let norm = -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    Ok(linalg::logsumexp(&sw.log_v) - (ds.n() as f64).ln() + norm)
}

/// Score `∇_x log q_t(x) = -(x - alpha ybar)/sigma^2`.
pub fn score(ds: &DiracDataset, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
    let sw = weights(ds, sched, x, t)?;
    let alpha = sched.alpha_unchecked(t);
    let sigma = sched.sigma_unchecked(t);
    let m = sw.mean(ds);
    let inv_var = 1.0 / (sigma * sigma);
    Ok(x.iter()
        .zip(m.iter())
        .map(|(xi, mi)| -(xi - alpha * mi) * inv_var)
        .collect())
}

/// The weighted mean `ybar(x, t) = sum_i w_i y_i`, i.e. the ideal
/// denoising prediction at `(x, t)`.
pub fn y_oracle(ds: &DiracDataset, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
    let sw = weights(ds, sched, x, t)?;
    Ok(sw.mean(ds))
}

/// The ideal squared-norm prediction `(1/d) sum_i w_i |y_i|^2`.
pub fn t_oracle(ds: &DiracDataset, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<f64> {
    let sw = weights(ds, sched, x, t)?;
    Ok(sw.mean_sq_norm(ds) / ds.dim() as f64)
}

/// Negative Hessian of the log marginal together with its trace.
#[derive(Debug, Clone)]
pub struct FisherEval {
    /// The `d x d` matrix, exactly symmetric by construction.
    pub matrix: Array2<f64>,
    /// Sum of the diagonal of `matrix`.
    pub trace: f64,
}

/// Full negative-Hessian matrix
/// `I/sigma^2 - (alpha^2/sigma^4) (sum_i w_i y_i y_i^T - ybar ybar^T)`.
pub fn fisher_matrix(ds: &DiracDataset, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<FisherEval> {
    let sw = weights(ds, sched, x, t)?;
    let alpha = sched.alpha_unchecked(t);
    let sigma = sched.sigma_unchecked(t);
    Ok(fisher_from_covariance(&sw.covariance(ds), alpha, sigma))
}

/// Assemble the negative Hessian from a precomputed weighted covariance.
pub(crate) fn fisher_from_covariance(cov: &Array2<f64>, alpha: f64, sigma: f64) -> FisherEval {
    let d = cov.nrows();
    let inv_var = 1.0 / (sigma * sigma);
    let coef = alpha * alpha / (sigma * sigma * sigma * sigma);
    let mut matrix = Array2::<f64>::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            matrix[[a, b]] = -coef * cov[[a, b]];
        }
        matrix[[a, a]] += inv_var;
    }
    let trace = (0..d).map(|i| matrix[[i, i]]).sum();
    FisherEval { matrix, trace }
}

/// Trace of the negative Hessian via the scalar identity
/// `d/sigma^2 - (alpha^2/sigma^4) (sum_i w_i |y_i|^2 - |ybar|^2)`.
pub fn fisher_trace(ds: &DiracDataset, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<f64> {
    let sw = weights(ds, sched, x, t)?;
    let alpha = sched.alpha_unchecked(t);
    let sigma = sched.sigma_unchecked(t);
    let m = sw.mean(ds);
    let s2: f64 = sigma * sigma;
    let spread = sw.mean_sq_norm(ds) - m.iter().map(|v| v * v).sum::<f64>();
    Ok(ds.dim() as f64 / s2 - alpha * alpha / (s2 * s2) * spread)
}

/// A Gaussian initial law `N(mean, cov)` with an SPD covariance.
#[derive(Debug, Clone)]
pub struct GaussianInitial {
    mean: Array1<f64>,
    cov: Array2<f64>,
    chol: Array2<f64>,
}

impl GaussianInitial {
    /// Validate symmetry (to 1e-12 relative to the largest entry) and
    /// positive definiteness.
    pub fn new(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(DfError::DimensionMismatch {
                context: "gaussian covariance vs mean",
                expected: mean.len(),
                got: cov.nrows().max(cov.ncols()),
            });
        }
        let scale = cov.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
        for i in 0..cov.nrows() {
            for j in (i + 1)..cov.ncols() {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-12 * scale {
                    return Err(DfError::InvalidArgument(
                        "gaussian covariance is not symmetric".into(),
                    ));
                }
            }
        }
        let chol = linalg::cholesky(&cov, "gaussian covariance")?;
        Ok(Self { mean, cov, chol })
    }

    /// Standard normal in `d` dimensions, centered at `mean`.
    pub fn isotropic(mean: Array1<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        let cov = Array2::from_diag_elem(d, variance);
        Self::new(mean, cov)
    }

    /// Unit-covariance probe Gaussian centered at `(0.5, 0.5)`, the
    /// reference initial law of the flow-map diagnostics.
    pub fn probe() -> Self {
        Self::isotropic(ndarray::arr1(&[0.5, 0.5]), 1.0).expect("static probe law is well formed")
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draw one sample using the cached Cholesky factor.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Array1<f64> {
        let d = self.dim();
        let z: Array1<f64> = (0..d)
            .map(|_| rand::Rng::sample(rng, rand_distr::StandardNormal))
            .collect();
        let mut out = self.mean.clone();
        for i in 0..d {
            for k in 0..=i {
                out[i] += self.chol[[i, k]] * z[k];
            }
        }
        out
    }

    /// Covariance of the diffused marginal, `alpha^2 Sigma + sigma^2 I`.
    pub fn marginal_cov(&self, sched: &NoiseSchedule, t: f64) -> Result<Array2<f64>> {
        sched.check_time(t)?;
        let alpha = sched.alpha_unchecked(t);
        let sigma = sched.sigma_unchecked(t);
        let d = self.dim();
        let mut m = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                m[[i, j]] = alpha * alpha * self.cov[[i, j]];
            }
            m[[i, i]] += sigma * sigma;
        }
        Ok(m)
    }
}

/// Negative Hessian of the diffused Gaussian marginal:
/// `(alpha^2 Sigma + sigma^2 I)^{-1}`, constant in `x`.
pub fn gaussian_fisher(g: &GaussianInitial, sched: &NoiseSchedule, t: f64) -> Result<FisherEval> {
    let m = g.marginal_cov(sched, t)?;
    let matrix = linalg::spd_inverse(&m, "diffused gaussian covariance")?;
    let trace = (0..g.dim()).map(|i| matrix[[i, i]]).sum();
    Ok(FisherEval { matrix, trace })
}

/// Score of the diffused Gaussian marginal:
/// `-(alpha^2 Sigma + sigma^2 I)^{-1} (x - alpha mu)`.
pub fn gaussian_score(g: &GaussianInitial, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
    check_state(g.dim(), x, "gaussian_score")?;
    let m = g.marginal_cov(sched, t)?;
    let l = linalg::cholesky(&m, "diffused gaussian covariance")?;
    let alpha = sched.alpha_unchecked(t);
    let resid: Array1<f64> = x
        .iter()
        .zip(g.mean().iter())
        .map(|(xi, mi)| xi - alpha * mi)
        .collect();
    let mut s = linalg::chol_solve(&l, &resid);
    s.mapv_inplace(|v| -v);
    Ok(s)
}

/// Log density of the diffused Gaussian marginal at `x`.
pub fn gaussian_log_density(g: &GaussianInitial, sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Result<f64> {
    check_state(g.dim(), x, "gaussian_log_density")?;
    let m = g.marginal_cov(sched, t)?;
    let l = linalg::cholesky(&m, "diffused gaussian covariance")?;
    let alpha = sched.alpha_unchecked(t);
    let resid: Array1<f64> = x
        .iter()
        .zip(g.mean().iter())
        .map(|(xi, mi)| xi - alpha * mi)
        .collect();
    let sol = linalg::chol_solve(&l, &resid);
    let maha: f64 = resid.iter().zip(sol.iter()).map(|(a, b)| a * b).sum();
    let logdet: f64 = (0..g.dim()).map(|i| 2.0 * l[[i, i]].ln()).sum();
    let d = g.dim() as f64;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + maha))
}
