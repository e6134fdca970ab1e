//! Small dense linear-algebra helpers.
//!
//! Everything here targets the low dimensions this crate works in (d is
//! typically 1..10), so plain loops beat any BLAS dispatch and keep the build
//! dependency-free. Symmetric eigenvalues use closed forms for d <= 2 and
//! cyclic Jacobi sweeps above that.

use ndarray::{Array1, Array2};

use crate::error::{DfError, Result};

/// `log sum_i exp(v_i)` with the usual max shift; `-inf` for an empty slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Array2<f64>, context: &'static str) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(DfError::DimensionMismatch {
            context: "cholesky of non-square matrix",
            expected: n,
            got: a.ncols(),
        });
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(DfError::NotSpd { context });
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `L L^T x = b` given the lower Cholesky factor `L`.
pub fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    // Forward substitution: L y = b.
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let step = l[[i, k]] * y[k];
            y[i] -= step;
        }
        y[i] /= l[[i, i]];
    }
    // Back substitution: L^T x = y.
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let step = l[[k, i]] * y[k];
            y[i] -= step;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
/// The result is exactly symmetric (upper triangle mirrored down).
pub fn spd_inverse(a: &Array2<f64>, context: &'static str) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a, context)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = chol_solve(&l, &e);
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    Ok(inv)
}

/// Frobenius norm.
pub fn frobenius_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Eigenvalues of a symmetric matrix, ascending. Closed form for d <= 2,
/// cyclic Jacobi sweeps otherwise (plenty for the small matrices used here).
pub fn sym_eigvals(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n, "sym_eigvals expects a square matrix");
    match n {
        0 => Vec::new(),
        1 => vec![a[[0, 0]]],
        2 => {
            let half_tr = 0.5 * (a[[0, 0]] + a[[1, 1]]);
            let half_diff = 0.5 * (a[[0, 0]] - a[[1, 1]]);
            let r = (half_diff * half_diff + a[[0, 1]] * a[[0, 1]]).sqrt();
            vec![half_tr - r, half_tr + r]
        }
        _ => jacobi_eigvals(a),
    }
}

fn jacobi_eigvals(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let scale = frobenius_norm(a).max(1.0);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}
