//! Symmetric eigendecomposition by cyclic Jacobi rotations, in f64.
//!
//! Sweeps zero out off-diagonal entries pairwise until the off-diagonal
//! Frobenius norm drops below 1e-10 times the trace. Covariances are PSD,
//! so the trace-scaled threshold is well posed; the all-zero matrix
//! converges immediately.

use crate::error::{Result, SalsError};

const MAX_SWEEPS: usize = 64;
const OFF_DIAGONAL_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric n x n matrix given row-major.
///
/// Returns `(eigenvalues, vectors)` with `vectors` row-major n x n whose
/// column k is the eigenvector for `eigenvalues[k]`. No ordering or sign
/// convention is applied here; callers sort.
pub fn jacobi_eigh(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(SalsError::ShapeMismatch {
            context: "jacobi_eigh",
            expected: format!("{n}x{n} = {} elements", n * n),
            got: format!("{}", a.len()),
        });
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n <= 1 {
        return Ok((m.iter().step_by(n.max(1) + 1).copied().collect(), v));
    }

    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let tol = OFF_DIAGONAL_TOL * trace.abs();

    let mut last_off = off_diagonal_frobenius(&m, n);
    for _sweep in 0..MAX_SWEEPS {
        if last_off <= tol {
            let vals = (0..n).map(|i| m[i * n + i]).collect();
            return Ok((vals, v));
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // Tiny entries relative to their diagonal are set to zero
                // outright; rotating on them only churns rounding error.
                if apq.abs() <= f64::EPSILON * (app.abs() + aqq.abs()) {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = m[i * n + p];
                        let aiq = m[i * n + q];
                        let new_ip = aip - s * (aiq + tau * aip);
                        let new_iq = aiq + s * (aip - tau * aiq);
                        m[i * n + p] = new_ip;
                        m[p * n + i] = new_ip;
                        m[i * n + q] = new_iq;
                        m[q * n + i] = new_iq;
                    }
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = vip - s * (viq + tau * vip);
                    v[i * n + q] = viq + s * (vip - tau * viq);
                }
            }
        }
        last_off = off_diagonal_frobenius(&m, n);
    }
    if last_off <= tol {
        let vals = (0..n).map(|i| m[i * n + i]).collect();
        return Ok((vals, v));
    }
    Err(SalsError::NoConvergence {
        sweeps: MAX_SWEEPS,
        off: last_off,
    })
}

fn off_diagonal_frobenius(m: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let x = m[i * n + j];
            acc += 2.0 * x * x;
        }
    }
    acc.sqrt()
}
