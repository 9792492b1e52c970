//! One-sided Jacobi SVD for small square matrices.
//!
//! The cross-covariance matrices this crate decomposes never exceed the
//! model width, so a plain cyclic one-sided Jacobi is both robust and fast
//! enough: right Givens rotations orthogonalize the columns of a working
//! copy `W = A·V`; on convergence the column norms are the singular values
//! and the normalized columns form `U`.

use crate::error::{Error, Result};
use crate::tensor::{dot, norm2, Matrix};

/// Relative column-pair threshold below which no rotation is applied.
const SWEEP_TOL: f64 = 1e-12;
/// Sweep cap before declaring non-convergence.
const MAX_SWEEPS: usize = 60;

/// Full SVD `A = U · diag(sigma) · Vt` with square `U` and `Vt` and the
/// singular values sorted descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

/// Decomposes a square matrix.
///
/// Fails with `InvalidInput` on non-square or non-finite input and with
/// `Numerical` if the rotation sweeps do not settle within the cap.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidInput(format!(
            "svd expects a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("svd input must be finite".into()));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(0, 0),
            sigma: vec![],
            vt: Matrix::zeros(0, 0),
        });
    }

    // Column-major working copies: w[j] is the j-th column of A·V, v[j] the
    // j-th column of V.
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| a.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns whose norm falls below round-off of the matrix scale carry no
    // signal; rotating two of them against each other just churns noise and
    // can cycle forever on rank-deficient inputs.
    let column_floor = a.frobenius_norm() * f64::EPSILON * (n as f64).sqrt();

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha.sqrt() <= column_floor || beta.sqrt() <= column_floor {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                if gamma.abs() <= SWEEP_TOL * scale {
                    continue;
                }
                rotated = true;
                // Classic Jacobi rotation annihilating the (p, q) inner product.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "svd did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut sigma: Vec<f64> = w.iter().map(|col| norm2(col)).collect();

    // Descending order, index as deterministic tiebreak.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));
    let w: Vec<Vec<f64>> = order.iter().map(|&j| w[j].clone()).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    sigma = order.iter().map(|&j| sigma[j]).collect();

    // Normalize columns into U; rank-deficient columns are completed to an
    // orthonormal basis from canonical vectors.
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let rank_tol = sigma_max * (n as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (j, col) in w.iter().enumerate() {
        if sigma[j] > rank_tol && sigma[j] > 0.0 {
            u_cols.push(col.iter().map(|x| x / sigma[j]).collect());
        } else {
            u_cols.push(complete_column(&u_cols, n));
        }
    }

    let mut u = Matrix::zeros(n, n);
    let mut vt = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            u.set(i, j, u_cols[j][i]);
            vt.set(j, i, v[j][i]);
        }
    }
    Ok(SvdResult { u, sigma, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Picks the canonical basis vector with the largest residual after
/// orthogonalizing against `existing`, normalized.
fn complete_column(existing: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..n {
        let mut cand = vec![0.0; n];
        cand[k] = 1.0;
        for col in existing {
            let proj = dot(&cand, col);
            for (c, e) in cand.iter_mut().zip(col) {
                *c -= proj * e;
            }
        }
        let norm = norm2(&cand);
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, cand));
        }
        if norm > 0.9 {
            break;
        }
    }
    let (norm, mut col) = best.expect("n > 0");
    for c in &mut col {
        *c /= norm;
    }
    col
}
