//! Orthogonal matrices and seeded sampling from them.

use crate::error::{Error, Result};
use crate::tensor::{norm2, GaussianSource, Matrix};

/// Largest allowed `|Q^T Q - I|` entry for a matrix to count as orthogonal.
pub(crate) const ORTHO_TOL: f64 = 1e-9;

/// A square matrix validated to be orthogonal (rotations and reflections
/// both allowed; no determinant correction is applied anywhere).
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMatrix {
    m: Matrix,
}

impl OrthogonalMatrix {
    /// Validates `|m^T m - I|_max <= 1e-9` and `dim >= 1`.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.rows() != m.cols() {
            return Err(Error::InvalidInput(format!(
                "orthogonal matrix must be square and non-empty, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let residual = orthogonality_residual(&m);
        if residual.is_nan() || residual > ORTHO_TOL {
            return Err(Error::InvalidInput(format!(
                "matrix is not orthogonal: residual {residual:.3e}"
            )));
        }
        Ok(Self { m })
    }

    /// Wraps without validation; for factors that are orthogonal by
    /// construction (transposes, permutations of validated matrices).
    pub(crate) fn new_unchecked(m: Matrix) -> Self {
        debug_assert!(orthogonality_residual(&m) <= ORTHO_TOL);
        Self { m }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: Matrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn into_matrix(self) -> Matrix {
        self.m
    }

    pub fn transpose(&self) -> OrthogonalMatrix {
        Self::new_unchecked(self.m.transpose())
    }

    /// Rotates every row of `x`: returns `x * Q^T`, the row-vector form of
    /// applying `Q` to each activation.
    pub fn rotate_rows(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul_bt(&self.m)
    }

    /// Inverse of [`rotate_rows`](Self::rotate_rows): returns `x * Q`.
    pub fn unrotate_rows(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.m)
    }
}

pub(crate) fn orthogonality_residual(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            // Column inner products of m == entries of m^T m.
            let mut sum = 0.0;
            for k in 0..n {
                sum += m.get(k, i) * m.get(k, j);
            }
            let expect = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((sum - expect).abs());
        }
    }
    worst
}

/// Haar-ish orthogonal sample: Householder QR of a seeded Gaussian matrix
/// with the sign convention `diag(R) >= 0`, so the result is a deterministic
/// function of `(dim, seed)`.
pub fn random_orthogonal(dim: usize, seed: u64) -> Result<OrthogonalMatrix> {
    if dim == 0 {
        return Err(Error::InvalidInput("orthogonal dim must be >= 1".into()));
    }
    let mut g = GaussianSource::new(seed);
    let data: Vec<f64> = (0..dim * dim).map(|_| g.next_normal()).collect();
    let a = Matrix::from_vec(dim, dim, data)?;
    let (q, r_diag) = householder_qr(&a);
    let mut m = q;
    for (j, &diag) in r_diag.iter().enumerate() {
        // sign(0) := +1 keeps the convention total.
        if diag < 0.0 {
            for i in 0..dim {
                let v = m.get(i, j);
                m.set(i, j, -v);
            }
        }
    }
    OrthogonalMatrix::new(m)
}

/// Returns `(Q, diag(R))` for a square matrix via Householder reflections.
fn householder_qr(a: &Matrix) -> (Matrix, Vec<f64>) {
    let n = a.rows();
    let mut work = a.clone();
    // Reflector k lives in column k, rows k.., of `vs`.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r_diag = vec![0.0; n];

    #[allow(clippy::needless_range_loop)] // k walks rows, columns and r_diag together
    for k in 0..n {
        let mut x: Vec<f64> = (k..n).map(|i| work.get(i, k)).collect();
        let norm = norm2(&x);
        if norm == 0.0 {
            vs.push(vec![0.0; n - k]);
            r_diag[k] = 0.0;
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        x[0] -= alpha;
        let vnorm = norm2(&x);
        if vnorm > 0.0 {
            for v in &mut x {
                *v /= vnorm;
            }
            for j in k..n {
                let mut c = 0.0;
                for (idx, v) in x.iter().enumerate() {
                    c += v * work.get(k + idx, j);
                }
                c *= 2.0;
                for (idx, v) in x.iter().enumerate() {
                    let cur = work.get(k + idx, j);
                    work.set(k + idx, j, cur - c * v);
                }
            }
        }
        r_diag[k] = work.get(k, k);
        vs.push(x);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to I.
    let mut q = Matrix::identity(n);
    for k in (0..n).rev() {
        let v = &vs[k];
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        for j in 0..n {
            let mut c = 0.0;
            for (idx, vv) in v.iter().enumerate() {
                c += vv * q.get(k + idx, j);
            }
            c *= 2.0;
            for (idx, vv) in v.iter().enumerate() {
                let cur = q.get(k + idx, j);
                q.set(k + idx, j, cur - c * vv);
            }
        }
    }
    (q, r_diag)
}
