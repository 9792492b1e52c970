//! Corner alignment objective and spread diagnostics.
//!
//! Normalized activations are scored against the nearest vertex of the
//! hypercube inscribed in the unit sphere. The squared corner distance has
//! an exact dual form `2n - (2/sqrt(d)) * sum |R x|_1`, so driving rows
//! toward corners is the same as maximizing their mean rotated ℓ1 norm.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{norm2, Matrix, OrthogonalMatrix};

/// Threshold below which a row is considered padding and dropped rather
/// than renormalized.
pub const ROW_NORM_FLOOR: f64 = 1e-12;

/// A batch of activations with each kept row scaled to unit ℓ2 norm.
#[derive(Debug, Clone)]
pub struct NormalizedBatch {
    xt: Matrix,
}

impl NormalizedBatch {
    /// Normalizes each row of `x`; rows with norm below [`ROW_NORM_FLOOR`]
    /// are dropped.
    pub fn from_raw(x: &Matrix) -> Self {
        let d = x.cols();
        let mut rows: Vec<f64> = Vec::with_capacity(x.rows() * d);
        for i in 0..x.rows() {
            let row = x.row(i);
            let n = norm2(row);
            if n < ROW_NORM_FLOOR {
                continue;
            }
            rows.extend(row.iter().map(|v| v / n));
        }
        let n_rows = rows.len() / d.max(1);
        Self {
            xt: Matrix::from_vec(n_rows, d, rows).expect("normalized rows are finite"),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.xt
    }

    pub fn len(&self) -> usize {
        self.xt.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.xt.cols()
    }
}

/// Nearest hypercube vertex per row: `z_ij = sign(rotated_ij) / sqrt(d)`,
/// with `sign(0) := +1`. Every output row has unit ℓ2 norm.
pub fn corner_targets(rotated: &Matrix) -> Matrix {
    let d = rotated.cols();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut out = rotated.clone();
    for v in out.data_mut() {
        *v = if *v >= 0.0 { inv_sqrt_d } else { -inv_sqrt_d };
    }
    out
}

/// Summed squared distance from rotated rows to their corner targets, with
/// targets recomputed from the given rotation.
pub fn corner_objective(r: &OrthogonalMatrix, batch: &NormalizedBatch) -> Result<f64> {
    if r.dim() != batch.dim() {
        return Err(Error::InvalidInput(format!(
            "rotation dim {} does not match batch dim {}",
            r.dim(),
            batch.dim()
        )));
    }
    let rotated = r.rotate_rows(batch.matrix())?;
    let targets = corner_targets(&rotated);
    let total: f64 = rotated
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, z)| (a - z) * (a - z))
        .sum();
    Ok(total)
}

/// Mean rotated ℓ1 norm over rows; lies in `[1, sqrt(d)]` for unit rows.
pub fn l1_score(r: &OrthogonalMatrix, batch: &NormalizedBatch) -> Result<f64> {
    if r.dim() != batch.dim() {
        return Err(Error::InvalidInput("rotation/batch dim mismatch".into()));
    }
    if batch.is_empty() {
        return Ok(0.0);
    }
    let rotated = r.rotate_rows(batch.matrix())?;
    let sum: f64 = (0..rotated.rows())
        .map(|i| rotated.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Normalized participation ratio `PR(x)/d = |x|_2^4 / (d |x|_4^4)`,
/// in `[1/d, 1]`: `1/d` for a one-hot vector, `1` at equal magnitudes.
pub fn participation_ratio(x: &[f64]) -> Result<f64> {
    let l2sq: f64 = x.iter().map(|v| v * v).sum();
    if l2sq == 0.0 || x.is_empty() {
        return Err(Error::InvalidInput(
            "participation ratio of a zero vector".into(),
        ));
    }
    let l4_4: f64 = x.iter().map(|v| v * v * v * v).sum();
    Ok(l2sq * l2sq / (x.len() as f64 * l4_4))
}

/// Normalized participation ratio of every row.
pub fn participation_ratios(batch: &Matrix) -> Result<Vec<f64>> {
    let mut out = vec![0.0; batch.rows()];
    let par_hint = batch.rows() * batch.cols() >= par::PAR_THRESHOLD;
    par::for_each_chunk_mut(&mut out, 1, par_hint, |i, slot| {
        slot[0] = participation_ratio(batch.row(i)).unwrap_or(f64::NAN);
    });
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput(
            "participation ratio of a zero row".into(),
        ));
    }
    Ok(out)
}

/// Empirical CDF of the normalized participation ratio over rows, sampled
/// at `grid` evenly spaced thresholds spanning `[0, 1]`.
pub fn pr_cdf(batch: &Matrix, grid: usize) -> Result<Vec<(f64, f64)>> {
    if batch.rows() == 0 {
        return Err(Error::InvalidInput("pr_cdf of an empty batch".into()));
    }
    if grid < 2 {
        return Err(Error::InvalidInput(
            "pr_cdf needs at least 2 grid points".into(),
        ));
    }
    let prs = participation_ratios(batch)?;
    let n = prs.len() as f64;
    let mut out = Vec::with_capacity(grid);
    for k in 0..grid {
        let t = k as f64 / (grid - 1) as f64;
        let count = prs.iter().filter(|&&p| p <= t).count();
        out.push((t, count as f64 / n));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_orthogonal, GaussianSource};

    fn corner_row(signs: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (signs.len() as f64).sqrt();
        signs.iter().map(|s| s.signum() * inv).collect()
    }

    #[test]
    fn targets_follow_signs() {
        let m = Matrix::from_rows(&[vec![0.3, -0.2, 0.9, -0.4]]).unwrap();
        let z = corner_targets(&m);
        assert_eq!(z.row(0), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn targets_zero_row_all_positive() {
        let z = corner_targets(&Matrix::zeros(1, 4));
        assert_eq!(z.row(0), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn targets_have_unit_rows() {
        let mut g = GaussianSource::new(5);
        let m = Matrix::from_vec(6, 16, (0..96).map(|_| g.next_normal()).collect()).unwrap();
        let z = corner_targets(&m);
        for i in 0..z.rows() {
            assert!((norm2(z.row(i)) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn objective_zero_at_corners() {
        let batch = NormalizedBatch::from_raw(
            &Matrix::from_rows(&[corner_row(&[1.0, -1.0, 1.0, 1.0]), corner_row(&[-1.0; 4])])
                .unwrap(),
        );
        let obj = corner_objective(&OrthogonalMatrix::identity(4), &batch).unwrap();
        assert!(obj.abs() <= 1e-24);
    }

    // Hand expansion through the dual identity: a pole e1 in d=4 has
    // |x|_1 = 1, so the objective is 2*1 - (2/2)*1 = 1.
    #[test]
    fn objective_single_pole() {
        let batch =
            NormalizedBatch::from_raw(&Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap());
        let obj = corner_objective(&OrthogonalMatrix::identity(4), &batch).unwrap();
        assert!((obj - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn objective_matches_l1_identity() {
        let mut g = GaussianSource::new(8);
        for &d in &[4usize, 8, 16] {
            let r = random_orthogonal(d, d as u64 + 100).unwrap();
            let raw =
                Matrix::from_vec(32, d, (0..32 * d).map(|_| g.next_normal()).collect()).unwrap();
            let batch = NormalizedBatch::from_raw(&raw);
            let n = batch.len() as f64;
            let obj = corner_objective(&r, &batch).unwrap();
            let dual = 2.0 * n - (2.0 / (d as f64).sqrt()) * l1_score(&r, &batch).unwrap() * n;
            assert!((obj - dual).abs() <= 1e-9, "d={d}: {obj} vs {dual}");
        }
    }

    #[test]
    fn objective_rejects_dim_mismatch() {
        let batch = NormalizedBatch::from_raw(&Matrix::identity(4));
        assert!(corner_objective(&OrthogonalMatrix::identity(8), &batch).is_err());
    }

    #[test]
    fn l1_score_extremes() {
        let corners = NormalizedBatch::from_raw(
            &Matrix::from_rows(&[corner_row(&[1.0; 16]), corner_row(&[-1.0; 16])]).unwrap(),
        );
        let id = OrthogonalMatrix::identity(16);
        assert!((l1_score(&id, &corners).unwrap() - 4.0).abs() <= 1e-12);

        let mut pole = vec![0.0; 16];
        pole[3] = 1.0;
        let poles = NormalizedBatch::from_raw(&Matrix::from_rows(&[pole]).unwrap());
        assert!((l1_score(&id, &poles).unwrap() - 1.0).abs() <= 1e-12);

        let mut g = GaussianSource::new(77);
        let raw = Matrix::from_vec(8, 16, (0..128).map(|_| g.next_normal()).collect()).unwrap();
        let batch = NormalizedBatch::from_raw(&raw);
        let r = random_orthogonal(16, 9).unwrap();
        assert!(l1_score(&r, &batch).unwrap() <= 4.0 + 1e-12);
    }

    #[test]
    fn normalization_drops_tiny_rows() {
        let m = Matrix::from_rows(&[vec![1e-13, 0.0], vec![3.0, 4.0]]).unwrap();
        let b = NormalizedBatch::from_raw(&m);
        assert_eq!(b.len(), 1);
        assert!((b.matrix().get(0, 0) - 0.6).abs() <= 1e-15);
        assert!((b.matrix().get(0, 1) - 0.8).abs() <= 1e-15);
    }

    #[test]
    fn pr_one_sparse_and_corner() {
        let mut pole = vec![0.0; 16];
        pole[0] = 1.0;
        assert!((participation_ratio(&pole).unwrap() - 1.0 / 16.0).abs() <= 1e-15);

        let corner = corner_row(&[1.0; 8]);
        assert!((participation_ratio(&corner).unwrap() - 1.0).abs() <= 1e-12);

        // Two equal coordinates out of four: PR = 2, normalized 0.5.
        let x = [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0, 0.0];
        assert!((participation_ratio(&x).unwrap() - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn pr_scale_invariant() {
        let mut g = GaussianSource::new(6);
        for _ in 0..50 {
            let x: Vec<f64> = (0..12).map(|_| g.next_normal()).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * -37.5).collect();
            let a = participation_ratio(&x).unwrap();
            let b = participation_ratio(&scaled).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn pr_rejects_zero() {
        assert!(participation_ratio(&[0.0; 4]).is_err());
    }

    #[test]
    fn cdf_steps() {
        let d = 16;
        let corners = Matrix::from_rows(&vec![corner_row(&[1.0; 16]); 4]).unwrap();
        let cdf = pr_cdf(&corners, 11).unwrap();
        for &(t, f) in &cdf {
            let expect = if t >= 1.0 { 1.0 } else { 0.0 };
            assert_eq!(f, expect, "corner cdf at {t}");
        }

        let mut pole = vec![0.0; d];
        pole[5] = 2.0;
        let poles = Matrix::from_rows(&vec![pole; 3]).unwrap();
        let cdf = pr_cdf(&poles, 17).unwrap();
        for &(t, f) in &cdf {
            let expect = if t >= 1.0 / d as f64 { 1.0 } else { 0.0 };
            assert_eq!(f, expect, "pole cdf at {t}");
        }

        // Half corners, half poles: a 0.5 plateau between the two steps.
        let mut rows = Vec::new();
        for _ in 0..4 {
            rows.push(corner_row(&[1.0; 16]));
        }
        for _ in 0..4 {
            let mut p = vec![0.0; d];
            p[0] = 1.0;
            rows.push(p);
        }
        let mixed = Matrix::from_rows(&rows).unwrap();
        let cdf = pr_cdf(&mixed, 21).unwrap();
        for &(t, f) in &cdf {
            if (0.1..1.0).contains(&t) {
                assert_eq!(f, 0.5, "plateau at {t}");
            }
        }
    }

    #[test]
    fn cdf_rejects_empty_and_tiny_grid() {
        assert!(pr_cdf(&Matrix::zeros(0, 4), 10).is_err());
        assert!(pr_cdf(&Matrix::identity(4), 1).is_err());
    }
}
