//! Simulated uniform quantizers and their worst-case error bounds.
//!
//! Quantization is simulated in 64-bit reals: values are snapped to the
//! integer grid and immediately dequantized. Rounding is half-away-from-zero
//! (`f64::round`), fixed so independent implementations agree on grid
//! points. Zero and constant inputs bypass quantization instead of erroring,
//! since calibration batches may contain padded rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Scale from the absolute maximum, signed grid `[-(2^{b-1}-1), 2^{b-1}-1]`.
    Symmetric,
    /// Affine range `[min, max]` onto the unsigned grid `[0, 2^b - 1]` with an
    /// integer zeropoint.
    Zeropoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Granularity {
    /// One scale for the whole tensor.
    PerTensor,
    /// One scale per row.
    PerToken,
    /// One scale per contiguous group of `group_size` entries within a row.
    Grouped { group_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub mode: QuantMode,
    pub granularity: Granularity,
    /// Range shrink factor in `(0, 1]` applied before grid construction;
    /// out-of-range values clamp to the grid extremes.
    pub clip_ratio: f64,
}

impl QuantizerSpec {
    pub fn new(bits: u32, mode: QuantMode, granularity: Granularity, clip_ratio: f64) -> Self {
        Self {
            bits,
            mode,
            granularity,
            clip_ratio,
        }
    }

    pub fn symmetric(bits: u32) -> Self {
        Self::new(bits, QuantMode::Symmetric, Granularity::PerTensor, 1.0)
    }

    pub fn zeropoint(bits: u32) -> Self {
        Self::new(bits, QuantMode::Zeropoint, Granularity::PerTensor, 1.0)
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn with_clip(mut self, clip_ratio: f64) -> Self {
        self.clip_ratio = clip_ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 {
            return Err(Error::InvalidSpec(format!(
                "bits must be >= 2, got {}",
                self.bits
            )));
        }
        if self.bits > 63 {
            return Err(Error::InvalidSpec(format!(
                "bits must be <= 63, got {}",
                self.bits
            )));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "clip_ratio must be in (0, 1], got {}",
                self.clip_ratio
            )));
        }
        if let Granularity::Grouped { group_size } = self.granularity {
            if group_size == 0 {
                return Err(Error::InvalidSpec("group_size must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Error and spread statistics for one vector under one spec.
#[derive(Debug, Clone, Copy)]
pub struct QuantStats {
    /// Total squared error `|Q(x) - x|_2^2`.
    pub mse: f64,
    /// `|x|_2^2 / mse`; infinite when the error is exactly zero.
    pub sqnr: f64,
    /// Dynamic-range ratio `|x|_inf^2 / |x|_2^2`, in `[1/d, 1]` for nonzero x.
    pub range_ratio: f64,
    pub linf: f64,
    /// `max(x) - min(x)`.
    pub signed_range: f64,
}

// ── Scalar units ────────────────────────────────────────────────────────────

/// Symmetric quantization of one unit in place. All-zero input is left
/// unchanged (degenerate scale).
fn quantize_symmetric_in_place(x: &mut [f64], bits: u32, clip_ratio: f64) {
    let linf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if linf == 0.0 {
        return;
    }
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let step = clip_ratio * linf / levels;
    for v in x {
        *v = step * (*v / step).round().clamp(-levels, levels);
    }
}

/// Zeropoint quantization of one unit in place. Constant input is left
/// unchanged (zero range). The clip ratio shrinks the signed range about its
/// midpoint before the grid is built.
fn quantize_zeropoint_in_place(x: &mut [f64], bits: u32, clip_ratio: f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in x.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    if max <= min {
        return;
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let step = clip_ratio * (max - min) / levels;
    let clipped_min = 0.5 * (max + min) - 0.5 * clip_ratio * (max - min);
    let zeropoint = (-clipped_min / step).round();
    for v in x {
        *v = step * ((*v / step + zeropoint).round().clamp(0.0, levels) - zeropoint);
    }
}

fn quantize_unit_in_place(x: &mut [f64], spec: &QuantizerSpec) {
    match spec.mode {
        QuantMode::Symmetric => quantize_symmetric_in_place(x, spec.bits, spec.clip_ratio),
        QuantMode::Zeropoint => quantize_zeropoint_in_place(x, spec.bits, spec.clip_ratio),
    }
}

// ── Public vector / matrix operations ───────────────────────────────────────

/// Symmetric uniform quantization of a vector as a single unit.
pub fn quantize_symmetric(x: &[f64], spec: &QuantizerSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.mode != QuantMode::Symmetric {
        return Err(Error::InvalidSpec(
            "quantize_symmetric needs symmetric mode".into(),
        ));
    }
    let mut out = x.to_vec();
    quantize_symmetric_in_place(&mut out, spec.bits, spec.clip_ratio);
    Ok(out)
}

/// Zeropoint (affine) uniform quantization of a vector as a single unit.
pub fn quantize_zeropoint(x: &[f64], spec: &QuantizerSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.mode != QuantMode::Zeropoint {
        return Err(Error::InvalidSpec(
            "quantize_zeropoint needs zeropoint mode".into(),
        ));
    }
    let mut out = x.to_vec();
    quantize_zeropoint_in_place(&mut out, spec.bits, spec.clip_ratio);
    Ok(out)
}

/// Applies the scalar quantizer unit-wise at the spec's granularity:
/// per-tensor treats the whole matrix as one unit, per-token each row, and
/// grouped each contiguous `group_size` slice of a row.
pub fn quantize_tensor(x: &Matrix, spec: &QuantizerSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut out = x.clone();
    quantize_tensor_in_place(&mut out, spec)?;
    Ok(out)
}

pub(crate) fn quantize_tensor_in_place(x: &mut Matrix, spec: &QuantizerSpec) -> Result<()> {
    spec.validate()?;
    let cols = x.cols();
    match spec.granularity {
        Granularity::PerTensor => {
            quantize_unit_in_place(x.data_mut(), spec);
        }
        Granularity::PerToken => {
            let work = x.rows() * cols;
            crate::par::for_each_chunk_mut(
                x.data_mut(),
                cols,
                work >= crate::par::PAR_THRESHOLD,
                |_, row| {
                    let mut row_copy = row.to_vec();
                    quantize_unit_in_place(&mut row_copy, spec);
                    row.copy_from_slice(&row_copy);
                },
            );
        }
        Granularity::Grouped { group_size } => {
            if group_size == 0 || !cols.is_multiple_of(group_size) {
                return Err(Error::InvalidSpec(format!(
                    "group_size {group_size} does not divide row length {cols}"
                )));
            }
            let work = x.rows() * cols;
            crate::par::for_each_chunk_mut(
                x.data_mut(),
                cols,
                work >= crate::par::PAR_THRESHOLD,
                |_, row| {
                    for group in row.chunks_mut(group_size) {
                        let mut g = group.to_vec();
                        quantize_unit_in_place(&mut g, spec);
                        group.copy_from_slice(&g);
                    }
                },
            );
        }
    }
    Ok(())
}

/// Worst-case total squared error of the symmetric quantizer:
/// `d · |x|_inf^2 / (4 (2^{b-1} - 1)^2)`.
pub fn mse_bound_sym(x: &[f64], bits: u32) -> f64 {
    debug_assert!(bits >= 2);
    let d = x.len() as f64;
    let linf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    d * linf * linf / (4.0 * levels * levels)
}

/// Worst-case total squared error of the zeropoint quantizer:
/// `d · (max - min)^2 / (4 (2^b - 1)^2)`.
pub fn mse_bound_zp(x: &[f64], bits: u32) -> f64 {
    debug_assert!(bits >= 2);
    if x.is_empty() {
        return 0.0;
    }
    let d = x.len() as f64;
    let min = x.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let range = max - min;
    let levels = ((1u64 << bits) - 1) as f64;
    d * range * range / (4.0 * levels * levels)
}

/// Measured error and spread statistics of quantizing `x` as one unit with
/// the spec's mode. A zero vector reports zero error with infinite SQNR.
pub fn quant_stats(x: &[f64], spec: &QuantizerSpec) -> Result<QuantStats> {
    spec.validate()?;
    let l2sq: f64 = x.iter().map(|v| v * v).sum();
    let linf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if l2sq == 0.0 {
        return Ok(QuantStats {
            mse: 0.0,
            sqnr: f64::INFINITY,
            range_ratio: 0.0,
            linf: 0.0,
            signed_range: 0.0,
        });
    }
    let mut q = x.to_vec();
    quantize_unit_in_place(&mut q, spec);
    let mse: f64 = q.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let sqnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        l2sq / mse
    };
    let min = x.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    Ok(QuantStats {
        mse,
        sqnr,
        range_ratio: linf * linf / l2sq,
        linf,
        signed_range: max - min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GaussianSource;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    // Hand oracle: b=4 gives levels 7, step = 0.7/7 = 0.1; every entry of
    // (0.7, -0.3, 0.1, 0.0) sits on the grid.
    #[test]
    fn symmetric_on_grid_input() {
        let spec = QuantizerSpec::symmetric(4);
        let x = [0.7, -0.3, 0.1, 0.0];
        let q = quantize_symmetric(&x, &spec).unwrap();
        assert_close(&q, &x, 1e-15);
    }

    #[test]
    fn symmetric_zero_vector_unchanged() {
        let spec = QuantizerSpec::symmetric(4);
        let q = quantize_symmetric(&[0.0; 8], &spec).unwrap();
        assert_eq!(q, vec![0.0; 8]);
    }

    #[test]
    fn symmetric_corner_representable() {
        // Unit-norm corner in d=4: all coordinates ±1/2 hit the grid extreme.
        let spec = QuantizerSpec::symmetric(4);
        let x = [0.5, -0.5, 0.5, 0.5];
        let q = quantize_symmetric(&x, &spec).unwrap();
        assert_close(&q, &x, 1e-15);
    }

    #[test]
    fn symmetric_rejects_low_bits() {
        let spec = QuantizerSpec::symmetric(1);
        assert!(matches!(
            quantize_symmetric(&[1.0], &spec),
            Err(crate::Error::InvalidSpec(_))
        ));
    }

    // Hand oracle per the affine formula: range 1.5, step 0.1, zeropoint 10.
    #[test]
    fn zeropoint_on_grid_input() {
        let spec = QuantizerSpec::zeropoint(4);
        let x = [-1.0, 0.5];
        let q = quantize_zeropoint(&x, &spec).unwrap();
        assert_close(&q, &x, 1e-15);
    }

    #[test]
    fn zeropoint_constant_unchanged() {
        let spec = QuantizerSpec::zeropoint(4);
        let x = [3.25; 5];
        let q = quantize_zeropoint(&x, &spec).unwrap();
        assert_eq!(q, x.to_vec());
    }

    #[test]
    fn zeropoint_interior_error_half_step() {
        let spec = QuantizerSpec::zeropoint(8);
        let mut g = GaussianSource::new(21);
        let x: Vec<f64> = (0..64).map(|_| g.next_normal()).collect();
        let q = quantize_zeropoint(&x, &spec).unwrap();
        let min = x.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let step = (max - min) / 255.0;
        for (a, b) in q.iter().zip(&x) {
            assert!((a - b).abs() <= step / 2.0 + 1e-12);
        }
    }

    #[test]
    fn per_token_rows_independent() {
        let spec = QuantizerSpec::symmetric(4).with_granularity(Granularity::PerToken);
        let m = Matrix::from_rows(&[vec![0.7, -0.3, 0.1, 0.0], vec![7.0, -3.0, 1.0, 0.0]]).unwrap();
        let q = quantize_tensor(&m, &spec).unwrap();
        assert_close(q.row(0), &[0.7, -0.3, 0.1, 0.0], 1e-15);
        assert_close(q.row(1), &[7.0, -3.0, 1.0, 0.0], 1e-14);
    }

    // Composes the scalar oracle per group: (-1, 0.5) and (8, -8) quantize
    // with independent scales.
    #[test]
    fn grouped_splits_rows() {
        let spec =
            QuantizerSpec::zeropoint(4).with_granularity(Granularity::Grouped { group_size: 2 });
        let m = Matrix::from_rows(&[vec![-1.0, 0.5, 8.0, -8.0]]).unwrap();
        let q = quantize_tensor(&m, &spec).unwrap();
        let lo = quantize_zeropoint(&[-1.0, 0.5], &QuantizerSpec::zeropoint(4)).unwrap();
        let hi = quantize_zeropoint(&[8.0, -8.0], &QuantizerSpec::zeropoint(4)).unwrap();
        assert_close(&q.row(0)[..2], &lo, 0.0);
        assert_close(&q.row(0)[2..], &hi, 0.0);
    }

    #[test]
    fn grouped_rejects_bad_group() {
        let spec =
            QuantizerSpec::symmetric(4).with_granularity(Granularity::Grouped { group_size: 3 });
        let m = Matrix::zeros(1, 4);
        assert!(matches!(
            quantize_tensor(&m, &spec),
            Err(crate::Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn per_tensor_equals_per_token_on_single_row() {
        let mut g = GaussianSource::new(31);
        let row: Vec<f64> = (0..16).map(|_| g.next_normal()).collect();
        let m = Matrix::from_rows(&[row]).unwrap();
        let a = quantize_tensor(&m, &QuantizerSpec::symmetric(4)).unwrap();
        let b = quantize_tensor(
            &m,
            &QuantizerSpec::symmetric(4).with_granularity(Granularity::PerToken),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sym_bound_corner_vs_pole() {
        // Unit-sphere corner: bound is 1/(4(2^{b-1}-1)^2) independent of d.
        let d = 16;
        let corner = vec![1.0 / (d as f64).sqrt(); d];
        let b = mse_bound_sym(&corner, 4);
        assert!((b - 1.0 / (4.0 * 49.0)).abs() <= 1e-15);

        // Axis pole: d times larger.
        let mut pole = vec![0.0; d];
        pole[0] = 1.0;
        let bp = mse_bound_sym(&pole, 4);
        assert!((bp - 16.0 / (4.0 * 49.0)).abs() <= 1e-15);
        assert!((bp / b - d as f64).abs() <= 1e-9);

        assert_eq!(mse_bound_sym(&[0.0; 4], 4), 0.0);
    }

    #[test]
    fn zp_bound_cases() {
        assert_eq!(mse_bound_zp(&[2.5; 9], 4), 0.0);

        // Sign-mixed corner on the unit sphere at d = 4096: range 2/sqrt(d).
        let d = 4096;
        let mut corner = vec![1.0 / (d as f64).sqrt(); d];
        corner[0] = -corner[0];
        let min = corner.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let max = corner.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        assert!(((max - min) - 0.03125).abs() <= 1e-15);

        // The 2|x|_inf form dominates the direct signed-range form.
        let mut g = GaussianSource::new(17);
        for _ in 0..100 {
            let x: Vec<f64> = (0..32).map(|_| g.next_normal()).collect();
            let linf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let loose = (x.len() as f64) * 4.0 * linf * linf / (4.0 * 15.0 * 15.0);
            assert!(loose >= mse_bound_zp(&x, 4) - 1e-12);
        }
    }

    #[test]
    fn stats_range_ratio_cases() {
        let spec = QuantizerSpec::symmetric(4);
        let pole = [1.0, 0.0, 0.0, 0.0];
        assert!((quant_stats(&pole, &spec).unwrap().range_ratio - 1.0).abs() <= 1e-15);
        let corner = [0.5, -0.5, 0.5, 0.5];
        assert!((quant_stats(&corner, &spec).unwrap().range_ratio - 0.25).abs() <= 1e-15);
        let zero = quant_stats(&[0.0; 4], &spec).unwrap();
        assert_eq!(zero.mse, 0.0);
        assert!(zero.sqnr.is_infinite());
    }

    #[test]
    fn sqnr_lower_bound_holds() {
        let mut g = GaussianSource::new(13);
        for &bits in &[2u32, 4, 8] {
            let spec = QuantizerSpec::symmetric(bits);
            for _ in 0..200 {
                let d = 16;
                let x: Vec<f64> = (0..d).map(|_| g.next_normal()).collect();
                let s = quant_stats(&x, &spec).unwrap();
                let levels = ((1u64 << (bits - 1)) - 1) as f64;
                let bound = 4.0 * levels * levels / (d as f64 * s.range_ratio);
                assert!(
                    s.sqnr >= bound * (1.0 - 1e-12),
                    "sqnr {} < bound {bound}",
                    s.sqnr
                );
            }
        }
    }

    #[test]
    fn signed_range_at_most_twice_linf() {
        let mut g = GaussianSource::new(41);
        let spec = QuantizerSpec::zeropoint(4);
        for _ in 0..200 {
            let x: Vec<f64> = (0..8).map(|_| g.next_normal()).collect();
            let s = quant_stats(&x, &spec).unwrap();
            assert!(s.signed_range <= 2.0 * s.linf + 1e-15);
        }
        // Equality when max and -min both attain |x|_inf.
        let s = quant_stats(&[0.75, -0.75, 0.1], &spec).unwrap();
        assert!((s.signed_range - 2.0 * s.linf).abs() <= 1e-15);
    }

    #[test]
    fn quantization_idempotent() {
        let mut g = GaussianSource::new(53);
        for &mode in &[QuantMode::Symmetric, QuantMode::Zeropoint] {
            let spec = QuantizerSpec::new(4, mode, Granularity::PerTensor, 1.0);
            for _ in 0..200 {
                let x: Vec<f64> = (0..16).map(|_| g.next_normal()).collect();
                let mut q1 = x.clone();
                quantize_unit_in_place(&mut q1, &spec);
                let mut q2 = q1.clone();
                quantize_unit_in_place(&mut q2, &spec);
                let linf = q1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, b) in q1.iter().zip(&q2) {
                    assert!((a - b).abs() <= 1e-12 * linf.max(1.0));
                }
            }
        }
    }

    #[test]
    fn bounds_hold_for_both_modes() {
        let mut g = GaussianSource::new(61);
        for &bits in &[2u32, 4, 8] {
            for _ in 0..300 {
                let d = 1 + (g.next_u64() % 64) as usize;
                let x: Vec<f64> = (0..d).map(|_| g.next_normal() * 3.0).collect();
                let qs = quantize_symmetric(&x, &QuantizerSpec::symmetric(bits)).unwrap();
                let err: f64 = qs.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(err <= mse_bound_sym(&x, bits) * (1.0 + 1e-12) + 1e-300);

                let qz = quantize_zeropoint(&x, &QuantizerSpec::zeropoint(bits)).unwrap();
                let err: f64 = qz.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(err <= mse_bound_zp(&x, bits) * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}
