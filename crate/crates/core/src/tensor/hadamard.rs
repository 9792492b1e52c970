//! Fast Walsh–Hadamard transforms.

use crate::error::{Error, Result};
use crate::tensor::{GaussianSource, Matrix, OrthogonalMatrix};

/// In-place fast Walsh–Hadamard transform of a power-of-two-length slice.
/// With `normalize` the result is scaled by `1/sqrt(len)`, making the
/// operator orthogonal (and its own inverse).
pub fn fwht_in_place(x: &mut [f64], normalize: bool) -> Result<()> {
    let d = x.len();
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "hadamard transform needs a power-of-two length, got {d}"
        )));
    }
    let mut h = 1;
    while h < d {
        for block in x.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let s = *a + *b;
                let t = *a - *b;
                *a = s;
                *b = t;
            }
        }
        h *= 2;
    }
    if normalize {
        let scale = 1.0 / (d as f64).sqrt();
        for v in x {
            *v *= scale;
        }
    }
    Ok(())
}

/// Out-of-place convenience wrapper over [`fwht_in_place`].
pub fn hadamard_transform(x: &[f64], normalize: bool) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    fwht_in_place(&mut out, normalize)?;
    Ok(out)
}

/// Normalized Hadamard composed with a seeded random `±1` diagonal,
/// materialized as a dense orthogonal matrix: column `j` is
/// `s_j · H e_j / sqrt(dim)`.
pub fn random_hadamard(dim: usize, seed: u64) -> Result<OrthogonalMatrix> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "random hadamard needs a power-of-two dim, got {dim}"
        )));
    }
    let mut g = GaussianSource::new(seed);
    let signs: Vec<f64> = (0..dim)
        .map(|_| if g.next_u64() & 1 == 1 { -1.0 } else { 1.0 })
        .collect();
    let mut m = Matrix::zeros(dim, dim);
    let mut col = vec![0.0; dim];
    for j in 0..dim {
        col.fill(0.0);
        col[j] = signs[j];
        fwht_in_place(&mut col, true)?;
        for (i, v) in col.iter().enumerate() {
            m.set(i, j, *v);
        }
    }
    OrthogonalMatrix::new(m)
}
