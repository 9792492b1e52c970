//! Closed-form orthogonal Procrustes updates over streaming statistics.
//!
//! The rotation update never needs the activations themselves: it only needs
//! the cross-covariance between corner targets and normalized activations,
//! which accumulates row by row. Solving `max trace(R C)` over the
//! orthogonal group is closed-form: `R = U V^T` from `C = U S V^T`.

use crate::corner::{corner_targets, NormalizedBatch};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{svd, Matrix, OrthogonalMatrix};

/// Running target/activation cross-covariance plus sample count.
#[derive(Debug, Clone)]
pub struct ProcrustesAccumulator {
    c: Matrix,
    n_samples: usize,
}

impl ProcrustesAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            c: Matrix::zeros(dim, dim),
            n_samples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.c.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn cross_covariance(&self) -> &Matrix {
        &self.c
    }

    pub fn reset(&mut self) {
        self.c = Matrix::zeros(self.dim(), self.dim());
        self.n_samples = 0;
    }

    /// Folds a batch of raw activations into the statistics: rows are
    /// normalized (near-zero rows dropped), targets are taken from the
    /// current rotation, and `C += Z^T X` row by row. Row-by-row summation
    /// makes chunked and whole-batch accumulation bit-identical.
    pub fn accumulate(&mut self, r: &OrthogonalMatrix, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "accumulate dim mismatch: batch {} vs accumulator {}",
                x.cols(),
                self.dim()
            )));
        }
        if r.dim() != self.dim() {
            return Err(Error::InvalidInput("rotation dim mismatch".into()));
        }
        let batch = NormalizedBatch::from_raw(x);
        if batch.is_empty() {
            return Ok(());
        }
        let rotated = r.rotate_rows(batch.matrix())?;
        let targets = corner_targets(&rotated);
        let d = self.dim();
        let n = batch.len();
        let xt = batch.matrix();
        let par_hint = n * d * d >= par::PAR_THRESHOLD;
        par::for_each_chunk_mut(self.c.data_mut(), d, par_hint, |a, c_row| {
            for i in 0..n {
                let z = targets.get(i, a);
                let x_row = xt.row(i);
                for (cv, xv) in c_row.iter_mut().zip(x_row) {
                    *cv += z * xv;
                }
            }
        });
        self.n_samples += n;
        Ok(())
    }

    /// Corner objective of `r` against the accumulated statistics with the
    /// targets frozen at accumulation time: `2 n - 2 <C, R>`. Equals the true
    /// objective when `r` is the rotation the targets were computed from.
    pub fn frozen_objective(&self, r: &OrthogonalMatrix) -> f64 {
        let mut inner = 0.0;
        for (c, q) in self.c.data().iter().zip(r.matrix().data()) {
            inner += c * q;
        }
        2.0 * self.n_samples as f64 - 2.0 * inner
    }
}

/// Closed-form Procrustes solve: `R = U V^T` for `C = U S V^T`. The result
/// maximizes `trace(R C)` over rotations and reflections alike.
pub fn opu(acc: &ProcrustesAccumulator) -> Result<OrthogonalMatrix> {
    if acc.n_samples == 0 {
        return Err(Error::EmptyAccumulator("no samples accumulated".into()));
    }
    let decomp = svd(&acc.c)?;
    OrthogonalMatrix::new(decomp.u.matmul(&decomp.vt)?)
}

/// Orthogonal operator assembled from per-head blocks of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonalRotation {
    blocks: Vec<OrthogonalMatrix>,
    block_dim: usize,
}

impl BlockDiagonalRotation {
    pub fn new(blocks: Vec<OrthogonalMatrix>) -> Result<Self> {
        let block_dim = match blocks.first() {
            Some(b) => b.dim(),
            None => return Err(Error::InvalidInput("need at least one block".into())),
        };
        if blocks.iter().any(|b| b.dim() != block_dim) {
            return Err(Error::InvalidInput(
                "blocks must share one dimension".into(),
            ));
        }
        Ok(Self { blocks, block_dim })
    }

    pub fn identity(n_blocks: usize, block_dim: usize) -> Self {
        Self {
            blocks: (0..n_blocks)
                .map(|_| OrthogonalMatrix::identity(block_dim))
                .collect(),
            block_dim,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn dim(&self) -> usize {
        self.blocks.len() * self.block_dim
    }

    pub fn block(&self, i: usize) -> &OrthogonalMatrix {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[OrthogonalMatrix] {
        &self.blocks
    }

    /// Rotates each row slice-wise: columns `[h b, (h+1) b)` go through
    /// block `h`, matching concatenated per-head layouts.
    pub fn rotate_rows(&self, x: &Matrix) -> Result<Matrix> {
        self.apply_rows(x, false)
    }

    /// Inverse of [`rotate_rows`](Self::rotate_rows).
    pub fn unrotate_rows(&self, x: &Matrix) -> Result<Matrix> {
        self.apply_rows(x, true)
    }

    fn apply_rows(&self, x: &Matrix, inverse: bool) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "block rotation dim {} does not match batch dim {}",
                self.dim(),
                x.cols()
            )));
        }
        let b = self.block_dim;
        let cols = x.cols();
        let mut out = x.clone();
        let par_hint = x.rows() * cols * b >= par::PAR_THRESHOLD;
        par::for_each_chunk_mut(out.data_mut(), cols, par_hint, |i, row| {
            let src = x.row(i);
            for (h, block) in self.blocks.iter().enumerate() {
                let m = block.matrix();
                let s = &src[h * b..(h + 1) * b];
                let dst = &mut row[h * b..(h + 1) * b];
                for (j, d) in dst.iter_mut().enumerate() {
                    let mut sum = 0.0;
                    for (k, sv) in s.iter().enumerate() {
                        // x Q^T uses rows of Q, the inverse x Q uses columns.
                        sum += if inverse { m.get(k, j) } else { m.get(j, k) } * sv;
                    }
                    *d = sum;
                }
            }
        });
        Ok(out)
    }

    /// Dense materialization, for weight folding.
    pub fn to_dense(&self) -> Matrix {
        let d = self.dim();
        let b = self.block_dim;
        let mut m = Matrix::zeros(d, d);
        for (h, block) in self.blocks.iter().enumerate() {
            for i in 0..b {
                for j in 0..b {
                    m.set(h * b + i, h * b + j, block.matrix().get(i, j));
                }
            }
        }
        m
    }
}

/// Independent Procrustes solve per block, assembled block-diagonally.
/// Fails naming the first empty block.
pub fn opu_blockdiag(accs: &[ProcrustesAccumulator]) -> Result<BlockDiagonalRotation> {
    if accs.is_empty() {
        return Err(Error::InvalidInput("no accumulators".into()));
    }
    let block_dim = accs[0].dim();
    if accs.iter().any(|a| a.dim() != block_dim) {
        return Err(Error::InvalidInput(
            "accumulators must share one dimension".into(),
        ));
    }
    let mut blocks = Vec::with_capacity(accs.len());
    for (h, acc) in accs.iter().enumerate() {
        if acc.n_samples() == 0 {
            return Err(Error::EmptyAccumulator(format!("block {h} has no samples")));
        }
        blocks.push(opu(acc)?);
    }
    BlockDiagonalRotation::new(blocks)
}

/// Alternating minimization on a fixed batch: refresh targets from the
/// current rotation, then solve the Procrustes subproblem, `steps` times.
/// The corner objective is non-increasing across iterations.
pub fn alternate(
    r0: &OrthogonalMatrix,
    batch: &NormalizedBatch,
    steps: usize,
) -> Result<OrthogonalMatrix> {
    if steps == 0 {
        return Err(Error::InvalidInput("alternate needs steps >= 1".into()));
    }
    if r0.dim() != batch.dim() {
        return Err(Error::InvalidInput("rotation/batch dim mismatch".into()));
    }
    let mut r = r0.clone();
    let mut acc = ProcrustesAccumulator::new(batch.dim());
    for _ in 0..steps {
        acc.reset();
        acc.accumulate(&r, batch.matrix())?;
        r = opu(&acc)?;
    }
    Ok(r)
}
