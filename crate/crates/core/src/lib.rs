//! Rotation-based calibration for low-bit activation quantization.
//!
//! The library learns orthogonal rotations that align normalized activations
//! with the corners of the hypercube inscribed in the unit sphere, using
//! closed-form orthogonal Procrustes updates accumulated over streaming
//! mini-batches. Rotations are folded exactly into the weights of a small
//! pre-norm decoder transformer, and quantization-error and participation
//! ratio diagnostics quantify how much easier the rotated activations are
//! to quantize.
//!
//! Crate layout:
//! - [`tensor`]: dense matrices, one-sided Jacobi SVD, fast Walsh–Hadamard
//!   transforms, seeded orthogonal sampling.
//! - [`quant`]: simulated uniform quantizers (symmetric / zeropoint) at
//!   per-tensor, per-token and grouped granularity, plus error bounds.
//! - [`corner`]: the corner-alignment objective, its ℓ1 dual form, and
//!   participation-ratio diagnostics.
//! - [`procrustes`]: streaming cross-covariance accumulators and the
//!   closed-form rotation update, dense and block-diagonal.
//! - [`model`]: the toy transformer with RMSNorm fusion, exact rotation
//!   folding and activation taps.
//! - [`calib`]: online and offline mini-batch calibration drivers.
//! - [`report`]: relative quantization error reports and CSV/JSON export.
//! - [`synth`]: synthetic token data and outlier-channel weight recipes.
//! - [`io`]: versioned binary containers for models, rotations and
//!   activation dumps.
//!
//! With the default `parallel` feature, batch-level inner loops run on
//! rayon. Parallel execution only distributes disjoint output rows; every
//! output element is computed by the same sequential expression, so results
//! are bit-identical with the feature disabled.

pub mod calib;
pub mod corner;
pub mod error;
pub mod io;
pub mod model;
pub mod procrustes;
pub mod quant;
pub mod report;
pub mod synth;
pub mod tensor;

mod par;

pub use error::{Error, Result};
