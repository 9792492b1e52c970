//! Exact weight rewrites: RMSNorm fusion, rotation folding, weight RTN.
//!
//! Folding conventions, with activations as row vectors and linear layers
//! computing `x W^T`:
//! - a layer reading the rotated stream absorbs the rotation on its input
//!   side, `W -> W Q^T`;
//! - a layer writing to the rotated stream absorbs it on its output side,
//!   `W -> Q W`;
//! - the per-layer value-path rotation goes into the value projection's
//!   output side and inversely into the output projection's input side;
//! - the MLP Hadamard's inverse is pre-folded into the down projection, so
//!   only one online transform remains per MLP.

use crate::error::{Error, Result};
use crate::quant::{Granularity, QuantMode, QuantizerSpec};
use crate::tensor::{fwht_in_place, Matrix};

use super::{RotationSet, ToyTransformer};

/// Absorbs every RMSNorm scale into the adjacent linear weights (columns of
/// the readers are scaled by gamma) and resets the scales to ones. Forward
/// outputs are unchanged up to rounding.
pub fn fuse_rmsnorm(mut model: ToyTransformer) -> ToyTransformer {
    for layer in &mut model.layers {
        scale_columns(&mut layer.wq, &layer.rms_attn);
        scale_columns(&mut layer.wk, &layer.rms_attn);
        scale_columns(&mut layer.wv, &layer.rms_attn);
        layer.rms_attn.fill(1.0);
        scale_columns(&mut layer.w_up, &layer.rms_mlp);
        scale_columns(&mut layer.w_gate, &layer.rms_mlp);
        layer.rms_mlp.fill(1.0);
    }
    scale_columns(&mut model.lm_head, &model.rms_final);
    model.rms_final.fill(1.0);
    model.rms_fused = true;
    model
}

/// Rewrites all weights so the full-precision forward of the folded model
/// (with the online Hadamards still applied in `forward`) equals the
/// original model exactly, while the stream and every linear input live in
/// the rotated frames.
///
/// Requires a RMSNorm-fused model; the scales would otherwise sit between
/// the rotation and the weights and break exactness.
pub fn fold_rotations(model: ToyTransformer, rots: &RotationSet) -> Result<ToyTransformer> {
    if !model.rms_fused {
        return Err(Error::Precondition(
            "fold_rotations needs a RMSNorm-fused model".into(),
        ));
    }
    rots.validate_for(&model.cfg)?;
    let mut model = model;
    let r1 = &rots.residual;

    model.embedding = r1.rotate_rows(&model.embedding)?;
    model.lm_head = r1.rotate_rows(&model.lm_head)?;

    for (l, layer) in model.layers.iter_mut().enumerate() {
        let r2 = rots.value_heads[l].to_dense();

        layer.wq = r1.rotate_rows(&layer.wq)?;
        layer.wk = r1.rotate_rows(&layer.wk)?;
        // Value projection: input side R1, output side R2.
        layer.wv = r2.matmul(&r1.rotate_rows(&layer.wv)?)?;
        // Output projection: input side R2 (inverse), output side R1.
        layer.wo = r1
            .matrix()
            .matmul(&rots.value_heads[l].rotate_rows(&layer.wo)?)?;

        layer.w_up = r1.rotate_rows(&layer.w_up)?;
        layer.w_gate = r1.rotate_rows(&layer.w_gate)?;
        let mut w_down = layer.w_down.clone();
        if rots.mlp_hadamard {
            // W -> W H with H symmetric: transform each row.
            let cols = w_down.cols();
            for i in 0..w_down.rows() {
                fwht_in_place(&mut w_down.data_mut()[i * cols..(i + 1) * cols], true)?;
            }
        }
        layer.w_down = r1.matrix().matmul(&w_down)?;
    }
    Ok(model)
}

/// Round-to-nearest symmetric weight quantization with one scale per output
/// row, applied to the per-layer linear projections. The embedding and the
/// output head stay in full precision.
pub fn quantize_weights(mut model: ToyTransformer, bits: u32) -> Result<ToyTransformer> {
    let spec = QuantizerSpec::new(bits, QuantMode::Symmetric, Granularity::PerToken, 1.0);
    for layer in &mut model.layers {
        for w in [
            &mut layer.wq,
            &mut layer.wk,
            &mut layer.wv,
            &mut layer.wo,
            &mut layer.w_up,
            &mut layer.w_gate,
            &mut layer.w_down,
        ] {
            crate::quant::quantize_tensor_in_place(w, &spec)?;
        }
    }
    Ok(model)
}

fn scale_columns(w: &mut Matrix, gamma: &[f64]) {
    debug_assert_eq!(w.cols(), gamma.len());
    let cols = w.cols();
    for i in 0..w.rows() {
        for (v, g) in w.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(gamma) {
            *v *= g;
        }
    }
}
