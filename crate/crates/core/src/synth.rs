//! Synthetic calibration data: token streams plus a weight perturbation
//! recipe that concentrates activation energy in a fixed set of hidden
//! channels, the regime where rotation calibration has something to fix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ToyTransformer;
use crate::tensor::GaussianSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Global multiplier on the embedding.
    pub base_scale: f64,
    /// How many hidden channels carry outlier energy.
    pub outlier_channels: usize,
    /// Gain applied to the outlier channels; 1 leaves the model untouched.
    pub outlier_gain: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            base_scale: 1.0,
            outlier_channels: 4,
            outlier_gain: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.outlier_channels >= d_model {
            return Err(Error::InvalidInput(format!(
                "outlier_channels {} must be < d_model {d_model}",
                self.outlier_channels
            )));
        }
        if self.outlier_gain < 1.0 || self.outlier_gain.is_nan() {
            return Err(Error::InvalidInput("outlier_gain must be >= 1".into()));
        }
        if self.base_scale <= 0.0 || self.base_scale.is_nan() {
            return Err(Error::InvalidInput("base_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Concrete channel list and gains, resolved from a [`SyntheticSpec`] for a
/// given width. Serialized next to generated data so a run manifest fully
/// reproduces the perturbed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierRecipe {
    pub version: u32,
    pub channels: Vec<usize>,
    pub gain: f64,
    pub base_scale: f64,
}

impl OutlierRecipe {
    pub fn is_identity(&self) -> bool {
        (self.gain == 1.0 || self.channels.is_empty()) && self.base_scale == 1.0
    }
}

/// Picks the outlier channels deterministically from the spec seed.
pub fn make_recipe(spec: &SyntheticSpec, d_model: usize) -> Result<OutlierRecipe> {
    spec.validate(d_model)?;
    let mut g = GaussianSource::new(spec.seed);
    let mut pool: Vec<usize> = (0..d_model).collect();
    let mut channels = Vec::with_capacity(spec.outlier_channels);
    for _ in 0..spec.outlier_channels {
        let idx = (g.next_u64() % pool.len() as u64) as usize;
        channels.push(pool.swap_remove(idx));
    }
    channels.sort_unstable();
    Ok(OutlierRecipe {
        version: 1,
        channels,
        gain: spec.outlier_gain,
        base_scale: spec.base_scale,
    })
}

/// Injects per-channel gains: the chosen residual channels are amplified
/// wherever they are written (embedding columns, output rows of the
/// attention-output and down projections) and wherever they are read by the
/// value/up projections, so both the residual stream and the value/MLP paths
/// carry the outliers.
pub fn apply_recipe(mut model: ToyTransformer, recipe: &OutlierRecipe) -> Result<ToyTransformer> {
    let d = model.cfg.d_model;
    if let Some(&ch) = recipe.channels.iter().find(|&&c| c >= d) {
        return Err(Error::InvalidInput(format!(
            "recipe channel {ch} out of range {d}"
        )));
    }
    if recipe.base_scale != 1.0 {
        model.embedding.scale(recipe.base_scale);
    }
    if recipe.gain == 1.0 {
        return Ok(model);
    }
    for &ch in &recipe.channels {
        for row in 0..model.embedding.rows() {
            let v = model.embedding.get(row, ch);
            model.embedding.set(row, ch, v * recipe.gain);
        }
        for layer in &mut model.layers {
            // Readers: amplified sensitivity to the hot channels.
            scale_column(&mut layer.wv, ch, recipe.gain);
            scale_column(&mut layer.w_up, ch, recipe.gain);
            // Writers: the channels actually get hot in the stream.
            scale_row(&mut layer.wo, ch, recipe.gain);
            scale_row(&mut layer.w_down, ch, recipe.gain);
        }
    }
    Ok(model)
}

/// Deterministic uniform token sequences.
pub fn gen_tokens(n: usize, t: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut g = GaussianSource::new(seed);
    (0..n)
        .map(|_| {
            (0..t)
                .map(|_| (g.next_u64() % vocab as u64) as u32)
                .collect()
        })
        .collect()
}

fn scale_column(w: &mut crate::tensor::Matrix, col: usize, gain: f64) {
    for i in 0..w.rows() {
        let v = w.get(i, col);
        w.set(i, col, v * gain);
    }
}

fn scale_row(w: &mut crate::tensor::Matrix, row: usize, gain: f64) {
    for v in w.row_mut(row) {
        *v *= gain;
    }
}
