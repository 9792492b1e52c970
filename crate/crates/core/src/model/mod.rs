//! A small pre-norm decoder-only transformer with foldable weights.
//!
//! Blocks are RMSNorm → multi-head self-attention with rotary position
//! embeddings → RMSNorm → gated MLP, all residual. Dimensions default to a
//! toy scale where a full calibration run takes seconds, with widths kept at
//! powers of two so Hadamard sites stay valid.

mod fold;
mod forward;

pub use fold::{fold_rotations, fuse_rmsnorm, quantize_weights};
pub use forward::{
    forward, greedy_decode, kv_quantize, mean_nll, ForwardOptions, ForwardResult, RotationMode,
    SiteRotation,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::procrustes::BlockDiagonalRotation;
use crate::tensor::{GaussianSource, Matrix, OrthogonalMatrix};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            vocab: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidInput(format!(
                "d_model {} must be a multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_power_of_two() || !self.d_head().is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "d_model {} and d_head {} must be powers of two",
                self.d_model,
                self.d_head()
            )));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidInput("vocab must be >= 2".into()));
        }
        if self.n_layers == 0 || self.d_ffn == 0 {
            return Err(Error::InvalidInput(
                "n_layers and d_ffn must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One decoder block's weights. Linear weights are `(out, in)`; activations
/// multiply them as `x W^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub rms_attn: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub rms_mlp: Vec<f64>,
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub cfg: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub rms_final: Vec<f64>,
    pub lm_head: Matrix,
    pub rope_base: f64,
    /// Set once RMSNorm scales have been absorbed into the adjacent linear
    /// weights; rotation folding requires it.
    pub rms_fused: bool,
}

/// Deterministic Gaussian init scaled by `1/sqrt(fan_in)`, drawn from
/// `cfg.seed` in a fixed traversal order.
pub fn init_model(cfg: &ModelConfig) -> Result<ToyTransformer> {
    cfg.validate()?;
    let mut g = GaussianSource::new(cfg.seed);
    let d = cfg.d_model;
    let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| g.next_normal() * scale).collect();
        Matrix::from_vec(rows, cols, data).expect("finite init")
    };

    let embedding = gaussian(cfg.vocab, d, d);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            rms_attn: vec![1.0; d],
            wq: gaussian(d, d, d),
            wk: gaussian(d, d, d),
            wv: gaussian(d, d, d),
            wo: gaussian(d, d, d),
            rms_mlp: vec![1.0; d],
            w_up: gaussian(cfg.d_ffn, d, d),
            w_gate: gaussian(cfg.d_ffn, d, d),
            w_down: gaussian(d, cfg.d_ffn, cfg.d_ffn),
        });
    }
    let rms_final = vec![1.0; d];
    let lm_head = gaussian(cfg.vocab, d, d);
    Ok(ToyTransformer {
        cfg: *cfg,
        embedding,
        layers,
        rms_final,
        lm_head,
        rope_base: DEFAULT_ROPE_BASE,
        rms_fused: false,
    })
}

/// The rotations applied to a model: one shared rotation on the residual
/// stream, one block-diagonal rotation per layer on the value/output path,
/// and flags for the two online Hadamard sites (after RoPE on Q/K, and
/// before the down projection).
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSet {
    pub residual: OrthogonalMatrix,
    pub value_heads: Vec<BlockDiagonalRotation>,
    pub qk_hadamard: bool,
    pub mlp_hadamard: bool,
}

impl RotationSet {
    pub fn identity(cfg: &ModelConfig) -> Self {
        Self {
            residual: OrthogonalMatrix::identity(cfg.d_model),
            value_heads: (0..cfg.n_layers)
                .map(|_| BlockDiagonalRotation::identity(cfg.n_heads, cfg.d_head()))
                .collect(),
            qk_hadamard: false,
            mlp_hadamard: false,
        }
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        if self.residual.dim() != cfg.d_model {
            return Err(Error::InvalidInput(format!(
                "residual rotation dim {} != d_model {}",
                self.residual.dim(),
                cfg.d_model
            )));
        }
        if self.value_heads.len() != cfg.n_layers {
            return Err(Error::InvalidInput(format!(
                "expected {} per-layer rotations, got {}",
                cfg.n_layers,
                self.value_heads.len()
            )));
        }
        for (l, r) in self.value_heads.iter().enumerate() {
            if r.n_blocks() != cfg.n_heads || r.block_dim() != cfg.d_head() {
                return Err(Error::InvalidInput(format!(
                    "layer {l} rotation is {}x{} blocks, expected {}x{}",
                    r.n_blocks(),
                    r.block_dim(),
                    cfg.n_heads,
                    cfg.d_head()
                )));
            }
        }
        if self.mlp_hadamard && !cfg.d_ffn.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "mlp hadamard needs a power-of-two d_ffn, got {}",
                cfg.d_ffn
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        let id = |m: &Matrix| {
            let n = m.rows();
            (0..n).all(|i| (0..n).all(|j| m.get(i, j) == if i == j { 1.0 } else { 0.0 }))
        };
        id(self.residual.matrix())
            && self
                .value_heads
                .iter()
                .all(|b| b.blocks().iter().all(|q| id(q.matrix())))
    }
}

/// Activation capture points, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSite {
    /// Post-norm input to the attention projections (residual frame).
    AttnIn,
    /// Post-norm input to the MLP up/gate projections (residual frame).
    MlpIn,
    /// Attention output entering the output projection (pre value-path
    /// rotation).
    OprojIn,
    /// Gated MLP activation entering the down projection (pre Hadamard).
    DownprojIn,
    /// Keys after RoPE (pre QK Hadamard), heads concatenated.
    KCache,
    /// Values as produced by the value projection (pre value-path rotation).
    VCache,
}

impl TapSite {
    pub const ALL: [TapSite; 6] = [
        TapSite::AttnIn,
        TapSite::MlpIn,
        TapSite::OprojIn,
        TapSite::DownprojIn,
        TapSite::KCache,
        TapSite::VCache,
    ];

    pub fn code(self) -> u8 {
        match self {
            TapSite::AttnIn => 0,
            TapSite::MlpIn => 1,
            TapSite::OprojIn => 2,
            TapSite::DownprojIn => 3,
            TapSite::KCache => 4,
            TapSite::VCache => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown tap site code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TapSite::AttnIn => "attn_in",
            TapSite::MlpIn => "mlp_in",
            TapSite::OprojIn => "oproj_in",
            TapSite::DownprojIn => "downproj_in",
            TapSite::KCache => "k_cache",
            TapSite::VCache => "v_cache",
        }
    }

    /// Width of this site's activations.
    pub fn dim(self, cfg: &ModelConfig) -> usize {
        match self {
            TapSite::DownprojIn => cfg.d_ffn,
            _ => cfg.d_model,
        }
    }
}

/// Captured activations for one site of one layer; rows are tokens in
/// forward order across the whole batch.
#[derive(Debug, Clone)]
pub struct TapRecord {
    pub site: TapSite,
    pub layer: usize,
    pub data: Matrix,
}
