//! Causal forward pass with activation taps, online Hadamards, and
//! simulated quantization at the linear inputs.
//!
//! Two rotation modes share one code path:
//! - `Virtual`: weights stay unfolded; at each site the activation is
//!   rotated into the frame the quantizer would see at inference, quantized,
//!   and rotated back. With quantization off the rotation cancels exactly,
//!   so it is skipped. Taps always capture the raw-frame activation before
//!   quantization.
//! - `Folded`: weights have absorbed the rotations, the stream itself is
//!   rotated, and only the online Hadamards remain: the QK transform after
//!   RoPE and the MLP transform before the down projection (whose inverse
//!   was pre-folded into the weights).

use crate::error::{Error, Result};
use crate::par;
use crate::procrustes::BlockDiagonalRotation;
use crate::quant::{quantize_tensor, Granularity, QuantizerSpec};
use crate::tensor::{fwht_in_place, Matrix, OrthogonalMatrix};

use super::{RotationSet, TapRecord, TapSite, ToyTransformer};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub enum RotationMode<'a> {
    /// Apply the rotation set on the fly around each quantization site.
    Virtual(&'a RotationSet),
    /// Weights already folded; only the online Hadamard flags matter.
    Folded {
        qk_hadamard: bool,
        mlp_hadamard: bool,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub rotations: RotationMode<'a>,
    pub act_quant: Option<QuantizerSpec>,
    pub kv_quant: Option<QuantizerSpec>,
    pub tap_sites: &'a [TapSite],
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            rotations: RotationMode::Folded {
                qk_hadamard: false,
                mlp_hadamard: false,
            },
            act_quant: None,
            kv_quant: None,
            tap_sites: &[],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// One `(seq_len, vocab)` logit matrix per input sequence.
    pub logits: Vec<Matrix>,
    /// Requested taps, rows concatenated across sequences in input order.
    pub taps: Vec<TapRecord>,
}

/// Runs the causal decoder on a batch of token sequences. Sequences are
/// independent and processed in parallel; outputs and taps keep input order.
pub fn forward(
    model: &ToyTransformer,
    sequences: &[Vec<u32>],
    opts: &ForwardOptions,
) -> Result<ForwardResult> {
    if let RotationMode::Virtual(rots) = opts.rotations {
        rots.validate_for(&model.cfg)?;
    }
    if let Some(spec) = &opts.act_quant {
        spec.validate()?;
    }
    if let Some(spec) = &opts.kv_quant {
        spec.validate()?;
    }
    for seq in sequences {
        if seq.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= model.cfg.vocab) {
            return Err(Error::InvalidInput(format!(
                "token {t} out of range for vocab {}",
                model.cfg.vocab
            )));
        }
    }

    let total_tokens: usize = sequences.iter().map(Vec::len).sum();
    let par_hint = sequences.len() > 1
        && total_tokens * model.cfg.d_model * model.cfg.d_model >= par::PAR_THRESHOLD;
    let mut slots: Vec<Option<Result<SeqRun>>> = sequences.iter().map(|_| None).collect();
    par::for_each_chunk_mut(&mut slots, 1, par_hint, |i, slot| {
        slot[0] = Some(run_sequence(model, &sequences[i], opts));
    });

    let mut logits = Vec::with_capacity(sequences.len());
    let mut runs = Vec::with_capacity(sequences.len());
    for slot in slots {
        let run = slot.expect("every slot filled")?;
        runs.push(run);
    }
    // All sequences produce taps in the same (site, layer) encounter order;
    // merge index-wise.
    let mut taps: Vec<TapRecord> = Vec::new();
    if let Some(first) = runs.first() {
        for idx in 0..first.taps.len() {
            let (site, layer) = (first.taps[idx].0, first.taps[idx].1);
            let cols = first.taps[idx].2.cols();
            let rows: usize = runs.iter().map(|r| r.taps[idx].2.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for run in &runs {
                data.extend_from_slice(run.taps[idx].2.data());
            }
            taps.push(TapRecord {
                site,
                layer,
                data: Matrix::from_vec(rows, cols, data)?,
            });
        }
    }
    for run in runs {
        logits.push(run.logits);
    }
    Ok(ForwardResult { logits, taps })
}

/// Grouped quantization of cached keys (post QK-Hadamard frame) and values
/// (value-path frame); the group size must divide the row width.
pub fn kv_quantize(k: &Matrix, v: &Matrix, spec: &QuantizerSpec) -> Result<(Matrix, Matrix)> {
    Ok((quantize_cache(k, spec)?, quantize_cache(v, spec)?))
}

fn quantize_cache(m: &Matrix, spec: &QuantizerSpec) -> Result<Matrix> {
    let Granularity::Grouped { group_size } = spec.granularity else {
        return Err(Error::InvalidSpec(
            "kv quantization expects grouped granularity".into(),
        ));
    };
    if group_size == 0 || !m.cols().is_multiple_of(group_size) {
        return Err(Error::InvalidSpec(format!(
            "group size {group_size} must divide cache width {}",
            m.cols()
        )));
    }
    quantize_tensor(m, spec)
}

/// Mean next-token negative log-likelihood over all positions of all
/// sequences (sequences of length 1 contribute nothing).
pub fn mean_nll(
    model: &ToyTransformer,
    sequences: &[Vec<u32>],
    opts: &ForwardOptions,
) -> Result<f64> {
    let result = forward(model, sequences, opts)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (seq, logits) in sequences.iter().zip(&result.logits) {
        for t in 0..seq.len() - 1 {
            let row = logits.row(t);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += logsum - row[seq[t + 1] as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput(
            "no next-token positions to score".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Greedy continuation, re-running the full-sequence forward each step.
/// Calibration never decodes; this exists for end-to-end smoke checks.
pub fn greedy_decode(
    model: &ToyTransformer,
    prompt: &[u32],
    steps: usize,
    opts: &ForwardOptions,
) -> Result<Vec<u32>> {
    let mut tokens = prompt.to_vec();
    for _ in 0..steps {
        let out = forward(model, std::slice::from_ref(&tokens), opts)?;
        let logits = &out.logits[0];
        let last = logits.row(logits.rows() - 1);
        let argmax = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .expect("vocab >= 2");
        tokens.push(argmax);
    }
    Ok(tokens)
}

// ── Per-sequence machinery ──────────────────────────────────────────────────

struct SeqRun {
    logits: Matrix,
    taps: Vec<(TapSite, usize, Matrix)>,
}

/// The orthogonal transform a quantizer site sees, by reference.
#[derive(Debug, Clone, Copy)]
pub enum SiteRotation<'a> {
    Identity,
    Dense(&'a OrthogonalMatrix),
    Block(&'a BlockDiagonalRotation),
    /// Normalized Hadamard applied to each `block`-wide slice of a row.
    Hadamard {
        block: usize,
    },
}

impl SiteRotation<'_> {
    pub fn rotate(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            SiteRotation::Identity => Ok(x.clone()),
            SiteRotation::Dense(q) => q.rotate_rows(x),
            SiteRotation::Block(b) => b.rotate_rows(x),
            SiteRotation::Hadamard { block } => {
                let mut out = x.clone();
                per_block_fwht(&mut out, *block)?;
                Ok(out)
            }
        }
    }

    pub fn unrotate(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            SiteRotation::Identity => Ok(x.clone()),
            SiteRotation::Dense(q) => q.unrotate_rows(x),
            SiteRotation::Block(b) => b.unrotate_rows(x),
            // The normalized Hadamard is its own inverse.
            SiteRotation::Hadamard { .. } => self.rotate(x),
        }
    }
}

/// Normalized FWHT applied to each `block`-wide slice of each row.
fn per_block_fwht(x: &mut Matrix, block: usize) -> Result<()> {
    if block == 0 || !x.cols().is_multiple_of(block) {
        return Err(Error::InvalidInput(format!(
            "hadamard block {block} must divide width {}",
            x.cols()
        )));
    }
    let cols = x.cols();
    for i in 0..x.rows() {
        for slice in x.data_mut()[i * cols..(i + 1) * cols].chunks_mut(block) {
            fwht_in_place(slice, true)?;
        }
    }
    Ok(())
}

/// Rotate into the quantizer frame, quantize, rotate back. With
/// quantization off the rotation cancels exactly and is skipped.
fn site_process(x: &Matrix, rot: &SiteRotation, quant: Option<&QuantizerSpec>) -> Result<Matrix> {
    match quant {
        None => Ok(x.clone()),
        Some(spec) => {
            let rotated = rot.rotate(x)?;
            let quantized = quantize_tensor(&rotated, spec)?;
            rot.unrotate(&quantized)
        }
    }
}

fn run_sequence(model: &ToyTransformer, tokens: &[u32], opts: &ForwardOptions) -> Result<SeqRun> {
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let t_len = tokens.len();
    let (qk_hadamard, mlp_hadamard) = match opts.rotations {
        RotationMode::Virtual(r) => (r.qk_hadamard, r.mlp_hadamard),
        RotationMode::Folded {
            qk_hadamard,
            mlp_hadamard,
        } => (qk_hadamard, mlp_hadamard),
    };
    let mut taps: Vec<(TapSite, usize, Matrix)> = Vec::new();
    let want = |site: TapSite| opts.tap_sites.contains(&site);

    let mut x = Matrix::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t)
            .copy_from_slice(model.embedding.row(tok as usize));
    }

    let rope = RopeTable::new(t_len, dh, model.rope_base);

    for (l, layer) in model.layers.iter().enumerate() {
        let residual_rot = match opts.rotations {
            RotationMode::Virtual(r) => SiteRotation::Dense(&r.residual),
            RotationMode::Folded { .. } => SiteRotation::Identity,
        };
        let value_rot = match opts.rotations {
            RotationMode::Virtual(r) => SiteRotation::Block(&r.value_heads[l]),
            RotationMode::Folded { .. } => SiteRotation::Identity,
        };

        // ── Attention ──
        let a_raw = rmsnorm(&x, &layer.rms_attn);
        if want(TapSite::AttnIn) {
            taps.push((TapSite::AttnIn, l, a_raw.clone()));
        }
        let a_used = site_process(&a_raw, &residual_rot, opts.act_quant.as_ref())?;

        let mut q = a_used.matmul_bt(&layer.wq)?;
        let mut k = a_used.matmul_bt(&layer.wk)?;
        let v = a_used.matmul_bt(&layer.wv)?;
        rope.apply(&mut q);
        rope.apply(&mut k);

        if want(TapSite::KCache) {
            taps.push((TapSite::KCache, l, k.clone()));
        }
        if want(TapSite::VCache) {
            taps.push((TapSite::VCache, l, v.clone()));
        }

        if qk_hadamard {
            per_block_fwht(&mut q, dh)?;
            per_block_fwht(&mut k, dh)?;
        }
        let k_used = match &opts.kv_quant {
            Some(spec) => quantize_cache(&k, spec)?,
            None => k,
        };

        // The value-path rotation commutes with the attention average, so it
        // only has to be applied eagerly when the cache is quantized.
        let attn_raw = match &opts.kv_quant {
            Some(spec) => {
                let v_rot = value_rot.rotate(&v)?;
                let v_q = quantize_cache(&v_rot, spec)?;
                let mixed = attention(&q, &k_used, &v_q, cfg.n_heads, dh)?;
                value_rot.unrotate(&mixed)?
            }
            None => attention(&q, &k_used, &v, cfg.n_heads, dh)?,
        };

        if want(TapSite::OprojIn) {
            taps.push((TapSite::OprojIn, l, attn_raw.clone()));
        }
        let o_used = site_process(&attn_raw, &value_rot, opts.act_quant.as_ref())?;
        let attn_out = o_used.matmul_bt(&layer.wo)?;
        x.add_assign(&attn_out)?;

        // ── Gated MLP ──
        let m_raw = rmsnorm(&x, &layer.rms_mlp);
        if want(TapSite::MlpIn) {
            taps.push((TapSite::MlpIn, l, m_raw.clone()));
        }
        let m_used = site_process(&m_raw, &residual_rot, opts.act_quant.as_ref())?;

        let up = m_used.matmul_bt(&layer.w_up)?;
        let gate = m_used.matmul_bt(&layer.w_gate)?;
        let mut h = up;
        for (hv, gv) in h.data_mut().iter_mut().zip(gate.data()) {
            *hv *= silu(*gv);
        }
        if want(TapSite::DownprojIn) {
            taps.push((TapSite::DownprojIn, l, h.clone()));
        }
        let h_used = match opts.rotations {
            RotationMode::Virtual(_) => {
                let rot = if mlp_hadamard {
                    SiteRotation::Hadamard { block: cfg.d_ffn }
                } else {
                    SiteRotation::Identity
                };
                site_process(&h, &rot, opts.act_quant.as_ref())?
            }
            RotationMode::Folded { .. } => {
                // The inverse is folded into w_down: transform, quantize, done.
                let mut h2 = h;
                if mlp_hadamard {
                    per_block_fwht(&mut h2, cfg.d_ffn)?;
                }
                match &opts.act_quant {
                    Some(spec) => quantize_tensor(&h2, spec)?,
                    None => h2,
                }
            }
        };
        let down = h_used.matmul_bt(&layer.w_down)?;
        x.add_assign(&down)?;
    }

    let final_norm = rmsnorm(&x, &model.rms_final);
    let logits = final_norm.matmul_bt(&model.lm_head)?;
    Ok(SeqRun { logits, taps })
}

fn rmsnorm(x: &Matrix, gamma: &[f64]) -> Matrix {
    let cols = x.cols();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gamma) {
            *v *= inv * g;
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Causal multi-head attention over full sequences with exact softmax.
fn attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize, dh: usize) -> Result<Matrix> {
    let t_len = q.rows();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(t_len, n_heads * dh);
    let mut scores = vec![0.0; t_len];
    for h in 0..n_heads {
        let off = h * dh;
        for t in 0..t_len {
            let q_row = &q.row(t)[off..off + dh];
            let mut max = f64::NEG_INFINITY;
            for (s, score) in scores.iter_mut().enumerate().take(t + 1) {
                let k_row = &k.row(s)[off..off + dh];
                let dot: f64 = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum();
                *score = dot * scale;
                max = max.max(*score);
            }
            let mut denom = 0.0;
            for score in scores.iter_mut().take(t + 1) {
                *score = (*score - max).exp();
                denom += *score;
            }
            let out_row = &mut out.row_mut(t)[off..off + dh];
            for (s, &w) in scores.iter().enumerate().take(t + 1) {
                let weight = w / denom;
                let v_row = &v.row(s)[off..off + dh];
                for (o, &vv) in out_row.iter_mut().zip(v_row) {
                    *o += weight * vv;
                }
            }
        }
    }
    Ok(out)
}

/// Rotary position embedding over adjacent pairs within each head.
struct RopeTable {
    cos: Vec<f64>,
    sin: Vec<f64>,
    dh: usize,
}

impl RopeTable {
    fn new(t_len: usize, dh: usize, base: f64) -> Self {
        let half = dh / 2;
        let mut cos = vec![0.0; t_len * half];
        let mut sin = vec![0.0; t_len * half];
        for t in 0..t_len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / dh as f64);
                let angle = t as f64 * freq;
                cos[t * half + i] = angle.cos();
                sin[t * half + i] = angle.sin();
            }
        }
        Self { cos, sin, dh }
    }

    fn apply(&self, m: &mut Matrix) {
        let cols = m.cols();
        let half = self.dh / 2;
        for t in 0..m.rows() {
            let row = &mut m.data_mut()[t * cols..(t + 1) * cols];
            for head in row.chunks_mut(self.dh) {
                for i in 0..half {
                    let c = self.cos[t * half + i];
                    let s = self.sin[t * half + i];
                    let a = head[2 * i];
                    let b = head[2 * i + 1];
                    head[2 * i] = a * c - b * s;
                    head[2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fold_rotations, fuse_rmsnorm, init_model, ModelConfig, RotationSet};
    use crate::quant::QuantMode;
    use crate::tensor::{random_orthogonal, GaussianSource};

    fn toy() -> ToyTransformer {
        init_model(&ModelConfig::default()).unwrap()
    }

    fn random_tokens(n: usize, t: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
        let mut g = GaussianSource::new(seed);
        (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| (g.next_u64() % vocab as u64) as u32)
                    .collect()
            })
            .collect()
    }

    fn random_rotations(cfg: &ModelConfig, seed: u64) -> RotationSet {
        let mut rots = RotationSet::identity(cfg);
        rots.residual = random_orthogonal(cfg.d_model, seed).unwrap();
        for (l, r2) in rots.value_heads.iter_mut().enumerate() {
            let blocks: Vec<_> = (0..cfg.n_heads)
                .map(|h| {
                    random_orthogonal(cfg.d_head(), seed + 1 + (l * cfg.n_heads + h) as u64)
                        .unwrap()
                })
                .collect();
            *r2 = crate::procrustes::BlockDiagonalRotation::new(blocks).unwrap();
        }
        rots
    }

    fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
        let scale = a.max_abs().max(b.max_abs()).max(1e-300);
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn rejects_bad_tokens() {
        let model = toy();
        let opts = ForwardOptions::default();
        assert!(forward(&model, &[vec![999]], &opts).is_err());
        assert!(forward(&model, &[vec![]], &opts).is_err());
    }

    #[test]
    fn identity_virtual_matches_folded_reference() {
        let cfg = ModelConfig::default();
        let model = fuse_rmsnorm(toy());
        let rots = RotationSet::identity(&cfg);
        let seqs = random_tokens(2, 16, 256, 5);
        let a = forward(
            &model,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Virtual(&rots),
                ..Default::default()
            },
        )
        .unwrap();
        let b = forward(&model, &seqs, &ForwardOptions::default()).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert_eq!(x, y, "identity virtual rotations change nothing");
        }
    }

    #[test]
    fn fuse_rmsnorm_preserves_forward() {
        let mut model = toy();
        let mut g = GaussianSource::new(8);
        for layer in &mut model.layers {
            for v in layer.rms_attn.iter_mut().chain(layer.rms_mlp.iter_mut()) {
                *v = 0.5 + g.next_uniform();
            }
        }
        for v in model.rms_final.iter_mut() {
            *v = 0.5 + g.next_uniform();
        }
        let seqs = random_tokens(2, 24, 256, 6);
        let base = forward(&model, &seqs, &ForwardOptions::default()).unwrap();
        let fused = fuse_rmsnorm(model);
        let after = forward(&fused, &seqs, &ForwardOptions::default()).unwrap();
        for (x, y) in base.logits.iter().zip(&after.logits) {
            assert!(
                max_rel_diff(x, y) <= 1e-10,
                "rel diff {}",
                max_rel_diff(x, y)
            );
        }
    }

    #[test]
    fn folded_model_matches_baseline_logits() {
        let cfg = ModelConfig::default();
        let model = fuse_rmsnorm(toy());
        let mut rots = random_rotations(&cfg, 300);
        rots.qk_hadamard = true;
        rots.mlp_hadamard = true;
        let folded = fold_rotations(model.clone(), &rots).unwrap();
        let seqs = random_tokens(4, 32, 256, 7);
        let base = forward(&model, &seqs, &ForwardOptions::default()).unwrap();
        let rotated = forward(
            &folded,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Folded {
                    qk_hadamard: true,
                    mlp_hadamard: true,
                },
                ..Default::default()
            },
        )
        .unwrap();
        for (x, y) in base.logits.iter().zip(&rotated.logits) {
            assert!(
                max_rel_diff(x, y) <= 1e-8,
                "rel diff {}",
                max_rel_diff(x, y)
            );
        }
    }

    #[test]
    fn folded_residual_tap_is_rotated_baseline_tap() {
        let cfg = ModelConfig::default();
        let model = fuse_rmsnorm(toy());
        let rots = random_rotations(&cfg, 310);
        let folded = fold_rotations(model.clone(), &rots).unwrap();
        let seqs = random_tokens(2, 16, 256, 8);
        let sites = [TapSite::AttnIn, TapSite::MlpIn];
        let base = forward(
            &model,
            &seqs,
            &ForwardOptions {
                tap_sites: &sites,
                ..Default::default()
            },
        )
        .unwrap();
        let rot = forward(
            &folded,
            &seqs,
            &ForwardOptions {
                tap_sites: &sites,
                ..Default::default()
            },
        )
        .unwrap();
        for (b, r) in base.taps.iter().zip(&rot.taps) {
            assert_eq!(b.site, r.site);
            let expected = rots.residual.rotate_rows(&b.data).unwrap();
            assert!(max_rel_diff(&expected, &r.data) <= 1e-8);
        }
    }

    #[test]
    fn qk_hadamard_cancels_in_attention() {
        let model = fuse_rmsnorm(toy());
        let seqs = random_tokens(2, 16, 256, 9);
        let off = forward(&model, &seqs, &ForwardOptions::default()).unwrap();
        let on = forward(
            &model,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Folded {
                    qk_hadamard: true,
                    mlp_hadamard: false,
                },
                ..Default::default()
            },
        )
        .unwrap();
        for (x, y) in off.logits.iter().zip(&on.logits) {
            assert!(
                max_rel_diff(x, y) <= 1e-10,
                "rel diff {}",
                max_rel_diff(x, y)
            );
        }
    }

    #[test]
    fn near_lossless_quantization_matches_fp() {
        let cfg = ModelConfig::default();
        let model = fuse_rmsnorm(toy());
        let rots = RotationSet::identity(&cfg);
        let seqs = random_tokens(2, 16, 256, 10);
        let fp = forward(
            &model,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Virtual(&rots),
                ..Default::default()
            },
        )
        .unwrap();
        let spec = QuantizerSpec::new(16, QuantMode::Zeropoint, Granularity::PerToken, 1.0);
        let quantized = forward(
            &model,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Virtual(&rots),
                act_quant: Some(spec),
                ..Default::default()
            },
        )
        .unwrap();
        for (x, y) in fp.logits.iter().zip(&quantized.logits) {
            assert!(
                max_rel_diff(x, y) <= 1e-3,
                "rel diff {}",
                max_rel_diff(x, y)
            );
        }
    }

    #[test]
    fn kv_quantize_contract() {
        let mut g = GaussianSource::new(11);
        let k = Matrix::from_vec(8, 64, (0..512).map(|_| g.next_normal()).collect()).unwrap();
        let v = Matrix::from_vec(8, 64, (0..512).map(|_| g.next_normal()).collect()).unwrap();

        // Huge bit-width: identity to 1e-6.
        let fine = QuantizerSpec::new(
            24,
            QuantMode::Zeropoint,
            Granularity::Grouped { group_size: 16 },
            1.0,
        );
        let (kq, vq) = kv_quantize(&k, &v, &fine).unwrap();
        assert!(max_rel_diff(&kq, &k) <= 1e-6);
        assert!(max_rel_diff(&vq, &v) <= 1e-6);

        // Constant V rows unchanged.
        let v_const = Matrix::from_vec(2, 64, vec![1.5; 128]).unwrap();
        let coarse = QuantizerSpec::new(
            4,
            QuantMode::Zeropoint,
            Granularity::Grouped { group_size: 16 },
            1.0,
        );
        let (_, vq) = kv_quantize(&k.clone(), &v_const, &coarse).unwrap();
        assert_eq!(vq, v_const);

        // Non-grouped or non-dividing specs are rejected.
        let bad = QuantizerSpec::zeropoint(4);
        assert!(kv_quantize(&k, &v, &bad).is_err());
        let bad = QuantizerSpec::new(
            4,
            QuantMode::Zeropoint,
            Granularity::Grouped { group_size: 48 },
            1.0,
        );
        assert!(kv_quantize(&k, &v, &bad).is_err());
    }

    #[test]
    fn quantized_virtual_matches_quantized_folded() {
        // Quantizing after the virtual rotation is the same computation as
        // quantizing the folded model's rotated stream.
        let cfg = ModelConfig::default();
        let model = fuse_rmsnorm(toy());
        let mut rots = random_rotations(&cfg, 330);
        rots.qk_hadamard = true;
        rots.mlp_hadamard = true;
        let folded = fold_rotations(model.clone(), &rots).unwrap();
        let seqs = random_tokens(2, 16, 256, 15);
        let act = QuantizerSpec::new(4, QuantMode::Zeropoint, Granularity::PerToken, 1.0);
        let kv = QuantizerSpec::new(
            4,
            QuantMode::Zeropoint,
            Granularity::Grouped { group_size: 16 },
            1.0,
        );
        let virt = forward(
            &model,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Virtual(&rots),
                act_quant: Some(act),
                kv_quant: Some(kv),
                ..Default::default()
            },
        )
        .unwrap();
        let fold = forward(
            &folded,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Folded {
                    qk_hadamard: true,
                    mlp_hadamard: true,
                },
                act_quant: Some(act),
                kv_quant: Some(kv),
                ..Default::default()
            },
        )
        .unwrap();
        for (x, y) in virt.logits.iter().zip(&fold.logits) {
            assert!(
                max_rel_diff(x, y) <= 1e-9,
                "rel diff {}",
                max_rel_diff(x, y)
            );
        }
    }

    #[test]
    fn taps_before_quantization() {
        // Taps with aggressive quantization equal taps without, at the first
        // site (before any quantized layer output feeds back).
        let cfg = ModelConfig::default();
        let model = fuse_rmsnorm(toy());
        let rots = RotationSet::identity(&cfg);
        let seqs = random_tokens(1, 8, 256, 12);
        let sites = [TapSite::AttnIn];
        let spec = QuantizerSpec::new(4, QuantMode::Zeropoint, Granularity::PerToken, 1.0);
        let fp = forward(
            &model,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Virtual(&rots),
                tap_sites: &sites,
                ..Default::default()
            },
        )
        .unwrap();
        let quant = forward(
            &model,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Virtual(&rots),
                act_quant: Some(spec),
                tap_sites: &sites,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fp.taps[0].data, quant.taps[0].data);
    }

    #[test]
    fn nll_finite_and_decode_runs() {
        let model = fuse_rmsnorm(toy());
        let seqs = random_tokens(2, 12, 256, 13);
        let nll = mean_nll(&model, &seqs, &ForwardOptions::default()).unwrap();
        assert!(nll.is_finite() && nll > 0.0);
        let out = greedy_decode(&model, &[1, 2, 3], 4, &ForwardOptions::default()).unwrap();
        assert_eq!(out.len(), 7);
        assert!(out.iter().all(|&t| (t as usize) < model.cfg.vocab));
    }

    #[test]
    fn oproj_taps_have_head_block_structure() {
        // With a block rotation applied virtually and no quantization, the
        // o-proj tap is the raw attention mix; rotating it per head slice
        // with the blocks must equal rotating with the dense operator.
        let cfg = ModelConfig::default();
        let model = fuse_rmsnorm(toy());
        let rots = random_rotations(&cfg, 320);
        let seqs = random_tokens(1, 8, 256, 14);
        let sites = [TapSite::OprojIn];
        let out = forward(
            &model,
            &seqs,
            &ForwardOptions {
                rotations: RotationMode::Virtual(&rots),
                tap_sites: &sites,
                ..Default::default()
            },
        )
        .unwrap();
        let tap = &out.taps[0];
        let via_block = rots.value_heads[0].rotate_rows(&tap.data).unwrap();
        let dense = rots.value_heads[0].to_dense();
        let via_dense = tap.data.matmul_bt(&dense).unwrap();
        assert!(max_rel_diff(&via_block, &via_dense) <= 1e-12);
    }
}
