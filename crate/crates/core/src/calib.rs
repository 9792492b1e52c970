//! Online and offline mini-batch calibration of the rotation set.
//!
//! Online: every mini-batch runs a forward with the current rotations
//! (quantization-aware when requested), per-layer value-path rotations
//! update immediately from the o-proj taps, and the shared residual rotation
//! updates once per batch from the attention and MLP input taps of all
//! layers. Accumulators reset per batch; no activation outlives the batch
//! that produced it.
//!
//! Offline: pass one dumps the same site activations to disk under the
//! initial rotations, pass two replays the online schedule against rows
//! sampled from the store, with the same number of updates and the same
//! per-update sample counts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corner::participation_ratios;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{
    forward, ForwardOptions, ModelConfig, RotationMode, RotationSet, TapSite, ToyTransformer,
};
use crate::procrustes::{opu, opu_blockdiag, ProcrustesAccumulator};
use crate::quant::QuantizerSpec;
use crate::tensor::{random_hadamard, GaussianSource, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMode {
    /// Full-precision calibration forwards.
    Fp,
    /// Quantize every linear input (and the KV cache when a spec is set)
    /// during calibration forwards, matching inference conditions.
    QuantAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibConfig {
    pub batch_size: usize,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub mode: CalibMode,
    pub act_spec: QuantizerSpec,
    pub kv_spec: Option<QuantizerSpec>,
    pub seed: u64,
    /// Passes over the calibration set.
    #[serde(default = "default_passes")]
    pub passes: usize,
    /// Optional cap on processed batches (across passes); zero leaves the
    /// initial rotations untouched.
    #[serde(default)]
    pub max_batches: Option<usize>,
}

fn default_passes() -> usize {
    1
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            n_sequences: 64,
            seq_len: 128,
            mode: CalibMode::Fp,
            act_spec: QuantizerSpec::zeropoint(4)
                .with_granularity(crate::quant::Granularity::PerToken)
                .with_clip(0.9),
            kv_spec: None,
            seed: 0,
            passes: 1,
            max_batches: None,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.passes == 0 {
            return Err(Error::InvalidInput(
                "batch_size, seq_len, passes must be >= 1".into(),
            ));
        }
        if self.n_sequences < self.batch_size {
            return Err(Error::InvalidInput(format!(
                "n_sequences {} must be >= batch_size {}",
                self.n_sequences, self.batch_size
            )));
        }
        self.act_spec.validate()?;
        if let Some(spec) = &self.kv_spec {
            spec.validate()?;
        }
        Ok(())
    }
}

/// One record per processed batch (or per replayed update in the offline
/// variant).
#[derive(Debug, Clone, Serialize)]
pub struct BatchRecord {
    pub batch: usize,
    /// Corner objective of the residual rotation on this batch's residual
    /// sites, before its update.
    pub r1_objective: f64,
    /// Per-layer corner objectives at the o-proj sites, before their updates.
    pub r2_objectives: Vec<f64>,
    /// Mean normalized participation ratio of the rotated residual-site rows.
    pub mean_pr: f64,
    /// Rows simultaneously materialized for the residual accumulator path.
    pub peak_tap_rows: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CalibTrace {
    pub records: Vec<BatchRecord>,
}

const CALIB_SITES: [TapSite; 3] = [TapSite::AttnIn, TapSite::MlpIn, TapSite::OprojIn];

/// Streaming mini-batch calibration. Deterministic given the model, the data
/// order, the config, and the initial rotations.
pub fn calibrate_online(
    model: &ToyTransformer,
    data: &[Vec<u32>],
    cfg: &CalibConfig,
    init: &RotationSet,
) -> Result<(RotationSet, CalibTrace)> {
    cfg.validate()?;
    init.validate_for(&model.cfg)?;
    if !model.rms_fused {
        return Err(Error::Precondition(
            "calibration needs a RMSNorm-fused model".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("empty calibration data".into()));
    }

    let mut rots = init.clone();
    let mut trace = CalibTrace::default();
    let d = model.cfg.d_model;
    let mut r1_acc = ProcrustesAccumulator::new(d);
    let mut batch_index = 0usize;

    let cap = cfg.max_batches.unwrap_or(usize::MAX);
    'passes: for _pass in 0..cfg.passes {
        for batch in data.chunks(cfg.batch_size) {
            if batch_index >= cap {
                break 'passes;
            }
            let result = forward(model, batch, &forward_options(cfg, &rots))?;
            let record = apply_batch_updates(
                &model.cfg,
                &mut rots,
                &mut r1_acc,
                &result.taps,
                batch_index,
            )?;
            trace.records.push(record);
            batch_index += 1;
        }
    }
    Ok((rots, trace))
}

fn forward_options<'a>(cfg: &'a CalibConfig, rots: &'a RotationSet) -> ForwardOptions<'a> {
    let (act, kv) = match cfg.mode {
        CalibMode::Fp => (None, None),
        CalibMode::QuantAware => (Some(cfg.act_spec), cfg.kv_spec),
    };
    ForwardOptions {
        rotations: RotationMode::Virtual(rots),
        act_quant: act,
        kv_quant: kv,
        tap_sites: &CALIB_SITES,
    }
}

/// Runs the per-batch update schedule on a set of taps: value-path rotations
/// first (per layer, from their own site), then the shared rotation from the
/// residual sites of all layers. Returns the trace record.
fn apply_batch_updates(
    cfg: &ModelConfig,
    rots: &mut RotationSet,
    r1_acc: &mut ProcrustesAccumulator,
    taps: &[crate::model::TapRecord],
    batch_index: usize,
) -> Result<BatchRecord> {
    let n_heads = cfg.n_heads;
    let dh = cfg.d_head();

    // Per-layer value-path updates, in layer order.
    let mut r2_objectives = vec![0.0; cfg.n_layers];
    for tap in taps.iter().filter(|t| t.site == TapSite::OprojIn) {
        let mut head_accs: Vec<ProcrustesAccumulator> = (0..n_heads)
            .map(|_| ProcrustesAccumulator::new(dh))
            .collect();
        let current = &rots.value_heads[tap.layer];
        for (h, acc) in head_accs.iter_mut().enumerate() {
            acc.accumulate(current.block(h), &head_slice(&tap.data, h, dh))?;
        }
        r2_objectives[tap.layer] = head_accs
            .iter()
            .enumerate()
            .map(|(h, acc)| acc.frozen_objective(current.block(h)))
            .sum();
        rots.value_heads[tap.layer] = opu_blockdiag(&head_accs)?;
    }

    // Shared residual update from attention and MLP inputs of all layers.
    r1_acc.reset();
    let mut peak_tap_rows = 0usize;
    let mut pr_sum = 0.0;
    let mut pr_count = 0usize;
    for tap in taps
        .iter()
        .filter(|t| t.site == TapSite::AttnIn || t.site == TapSite::MlpIn)
    {
        peak_tap_rows += tap.data.rows();
        r1_acc.accumulate(&rots.residual, &tap.data)?;
        let rotated = rots.residual.rotate_rows(&tap.data)?;
        for pr in participation_ratios(&rotated)? {
            pr_sum += pr;
            pr_count += 1;
        }
    }
    let r1_objective = r1_acc.frozen_objective(&rots.residual);
    rots.residual = opu(r1_acc)?;
    r1_acc.reset();

    Ok(BatchRecord {
        batch: batch_index,
        r1_objective,
        r2_objectives,
        mean_pr: if pr_count == 0 {
            0.0
        } else {
            pr_sum / pr_count as f64
        },
        peak_tap_rows,
    })
}

fn head_slice(x: &Matrix, head: usize, dh: usize) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), dh);
    for i in 0..x.rows() {
        out.row_mut(i)
            .copy_from_slice(&x.row(i)[head * dh..(head + 1) * dh]);
    }
    out
}

/// Offline variant for the stored-activation comparison: dump everything
/// under the initial rotations, then replay the online update schedule
/// against sampled rows. With a single batch of data this reduces exactly to
/// one online step.
pub fn calibrate_offline(
    model: &ToyTransformer,
    data: &[Vec<u32>],
    cfg: &CalibConfig,
    init: &RotationSet,
    store_dir: &Path,
) -> Result<(RotationSet, CalibTrace)> {
    cfg.validate()?;
    init.validate_for(&model.cfg)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty calibration data".into()));
    }
    std::fs::create_dir_all(store_dir)?;

    // Pass 1: dump all site activations in full precision under `init`.
    let n_layers = model.cfg.n_layers;
    let mut dumps: Vec<Vec<Matrix>> = vec![Vec::new(); 3 * n_layers];
    let mut batch_rows: Vec<usize> = Vec::new();
    let dump_opts = ForwardOptions {
        rotations: RotationMode::Virtual(init),
        act_quant: None,
        kv_quant: None,
        tap_sites: &CALIB_SITES,
    };
    for batch in data.chunks(cfg.batch_size) {
        let result = forward(model, batch, &dump_opts)?;
        let mut rows = 0;
        for tap in result.taps {
            if tap.site == TapSite::AttnIn {
                rows = tap.data.rows();
            }
            dumps[dump_index(tap.site, tap.layer, n_layers)].push(tap.data);
        }
        batch_rows.push(rows);
    }
    for (idx, parts) in dumps.into_iter().enumerate() {
        let store = concat_rows(&parts)?;
        let (site, layer) = dump_site(idx, n_layers);
        io::write_activations(
            &store_dir.join(activation_file_name(site, layer)),
            site,
            layer,
            &store,
        )?;
    }

    // Reload from disk; the files are the interface, not a side channel.
    let mut loaded: Vec<Matrix> = Vec::with_capacity(3 * n_layers);
    for idx in 0..3 * n_layers {
        let (site, layer) = dump_site(idx, n_layers);
        let (s, l, m) = io::read_activations(&store_dir.join(activation_file_name(site, layer)))?;
        if s != site || l != layer {
            return Err(Error::Format("activation store header mismatch".into()));
        }
        loaded.push(m);
    }

    // Pass 2: same number of updates, same per-update sample counts. The
    // residual store interleaves (batch, layer, attn-then-mlp) so that a
    // whole-store draw reproduces the online accumulation order.
    let r1_store = build_residual_store(&loaded, &batch_rows, n_layers)?;
    let r1_rows_per_update: Vec<usize> = batch_rows.iter().map(|r| r * 2 * n_layers).collect();

    let mut rots = init.clone();
    let mut trace = CalibTrace::default();
    let d = model.cfg.d_model;
    let mut r1_acc = ProcrustesAccumulator::new(d);
    let mut update_index = 0usize;

    let cap = cfg.max_batches.unwrap_or(usize::MAX);
    'passes: for _pass in 0..cfg.passes {
        for (step, &rows_this_update) in batch_rows.iter().enumerate() {
            if update_index >= cap {
                break 'passes;
            }
            let mut taps: Vec<crate::model::TapRecord> = Vec::new();
            for layer in 0..n_layers {
                let store = &loaded[dump_index(TapSite::OprojIn, layer, n_layers)];
                let sampled = sample_rows(
                    store,
                    rows_this_update,
                    cfg.seed ^ mix(update_index as u64, 1 + layer as u64),
                )?;
                taps.push(crate::model::TapRecord {
                    site: TapSite::OprojIn,
                    layer,
                    data: sampled,
                });
            }
            let r1_sampled = sample_rows(
                &r1_store,
                r1_rows_per_update[step],
                cfg.seed ^ mix(update_index as u64, 0),
            )?;
            taps.push(crate::model::TapRecord {
                site: TapSite::AttnIn,
                layer: 0,
                data: r1_sampled,
            });

            let record =
                apply_batch_updates(&model.cfg, &mut rots, &mut r1_acc, &taps, update_index)?;
            trace.records.push(record);
            update_index += 1;
        }
    }
    Ok((rots, trace))
}

/// Seeded Hadamard initialization: the residual rotation and every per-head
/// block get distinct seeds derived from the master seed, and both online
/// Hadamard flags are on.
pub fn hadamard_baseline(cfg: &ModelConfig, seed: u64) -> Result<RotationSet> {
    cfg.validate()?;
    if !cfg.d_ffn.is_power_of_two() {
        return Err(Error::InvalidInput(
            "hadamard baseline needs power-of-two d_ffn".into(),
        ));
    }
    let residual = random_hadamard(cfg.d_model, seed)?;
    let mut value_heads = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let blocks: Result<Vec<_>> = (0..cfg.n_heads)
            .map(|h| random_hadamard(cfg.d_head(), seed + 1 + (l * cfg.n_heads + h) as u64))
            .collect();
        value_heads.push(crate::procrustes::BlockDiagonalRotation::new(blocks?)?);
    }
    Ok(RotationSet {
        residual,
        value_heads,
        qk_hadamard: true,
        mlp_hadamard: true,
    })
}

fn dump_index(site: TapSite, layer: usize, n_layers: usize) -> usize {
    let s = match site {
        TapSite::AttnIn => 0,
        TapSite::MlpIn => 1,
        TapSite::OprojIn => 2,
        _ => unreachable!("only calibration sites are dumped"),
    };
    s * n_layers + layer
}

fn dump_site(idx: usize, n_layers: usize) -> (TapSite, usize) {
    let site = match idx / n_layers {
        0 => TapSite::AttnIn,
        1 => TapSite::MlpIn,
        _ => TapSite::OprojIn,
    };
    (site, idx % n_layers)
}

fn activation_file_name(site: TapSite, layer: usize) -> String {
    format!("{}_l{layer}.crad", site.name())
}

fn concat_rows(parts: &[Matrix]) -> Result<Matrix> {
    let cols = parts.first().map_or(0, Matrix::cols);
    let rows: usize = parts.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Matrix::from_vec(rows, cols, data)
}

/// Rebuilds the online accumulation order: per batch, per layer, attention
/// rows then MLP rows.
fn build_residual_store(
    loaded: &[Matrix],
    batch_rows: &[usize],
    n_layers: usize,
) -> Result<Matrix> {
    let d = loaded[0].cols();
    let mut data = Vec::new();
    let mut offsets = vec![0usize; 2 * n_layers];
    for &rows in batch_rows {
        for layer in 0..n_layers {
            for (slot, site) in [TapSite::AttnIn, TapSite::MlpIn].into_iter().enumerate() {
                let store = &loaded[dump_index(site, layer, n_layers)];
                let off = &mut offsets[slot * n_layers + layer];
                data.extend_from_slice(&store.data()[*off * d..(*off + rows) * d]);
                *off += rows;
            }
        }
    }
    let rows = data.len() / d;
    Matrix::from_vec(rows, d, data)
}

/// Draws `count` rows: the whole store in order when `count` covers it,
/// otherwise a seeded without-replacement sample in ascending row order.
fn sample_rows(store: &Matrix, count: usize, seed: u64) -> Result<Matrix> {
    let n = store.rows();
    if n == 0 {
        return Err(Error::InvalidInput("empty activation store".into()));
    }
    if count >= n {
        return Ok(store.clone());
    }
    let mut g = GaussianSource::new(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = (g.next_u64() % pool.len() as u64) as usize;
        picked.push(pool.swap_remove(idx));
    }
    picked.sort_unstable();
    let d = store.cols();
    let mut data = Vec::with_capacity(count * d);
    for i in picked {
        data.extend_from_slice(store.row(i));
    }
    Matrix::from_vec(count, d, data)
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix-style avalanche over the pair, for independent stream seeds.
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(b);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
