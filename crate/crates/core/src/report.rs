//! Quantization-error reports: per-site relative error, toy NLL summaries,
//! and deterministic CSV/JSON export.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    fold_rotations, forward, mean_nll, quantize_weights, ForwardOptions, RotationMode, RotationSet,
    SiteRotation, TapSite, ToyTransformer,
};
use crate::quant::{quantize_tensor, QuantizerSpec};
use crate::tensor::Matrix;

/// Per-(site, layer) relative squared quantization error.
#[derive(Debug, Clone, Serialize)]
pub struct SiteLayerError {
    pub site: TapSite,
    pub layer: usize,
    pub rel_err: f64,
    pub n_rows: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LayerErrorReport {
    pub entries: Vec<SiteLayerError>,
}

impl LayerErrorReport {
    pub fn mean_rel_err(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.rel_err).sum::<f64>() / self.entries.len() as f64
    }
}

/// Quantizer specs for one evaluation triplet. Sixteen weight bits means
/// the weights stay untouched; a missing activation or KV spec keeps that
/// tensor class in full precision and skips its report entries.
#[derive(Debug, Clone, Copy)]
pub struct EvalSpecs {
    pub weight_bits: u32,
    pub act: Option<QuantizerSpec>,
    pub kv: Option<QuantizerSpec>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub mean_rel_err: f64,
    /// Toy-model NLL under the requested quantization; a toy-scale stand-in
    /// for perplexity, not comparable to any full-scale benchmark.
    pub nll_quant: f64,
    pub nll_fp: f64,
    pub n_entries: usize,
}

/// Relative squared quantization error `|X R^T - Q(X R^T)|_F^2 / |X|_F^2`.
pub fn relative_quant_error(
    x: &Matrix,
    rotation: SiteRotation<'_>,
    spec: &QuantizerSpec,
) -> Result<f64> {
    let denom = x.frobenius_norm();
    if denom == 0.0 || x.rows() == 0 {
        return Err(Error::InvalidInput(
            "relative error of a zero matrix".into(),
        ));
    }
    let rotated = rotation.rotate(x)?;
    let quantized = quantize_tensor(&rotated, spec)?;
    let mut err = 0.0;
    for (a, b) in rotated.data().iter().zip(quantized.data()) {
        err += (a - b) * (a - b);
    }
    Ok(err / (denom * denom))
}

/// Runs tapped forwards and scores every calibration-relevant site of every
/// layer under the given specs. NLL is evaluated on the same sequences with
/// the full quantization stack applied (weights, activations, cache).
pub fn evaluate_model(
    model: &ToyTransformer,
    rots: &RotationSet,
    data: &[Vec<u32>],
    specs: &EvalSpecs,
) -> Result<(LayerErrorReport, EvalSummary)> {
    rots.validate_for(&model.cfg)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation data".into()));
    }
    let sites = [
        TapSite::AttnIn,
        TapSite::MlpIn,
        TapSite::OprojIn,
        TapSite::DownprojIn,
        TapSite::KCache,
        TapSite::VCache,
    ];
    let fp_taps = forward(
        model,
        data,
        &ForwardOptions {
            rotations: RotationMode::Virtual(rots),
            act_quant: None,
            kv_quant: None,
            tap_sites: &sites,
        },
    )?;

    let dh = model.cfg.d_head();
    let mut report = LayerErrorReport::default();
    for site in sites {
        for tap in fp_taps.taps.iter().filter(|t| t.site == site) {
            let spec = match site {
                TapSite::KCache | TapSite::VCache => match &specs.kv {
                    Some(s) => s,
                    None => continue,
                },
                _ => match &specs.act {
                    Some(s) => s,
                    None => continue,
                },
            };
            let rotation = match site {
                TapSite::AttnIn | TapSite::MlpIn => SiteRotation::Dense(&rots.residual),
                TapSite::OprojIn | TapSite::VCache => {
                    SiteRotation::Block(&rots.value_heads[tap.layer])
                }
                TapSite::DownprojIn => {
                    if rots.mlp_hadamard {
                        SiteRotation::Hadamard {
                            block: model.cfg.d_ffn,
                        }
                    } else {
                        SiteRotation::Identity
                    }
                }
                TapSite::KCache => {
                    if rots.qk_hadamard {
                        SiteRotation::Hadamard { block: dh }
                    } else {
                        SiteRotation::Identity
                    }
                }
            };
            report.entries.push(SiteLayerError {
                site,
                layer: tap.layer,
                rel_err: relative_quant_error(&tap.data, rotation, spec)?,
                n_rows: tap.data.rows(),
            });
        }
    }

    // NLL reflects the deployed configuration: rotations folded into the
    // weights first, then round-to-nearest on the folded weights, with the
    // online Hadamards and activation/cache quantizers live in the forward.
    let folded = fold_rotations(model.clone(), rots)?;
    let quant_model = if specs.weight_bits < 16 {
        quantize_weights(folded, specs.weight_bits)?
    } else {
        folded
    };
    let nll_quant = mean_nll(
        &quant_model,
        data,
        &ForwardOptions {
            rotations: RotationMode::Folded {
                qk_hadamard: rots.qk_hadamard,
                mlp_hadamard: rots.mlp_hadamard,
            },
            act_quant: specs.act,
            kv_quant: specs.kv,
            tap_sites: &[],
        },
    )?;
    let nll_fp = mean_nll(model, data, &ForwardOptions::default())?;

    let summary = EvalSummary {
        schema_version: 1,
        mean_rel_err: report.mean_rel_err(),
        nll_quant,
        nll_fp,
        n_entries: report.entries.len(),
    };
    Ok((report, summary))
}

/// Prints a real with 17 significant digits, enough for exact f64 roundtrip.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the report as CSV: `site,layer,rel_err,n_rows`, UTF-8, LF line
/// endings, deterministic order.
pub fn export_csv(report: &LayerErrorReport, path: &Path) -> Result<()> {
    let mut out = String::from("site,layer,rel_err,n_rows\n");
    for e in &report.entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.site.name(),
            e.layer,
            fmt_f64(e.rel_err),
            e.n_rows
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Writes the machine-readable summary (versioned schema).
pub fn export_summary_json(summary: &EvalSummary, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Format(format!("summary serialization: {e}")))?;
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

/// Writes a participation-ratio CDF as `threshold,fraction` rows.
pub fn export_pr_cdf_csv(cdf: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in cdf {
        out.push_str(&format!("{},{}\n", fmt_f64(*t), fmt_f64(*f)));
    }
    write_atomic(path, out.as_bytes())
}

/// Writes a calibration trace as CSV with one row per batch.
pub fn export_trace_csv(trace: &crate::calib::CalibTrace, path: &Path) -> Result<()> {
    let n_layers = trace.records.first().map_or(0, |r| r.r2_objectives.len());
    let mut header = String::from("batch,r1_objective");
    for l in 0..n_layers {
        header.push_str(&format!(",r2_objective_l{l}"));
    }
    header.push_str(",mean_pr,peak_tap_rows\n");
    let mut out = header;
    for rec in &trace.records {
        out.push_str(&format!("{},{}", rec.batch, fmt_f64(rec.r1_objective)));
        for v in &rec.r2_objectives {
            out.push_str(&format!(",{}", fmt_f64(*v)));
        }
        out.push_str(&format!(
            ",{},{}\n",
            fmt_f64(rec.mean_pr),
            rec.peak_tap_rows
        ));
    }
    write_atomic(path, out.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(bytes)?;
    Ok(())
}
