//! Subcommand implementations. Every command is a pure function of the
//! resolved config, input files and seeds: re-running writes byte-identical
//! outputs, and the emitted manifest reproduces the run.

use std::path::{Path, PathBuf};

use serde::Serialize;

use rotcalib::calib::{
    calibrate_offline, calibrate_online, hadamard_baseline, CalibMode, CalibTrace,
};
use rotcalib::corner::pr_cdf;
use rotcalib::io;
use rotcalib::model::{
    fold_rotations, forward, fuse_rmsnorm, init_model, ForwardOptions, RotationMode, RotationSet,
    TapSite, ToyTransformer,
};
use rotcalib::quant::{Granularity, QuantMode, QuantizerSpec};
use rotcalib::report::{evaluate_model, export_csv, export_summary_json, EvalSpecs};
use rotcalib::synth::{apply_recipe, gen_tokens, make_recipe, OutlierRecipe};
use rotcalib::tensor::Matrix;
use rotcalib::{Error, Result};

use crate::config::{DataSource, RotationInitKind, RunConfig};

const RECIPE_FILE: &str = "recipe.json";
const TOKENS_FILE: &str = "tokens.bin";

/// Calibration mode as selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Fp,
    QuantAware,
    Offline,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    tool_version: &'static str,
    command: &'a str,
    mode: Option<&'a str>,
    config: &'a RunConfig,
}

fn write_manifest(dir: &Path, command: &str, mode: Option<&str>, cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest {
        schema_version: 1,
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        mode,
        config: cfg,
    };
    let mut body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    body.push('\n');
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{command}_manifest.json")), body)?;
    Ok(())
}

/// Builds the (possibly outlier-perturbed) RMSNorm-fused model for this run.
fn build_model(cfg: &RunConfig) -> Result<ToyTransformer> {
    let mut model = init_model(&cfg.model)?;
    if let Some(recipe) = load_recipe(cfg)? {
        model = apply_recipe(model, &recipe)?;
    }
    Ok(fuse_rmsnorm(model))
}

fn load_recipe(cfg: &RunConfig) -> Result<Option<OutlierRecipe>> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let spec = cfg.data.synthetic.as_ref().expect("validated");
            Ok(Some(make_recipe(spec, cfg.model.d_model)?))
        }
        DataSource::File => {
            // A recipe stored next to the token file travels with the data.
            let path = cfg.data.path.as_ref().expect("validated");
            let recipe_path = path.with_file_name(RECIPE_FILE);
            if recipe_path.exists() {
                let text = std::fs::read_to_string(&recipe_path)?;
                let recipe: OutlierRecipe = serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", recipe_path.display())))?;
                Ok(Some(recipe))
            } else {
                Ok(None)
            }
        }
    }
}

/// Calibration corpus: synthetic token noise, or a raw byte file packed into
/// fixed-length sequences with tail truncation.
fn load_calibration_data(cfg: &RunConfig) -> Result<Vec<Vec<u32>>> {
    let t = cfg.calib.seq_len;
    let n = cfg.calib.n_sequences;
    match cfg.data.source {
        DataSource::Synthetic => {
            let spec = cfg.data.synthetic.as_ref().expect("validated");
            Ok(gen_tokens(n, t, cfg.model.vocab, spec.seed))
        }
        DataSource::File => {
            let path = cfg.data.path.as_ref().expect("validated");
            let bytes = std::fs::read(path)?;
            let mut seqs: Vec<Vec<u32>> = bytes
                .chunks_exact(t)
                .take(n)
                .map(|chunk| chunk.iter().map(|&b| u32::from(b)).collect())
                .collect();
            if seqs.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "{} holds no full sequence of length {t}",
                    path.display()
                )));
            }
            for seq in &mut seqs {
                for tok in seq.iter_mut() {
                    if *tok as usize >= cfg.model.vocab {
                        *tok %= cfg.model.vocab as u32;
                    }
                }
            }
            Ok(seqs)
        }
    }
}

fn initial_rotations(cfg: &RunConfig) -> Result<RotationSet> {
    let mut rots = match cfg.rotation_init.kind {
        RotationInitKind::Identity => RotationSet::identity(&cfg.model),
        RotationInitKind::Hadamard => hadamard_baseline(&cfg.model, cfg.rotation_init.seed)?,
        RotationInitKind::File => {
            let path = cfg.rotation_init.path.as_ref().expect("validated");
            let rots = io::read_rotations(path)?;
            rots.validate_for(&cfg.model)?;
            rots
        }
    };
    if let Some(flag) = cfg.rotation_init.qk_hadamard {
        rots.qk_hadamard = flag;
    }
    if let Some(flag) = cfg.rotation_init.mlp_hadamard {
        rots.mlp_hadamard = flag;
    }
    Ok(rots)
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.output.dir.clone())
}

// ── gen-data ────────────────────────────────────────────────────────────────

pub fn cmd_gen_data(mut cfg: RunConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let spec = match (&mut cfg.data.synthetic, seed) {
        (Some(spec), Some(seed)) => {
            spec.seed = seed;
            *spec
        }
        (Some(spec), None) => *spec,
        (None, _) => {
            return Err(Error::InvalidInput(
                "gen-data needs a [data.synthetic] table".into(),
            ))
        }
    };
    spec.validate(cfg.model.d_model)?;
    let dir = out_dir(&cfg, out);
    std::fs::create_dir_all(&dir)?;

    let tokens = gen_tokens(
        cfg.calib.n_sequences,
        cfg.calib.seq_len,
        cfg.model.vocab,
        spec.seed,
    );
    let bytes: Vec<u8> = tokens.iter().flatten().map(|&t| t as u8).collect();
    std::fs::write(dir.join(TOKENS_FILE), &bytes)?;

    let recipe = make_recipe(&spec, cfg.model.d_model)?;
    let mut body = serde_json::to_string_pretty(&recipe)
        .map_err(|e| Error::Format(format!("recipe serialization: {e}")))?;
    body.push('\n');
    std::fs::write(dir.join(RECIPE_FILE), body)?;

    write_manifest(&dir, "gen-data", None, &cfg)?;
    println!(
        "wrote {} sequences x {} tokens and outlier recipe ({} channels, gain {}) to {}",
        cfg.calib.n_sequences,
        cfg.calib.seq_len,
        recipe.channels.len(),
        recipe.gain,
        dir.display()
    );
    Ok(())
}

// ── calibrate ───────────────────────────────────────────────────────────────

pub fn cmd_calibrate(
    mut cfg: RunConfig,
    mode: Option<ModeArg>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    if let Some(seed) = seed {
        cfg.calib.seed = seed;
    }
    let offline = match mode {
        Some(ModeArg::Fp) => {
            cfg.calib.mode = CalibMode::Fp;
            false
        }
        Some(ModeArg::QuantAware) => {
            cfg.calib.mode = CalibMode::QuantAware;
            false
        }
        Some(ModeArg::Offline) => true,
        None => false,
    };
    let dir = out_dir(&cfg, out);
    std::fs::create_dir_all(&dir)?;

    let model = build_model(&cfg)?;
    let data = load_calibration_data(&cfg)?;
    let init = initial_rotations(&cfg)?;

    let (rots, trace): (RotationSet, CalibTrace) = if offline {
        let store = dir.join("activations");
        calibrate_offline(&model, &data, &cfg.calib, &init, &store)?
    } else {
        calibrate_online(&model, &data, &cfg.calib, &init)?
    };

    io::write_rotations(&dir.join("rotations.crrs"), &rots)?;
    rotcalib::report::export_trace_csv(&trace, &dir.join("trace.csv"))?;
    // Rotations stay separate from the weights during calibration and are
    // folded once here, at export.
    let folded = fold_rotations(model, &rots)?;
    io::write_model(&dir.join("model_folded.crtm"), &folded)?;
    let mode_name = if offline {
        "offline"
    } else {
        match cfg.calib.mode {
            CalibMode::Fp => "fp",
            CalibMode::QuantAware => "quant-aware",
        }
    };
    write_manifest(&dir, "calibrate", Some(mode_name), &cfg)?;
    println!(
        "calibrated over {} updates ({mode_name}); rotations at {}",
        trace.records.len(),
        dir.join("rotations.crrs").display()
    );
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────────

pub fn cmd_evaluate(cfg: RunConfig, rotations: &Path, out: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(&cfg, out);
    std::fs::create_dir_all(&dir)?;
    let model = build_model(&cfg)?;
    let rots = io::read_rotations(rotations)?;
    rots.validate_for(&cfg.model)?;
    let data = gen_tokens(
        cfg.eval.n_sequences,
        cfg.eval.seq_len,
        cfg.model.vocab,
        cfg.eval.seed,
    );

    for &[w, a, kv] in &cfg.eval.triplets {
        let specs = EvalSpecs {
            weight_bits: w,
            act: (a < 16).then(|| {
                QuantizerSpec::new(
                    a,
                    QuantMode::Zeropoint,
                    Granularity::PerToken,
                    cfg.eval.act_clip,
                )
            }),
            kv: (kv < 16).then(|| {
                QuantizerSpec::new(
                    kv,
                    QuantMode::Zeropoint,
                    Granularity::Grouped {
                        group_size: cfg.eval.kv_group.unwrap_or(cfg.model.d_head()),
                    },
                    cfg.eval.kv_clip,
                )
            }),
        };
        let (report, summary) = evaluate_model(&model, &rots, &data, &specs)?;
        let stem = format!("eval_w{w}a{a}kv{kv}");
        export_csv(&report, &dir.join(format!("{stem}.csv")))?;
        export_summary_json(&summary, &dir.join(format!("{stem}.json")))?;
        println!(
            "{w}-{a}-{kv}: mean rel_err {:.6e}, nll {:.6} (fp {:.6})",
            summary.mean_rel_err, summary.nll_quant, summary.nll_fp
        );
    }
    write_manifest(&dir, "evaluate", None, &cfg)?;
    Ok(())
}

// ── analyze-pr ──────────────────────────────────────────────────────────────

pub fn cmd_analyze_pr(
    cfg: RunConfig,
    rotations: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<()> {
    let dir = out_dir(&cfg, out);
    std::fs::create_dir_all(&dir)?;
    let model = build_model(&cfg)?;
    let data = load_calibration_data(&cfg)?;

    // Raw residual-site taps once; each variant only re-rotates them.
    let sites = [TapSite::AttnIn, TapSite::MlpIn];
    let identity = RotationSet::identity(&cfg.model);
    let result = forward(
        &model,
        &data,
        &ForwardOptions {
            rotations: RotationMode::Virtual(&identity),
            act_quant: None,
            kv_quant: None,
            tap_sites: &sites,
        },
    )?;
    let raw = {
        let total_rows: usize = result.taps.iter().map(|t| t.data.rows()).sum();
        let d = cfg.model.d_model;
        let mut data = Vec::with_capacity(total_rows * d);
        for tap in &result.taps {
            data.extend_from_slice(tap.data.data());
        }
        Matrix::from_vec(total_rows, d, data)?
    };

    let mut variants: Vec<(&str, RotationSet)> = vec![
        ("identity", identity),
        (
            "hadamard",
            hadamard_baseline(&cfg.model, cfg.rotation_init.seed)?,
        ),
    ];
    if let Some(path) = rotations {
        let rots = io::read_rotations(path)?;
        rots.validate_for(&cfg.model)?;
        variants.push(("calibrated", rots));
    }

    for (name, rots) in &variants {
        let rotated = rots.residual.rotate_rows(&raw)?;
        let cdf = pr_cdf(&rotated, cfg.eval.pr_grid)?;
        rotcalib::report::export_pr_cdf_csv(&cdf, &dir.join(format!("pr_cdf_{name}.csv")))?;
        let median = median_pr(&cdf);
        println!("{name}: median normalized PR ~ {median:.4}");
    }
    write_manifest(&dir, "analyze-pr", None, &cfg)?;
    Ok(())
}

/// First threshold where the CDF crosses one half.
fn median_pr(cdf: &[(f64, f64)]) -> f64 {
    cdf.iter()
        .find(|(_, f)| *f >= 0.5)
        .map(|(t, _)| *t)
        .unwrap_or(1.0)
}

// ── info ────────────────────────────────────────────────────────────────────

pub fn cmd_info(path: Option<&Path>, config: Option<&Path>) -> Result<()> {
    if path.is_none() && config.is_none() {
        return Err(Error::InvalidInput(
            "info needs a container path or --config".into(),
        ));
    }
    if let Some(path) = path {
        match io::inspect(path)? {
            io::ContainerInfo::Model {
                version,
                cfg,
                rope_base,
                rms_fused,
            } => {
                println!("model checkpoint (CRTM v{version})");
                println!(
                    "  d_model {} | heads {} x {} | layers {} | ffn {} | vocab {} | seed {}",
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.d_head(),
                    cfg.n_layers,
                    cfg.d_ffn,
                    cfg.vocab,
                    cfg.seed
                );
                println!("  rope base {rope_base} | rmsnorm fused: {rms_fused}");
            }
            io::ContainerInfo::Rotations {
                version,
                d_model,
                n_layers,
                n_heads,
                d_head,
                qk_hadamard,
                mlp_hadamard,
            } => {
                println!("rotation set (CRRS v{version})");
                println!("  shared rotation {d_model}x{d_model}");
                println!("  {n_layers} layers x {n_heads} head blocks of {d_head}x{d_head}");
                println!("  online hadamards: qk {qk_hadamard}, mlp {mlp_hadamard}");
            }
            io::ContainerInfo::Activations {
                version,
                site,
                layer,
                dim,
                rows,
            } => {
                println!("activation dump (CRAD v{version})");
                println!("  site {} layer {layer}: {rows} rows x {dim}", site.name());
            }
        }
    }
    if let Some(config) = config {
        let cfg = RunConfig::load(config)?;
        let text =
            toml::to_string_pretty(&cfg).map_err(|e| Error::Format(format!("config echo: {e}")))?;
        println!("resolved config from {}:\n{text}", config.display());
    }
    Ok(())
}
