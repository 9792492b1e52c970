//! Versioned little-endian binary containers.
//!
//! Three formats share one framing (4-byte magic, u32 version, header,
//! f64 payload):
//! - `CRTM`: toy transformer checkpoint (config block + weight blobs in
//!   declared order).
//! - `CRRS`: rotation set (shared rotation, per-layer per-head blocks,
//!   online Hadamard flags).
//! - `CRAD`: activation dump for one (site, layer).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, RotationSet, TapSite, ToyTransformer};
use crate::procrustes::BlockDiagonalRotation;
use crate::tensor::{Matrix, OrthogonalMatrix};

const MODEL_MAGIC: &[u8; 4] = b"CRTM";
const ROTATION_MAGIC: &[u8; 4] = b"CRRS";
const ACTIVATION_MAGIC: &[u8; 4] = b"CRAD";
const FORMAT_VERSION: u32 = 1;

// ── Model checkpoints ───────────────────────────────────────────────────────

pub fn write_model(path: &Path, model: &ToyTransformer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let cfg = &model.cfg;
    for v in [cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.d_ffn, cfg.vocab] {
        write_u32(&mut w, v as u32)?;
    }
    write_u64(&mut w, cfg.seed)?;
    write_f64(&mut w, model.rope_base)?;
    w.write_all(&[u8::from(model.rms_fused)])?;

    write_f64_slice(&mut w, model.embedding.data())?;
    for layer in &model.layers {
        write_f64_slice(&mut w, &layer.rms_attn)?;
        write_f64_slice(&mut w, layer.wq.data())?;
        write_f64_slice(&mut w, layer.wk.data())?;
        write_f64_slice(&mut w, layer.wv.data())?;
        write_f64_slice(&mut w, layer.wo.data())?;
        write_f64_slice(&mut w, &layer.rms_mlp)?;
        write_f64_slice(&mut w, layer.w_up.data())?;
        write_f64_slice(&mut w, layer.w_gate.data())?;
        write_f64_slice(&mut w, layer.w_down.data())?;
    }
    write_f64_slice(&mut w, &model.rms_final)?;
    write_f64_slice(&mut w, model.lm_head.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ToyTransformer> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, MODEL_MAGIC)?;
    expect_version(&mut r)?;
    let d_model = read_u32(&mut r)? as usize;
    let n_heads = read_u32(&mut r)? as usize;
    let n_layers = read_u32(&mut r)? as usize;
    let d_ffn = read_u32(&mut r)? as usize;
    let vocab = read_u32(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let rope_base = read_f64(&mut r)?;
    let rms_fused = read_u8(&mut r)? != 0;
    let cfg = ModelConfig {
        d_model,
        n_heads,
        n_layers,
        d_ffn,
        vocab,
        seed,
    };
    cfg.validate()?;

    let embedding = read_matrix(&mut r, vocab, d_model)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(LayerWeights {
            rms_attn: read_f64_vec(&mut r, d_model)?,
            wq: read_matrix(&mut r, d_model, d_model)?,
            wk: read_matrix(&mut r, d_model, d_model)?,
            wv: read_matrix(&mut r, d_model, d_model)?,
            wo: read_matrix(&mut r, d_model, d_model)?,
            rms_mlp: read_f64_vec(&mut r, d_model)?,
            w_up: read_matrix(&mut r, d_ffn, d_model)?,
            w_gate: read_matrix(&mut r, d_ffn, d_model)?,
            w_down: read_matrix(&mut r, d_model, d_ffn)?,
        });
    }
    let rms_final = read_f64_vec(&mut r, d_model)?;
    let lm_head = read_matrix(&mut r, vocab, d_model)?;
    expect_eof(&mut r)?;
    Ok(ToyTransformer {
        cfg,
        embedding,
        layers,
        rms_final,
        lm_head,
        rope_base,
        rms_fused,
    })
}

// ── Rotation checkpoints ────────────────────────────────────────────────────

pub fn write_rotations(path: &Path, rots: &RotationSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ROTATION_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let d_model = rots.residual.dim();
    let n_layers = rots.value_heads.len();
    let (n_heads, d_head) = match rots.value_heads.first() {
        Some(b) => (b.n_blocks(), b.block_dim()),
        None => (0, 0),
    };
    write_u32(&mut w, d_model as u32)?;
    write_u32(&mut w, n_layers as u32)?;
    write_u32(&mut w, n_heads as u32)?;
    write_u32(&mut w, d_head as u32)?;
    w.write_all(&[u8::from(rots.qk_hadamard), u8::from(rots.mlp_hadamard)])?;
    write_f64_slice(&mut w, rots.residual.matrix().data())?;
    for layer in &rots.value_heads {
        for block in layer.blocks() {
            write_f64_slice(&mut w, block.matrix().data())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_rotations(path: &Path) -> Result<RotationSet> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, ROTATION_MAGIC)?;
    expect_version(&mut r)?;
    let d_model = read_u32(&mut r)? as usize;
    let n_layers = read_u32(&mut r)? as usize;
    let n_heads = read_u32(&mut r)? as usize;
    let d_head = read_u32(&mut r)? as usize;
    let qk_hadamard = read_u8(&mut r)? != 0;
    let mlp_hadamard = read_u8(&mut r)? != 0;
    if n_heads == 0 || d_head == 0 || n_heads * d_head != d_model {
        return Err(Error::Format(format!(
            "rotation header inconsistent: {n_heads} heads x {d_head} != {d_model}"
        )));
    }
    let residual = OrthogonalMatrix::new(read_matrix(&mut r, d_model, d_model)?)
        .map_err(|e| Error::Format(format!("stored shared rotation invalid: {e}")))?;
    let mut value_heads = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut blocks = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            blocks.push(
                OrthogonalMatrix::new(read_matrix(&mut r, d_head, d_head)?)
                    .map_err(|e| Error::Format(format!("stored block invalid: {e}")))?,
            );
        }
        value_heads.push(BlockDiagonalRotation::new(blocks)?);
    }
    expect_eof(&mut r)?;
    Ok(RotationSet {
        residual,
        value_heads,
        qk_hadamard,
        mlp_hadamard,
    })
}

// ── Activation dumps ────────────────────────────────────────────────────────

pub fn write_activations(path: &Path, site: TapSite, layer: usize, data: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ACTIVATION_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    w.write_all(&[site.code()])?;
    write_u32(&mut w, layer as u32)?;
    write_u32(&mut w, data.cols() as u32)?;
    write_u64(&mut w, data.rows() as u64)?;
    write_f64_slice(&mut w, data.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<(TapSite, usize, Matrix)> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, ACTIVATION_MAGIC)?;
    expect_version(&mut r)?;
    let site = TapSite::from_code(read_u8(&mut r)?)?;
    let layer = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let rows = read_u64(&mut r)? as usize;
    let m = read_matrix(&mut r, rows, d)?;
    expect_eof(&mut r)?;
    Ok((site, layer, m))
}

// ── Inspection (for the CLI `info` command) ─────────────────────────────────

#[derive(Debug, Clone)]
pub enum ContainerInfo {
    Model {
        version: u32,
        cfg: ModelConfig,
        rope_base: f64,
        rms_fused: bool,
    },
    Rotations {
        version: u32,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_head: usize,
        qk_hadamard: bool,
        mlp_hadamard: bool,
    },
    Activations {
        version: u32,
        site: TapSite,
        layer: usize,
        dim: usize,
        rows: usize,
    },
}

/// Identifies a container file by magic and reads its header.
pub fn inspect(path: &Path) -> Result<ContainerInfo> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    let version = read_u32(&mut r)?;
    match &magic {
        m if m == MODEL_MAGIC => {
            let d_model = read_u32(&mut r)? as usize;
            let n_heads = read_u32(&mut r)? as usize;
            let n_layers = read_u32(&mut r)? as usize;
            let d_ffn = read_u32(&mut r)? as usize;
            let vocab = read_u32(&mut r)? as usize;
            let seed = read_u64(&mut r)?;
            let rope_base = read_f64(&mut r)?;
            let rms_fused = read_u8(&mut r)? != 0;
            Ok(ContainerInfo::Model {
                version,
                cfg: ModelConfig {
                    d_model,
                    n_heads,
                    n_layers,
                    d_ffn,
                    vocab,
                    seed,
                },
                rope_base,
                rms_fused,
            })
        }
        m if m == ROTATION_MAGIC => {
            let d_model = read_u32(&mut r)? as usize;
            let n_layers = read_u32(&mut r)? as usize;
            let n_heads = read_u32(&mut r)? as usize;
            let d_head = read_u32(&mut r)? as usize;
            let qk_hadamard = read_u8(&mut r)? != 0;
            let mlp_hadamard = read_u8(&mut r)? != 0;
            Ok(ContainerInfo::Rotations {
                version,
                d_model,
                n_layers,
                n_heads,
                d_head,
                qk_hadamard,
                mlp_hadamard,
            })
        }
        m if m == ACTIVATION_MAGIC => {
            let site = TapSite::from_code(read_u8(&mut r)?)?;
            let layer = read_u32(&mut r)? as usize;
            let dim = read_u32(&mut r)? as usize;
            let rows = read_u64(&mut r)? as usize;
            Ok(ContainerInfo::Activations {
                version,
                site,
                layer,
                dim,
                rows,
            })
        }
        m => Err(Error::Format(format!("unknown magic {m:?}"))),
    }
}

// ── Primitive encoding ──────────────────────────────────────────────────────

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64_slice<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_f64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let data = read_f64_vec(r, rows * cols)?;
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(format!("stored matrix: {e}")))
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, got {buf:?}",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    Ok(())
}

fn expect_version<R: Read>(r: &mut R) -> Result<()> {
    let v = read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {v}")));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::hadamard_baseline;
    use crate::model::{init_model, RotationSet};
    use crate::tensor::GaussianSource;

    fn tempdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("rotcalib-io-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn model_roundtrip_bit_exact() {
        let dir = tempdir("model");
        let model = init_model(&ModelConfig::default()).unwrap();
        let path = dir.join("model.crtm");
        write_model(&path, &model).unwrap();
        let loaded = read_model(&path).unwrap();
        assert_eq!(model, loaded);

        write_model(&path, &model).unwrap();
        let again = std::fs::read(&path).unwrap();
        write_model(&path, &model).unwrap();
        assert_eq!(
            again,
            std::fs::read(&path).unwrap(),
            "byte-identical rewrites"
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rotations_roundtrip_and_validated() {
        let dir = tempdir("rots");
        let cfg = ModelConfig::default();
        let rots = hadamard_baseline(&cfg, 9).unwrap();
        let path = dir.join("rots.crrs");
        write_rotations(&path, &rots).unwrap();
        let loaded = read_rotations(&path).unwrap();
        assert_eq!(rots, loaded);

        let id = RotationSet::identity(&cfg);
        write_rotations(&path, &id).unwrap();
        assert!(read_rotations(&path).unwrap().is_identity());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn activations_roundtrip() {
        let dir = tempdir("acts");
        let mut g = GaussianSource::new(5);
        let m = Matrix::from_vec(7, 16, (0..112).map(|_| g.next_normal()).collect()).unwrap();
        let path = dir.join("acts.crad");
        write_activations(&path, TapSite::OprojIn, 1, &m).unwrap();
        let (site, layer, loaded) = read_activations(&path).unwrap();
        assert_eq!(site, TapSite::OprojIn);
        assert_eq!(layer, 1);
        assert_eq!(m, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn inspect_identifies_containers() {
        let dir = tempdir("inspect");
        let model = init_model(&ModelConfig::default()).unwrap();
        let mp = dir.join("m.crtm");
        write_model(&mp, &model).unwrap();
        assert!(matches!(inspect(&mp).unwrap(), ContainerInfo::Model { .. }));

        let rp = dir.join("r.crrs");
        write_rotations(&rp, &RotationSet::identity(&model.cfg)).unwrap();
        assert!(matches!(
            inspect(&rp).unwrap(),
            ContainerInfo::Rotations { .. }
        ));

        let ap = dir.join("a.crad");
        write_activations(&ap, TapSite::AttnIn, 0, &Matrix::zeros(2, 4)).unwrap();
        match inspect(&ap).unwrap() {
            ContainerInfo::Activations { rows, dim, .. } => {
                assert_eq!(rows, 2);
                assert_eq!(dim, 4);
            }
            other => panic!("unexpected {other:?}"),
        }

        let junk = dir.join("junk.bin");
        std::fs::write(&junk, b"NOPExxxxxxxx").unwrap();
        assert!(matches!(inspect(&junk), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempdir("corrupt");
        let model = init_model(&ModelConfig::default()).unwrap();
        let path = dir.join("model.crtm");
        write_model(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_model(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
