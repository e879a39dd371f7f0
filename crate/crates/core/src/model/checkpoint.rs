//! Checkpoint file: magic "CTX3D\0", version u32, config fingerprint u64,
//! epoch u32, parameter count u32, then per parameter: name length u32,
//! name bytes, rank u32, extents as u64, and 32-bit little-endian values.
//! Round-trips are bit-exact.

use super::config::ModelConfig;
use super::net::{Model, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"CTX3D\0";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let show = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(&show, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&show, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&model.cfg.fingerprint().to_le_bytes()).map_err(io)?;
    w.write_all(&model.epoch.to_le_bytes()).map_err(io)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Load a checkpoint for the given configuration; a fingerprint mismatch
/// or any structural disagreement with the expected parameter set is
/// rejected without producing a partial model.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<Model> {
    let show = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&show, e))?;
    let mut r = BufReader::new(file);
    let fmt = |detail: String| Error::Format { path: show.clone(), detail };

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic, not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|_| fmt("truncated version".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut b8).map_err(|_| fmt("truncated fingerprint".into()))?;
    let fingerprint = u64::from_le_bytes(b8);
    let expected = cfg.fingerprint();
    if fingerprint != expected {
        return Err(Error::FingerprintMismatch { file: fingerprint, expected });
    }
    r.read_exact(&mut b4).map_err(|_| fmt("truncated epoch".into()))?;
    let epoch = u32::from_le_bytes(b4);
    r.read_exact(&mut b4).map_err(|_| fmt("truncated parameter count".into()))?;
    let count = u32::from_le_bytes(b4) as usize;

    let mut params = ParamStore::new();
    for i in 0..count {
        r.read_exact(&mut b4).map_err(|_| fmt(format!("truncated name length of parameter {i}")))?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| fmt(format!("truncated name of parameter {i}")))?;
        let name = String::from_utf8(name).map_err(|_| fmt(format!("parameter {i} name is not utf-8")))?;
        r.read_exact(&mut b4).map_err(|_| fmt(format!("truncated rank of {name}")))?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b8).map_err(|_| fmt(format!("truncated extents of {name}")))?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        for v in data.iter_mut() {
            r.read_exact(&mut b4).map_err(|_| fmt(format!("truncated values of {name}")))?;
            *v = f32::from_le_bytes(b4);
        }
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(&show, e))? != 0 {
        return Err(fmt("trailing bytes after parameters".into()));
    }

    // Structural validation against a freshly assembled model.
    let reference = super::net::build_model(cfg, 0)?;
    if reference.params.len() != params.len() {
        return Err(fmt(format!("expected {} parameters, file has {}", reference.params.len(), params.len())));
    }
    for (name, tensor) in reference.params.iter() {
        match params.get(name) {
            Some(t) if t.shape() == tensor.shape() => {}
            Some(t) => {
                return Err(fmt(format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), tensor.shape())));
            }
            None => return Err(fmt(format!("parameter {name} missing from checkpoint"))),
        }
    }
    Ok(Model { cfg: cfg.clone(), params, epoch })
}
