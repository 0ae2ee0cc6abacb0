//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "CLRCKPT1"
//! version  u32      1
//! config   u64 length + UTF-8 JSON of ModelConfig
//! count    u64      number of parameters
//! per parameter:
//!   name   u32 length + UTF-8 bytes
//!   group  u8       0 base, 1 delta, 2 head
//!   rank   u32, then rank × u64 dims
//!   values product(dims) × f64 bit patterns
//! ```
//!
//! Values are stored as raw bit patterns so a round trip is bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelError, ParamGroup, Result};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLRCKPT1";
const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(model.config()).map_err(|e| corrupt(e.to_string()))?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let group: u8 = match p.group {
            ParamGroup::Base => 0,
            ParamGroup::Delta => 1,
            ParamGroup::Head => 2,
        };
        w.write_all(&[group])?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: u64, limit: u64) -> Result<Vec<u8>> {
    if len > limit {
        return Err(corrupt(format!("field length {len} exceeds {limit}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a checkpoint, rebuilding the layout from the stored config and
/// checking every stored parameter against it.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = read_u64(r)?;
    let config_json = read_bytes(r, len, 1 << 20)?;
    let config: ModelConfig = serde_json::from_slice(&config_json).map_err(|e| corrupt(e.to_string()))?;
    let mut model = Model::new(config, 0)?;
    let count = read_u64(r)?;
    if count != model.params.len() as u64 {
        return Err(corrupt(format!("{count} parameters, layout expects {}", model.params.len())));
    }
    for p in model.params.iter_mut() {
        let len = read_u32(r)?;
        let name = String::from_utf8(read_bytes(r, len.into(), 4096)?).map_err(|e| corrupt(e.to_string()))?;
        let mut group = [0u8; 1];
        r.read_exact(&mut group)?;
        let rank = read_u32(r)?;
        if rank > 8 {
            return Err(corrupt(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.value.shape() {
            return Err(corrupt(format!("parameter {name} {shape:?} does not match {} {:?}", p.name, p.value.shape())));
        }
        let expected_group = match p.group {
            ParamGroup::Base => 0,
            ParamGroup::Delta => 1,
            ParamGroup::Head => 2,
        };
        if group[0] != expected_group {
            return Err(corrupt(format!("{name}: group tag {}", group[0])));
        }
        let data = (0..p.value.numel()).map(|_| read_u64(r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        p.value = Tensor::new(&shape, data)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
