//! Checkpoint files: ordered (name, group, shape, little-endian f32 payload)
//! records behind a header carrying the config hash and strategy. Values are
//! stored at wire precision, so a load/save cycle of a checkpoint file is
//! byte-exact.

use super::{ModelConfig, Param, ParamRegistry, ParamGroup, Strategy, ToyModel};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"FSCK";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint was written for a different config")]
    ConfigMismatch,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize the full registry.
pub fn save_checkpoint(model: &ToyModel, strategy: Strategy, path: &Path) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    out.push(strategy.wire_code());
    out.extend_from_slice(&model.cfg.hash());
    put_u32(&mut out, model.registry.len() as u32);
    for p in model.registry.iter() {
        let name = p.name.as_bytes();
        put_u16(&mut out, name.len() as u16);
        out.extend_from_slice(name);
        out.push(p.group.wire_code());
        out.push(p.shape.len() as u8);
        for &s in &p.shape {
            put_u32(&mut out, s as u32);
        }
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed("truncated file".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

/// Load a checkpoint into a model of the same config. Returns the strategy
/// recorded in the header.
pub fn load_checkpoint(cfg: &ModelConfig, path: &Path) -> Result<(ToyModel, Strategy), CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".to_string()));
    }
    if cur.u16()? != VERSION {
        return Err(CheckpointError::Malformed("unsupported version".to_string()));
    }
    let strategy = Strategy::from_wire_code(cur.u8()?)
        .ok_or_else(|| CheckpointError::Malformed("unknown strategy".to_string()))?;
    let hash = cur.take(32)?;
    if hash != cfg.hash() {
        return Err(CheckpointError::ConfigMismatch);
    }
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("bad name".to_string()))?;
        let group = ParamGroup::from_wire_code(cur.u8()?)
            .ok_or_else(|| CheckpointError::Malformed("unknown group".to_string()))?;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(4 * numel)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push(Param {
            name,
            group,
            shape,
            data,
        });
    }
    if cur.pos != buf.len() {
        return Err(CheckpointError::Malformed("trailing bytes".to_string()));
    }
    Ok((
        ToyModel {
            cfg: cfg.clone(),
            registry: ParamRegistry::from_params(params),
        },
        strategy,
    ))
}
