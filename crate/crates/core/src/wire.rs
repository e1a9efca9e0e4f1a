//! Update payloads: the exact bytes a client and server exchange each round.
//!
//! Layout (all little-endian):
//! - header: magic "FSUP", version u16, strategy u8, factor-split u8,
//!   rank u16, round u32, config hash (32 bytes), dense-record count u32,
//!   adapter-record count u32
//! - dense record: name length u16, name bytes, group u8, ndim u8,
//!   dims u32 each, f32 values
//! - adapter record: layer id u32, target u8, rank u16, d u32, d' u32,
//!   row-major A as f32, row-major B as f32
//!
//! Values travel at f32 wire precision; the simulation itself keeps f64
//! state in memory and uses these buffers for byte accounting and caching.

use crate::adapters::{AdapterSet, AdapterTarget, LayerAdapters, LoraAdapter};
use crate::linalg::Matrix;
use crate::model::{ParamGroup, Strategy};
use thiserror::Error;

pub const UPDATE_MAGIC: &[u8; 4] = b"FSUP";
pub const UPDATE_VERSION: u16 = 1;
/// Factor-split convention marker: balanced sqrt-of-sigma on both factors.
pub const FACTOR_SPLIT_BALANCED: u8 = 1;

/// Fixed header size in bytes.
pub const HEADER_BYTES: u64 = 4 + 2 + 1 + 1 + 2 + 4 + 32 + 4 + 4;

/// Per-adapter-record metadata size (everything but the factor values).
pub const ADAPTER_RECORD_META_BYTES: u64 = 4 + 1 + 2 + 4 + 4;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed update payload: {0}")]
    Malformed(String),
}

/// Borrowed view of one dense tensor for serialization.
#[derive(Debug, Clone, Copy)]
pub struct DenseTensorView<'a> {
    pub name: &'a str,
    pub group: ParamGroup,
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

/// Metadata bytes of one dense record (excludes the f32 values).
pub fn dense_record_meta_bytes(name_len: usize, ndim: usize) -> u64 {
    2 + name_len as u64 + 1 + 1 + 4 * ndim as u64
}

/// Serialize one update payload.
pub fn serialize_update(
    strategy: Strategy,
    rank: u16,
    round: u32,
    config_hash: &[u8; 32],
    dense: &[DenseTensorView<'_>],
    adapters: Option<&AdapterSet>,
) -> Vec<u8> {
    let adapter_count = adapters.map_or(0, |s| 2 * s.num_layers());
    let mut out = Vec::new();
    out.extend_from_slice(UPDATE_MAGIC);
    out.extend_from_slice(&UPDATE_VERSION.to_le_bytes());
    out.push(strategy.wire_code());
    out.push(FACTOR_SPLIT_BALANCED);
    out.extend_from_slice(&rank.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(config_hash);
    out.extend_from_slice(&(dense.len() as u32).to_le_bytes());
    out.extend_from_slice(&(adapter_count as u32).to_le_bytes());

    for t in dense {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.group.wire_code());
        out.push(t.shape.len() as u8);
        for &s in t.shape {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for &v in t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(set) = adapters {
        for (layer_id, target, ad) in set.iter_flat() {
            out.extend_from_slice(&layer_id.to_le_bytes());
            out.push(target.wire_code());
            out.extend_from_slice(&(ad.rank as u16).to_le_bytes());
            out.extend_from_slice(&(ad.d_out() as u32).to_le_bytes());
            out.extend_from_slice(&(ad.d_in() as u32).to_le_bytes());
            for &v in ad.a_factor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &v in ad.b_factor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Parsed update payload.
#[derive(Debug)]
pub struct ParsedUpdate {
    pub strategy: Strategy,
    pub rank: u16,
    pub round: u32,
    pub config_hash: [u8; 32],
    pub dense: Vec<(String, ParamGroup, Vec<usize>, Vec<f64>)>,
    pub adapters: Option<AdapterSet>,
    /// Forward scale is not wire state; the parser applies this value.
    pub adapter_scale: f64,
}

pub fn parse_update(buf: &[u8], adapter_scale: f64) -> Result<ParsedUpdate, WireError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], WireError> {
        if *pos + n > buf.len() {
            return Err(WireError::Malformed("truncated".to_string()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != UPDATE_MAGIC {
        return Err(WireError::Malformed("bad magic".to_string()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != UPDATE_VERSION {
        return Err(WireError::Malformed(format!("unsupported version {version}")));
    }
    let strategy = Strategy::from_wire_code(take(&mut pos, 1)?[0])
        .ok_or_else(|| WireError::Malformed("unknown strategy".to_string()))?;
    let split = take(&mut pos, 1)?[0];
    if split != FACTOR_SPLIT_BALANCED {
        return Err(WireError::Malformed(format!("unknown factor split {split}")));
    }
    let rank = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    let round = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let config_hash: [u8; 32] = take(&mut pos, 32)?.try_into().unwrap();
    let dense_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let adapter_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut dense = Vec::with_capacity(dense_count);
    for _ in 0..dense_count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| WireError::Malformed("bad name".to_string()))?;
        let group = ParamGroup::from_wire_code(take(&mut pos, 1)?[0])
            .ok_or_else(|| WireError::Malformed("unknown group".to_string()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = take(&mut pos, 4 * numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        dense.push((name, group, shape, data));
    }

    let adapters = if adapter_count > 0 {
        if !adapter_count.is_multiple_of(2) {
            return Err(WireError::Malformed("odd adapter count".to_string()));
        }
        let mut set = AdapterSet::new();
        let mut pending: Option<(u32, LoraAdapter)> = None;
        for _ in 0..adapter_count {
            let layer_id = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let target = AdapterTarget::from_wire_code(take(&mut pos, 1)?[0])
                .ok_or_else(|| WireError::Malformed("unknown adapter target".to_string()))?;
            let r = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let dp = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let a_raw: Vec<f64> = take(&mut pos, 4 * r * dp)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let b_raw: Vec<f64> = take(&mut pos, 4 * d * r)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let a_factor = Matrix::from_vec(r, dp, a_raw)
                .map_err(|e| WireError::Malformed(e.to_string()))?;
            let b_factor = Matrix::from_vec(d, r, b_raw)
                .map_err(|e| WireError::Malformed(e.to_string()))?;
            let adapter = LoraAdapter::from_factors(b_factor, a_factor, adapter_scale, target)
                .map_err(|e| WireError::Malformed(e.to_string()))?;
            match (target, pending.take()) {
                (AdapterTarget::Query, None) => pending = Some((layer_id, adapter)),
                (AdapterTarget::Value, Some((qid, query))) if qid == layer_id => {
                    set.insert(
                        layer_id,
                        LayerAdapters {
                            query,
                            value: adapter,
                        },
                    );
                }
                _ => return Err(WireError::Malformed("adapter records out of order".to_string())),
            }
        }
        Some(set)
    } else {
        None
    };

    if pos != buf.len() {
        return Err(WireError::Malformed("trailing bytes".to_string()));
    }
    Ok(ParsedUpdate {
        strategy,
        rank,
        round,
        config_hash,
        dense,
        adapters,
        adapter_scale,
    })
}
