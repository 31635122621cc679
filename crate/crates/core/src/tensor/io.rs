//! TVET binary tensor files.
//!
//! Layout: magic `TVET`, u8 version (1), u8 dtype (1 = f32), u8 rank, u8 pad,
//! `rank` little-endian u64 dims, then the row-major little-endian f32 payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TVET";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, tensor.rank() as u8, 0]);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 {
        return Err("truncated header".into());
    }
    if bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(format!("unsupported dtype {}", bytes[5]));
    }
    let rank = bytes[6] as usize;
    let header = 8 + 8 * rank;
    if rank == 0 || bytes.len() < header {
        return Err("truncated dims".into());
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dims overflow")?;
    if bytes.len() != header + 4 * numel {
        return Err(format!(
            "payload has {} bytes, dims {:?} need {}",
            bytes.len() - header,
            dims,
            4 * numel
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(Error::io(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|reason| Error::TensorFormat {
        path: path.to_path_buf(),
        reason,
    })
}
