//! Model file: an architecture descriptor followed by a flat weight blob.
//!
//! Layout (little endian):
//! `b"MIPCADNN"`, `u32` version, `u64` descriptor length, descriptor JSON,
//! `u64` value count, `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{NnError, Result};

const MAGIC: &[u8; 8] = b"MIPCADNN";
const VERSION: u32 = 1;

pub fn write_model<D: Serialize>(path: &Path, descriptor: &D, weights: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_vec(descriptor)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(weights.len() as u64).to_le_bytes())?;
    for v in weights {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<D: DeserializeOwned>(path: &Path) -> Result<(D, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!("{} is not a model file", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported model version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let len = u64::from_le_bytes(u64b) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let descriptor = serde_json::from_slice(&json)?;
    r.read_exact(&mut u64b)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw)?;
    let weights = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((descriptor, weights))
}

/// Flattens every persisted buffer visited by `visit` into one vector.
pub fn collect_state(visit: impl FnOnce(&mut dyn FnMut(&mut Vec<f32>))) -> Vec<f32> {
    let mut out = Vec::new();
    visit(&mut |buf| out.extend_from_slice(buf));
    out
}

/// Restores buffers from a flat vector produced by [`collect_state`].
pub fn restore_state(weights: &[f32], visit: impl FnOnce(&mut dyn FnMut(&mut Vec<f32>))) -> Result<()> {
    let mut offset = 0;
    let mut overflow = false;
    visit(&mut |buf| {
        let n = buf.len();
        if offset + n > weights.len() {
            overflow = true;
            return;
        }
        buf.copy_from_slice(&weights[offset..offset + n]);
        offset += n;
    });
    if overflow || offset != weights.len() {
        return Err(NnError::Format(format!(
            "weight blob holds {} values but the architecture needs a different count",
            weights.len()
        )));
    }
    Ok(())
}
