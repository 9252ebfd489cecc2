//! Portable cache container for 3-D arrays.
//!
//! Layout (little endian): `b"MIPCADAR"`, `u32` header length, JSON header
//! (`dtype`, `shape` as `[z, y, x]`, `spacing`, `origin`, `series_id`,
//! free-form `meta`), then the raw element data in `[z, y, x]` order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{CtVolume, Geometry};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MIPCADAR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub dtype: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub series_id: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    I16(Array3<i16>),
    U8(Array3<u8>),
    F32(Array3<f32>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::I16(_) => "i16",
            ArrayData::U8(_) => "u8",
            ArrayData::F32(_) => "f32",
        }
    }

    fn shape(&self) -> [usize; 3] {
        let d = match self {
            ArrayData::I16(a) => a.dim(),
            ArrayData::U8(a) => a.dim(),
            ArrayData::F32(a) => a.dim(),
        };
        [d.0, d.1, d.2]
    }

    /// Values widened to `f32`.
    pub fn to_f32(&self) -> Array3<f32> {
        match self {
            ArrayData::I16(a) => a.mapv(|v| v as f32),
            ArrayData::U8(a) => a.mapv(|v| v as f32),
            ArrayData::F32(a) => a.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredArray {
    pub header: ArrayHeader,
    pub data: ArrayData,
}

impl StoredArray {
    pub fn new(data: ArrayData, geometry: Geometry, series_id: &str) -> Self {
        Self {
            header: ArrayHeader {
                dtype: data.dtype().into(),
                shape: data.shape(),
                spacing: geometry.spacing,
                origin: geometry.origin,
                series_id: series_id.into(),
                meta: BTreeMap::new(),
            },
            data,
        }
    }

    /// Stores HU intensities as 16-bit signed integers.
    pub fn from_hu_volume(v: &CtVolume) -> Self {
        let data = v.voxels.mapv(|x| x.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16);
        Self::new(ArrayData::I16(data), v.geometry, &v.series_id)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            spacing: self.header.spacing,
            origin: self.header.origin,
        }
    }

    pub fn to_volume(&self) -> Result<CtVolume> {
        CtVolume::new(self.data.to_f32(), self.header.spacing, self.header.origin, self.header.series_id.clone())
    }
}

pub fn write_array(path: &Path, arr: &StoredArray) -> Result<()> {
    let mut header = arr.header.clone();
    header.dtype = arr.data.dtype().into();
    header.shape = arr.data.shape();
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    match &arr.data {
        ArrayData::I16(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        ArrayData::U8(a) => {
            let bytes: Vec<u8> = a.iter().cloned().collect();
            w.write_all(&bytes)?;
        }
        ArrayData::F32(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<StoredArray> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::format(path, "truncated container"))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not an array container"));
    }
    let mut lenb = [0u8; 4];
    r.read_exact(&mut lenb)?;
    let mut json = vec![0u8; u32::from_le_bytes(lenb) as usize];
    r.read_exact(&mut json)?;
    let header: ArrayHeader = serde_json::from_slice(&json)?;
    let [nz, ny, nx] = header.shape;
    let count = nz * ny * nx;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let elem = match header.dtype.as_str() {
        "i16" => 2,
        "u8" => 1,
        "f32" => 4,
        other => return Err(Error::format(path, format!("unknown dtype {other}"))),
    };
    if body.len() != count * elem {
        return Err(Error::integrity(path, format!("expected {} data bytes, found {}", count * elem, body.len())));
    }
    let shape = (nz, ny, nx);
    let bad = |e: ndarray::ShapeError| Error::integrity(path, e.to_string());
    let data = match elem {
        2 => ArrayData::I16(
            Array3::from_shape_vec(shape, body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
                .map_err(bad)?,
        ),
        1 => ArrayData::U8(Array3::from_shape_vec(shape, body).map_err(bad)?),
        _ => ArrayData::F32(
            Array3::from_shape_vec(
                shape,
                body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            )
            .map_err(bad)?,
        ),
    };
    Ok(StoredArray { header, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn arrays_round_trip(
            nz in 1usize..5, ny in 1usize..6, nx in 1usize..6,
            seed in any::<u64>(),
            kind in 0u8..3,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.arr");
            let f = |z: usize, y: usize, x: usize| ((seed as usize).wrapping_add(z * 31 + y * 7 + x) % 2000) as f32 - 1000.0;
            let data = match kind {
                0 => ArrayData::I16(Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| f(z, y, x) as i16)),
                1 => ArrayData::U8(Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| (f(z, y, x) as i32).rem_euclid(2) as u8)),
                _ => ArrayData::F32(Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| f(z, y, x) / 7.0)),
            };
            let mut arr = StoredArray::new(data, Geometry { spacing: [0.7, 0.7, 1.0], origin: [-1.0, 2.0, 3.0] }, "sid");
            arr.header.meta.insert("thickness".into(), "5".into());
            write_array(&path, &arr).unwrap();
            prop_assert_eq!(read_array(&path).unwrap(), arr);
        }
    }

    #[test]
    fn truncated_body_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.arr");
        let arr = StoredArray::new(ArrayData::U8(Array3::zeros((2, 2, 2))), Geometry { spacing: [1.0; 3], origin: [0.0; 3] }, "s");
        write_array(&path, &arr).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_array(&path), Err(Error::Integrity { .. })));
    }
}
