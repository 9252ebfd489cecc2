//! MetaImage (`.mhd` header + `.raw` data) reader and writer.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::CtVolume;
use crate::{Error, Result};

/// Voxel storage types understood by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    U8,
    I16,
    U16,
    I32,
    F32,
    F64,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MET_UCHAR" => Self::U8,
            "MET_SHORT" => Self::I16,
            "MET_USHORT" => Self::U16,
            "MET_INT" => Self::I32,
            "MET_FLOAT" => Self::F32,
            "MET_DOUBLE" => Self::F64,
            _ => return None,
        })
    }

    fn tag(self) -> &'static str {
        match self {
            Self::U8 => "MET_UCHAR",
            Self::I16 => "MET_SHORT",
            Self::U16 => "MET_USHORT",
            Self::I32 => "MET_INT",
            Self::F32 => "MET_FLOAT",
            Self::F64 => "MET_DOUBLE",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f32 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(b);
                if big_endian {
                    <$t>::from_be_bytes(a) as f32
                } else {
                    <$t>::from_le_bytes(a) as f32
                }
            }};
        }
        match self {
            Self::U8 => b[0] as f32,
            Self::I16 => num!(i16, 2),
            Self::U16 => num!(u16, 2),
            Self::I32 => num!(i32, 4),
            Self::F32 => num!(f32, 4),
            Self::F64 => num!(f64, 8),
        }
    }

    fn encode(self, v: f32, out: &mut Vec<u8>) {
        match self {
            Self::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            Self::I16 => out.extend_from_slice(&(v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v.round().clamp(0.0, u16::MAX as f32) as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v.round() as i32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&v.to_le_bytes()),
            Self::F64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
        }
    }
}

fn parse_header(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|line| {
            let (k, v) = line.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn numbers<T: std::str::FromStr>(path: &Path, key: &str, value: &str, n: usize) -> Result<Vec<T>> {
    let parsed: Option<Vec<T>> = value.split_whitespace().map(|t| t.parse().ok()).collect();
    match parsed {
        Some(v) if v.len() == n => Ok(v),
        _ => Err(Error::format(path, format!("`{key}` must hold {n} numbers, got `{value}`"))),
    }
}

/// Reads a MetaImage volume. Intensities are returned as stored (HU for CT).
/// The series id is the header file stem.
pub fn load_volume(path: &Path) -> Result<CtVolume> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, format!("cannot read header: {e}")))?;
    // LOCAL data may follow the header; only decode the textual prefix.
    let text_end = bytes
        .windows(15)
        .position(|w| w == b"ElementDataFile")
        .and_then(|p| bytes[p..].iter().position(|&b| b == b'\n').map(|q| p + q + 1))
        .unwrap_or(bytes.len());
    let text = std::str::from_utf8(&bytes[..text_end]).map_err(|_| Error::format(path, "header is not valid UTF-8"))?;
    let h = parse_header(text);
    let get = |k: &str| h.get(k).map(String::as_str);

    let ndims: usize = get("NDims")
        .ok_or_else(|| Error::format(path, "missing NDims"))?
        .parse()
        .map_err(|_| Error::format(path, "bad NDims"))?;
    if ndims != 3 {
        return Err(Error::format(path, format!("expected a 3-D image, NDims = {ndims}")));
    }
    let dims: Vec<usize> = numbers(path, "DimSize", get("DimSize").ok_or_else(|| Error::format(path, "missing DimSize"))?, 3)?;
    let spacing_s = get("ElementSpacing")
        .or_else(|| get("ElementSize"))
        .ok_or_else(|| Error::format(path, "missing ElementSpacing"))?;
    let spacing: Vec<f64> = numbers(path, "ElementSpacing", spacing_s, 3)?;
    let origin: Vec<f64> = match get("Offset").or_else(|| get("Origin")).or_else(|| get("Position")) {
        Some(s) => numbers(path, "Offset", s, 3)?,
        None => vec![0.0; 3],
    };
    if let Some(tm) = get("TransformMatrix") {
        let m: Vec<f64> = numbers(path, "TransformMatrix", tm, 9)?;
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        if m.iter().zip(identity).any(|(a, b)| (a - b).abs() > 1e-6) {
            return Err(Error::UnsupportedGeometry(format!(
                "{}: only axis-aligned orientation is supported",
                path.display()
            )));
        }
    }
    if get("CompressedData").is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(Error::format(path, "compressed MetaImage data is not supported"));
    }
    let etype_s = get("ElementType").ok_or_else(|| Error::format(path, "missing ElementType"))?;
    let etype = ElementType::parse(etype_s).ok_or_else(|| Error::format(path, format!("unsupported ElementType {etype_s}")))?;
    if get("ElementNumberOfChannels").is_some_and(|v| v != "1") {
        return Err(Error::format(path, "multi-channel images are not supported"));
    }
    let big_endian = get("ElementByteOrderMSB")
        .or_else(|| get("BinaryDataByteOrderMSB"))
        .is_some_and(|v| v.eq_ignore_ascii_case("true"));
    let data_file = get("ElementDataFile").ok_or_else(|| Error::format(path, "missing ElementDataFile"))?;

    let (raw, raw_path): (Vec<u8>, PathBuf) = if data_file == "LOCAL" {
        (bytes[text_end..].to_vec(), path.to_path_buf())
    } else {
        let rp = path.parent().unwrap_or(Path::new(".")).join(data_file);
        let raw = fs::read(&rp).map_err(|e| Error::integrity(&rp, format!("cannot read voxel data: {e}")))?;
        (raw, rp)
    };
    let count = dims.iter().product::<usize>();
    let need = count * etype.size();
    let header_skip = match get("HeaderSize").map(|s| s.parse::<i64>()) {
        Some(Ok(-1)) => raw.len().saturating_sub(need),
        Some(Ok(n)) if n >= 0 => n as usize,
        Some(_) => return Err(Error::format(path, "bad HeaderSize")),
        None => 0,
    };
    if raw.len() < header_skip + need {
        return Err(Error::integrity(
            &raw_path,
            format!(
                "voxel data holds {} bytes, dimensions {:?} of {} need {}",
                raw.len().saturating_sub(header_skip),
                dims,
                etype_s,
                need
            ),
        ));
    }
    let body = &raw[header_skip..header_skip + need];
    let values: Vec<f32> = body.chunks_exact(etype.size()).map(|c| etype.decode(c, big_endian)).collect();
    let voxels = Array3::from_shape_vec((dims[2], dims[1], dims[0]), values)
        .map_err(|e| Error::integrity(&raw_path, e.to_string()))?;
    let series_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    CtVolume::new(voxels, [spacing[0], spacing[1], spacing[2]], [origin[0], origin[1], origin[2]], series_id)
}

/// Writes `v` as `<path>` (header) plus a sibling `.raw` file.
pub fn write_volume(path: &Path, v: &CtVolume, etype: ElementType) -> Result<()> {
    let [nx, ny, nz] = v.dims_xyz();
    let raw_name = path.with_extension("raw");
    let raw_file = raw_name
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Parameter(format!("bad output path {}", path.display())))?;
    let [sx, sy, sz] = v.spacing();
    let [ox, oy, oz] = v.origin();
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         TransformMatrix = 1 0 0 0 1 0 0 0 1\nOffset = {ox} {oy} {oz}\nCenterOfRotation = 0 0 0\n\
         AnatomicalOrientation = RAI\nElementSpacing = {sx} {sy} {sz}\nDimSize = {nx} {ny} {nz}\n\
         ElementType = {}\nElementDataFile = {raw_file}\n",
        etype.tag()
    );
    let mut data = Vec::with_capacity(nx * ny * nz * etype.size());
    for &val in v.voxels.iter() {
        etype.encode(val, &mut data);
    }
    fs::write(path, header)?;
    fs::write(raw_name, data)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_header(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("scan.mhd");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_metadata_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(
            dir.path(),
            "NDims = 3\nDimSize = 512 512 133\nElementSpacing = 0.78 0.78 2.5\nOffset = -10 -20 -300\n\
             ElementType = MET_SHORT\nElementDataFile = scan.raw\n",
        );
        fs::write(dir.path().join("scan.raw"), vec![0u8; 512 * 512 * 133 * 2]).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims_xyz(), [512, 512, 133]);
        assert_eq!(v.spacing(), [0.78, 0.78, 2.5]);
        assert_eq!(v.origin(), [-10.0, -20.0, -300.0]);
        assert_eq!(v.series_id, "scan");
    }

    #[test]
    fn short_raw_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(
            dir.path(),
            "NDims = 3\nDimSize = 4 4 4\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = scan.raw\n",
        );
        fs::write(dir.path().join("scan.raw"), vec![0u8; 4 * 4 * 4 * 2 - 1]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Integrity { .. })));
    }

    #[test]
    fn missing_fields_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(dir.path(), "NDims = 3\nElementType = MET_SHORT\nElementDataFile = scan.raw\n");
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
        let missing = dir.path().join("absent.mhd");
        assert!(matches!(load_volume(&missing), Err(Error::Format { .. })));
    }

    #[test]
    fn big_endian_and_local_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("local.mhd");
        let mut bytes = b"NDims = 3\nDimSize = 2 1 1\nElementSpacing = 1 1 1\nElementType = MET_SHORT\n\
ElementByteOrderMSB = True\nElementDataFile = LOCAL\n"
            .to_vec();
        bytes.extend_from_slice(&(-1000i16).to_be_bytes());
        bytes.extend_from_slice(&(42i16).to_be_bytes());
        fs::write(&p, bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.voxels.iter().cloned().collect::<Vec<_>>(), vec![-1000.0, 42.0]);
    }

    #[test]
    fn synthetic_volume_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let vox = Array3::from_shape_fn((4, 8, 8), |(z, y, x)| (z * 100 + y * 10 + x) as f32 - 500.0);
        let v = CtVolume::new(vox, [0.7, 0.8, 1.25], [-1.5, 2.0, -30.0], "rt").unwrap();
        for et in [ElementType::I16, ElementType::F32] {
            let p = dir.path().join("rt.mhd");
            write_volume(&p, &v, et).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back, v);
        }
    }
}
