//! Content-hash keys and stage manifests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Result;

/// Incremental SHA-256 over named, length-prefixed fields.
pub struct KeyBuilder(Sha256);

impl KeyBuilder {
    pub fn new(stage: &str) -> Self {
        let mut k = Self(Sha256::new());
        k.bytes("version", env!("CARGO_PKG_VERSION").as_bytes());
        k.bytes("stage", stage.as_bytes());
        k
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> &mut Self {
        for part in [name.as_bytes(), data] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part);
        }
        self
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<&mut Self> {
        let v = serde_json::to_vec(value)?;
        Ok(self.bytes(name, &v))
    }

    pub fn finish(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

pub fn sha256_bytes(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Stable 64-bit seed derived from a base seed and a tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Size and modification time of an input file with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStamp {
    pub path: PathBuf,
    pub len: u64,
    pub mtime_ns: u128,
    pub sha256: String,
}

fn stat(path: &Path) -> Result<(u64, u128)> {
    let md = fs::metadata(path)?;
    let mtime = md
        .modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_nanos());
    Ok((md.len(), mtime))
}

/// Stamps `path`, reusing a previous hash when size and mtime are unchanged.
pub fn stamp(path: &Path, previous: &[SourceStamp]) -> Result<SourceStamp> {
    let (len, mtime_ns) = stat(path)?;
    if let Some(p) = previous.iter().find(|p| p.path == path && p.len == len && p.mtime_ns == mtime_ns) {
        return Ok(p.clone());
    }
    Ok(SourceStamp {
        path: path.to_path_buf(),
        len,
        mtime_ns,
        sha256: sha256_file(path)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub key: String,
    /// Output files relative to the manifest's directory.
    pub outputs: Vec<String>,
    #[serde(default)]
    pub sources: Vec<SourceStamp>,
    #[serde(default)]
    pub info: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, key: &str) -> Self {
        Self {
            stage: stage.into(),
            key: key.into(),
            outputs: Vec::new(),
            sources: Vec::new(),
            info: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Option<Self>> {
        match fs::read(path) {
            Ok(b) => Ok(serde_json::from_slice(&b).ok()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes atomically through a temporary sibling.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// True when the key matches and every output is present.
    pub fn is_current(&self, key: &str, dir: &Path) -> bool {
        self.key == key && self.outputs.iter().all(|o| dir.join(o).exists())
    }
}

/// Manifest at `path` if it is current for `key`.
pub fn current(path: &Path, key: &str) -> Result<Option<Manifest>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(Manifest::read(path)?.filter(|m| m.is_current(key, dir)))
}
