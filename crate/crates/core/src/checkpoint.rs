//! Binary training snapshots.
//!
//! Layout: the 8-byte magic `CAMODIFF`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the raw
//! little-endian `f32` data of every tensor in header order. Tensors are
//! named `param/<name>`, `adam_m/<name>` and `adam_v/<name>` and sorted, so
//! equal states serialize to equal bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CAMODIFF";
pub const FORMAT_VERSION: u32 = 1;
pub const LATEST_FILE: &str = "latest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BaseRes,
    FinetuneRes,
}

/// Training progress outside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs over both phases.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub global_step: u64,
    pub rng_seed: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub params: BTreeMap<String, Tensor>,
    /// First and second Adam moments by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
    pub optimizer_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: String,
    state: TrainState,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    fn tensors(&self) -> BTreeMap<String, &Tensor> {
        let mut all = BTreeMap::new();
        for (name, t) in &self.params {
            all.insert(format!("param/{name}"), t);
        }
        for (name, (m, v)) in &self.moments {
            all.insert(format!("adam_m/{name}"), m);
            all.insert(format!("adam_v/{name}"), v);
        }
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            config: self.config.to_toml_string()?,
            state: self.state.clone(),
            optimizer_step: self.optimizer_step,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.dims().to_vec() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| ckpt_err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in tensors.values() {
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let take = |at: usize, n: usize| -> Result<&[u8]> {
            bytes.get(at..at + n).ok_or_else(|| ckpt_err("truncated file"))
        };
        if take(0, 8)? != MAGIC {
            return Err(ckpt_err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(take(12, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(20, header_len)?).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
        let config = RunConfig::from_toml_str(&header.config)?;
        let mut at = 20 + header_len;
        let mut params = BTreeMap::new();
        let mut m_map = BTreeMap::new();
        let mut v_map = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = take(at, 4 * n)?;
            at += 4 * n;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::from_vec(data, entry.shape.as_slice(), device)?;
            let (kind, name) = entry.name.split_once('/').ok_or_else(|| ckpt_err(format!("bad tensor name `{}`", entry.name)))?;
            let target = match kind {
                "param" => &mut params,
                "adam_m" => &mut m_map,
                "adam_v" => &mut v_map,
                other => return Err(ckpt_err(format!("unknown tensor group `{other}`"))),
            };
            target.insert(name.to_string(), t);
        }
        if at != bytes.len() {
            return Err(ckpt_err(format!("{} trailing bytes", bytes.len() - at)));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m_map {
            let v = v_map.remove(&name).ok_or_else(|| ckpt_err(format!("second moment missing for `{name}`")))?;
            moments.insert(name, (m, v));
        }
        if let Some(name) = v_map.keys().next() {
            return Err(ckpt_err(format!("first moment missing for `{name}`")));
        }
        Ok(Checkpoint {
            config,
            state: header.state,
            params,
            moments,
            optimizer_step: header.optimizer_step,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("bin.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, device).map_err(|e| match e {
            Error::Checkpoint(msg) => ckpt_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// `ckpt_{epoch:04}.bin`
pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch:04}.bin")
}

/// Records `file` as the newest checkpoint of `dir`.
pub fn write_latest(dir: &Path, file: &str) -> Result<()> {
    std::fs::write(dir.join(LATEST_FILE), format!("{file}\n"))?;
    Ok(())
}

/// Path of the newest checkpoint recorded in `dir`.
pub fn read_latest(dir: &Path) -> Result<PathBuf> {
    let name = std::fs::read_to_string(dir.join(LATEST_FILE))?;
    let name = name.trim();
    if name.is_empty() || name.contains('/') {
        return Err(ckpt_err(format!("bad `latest` pointer in {}", dir.display())));
    }
    Ok(dir.join(name))
}

/// Accepts a checkpoint file or a run directory with a `latest` pointer.
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        read_latest(path)
    } else {
        Ok(path.to_path_buf())
    }
}
