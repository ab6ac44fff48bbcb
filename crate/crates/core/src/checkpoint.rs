//! Directory checkpoints: `manifest.json` plus one little-endian `f32` blob
//! per tensor. Writes go to a sibling temp directory that is renamed into
//! place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::optim::AdamW;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    config_hash: String,
    config: serde_json::Value,
    step: u64,
    losses: Vec<f64>,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub losses: Vec<f64>,
    pub extra: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

/// SHA-256 of the compact JSON encoding, hex.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json values always encode");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            step: 0,
            losses: Vec::new(),
            extra: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
    }

    pub fn push_optimizer(&mut self, prefix: &str, store: &ParamStore, opt: &AdamW) {
        for ((name, t), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            for (tag, buf) in [("m", m), ("v", v)] {
                self.tensors.push(NamedTensor {
                    name: format!("{prefix}{tag}/{name}"),
                    shape: t.shape().to_vec(),
                    data: buf.clone(),
                });
            }
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    /// Copies values into every tensor of `store`, matched by name and shape.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let src = self.tensor(&name)?;
            let dst = store.get_mut(id);
            if src.shape != dst.shape() {
                return Err(Error::Format(format!("{name}: shape {:?} vs {:?}", src.shape, dst.shape())));
            }
            let restored = Tensor::new(src.shape.clone(), src.data.clone())?;
            dst.data_mut().copy_from_slice(restored.data());
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, prefix: &str, store: &ParamStore, opt: &mut AdamW) -> Result<()> {
        for (slot, (name, _)) in store.iter().enumerate() {
            opt.m[slot] = self.tensor(&format!("{prefix}m/{name}"))?.data.clone();
            opt.v[slot] = self.tensor(&format!("{prefix}v/{name}"))?.data.clone();
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let base = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into());
        let tmp = parent.join(format!(".{base}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (i, t) in self.tensors.iter().enumerate() {
            let file = format!("t{i:05}.bin");
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(tmp.join(&file), bytes)?;
            entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), file });
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            config_hash: self.config_hash(),
            config: self.config.clone(),
            step: self.step,
            losses: self.losses.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        fs::write(tmp.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        let old: Option<PathBuf> = if dir.exists() {
            let o = parent.join(format!(".{base}.old-{}", std::process::id()));
            if o.exists() {
                fs::remove_dir_all(&o)?;
            }
            fs::rename(dir, &o)?;
            Some(o)
        } else {
            None
        };
        fs::rename(&tmp, dir)?;
        if let Some(o) = old {
            fs::remove_dir_all(o)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                manifest.format_version
            )));
        }
        if config_hash(&manifest.config) != manifest.config_hash {
            return Err(Error::Format("config hash does not match the stored config".into()));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let bytes = fs::read(dir.join(&e.file))?;
            let n: usize = e.shape.iter().product();
            if bytes.len() != n * 4 {
                return Err(Error::Format(format!("{}: {} bytes, expected {}", e.file, bytes.len(), n * 4)));
            }
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data });
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            step: manifest.step,
            losses: manifest.losses,
            extra: manifest.extra,
            tensors,
        })
    }

    /// Fails unless the stored config hashes to the same value as `config`.
    pub fn ensure_config(&self, config: &serde_json::Value) -> Result<()> {
        if config_hash(config) != self.config_hash() {
            return Err(Error::InvalidState(format!(
                "checkpoint was written with a different {} config; refusing to resume",
                self.kind
            )));
        }
        Ok(())
    }
}
