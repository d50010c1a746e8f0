//! The `SCLC` checkpoint container.
//!
//! Layout: 4-byte magic `SCLC`, u32 LE version, u64 LE header length, a UTF-8
//! JSON header, then raw f32 LE tensors in lexicographic name order. The
//! header's tensor directory gives each tensor's dtype, shape and byte range
//! relative to the start of the payload.
//!
//! Training checkpoints carry the AdamW moments as `optim.m.<param>` and
//! `optim.v.<param>` plus both random stream positions, which is everything a
//! resumed run needs to continue step for step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coordination::{RngState, Teacher, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{param_layout, ModelConfig, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCLC";
pub const VERSION: u32 = 1;

const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Full-width network trained with cross-entropy only.
    Teacher,
    /// Slimmable network mid- or post-training.
    Scala,
    /// Standalone copy of one sub-network.
    Export,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    pub optim_step: u64,
    pub sampler_rng: RngState,
    pub data_rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub train_hash: Option<String>,
    pub epoch: u32,
    pub state: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the canonical JSON form of a training config.
pub fn train_config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("train config serializes");
    hex::encode(Sha256::digest(json))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn store_tensors<T: Real>(store: &ParamStore<T>) -> BTreeMap<String, Tensor<f32>> {
    store
        .iter()
        .map(|(name, p)| {
            let t = p.tensor.cast::<f32>();
            let shape = t.shape().to_vec();
            (name.clone(), Tensor::new(shape, t.into_data()).expect("same shape"))
        })
        .collect()
}

impl Checkpoint {
    pub fn teacher<T: Real>(teacher: &Teacher<T>, train: &TrainConfig, epoch: u32) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Teacher,
                model: teacher.cfg.clone(),
                train: Some(train.clone()),
                train_hash: Some(train_config_hash(train)),
                epoch,
                state: None,
            },
            tensors: store_tensors(&teacher.store),
        }
    }

    pub fn export<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Export,
                model: cfg.clone(),
                train: None,
                train_hash: None,
                epoch: 0,
                state: None,
            },
            tensors: store_tensors(store),
        }
    }

    pub fn from_trainer(trainer: &Trainer<f32>) -> Self {
        let mut tensors = store_tensors(trainer.store());
        for (name, (m, v)) in trainer.optimizer().moments() {
            let shape = trainer.store().get(name).expect("moments track params").tensor.shape().to_vec();
            let mk = |data: &Vec<f32>| Tensor::new(shape.clone(), data.clone()).expect("moment shape");
            tensors.insert(format!("{MOMENT_M}{name}"), mk(m));
            tensors.insert(format!("{MOMENT_V}{name}"), mk(v));
        }
        let train = trainer.train_config().clone();
        Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Scala,
                model: trainer.model().clone(),
                train_hash: Some(train_config_hash(&train)),
                train: Some(train),
                epoch: trainer.epoch(),
                state: Some(TrainingState {
                    optim_step: trainer.optimizer().steps(),
                    sampler_rng: trainer.sampler_rng(),
                    data_rng: trainer.data_rng(),
                }),
            },
            tensors,
        }
    }

    /// Model parameters (everything but optimizer moments), checked against
    /// the layout of the stored model config.
    pub fn param_store<T: Real>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for def in param_layout(&self.meta.model) {
            let t = self
                .tensors
                .get(&def.name)
                .ok_or_else(|| Error::validation("checkpoint", format!("missing tensor {}", def.name)))?;
            store.insert(def.name, t.cast::<T>(), def.roles)?;
        }
        store.check_layout(&self.meta.model)?;
        let extra = self
            .tensors
            .keys()
            .find(|k| !k.starts_with("optim.") && store.get(k).is_err());
        if let Some(name) = extra {
            return Err(Error::validation("checkpoint", format!("unexpected tensor {name}")));
        }
        Ok(store)
    }

    pub fn into_teacher<T: Real>(&self) -> Result<Teacher<T>> {
        Ok(Teacher {
            store: self.param_store()?,
            cfg: self.meta.model.clone(),
        })
    }

    /// Rebuilds the trainer of a `Scala` checkpoint. `teacher` must be the
    /// same external teacher the run started with, if any.
    pub fn into_trainer(&self, teacher: Option<Teacher<f32>>) -> Result<Trainer<f32>> {
        let bad = |why: &str| Error::validation("checkpoint", why.to_string());
        if self.meta.kind != CheckpointKind::Scala {
            return Err(bad("not a training checkpoint"));
        }
        let train = self.meta.train.clone().ok_or_else(|| bad("no train config"))?;
        let state = self.meta.state.as_ref().ok_or_else(|| bad("no training state"))?;
        let store = self.param_store::<f32>()?;
        let mut moments = BTreeMap::new();
        for name in store.names() {
            let m = self.tensors.get(&format!("{MOMENT_M}{name}"));
            let v = self.tensors.get(&format!("{MOMENT_V}{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    moments.insert(name.to_string(), (m.data().to_vec(), v.data().to_vec()));
                }
                (None, None) => {}
                _ => return Err(bad("optimizer moments incomplete")),
            }
        }
        let mut optim = train.optimizer::<f32>();
        optim.restore(state.optim_step, moments);
        Trainer::resume(
            self.meta.model.clone(),
            train,
            store,
            optim,
            &state.sampler_rng,
            &state.data_rng,
            self.meta.epoch,
            teacher,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let length = t.numel() as u64 * 4;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: f32::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: String| Error::format(path, why);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not an SCLC checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[hend..];
        let mut tensors = BTreeMap::new();
        let mut expect_offset = 0u64;
        let mut prev: Option<&str> = None;
        for e in &header.tensors {
            if prev.is_some_and(|p| p >= e.name.as_str()) {
                return Err(bad(format!("tensor {} out of name order", e.name)));
            }
            prev = Some(&e.name);
            if e.dtype != f32::DTYPE {
                return Err(bad(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != numel as u64 * 4 || e.offset != expect_offset {
                return Err(bad(format!("tensor {} has an inconsistent byte range", e.name)));
            }
            expect_offset += e.length;
            let raw = payload
                .get(e.offset as usize..(e.offset + e.length) as usize)
                .ok_or_else(|| bad(format!("tensor {} is truncated", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        if expect_offset != payload.len() as u64 {
            return Err(bad(format!(
                "payload is {} bytes, directory covers {expect_offset}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Replaces `path` with `bytes` so readers see either the old or the new
/// file, never a partial one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation("path", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::slicing::RatioGrid;

    fn toy() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 1,
            embed_dim: 16,
            num_heads: 2,
            depth: 1,
            mlp_ratio: 4,
            num_classes: 3,
            grid: Some(RatioGrid::parse("1/4", "1", "1/4").unwrap()),
            isolated_activation: true,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let cfg = toy();
        let store = init_params::<f32>(&cfg, 5).unwrap();
        let ck = Checkpoint::export(&cfg, &store);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SCLC");
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let restored = back.param_store::<f32>().unwrap();
        for (name, p) in store.iter() {
            let q = restored.get(name).unwrap();
            let same = p.tensor.data().iter().zip(q.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name}");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = toy();
        let ck = Checkpoint::export(&cfg, &init_params::<f32>(&cfg, 5).unwrap());
        let bytes = ck.to_bytes();
        let p = Path::new("broken.sclc");
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b, p).unwrap_err().to_string().contains("broken.sclc"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut b = bytes.clone();
        b.push(0);
        assert!(Checkpoint::from_bytes(&b, p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10], p).is_err());
    }

    #[test]
    fn atomic_save_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.sclc");
        let cfg = toy();
        let ck = Checkpoint::export(&cfg, &init_params::<f32>(&cfg, 1).unwrap());
        ck.save(&path).unwrap();
        ck.save(&path).unwrap();
        let names: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
