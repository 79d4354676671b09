//! Self-describing checkpoint container.
//!
//! Layout: magic `XLCK`, format version (u32 LE), header length (u64 LE),
//! JSON header, little-endian f64 payload, then the SHA-256 of everything
//! before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Masks, ParamStore, Sgd, Tensor};

const MAGIC: &[u8; 4] = b"XLCK";
const FORMAT_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Phase1,
    Expanded,
    Squeezed,
    Pruned,
    Teacher,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Phase1 => "phase1",
            StageTag::Expanded => "expanded",
            StageTag::Squeezed => "squeezed",
            StageTag::Pruned => "pruned",
            StageTag::Teacher => "teacher",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Momentum,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config_hash: String,
    pub stage: StageTag,
    /// Completed steps of the stage.
    pub step: usize,
    pub seed: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<(TensorRole, String), Tensor>,
}

impl Checkpoint {
    /// Snapshot of a store plus optional optimiser slots and masks.
    pub fn capture(
        stage: StageTag,
        step: usize,
        config_hash: &str,
        seed: u64,
        store: &ParamStore,
        opt: Option<&Sgd>,
        masks: Option<&Masks>,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        for (_, e) in store.iter() {
            tensors.insert((TensorRole::Param, e.name.clone()), e.tensor.clone());
        }
        if let Some(opt) = opt {
            for (id, buf) in opt.buffers() {
                tensors.insert((TensorRole::Momentum, store.entry(*id).name.clone()), buf.clone());
            }
        }
        if let Some(masks) = masks {
            for (id, m) in masks {
                let data = m.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                let shape = store.get(*id).shape().to_vec();
                tensors.insert((TensorRole::Mask, store.entry(*id).name.clone()), Tensor::from_vec(&shape, data).expect("mask matches"));
            }
        }
        let header = CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            stage,
            step,
            seed,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        };
        Self { header, tensors }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.header.meta.insert(key.to_string(), value.to_string());
        self
    }

    /// Refuses a checkpoint written under a different config unless forced.
    pub fn check_config(&self, config_hash: &str, force: bool) -> Result<()> {
        if self.header.config_hash != config_hash && !force {
            return Err(Error::ConfigHashMismatch {
                expected: config_hash.to_string(),
                found: self.header.config_hash.clone(),
            });
        }
        Ok(())
    }

    fn tensor(&self, role: TensorRole, name: &str) -> Option<&Tensor> {
        self.tensors.get(&(role, name.to_string()))
    }

    /// Overwrites every store entry from the checkpoint; all must be present.
    pub fn restore_store(&self, store: &mut ParamStore, path: &Path) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = store.entry(id).name.clone();
            let t = self.tensor(TensorRole::Param, &name).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("missing tensor {name}"),
            })?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    message: format!("{name}: shape {:?} vs model {:?}", t.shape(), store.get(id).shape()),
                });
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Copies the tensors stored under `from` into the store under `to`.
    pub fn restore_prefix(&self, store: &mut ParamStore, from: &str, to: &str, path: &Path) -> Result<()> {
        let ids: Vec<_> = store.ids_with_prefix(to).collect();
        if ids.is_empty() {
            return Err(Error::Checkpoint { path: path.to_path_buf(), message: format!("model has nothing under {to}") });
        }
        for id in ids {
            let name = store.entry(id).name.clone();
            let src = format!("{from}{}", &name[to.len()..]);
            let t = self.tensor(TensorRole::Param, &src).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("missing tensor {src}"),
            })?;
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, store: &ParamStore, opt: &mut Sgd) {
        for (id, e) in store.iter() {
            if let Some(t) = self.tensor(TensorRole::Momentum, &e.name) {
                opt.set_buffer(id, t.clone());
            }
        }
    }

    pub fn restore_masks(&self, store: &ParamStore) -> Option<Masks> {
        let mut masks = Masks::new();
        for (id, e) in store.iter() {
            if let Some(t) = self.tensor(TensorRole::Mask, &e.name) {
                masks.insert(id, t.data().iter().map(|v| *v != 0.0).collect());
            }
        }
        (!masks.is_empty()).then_some(masks)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.tensors.clear();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        for ((role, name), t) in &self.tensors {
            header.tensors.push(TensorEntry { name: name.clone(), role: *role, shape: t.shape().to_vec(), offset });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel();
        }
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint { path: path.to_path_buf(), message };
        if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic or too short)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted file)".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| bad("header runs past end".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(bad(format!("unsupported schema version {}", header.schema_version)));
        }
        let payload = &body[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 8;
            let raw = payload.get(start..start + n * 8).ok_or_else(|| bad(format!("{} runs past end", entry.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert((entry.role, entry.name.clone()), Tensor::from_vec(&entry.shape, data)?);
        }
        Ok(Self { header, tensors })
    }
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", ParamKind::Weight, Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap()).unwrap();
        s.add("a.rm", ParamKind::RunningMean, Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        let mut opt = Sgd::new(0.9, 0.0);
        opt.set_buffer(s.id("a.w").unwrap(), Tensor::full(&[2, 2], 0.5));
        let mut masks = Masks::new();
        masks.insert(s.id("a.w").unwrap(), vec![true, false, true, true]);
        let c = Checkpoint::capture(StageTag::Pruned, 17, "abc", 3, &s, Some(&opt), Some(&masks)).with_meta("k", 1);
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        let mut s2 = store();
        s2.get_mut(s2.id("a.w").unwrap()).scale(0.0);
        back.restore_store(&mut s2, Path::new("x")).unwrap();
        assert_eq!(s2, s);
        assert_eq!(back.restore_masks(&s2).unwrap(), masks);
        let mut opt2 = Sgd::new(0.9, 0.0);
        back.restore_optimizer(&s2, &mut opt2);
        assert_eq!(opt2.buffers(), opt.buffers());
        assert_eq!(back.header.step, 17);
        assert_eq!(back.header.meta["k"], "1");
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let c = Checkpoint::capture(StageTag::Expanded, 1, "h", 0, &store(), None, None);
        let bytes = c.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped, Path::new("x")).is_err());
    }

    #[test]
    fn config_hash_guard() {
        let c = Checkpoint::capture(StageTag::Expanded, 1, "h1", 0, &store(), None, None);
        assert!(matches!(c.check_config("h2", false), Err(Error::ConfigHashMismatch { .. })));
        assert!(c.check_config("h2", true).is_ok());
        assert!(c.check_config("h1", false).is_ok());
    }
}
