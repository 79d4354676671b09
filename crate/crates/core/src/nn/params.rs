//! Named parameter storage shared by every model in the crate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Only convolution / linear weights take part in magnitude pruning.
    pub fn is_prunable(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Shape(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Ids whose name starts with `prefix`, in insertion order.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, e)| e.name.starts_with(prefix)).map(|(id, _)| id)
    }

    /// Trainable element count of every entry under `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, e)| e.kind.is_trainable() && e.name.starts_with(prefix))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    /// Copies every entry under `from` into this store, renamed under `to`.
    pub fn copy_prefix(&mut self, src: &ParamStore, from: &str, to: &str) -> Result<()> {
        for (_, e) in src.iter().filter(|(_, e)| e.name.starts_with(from)) {
            let name = format!("{to}{}", &e.name[from.len()..]);
            match self.id(&name) {
                Some(id) => {
                    if self.get(id).shape() != e.tensor.shape() {
                        return Err(Error::Shape(format!("shape mismatch copying into {name}")));
                    }
                    *self.get_mut(id) = e.tensor.clone();
                }
                None => {
                    self.add(name, e.kind, e.tensor.clone())?;
                }
            }
        }
        Ok(())
    }
}

/// Deterministic per-parameter generator: the same (seed, name) always
/// yields the same stream regardless of what else was initialised.
pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ fnv1a(name.as_bytes())))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Weight initialisation schemes used across the models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// He normal, fan-in mode.
    Kaiming { fan_in: usize },
    /// Glorot / Xavier uniform.
    Glorot { fan_in: usize, fan_out: usize },
}

impl Init {
    pub fn tensor(self, shape: &[usize], seed: u64, name: &str) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = init_rng(seed, name);
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::Glorot { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                let mut rng = init_rng(seed, name);
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        Tensor::from_vec(shape, data).expect("init shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Weight, Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", ParamKind::Bias, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn init_is_keyed_by_name() {
        let a = Init::Kaiming { fan_in: 9 }.tensor(&[4, 9], 7, "x.weight");
        let b = Init::Kaiming { fan_in: 9 }.tensor(&[4, 9], 7, "x.weight");
        let c = Init::Kaiming { fan_in: 9 }.tensor(&[4, 9], 7, "y.weight");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn count_skips_running_stats() {
        let mut s = ParamStore::new();
        s.add("bn.weight", ParamKind::NormScale, Tensor::zeros(&[3])).unwrap();
        s.add("bn.running_mean", ParamKind::RunningMean, Tensor::zeros(&[3])).unwrap();
        assert_eq!(s.count_trainable(""), 3);
    }
}
