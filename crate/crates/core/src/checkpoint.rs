//! Single-file checkpoints: a TOML header followed by named arrays.
//!
//! Layout (little-endian): magic, `u32` header length, header TOML, `u32`
//! array count, then per array `u16` name length, name, `u8` rank, `u64`
//! dims, `f64` values. Parameters are stored as `param/<name>`, optimizer
//! moments as `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{GaField, ModelConfig};
use crate::tensor::{Array, Real};
use crate::training::{OptimizerState, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"GAFCKPT1";

/// What a model predicts and how its outputs are scaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInfo {
    pub spec: TaskSpec,
    pub normalizer: Normalizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub best_val: Option<Real>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: GaField,
    pub task: Option<TaskInfo>,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<TaskInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_val: Option<Real>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, task: Option<TaskInfo>) -> Self {
        Self {
            model: trainer.model.clone(),
            task,
            training: Some(TrainingState {
                config: trainer.config.clone(),
                optimizer: trainer.optimizer.clone(),
                epoch: trainer.epoch,
                best_val: trainer.best_val,
            }),
        }
    }

    /// A trainer continuing from this checkpoint; fresh optimizer if none was saved.
    pub fn into_trainer(self, config: Option<TrainConfig>) -> Result<Trainer> {
        match self.training {
            Some(t) => Ok(Trainer {
                model: self.model,
                config: config.unwrap_or(t.config),
                optimizer: t.optimizer,
                epoch: t.epoch,
                best_val: t.best_val,
            }),
            None => Trainer::new(self.model, config.unwrap_or_default()),
        }
    }

    pub fn task(&self) -> Result<&TaskInfo> {
        self.task
            .as_ref()
            .ok_or_else(|| Error::format("checkpoint does not record its task"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config.clone(),
            task: self.task.clone(),
            train: self.training.as_ref().map(|t| TrainHeader {
                config: t.config.clone(),
                epoch: t.epoch,
                step: t.optimizer.step,
                best_val: t.best_val,
            }),
        };
        let text = toml::to_string(&header).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let mut arrays: Vec<(String, &Array)> = Vec::new();
        for (name, a) in self.model.params.iter() {
            arrays.push((format!("param/{name}"), a));
        }
        if let Some(t) = &self.training {
            for (k, (name, _)) in self.model.params.iter().enumerate() {
                arrays.push((format!("adam.m/{name}"), &t.optimizer.m[k]));
                arrays.push((format!("adam.v/{name}"), &t.optimizer.v[k]));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, a) in arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.rank() as u8);
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("checkpoint header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format("array name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("array too large"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::format("array too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as Real)
                .collect();
            if arrays.insert(name.clone(), Array::new(shape, data)?).is_some() {
                return Err(Error::format(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint arrays"));
        }

        let mut model = GaField::new(header.model, 0)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut take = |key: String, like: &Array| -> Result<Array> {
            let a = arrays
                .remove(&key)
                .ok_or_else(|| Error::format(format!("checkpoint is missing {key}")))?;
            if a.shape() != like.shape() {
                return Err(Error::format(format!(
                    "{key} has shape {:?}, the config implies {:?}",
                    a.shape(),
                    like.shape()
                )));
            }
            Ok(a)
        };
        for (k, name) in names.iter().enumerate() {
            let a = take(format!("param/{name}"), &model.params.values()[k])?;
            model.params.values_mut()[k] = a;
        }
        let training = match header.train {
            Some(t) => {
                let mut optimizer = OptimizerState::new(model.params.values());
                for (k, name) in names.iter().enumerate() {
                    optimizer.m[k] = take(format!("adam.m/{name}"), &model.params.values()[k])?;
                    optimizer.v[k] = take(format!("adam.v/{name}"), &model.params.values()[k])?;
                }
                optimizer.step = t.step;
                Some(TrainingState {
                    config: t.config,
                    optimizer,
                    epoch: t.epoch,
                    best_val: t.best_val,
                })
            }
            None => None,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::format(format!("checkpoint has unexpected array {extra}")));
        }
        Ok(Self {
            model,
            task: header.task,
            training,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureRecipe, Task};

    fn micro() -> ModelConfig {
        ModelConfig {
            grid_sizes: vec![0.4, 0.8],
            channels: vec![8, 8],
            blocks_per_stage: 1,
            group_size: 4,
            token_size: 0.6,
            embed_width: 8,
            ..ModelConfig::default()
        }
    }

    fn trainer() -> Trainer {
        let mut t = Trainer::new(GaField::new(micro(), 9).unwrap(), TrainConfig::desk()).unwrap();
        for (k, m) in t.optimizer.m.iter_mut().enumerate() {
            *m = m.map(|_| 0.1 * k as Real + 1e-3);
        }
        t.optimizer.step = 17;
        t.epoch = 3;
        t.best_val = Some(0.125);
        t
    }

    fn task() -> TaskInfo {
        TaskInfo {
            spec: TaskSpec::new(Task::Pressure, [1.0, 0.0, 0.0], FeatureRecipe::Surface).unwrap(),
            normalizer: Normalizer::pressure(),
        }
    }

    #[test]
    fn round_trip() {
        let t = trainer();
        let ck = Checkpoint::from_trainer(&t, Some(task()));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.config, t.model.config);
        assert_eq!(back.model.params.values(), t.model.params.values());
        assert_eq!(back.task, Some(task()));
        let state = back.training.clone().unwrap();
        assert_eq!(state.optimizer, t.optimizer);
        assert_eq!((state.epoch, state.best_val), (3, Some(0.125)));
        assert_eq!(state.config, TrainConfig::desk());
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let bare = Checkpoint {
            model: t.model.clone(),
            task: None,
            training: None,
        };
        let back = Checkpoint::from_bytes(&bare.to_bytes().unwrap()).unwrap();
        assert!(back.training.is_none() && back.task.is_none());
        assert!(back.task().is_err());
    }

    #[test]
    fn rejects_damage() {
        let bytes = Checkpoint::from_trainer(&trainer(), None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn shapes_are_validated_against_config() {
        let bytes = Checkpoint::from_trainer(&trainer(), None).to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        let edited = text.replace("embed_width = 8", "embed_width = 12");
        assert_ne!(edited, text);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[12 + len..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = Checkpoint::from_trainer(&trainer(), Some(task()));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        let resumed = back.into_trainer(None).unwrap();
        assert_eq!(resumed.epoch, 3);
        assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
    }
}
