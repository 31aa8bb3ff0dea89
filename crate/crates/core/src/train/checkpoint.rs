//! Checkpoint files: a magic line, one line of JSON describing the run and
//! every tensor (name, shape, byte offset), then the raw little-endian `f64`
//! blobs. Adam moments are stored next to each parameter so training can
//! resume exactly.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SlotModel};

pub const CHECKPOINT_MAGIC: &str = "PARTAFFORD-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Resumable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32 seed bytes, hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("unreadable rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Where a run stood when the checkpoint was written.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub best_iou: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Training stream, positioned at the start of the next epoch.
    pub rng: Option<RngState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Blob {
    Value,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    blob: Blob,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    progress: Progress,
    /// Adam step count of each parameter, in registration order.
    adam_steps: Vec<u64>,
    tensors: Vec<TensorEntry>,
    data_bytes: u64,
}

/// A model with the run state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SlotModel,
    pub train: Option<TrainConfig>,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut adam_steps = Vec::new();
        for (_, p) in self.model.params.iter() {
            let (m, v) = p.adam_moments();
            adam_steps.push(p.step_count());
            for (blob, values) in [(Blob::Value, p.value().data()), (Blob::AdamM, m), (Blob::AdamV, v)] {
                tensors.push(TensorEntry {
                    name: p.name().to_string(),
                    blob,
                    shape: p.value().shape().to_vec(),
                    offset: data.len() as u64,
                });
                for x in values {
                    data.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            progress: self.progress.clone(),
            adam_steps,
            tensors,
            data_bytes: data.len() as u64,
        };
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
        out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let line_end = |from: usize| {
            bytes[from..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|p| from + p)
                .ok_or(Error::Truncated {
                    expected: bytes.len() + 1,
                    found: bytes.len(),
                })
        };
        let first = line_end(0)?;
        let magic = std::str::from_utf8(&bytes[..first]).map_err(|_| Error::Format("binary magic line".into()))?;
        let version = magic
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Format(format!("not a checkpoint: {magic:?}")))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let second = line_end(first + 1)?;
        let header: Header = serde_json::from_slice(&bytes[first + 1..second])?;
        let data = &bytes[second + 1..];
        let want = header.data_bytes as usize;
        if data.len() < want {
            return Err(Error::Truncated {
                expected: second + 1 + want,
                found: bytes.len(),
            });
        }
        if data.len() > want {
            return Err(Error::Format(format!("{} bytes after the tensor data", data.len() - want)));
        }

        let mut model = SlotModel::new(header.model)?;
        if header.tensors.len() != 3 * model.params.len() || header.adam_steps.len() != model.params.len() {
            return Err(Error::Format(format!(
                "{} tensors for a model with {} parameters",
                header.tensors.len(),
                model.params.len()
            )));
        }
        let read = |e: &TensorEntry, len: usize| -> Result<Vec<f64>> {
            let start = e.offset as usize;
            let end = start + 8 * len;
            if end > data.len() {
                return Err(Error::Format(format!("{} extends past the data", e.name)));
            }
            Ok(data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let ids: Vec<_> = model.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let entries = &header.tensors[3 * k..3 * k + 3];
            let p = model.params.get_mut(id);
            let shape = p.value().shape().to_vec();
            let len = p.value().len();
            for (e, blob) in entries.iter().zip([Blob::Value, Blob::AdamM, Blob::AdamV]) {
                if e.name != p.name() || e.blob != blob || e.shape != shape {
                    return Err(Error::Format(format!(
                        "tensor {} ({:?} {:?}) where {} {:?} was expected",
                        e.name, e.blob, e.shape, p.name(), shape
                    )));
                }
            }
            let value = read(&entries[0], len)?;
            let (m, v) = (read(&entries[1], len)?, read(&entries[2], len)?);
            *p.value_mut() = crate::tensor::Tensor::new(&shape, value)?;
            p.set_state(m, v, header.adam_steps[k]);
        }
        Ok(Self {
            model,
            train: header.train,
            progress: header.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
