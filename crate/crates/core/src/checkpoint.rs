//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `DEARCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! tensor followed by every Adam first moment and every second moment, all as
//! little-endian `f32` in header order. Saving a loaded checkpoint reproduces
//! the original bytes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{DearError, Result};
use crate::nn::ParamStore;
use crate::trainer::{EpochMetrics, TrainConfig};

pub const MAGIC: &[u8; 8] = b"DEARCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (a `u128`).
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

    pub fn restore(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).unwrap_or(0);
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }

    fn validate(&self) -> bool {
        self.seed.len() == 64
            && self.seed.bytes().all(|b| b.is_ascii_hexdigit())
            && self.word_pos.parse::<u128>().is_ok()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    rng: RngState,
    history: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochMetrics>,
    pub params: ParamStore<f32>,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            adam_step: self.adam_step,
            rng: self.rng.clone(),
            history: self.history.clone(),
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let floats = 3 * self.params.num_elements();
        let mut out = Vec::with_capacity(20 + json.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in [self.params.tensors(), &self.adam_m[..], &self.adam_v[..]] {
            for t in group {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| DearError::format(path, m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
        if !header.rng.validate() {
            return Err(bad("malformed RNG state"));
        }
        let mut data = &body[hlen..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if data.len() != 12 * total {
            return Err(bad(&format!("expected {} tensor bytes, found {}", 12 * total, data.len())));
        }
        let mut read_group = || -> Result<Vec<Tensor<f32>>> {
            header
                .tensors
                .iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let (chunk, rest) = data.split_at(4 * n);
                    data = rest;
                    let vals = chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::new(&e.shape, vals)
                })
                .collect()
        };
        let params_t = read_group()?;
        let adam_m = read_group()?;
        let adam_v = read_group()?;
        let mut params = ParamStore::new();
        for (e, t) in header.tensors.iter().zip(params_t) {
            params.add(e.name.clone(), t);
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            history: header.history,
            params,
            adam_step: header.adam_step,
            adam_m,
            adam_v,
        })
    }

    /// Writes via a temporary file and rename so an interrupted save never
    /// clobbers an existing checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| DearError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| DearError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DearError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
