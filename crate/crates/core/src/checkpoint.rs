//! Model checkpoints.
//!
//! A checkpoint is a UTF-8 header followed by raw little-endian arrays:
//!
//! ```text
//! stepcount-checkpoint v1
//! model_config {...json...}
//! train_config {...json...}
//! preprocess {"input":"l2","downsample":4}
//! seed 42
//! epoch 80
//! arrays 11
//! END
//! ```
//!
//! After the `END\n` line each array is `u32 name_len`, the name bytes,
//! `u32 rows`, `u32 cols` and `rows*cols` `f64` values, all little-endian, in
//! [`ModelParams::tensors`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numkern::Matrix;
use crate::pipeline::InputMode;
use crate::train::TrainConfig;

pub const MAGIC: &str = "stepcount-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// How raw recordings were turned into model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocess {
    pub input: InputMode,
    pub downsample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub preprocess: Preprocess,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub params: ModelParams,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check(&self.model_config)?;
        let names = self.params.tensor_names();
        let tensors = self.params.tensors();
        let mut out = format!(
            "{MAGIC} v{FORMAT_VERSION}\nmodel_config {}\ntrain_config {}\npreprocess {}\nseed {}\nepoch {}\narrays {}\nEND\n",
            json(&self.model_config)?,
            json(&self.train_config)?,
            json(&self.preprocess)?,
            self.seed,
            self.epoch,
            tensors.len()
        )
        .into_bytes();
        for (name, m) in names.iter().zip(tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = b"\nEND\n";
        let split = bytes
            .windows(end.len())
            .position(|w| w == end)
            .ok_or_else(|| bad("missing END marker"))?;
        let header =
            std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        let first = lines.next().unwrap_or_default();
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut field = |key: &str| -> Result<&str> {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing '{key}'")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .ok_or_else(|| bad(format!("expected '{key}', found '{line}'")))
        };
        let model_config: ModelConfig = serde_json::from_str(field("model_config")?)
            .map_err(|e| bad(format!("model_config: {e}")))?;
        let train_config: TrainConfig = serde_json::from_str(field("train_config")?)
            .map_err(|e| bad(format!("train_config: {e}")))?;
        let preprocess: Preprocess = serde_json::from_str(field("preprocess")?)
            .map_err(|e| bad(format!("preprocess: {e}")))?;
        let num = |s: &str, key: &str| s.parse::<u64>().map_err(|_| bad(format!("invalid {key}")));
        let seed = num(field("seed")?, "seed")?;
        let epoch = num(field("epoch")?, "epoch")? as usize;
        let count = num(field("arrays")?, "arrays")? as usize;
        model_config.validate()?;
        if preprocess.input.channels() != model_config.input_size || preprocess.downsample == 0 {
            return Err(bad(format!(
                "preprocess {preprocess:?} does not fit the model"
            )));
        }

        let mut params = ModelParams::init(&model_config, 0)?;
        let names = params.tensor_names();
        if count != names.len() {
            return Err(bad(format!("{count} arrays, model needs {}", names.len())));
        }
        let mut cur = Reader {
            data: &bytes[split + end.len()..],
        };
        let mut values = Vec::with_capacity(count);
        for expected in &names {
            let len = cur.u32()? as usize;
            let name =
                std::str::from_utf8(cur.take(len)?).map_err(|_| bad("array name is not UTF-8"))?;
            if name != expected {
                return Err(bad(format!("expected array '{expected}', found '{name}'")));
            }
            let (rows, cols) = (cur.u32()? as usize, cur.u32()? as usize);
            let raw = cur.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            values.push(Matrix::from_vec(rows, cols, data)?);
        }
        if !cur.data.is_empty() {
            return Err(bad("trailing bytes after the last array"));
        }
        params.assign(values)?;
        params.check(&model_config)?;
        Ok(Self {
            model_config,
            train_config,
            preprocess,
            seed,
            epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() < n {
            return Err(bad("truncated array data"));
        }
        let (head, rest) = self.data.split_at(n);
        self.data = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(attn: bool) -> Checkpoint {
        let model_config = ModelConfig::new(4, 5, 2, attn);
        Checkpoint {
            params: ModelParams::init(&model_config, 9).unwrap(),
            model_config,
            train_config: TrainConfig {
                epochs: 3,
                seed: 7,
                ..TrainConfig::default()
            },
            preprocess: Preprocess {
                input: InputMode::L2Xyz,
                downsample: 4,
            },
            seed: 7,
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for attn in [true, false] {
            let ck = sample(attn);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            for _ in 0..10 {
                let len = rng.random_range(1..40);
                let x = Matrix::from_vec(
                    len,
                    4,
                    (0..len * 4).map(|_| rng.random_range(0.0..1.0)).collect(),
                )
                .unwrap();
                let a = model_forward(&ck.params, &ck.model_config, &x).unwrap().y;
                let b = model_forward(&back.params, &back.model_config, &x)
                    .unwrap()
                    .y;
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample(true).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let v2 = String::from_utf8_lossy(&bytes).replacen(" v1\n", " v2\n", 1);
        assert!(Checkpoint::from_bytes(v2.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(Checkpoint::from_bytes(b"hello").is_err());
    }
}
