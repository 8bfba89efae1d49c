//! Binary parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header padded with
//! spaces so tensor data starts on a 4096-byte boundary, then every tensor as
//! row-major little-endian `f64` values. Offsets in the header are relative to
//! the start of the data section.

use std::fs;
use std::path::Path;

use ndarray::{ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::HeadParams;
use crate::encoder::{EncoderConfig, EncoderError, EncoderParams};
use crate::scalar::Scalar;

pub const FORMAT: &str = "adcofe-checkpoint";
pub const VERSION: u32 = 1;
const ALIGN: usize = 4096;
const PREFIX: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub encoder_config: EncoderConfig,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: EncoderConfig,
    pub encoder: EncoderParams<T>,
    pub head: Option<HeadParams<T>>,
    pub metadata: serde_json::Value,
}

fn named_views<'a, T: Scalar>(
    encoder: &'a EncoderParams<T>,
    head: Option<&'a HeadParams<T>>,
) -> Vec<(&'static str, ArrayViewD<'a, T>)> {
    let mut views = encoder.tensors();
    if let Some(h) = head {
        views.extend(h.tensors());
    }
    views
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let views = named_views(&self.encoder, self.head.as_ref());
        let mut offset = 0u64;
        let tensors = views
            .iter()
            .map(|(name, v)| {
                let entry = TensorEntry {
                    name: name.to_string(),
                    shape: v.shape().to_vec(),
                    offset,
                };
                offset += 8 * v.len() as u64;
                entry
            })
            .collect();
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            encoder_config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let mut json = serde_json::to_vec(&header).expect("header serializes");
        let data_start = (PREFIX + json.len()).div_ceil(ALIGN) * ALIGN;
        json.resize(data_start - PREFIX, b' ');

        let mut out = Vec::with_capacity(data_start + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &views {
            for x in v.iter() {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let malformed = |m: &str| CheckpointError::Malformed(m.to_string());
        let len_bytes: [u8; PREFIX] = bytes
            .get(..PREFIX)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| malformed("truncated length prefix"))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let data_start = PREFIX
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| malformed("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX..data_start])
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(CheckpointError::Malformed(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        header.encoder_config.validate()?;
        let data = &bytes[data_start..];

        let has_head = header.tensors.iter().any(|t| t.name.starts_with("head."));
        let mut encoder = EncoderParams::zeros(&header.encoder_config);
        let mut head = has_head.then(|| HeadParams::zeros(header.encoder_config.hidden_dim));
        let mut targets: Vec<(&'static str, ArrayViewMutD<'_, T>)> = encoder.tensors_mut();
        if let Some(h) = head.as_mut() {
            targets.extend(h.tensors_mut());
        }
        if targets.len() != header.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} tensors, header lists {}",
                targets.len(),
                header.tensors.len()
            )));
        }
        for (name, target) in targets.iter_mut() {
            let entry = header
                .tensors
                .iter()
                .find(|e| e.name == *name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {name}")))?;
            if entry.shape != target.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: shape {:?}, expected {:?}",
                    entry.shape,
                    target.shape()
                )));
            }
            let start = entry.offset as usize;
            let end = start + 8 * target.len();
            let raw = data
                .get(start..end)
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: data out of range")))?;
            for (dst, chunk) in target.iter_mut().zip(raw.chunks_exact(8)) {
                let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                if !v.is_finite() {
                    return Err(CheckpointError::Malformed(format!(
                        "{name}: non-finite value"
                    )));
                }
                *dst = T::lit(v);
            }
        }
        drop(targets);
        Ok(Checkpoint {
            config: header.encoder_config,
            encoder,
            head,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 50,
            embed_dim: 8,
            hidden_dim: 16,
            layers,
            heads: 4,
            groups: 1,
            ff_dim: 32,
            max_positions: 20,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_with_head() {
        let c = cfg(2);
        let ck = Checkpoint::<f64> {
            config: c.clone(),
            encoder: init_params(&c).unwrap(),
            head: Some(HeadParams::init(16, &mut ChaCha8Rng::seed_from_u64(1))),
            metadata: serde_json::json!({"seed": 3}),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn data_is_aligned_and_size_independent_of_depth() {
        let sizes: Vec<usize> = [4, 12]
            .iter()
            .map(|&l| {
                let c = cfg(l);
                Checkpoint::<f64> {
                    config: c.clone(),
                    encoder: init_params(&c).unwrap(),
                    head: None,
                    metadata: serde_json::Value::Null,
                }
                .to_bytes()
                .len()
            })
            .collect();
        assert_eq!(sizes[0], sizes[1]);
        assert_eq!((sizes[0] - ALIGN) % 8, 0);
    }

    #[test]
    fn rejects_corruption() {
        let c = cfg(1);
        let ck = Checkpoint::<f64> {
            config: c.clone(),
            encoder: init_params(&c).unwrap(),
            head: None,
            metadata: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes[..4]),
            Err(CheckpointError::Malformed(_))
        ));
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 8]),
            Err(CheckpointError::Malformed(_))
        ));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    }

    #[test]
    fn f32_model_loads_from_f64_file() {
        let c = cfg(1);
        let ck = Checkpoint::<f64> {
            config: c.clone(),
            encoder: init_params(&c).unwrap(),
            head: None,
            metadata: serde_json::Value::Null,
        };
        let narrow = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        let a = ck.encoder.pooler_w[[0, 0]];
        assert!((narrow.encoder.pooler_w[[0, 0]] as f64 - a).abs() < 1e-6);
    }
}
