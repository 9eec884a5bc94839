//! Checkpoint container.
//!
//! ```text
//! b"ABTKCKPT" | u32 version | u64 header length | JSON header | f32 data
//! ```
//!
//! Integers and floats are little-endian. The header carries the model
//! config, class names and, per tensor, its name, shape and element offset
//! into the data section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::params::ModelParams;

const MAGIC: &[u8; 8] = b"ABTKCKPT";
const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Empty for a pretrained encoder without a classifier head.
    pub class_names: Vec<String>,
    pub params: ModelParams<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    class_names: Vec<String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for t in self.params.tensors() {
            tensors.push(TensorEntry {
                name: t.name,
                shape: t.shape,
                offset,
            });
            offset += t.data.len();
        }
        let header = Header {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse { offset, message };
        if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
            return Err(parse(0, "not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(parse(
                8,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| parse(12, "header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])
            .map_err(|e| parse(PREAMBLE + e.column().saturating_sub(1), e.to_string()))?;
        header.config.validate()?;

        let k = (!header.class_names.is_empty()).then_some(header.class_names.len());
        let mut params = ModelParams::<f32>::zeros(&header.config, k);
        let data = &bytes[data_start..];
        let expected: Vec<_> = params
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        let listed: Vec<_> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if expected != listed {
            return Err(parse(
                PREAMBLE,
                "tensor list does not match the configured architecture".into(),
            ));
        }
        for (slot, entry) in params.tensors_mut().into_iter().zip(&header.tensors) {
            let start = entry.offset * 4;
            let end = start + slot.data.len() * 4;
            if end > data.len() {
                return Err(parse(
                    bytes.len(),
                    format!("tensor {} is truncated", entry.name),
                ));
            }
            for (v, chunk) in slot.data.iter_mut().zip(data[start..end].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(Self {
            config: header.config,
            class_names: header.class_names,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&ckpt.to_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_model;

    fn sample(classes: usize) -> Checkpoint {
        let config = ModelConfig::toy(25);
        let mut params = init_model(&config, 3).unwrap();
        let class_names: Vec<String> = (0..classes).map(|i| format!("c{i}")).collect();
        if classes > 0 {
            params.attach_classifier(&config, classes, 1).unwrap();
        }
        Checkpoint {
            config,
            class_names,
            params,
        }
    }

    #[test]
    fn roundtrip_with_and_without_head() {
        for k in [0, 3] {
            let ckpt = sample(k);
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample(2);
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn data_is_little_endian_f32() {
        let ckpt = sample(0);
        let bytes = ckpt.to_bytes();
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let first = &bytes[PREAMBLE + header_len..PREAMBLE + header_len + 4];
        assert_eq!(
            f32::from_le_bytes(first.try_into().unwrap()),
            ckpt.params.token_embeddings[[0, 0]]
        );
        assert_eq!(
            bytes.len(),
            PREAMBLE + header_len + 4 * ckpt.params.num_parameters()
        );
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample(0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
