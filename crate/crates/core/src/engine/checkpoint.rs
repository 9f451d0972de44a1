//! Binary checkpoint: `AFCK`, u32 version, u32 header length, JSON header,
//! then little-endian tensor payloads described by the header's blob table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamState;
use super::train::{EpochLog, RngState, Trainer};
use crate::error::{Error, Result};
use crate::model::{parameter_shapes, Network, Parameters};
use crate::numerics::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
    pub len: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    rng: RngState,
    history: Vec<EpochLog>,
    blobs: Vec<BlobEntry>,
}

/// Complete training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: TrainConfig,
    pub params: Parameters<F>,
    pub adam: AdamState<F>,
    pub rng: RngState,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

fn section_names<'a>(prefix: &'a str, names: &'a [String]) -> impl Iterator<Item = String> + 'a {
    names.iter().map(move |n| format!("{prefix}/{n}"))
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.params.names();
        let tensors = self
            .params
            .tensors()
            .iter()
            .chain(&self.adam.m)
            .chain(&self.adam.v);
        let blob_names = section_names("param", names)
            .chain(section_names("adam.m", names))
            .chain(section_names("adam.v", names));
        let mut payload = Vec::new();
        let mut blobs = Vec::new();
        for (name, t) in blob_names.zip(tensors) {
            let offset = payload.len();
            for &x in t.data() {
                x.write_le(&mut payload);
            }
            blobs.push(BlobEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: payload.len() - offset,
                crc32: crc32fast::hash(&payload[offset..]),
            });
        }
        let header = Header {
            dtype: F::DTYPE,
            config: self.config.clone(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            rng: self.rng.clone(),
            history: self.history.clone(),
            blobs,
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::invalid("checkpoint header exceeds 4 GiB"))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and validates a checkpoint. Payloads stored at another
    /// precision are converted.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: &str| Error::format(path, msg);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        header.config.validate()?;
        let payload = &bytes[header_end..];

        let expected = parameter_shapes(&header.config.model);
        let names: Vec<String> = expected.iter().map(|(n, _)| n.clone()).collect();
        let wanted: Vec<(String, Vec<usize>)> = ["param", "adam.m", "adam.v"]
            .iter()
            .flat_map(|p| {
                expected
                    .iter()
                    .map(move |(n, s)| (format!("{p}/{n}"), s.clone()))
            })
            .collect();
        if header.blobs.len() != wanted.len() {
            return Err(err("blob table does not match the model"));
        }
        let width = header.dtype.size_of();
        let mut cursor = 0;
        let mut tensors = Vec::with_capacity(wanted.len());
        for (blob, (name, shape)) in header.blobs.iter().zip(&wanted) {
            if &blob.name != name || &blob.shape != shape {
                return Err(Error::format(
                    path,
                    format!(
                        "blob `{}` {:?} where `{name}` {shape:?} was expected",
                        blob.name, blob.shape
                    ),
                ));
            }
            let numel: usize = shape.iter().product();
            if blob.offset != cursor || blob.len != numel * width {
                return Err(Error::format(
                    path,
                    format!("blob `{name}` has a bad extent"),
                ));
            }
            let data = payload
                .get(blob.offset..blob.offset + blob.len)
                .ok_or_else(|| Error::format(path, format!("blob `{name}` is truncated")))?;
            if crc32fast::hash(data) != blob.crc32 {
                return Err(Error::Checksum(name.clone()));
            }
            let values: Vec<F> = match header.dtype {
                DType::F32 => data
                    .chunks_exact(4)
                    .map(|c| F::lit(f32::read_le(c) as f64))
                    .collect(),
                DType::F64 => data
                    .chunks_exact(8)
                    .map(|c| F::lit(f64::read_le(c)))
                    .collect(),
            };
            tensors.push(Tensor::new(shape.clone(), values)?);
            cursor += blob.len;
        }
        if cursor != payload.len() {
            return Err(err("trailing bytes after the last blob"));
        }
        let n = names.len();
        let v = tensors.split_off(2 * n);
        let m = tensors.split_off(n);
        Ok(Self {
            params: Parameters::from_parts(names, tensors)?,
            adam: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            config: header.config,
            rng: header.rng,
            epoch: header.epoch,
            history: header.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

impl<F: Real> Trainer<F> {
    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch,
            history: self.history.clone(),
        }
    }

    /// Resumes training exactly where `ckpt` was taken.
    pub fn from_checkpoint(ckpt: Checkpoint<F>) -> Result<Self> {
        let network = Network::new(ckpt.config.model.clone())?;
        let rng = ckpt.rng.restore()?;
        Self::from_state(
            ckpt.config,
            network,
            ckpt.params,
            Some(ckpt.adam),
            rng,
            ckpt.epoch,
            ckpt.history,
        )
    }
}
