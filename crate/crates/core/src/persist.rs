//! Binary containers for checkpoints and feature dumps.
//!
//! Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header, then the
//! tensors listed in the header as contiguous little-endian `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cooccur::{CoocTensor, PairSubset};
use crate::dataset::PreprocPolicy;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Head, MiniXception};
use crate::nn::Tensor;
use crate::seed::fingerprint;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COFORCK1";
pub const FEATURE_MAGIC: &[u8; 8] = b"COFORFT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Mean cross-entropy on the validation records; breaks accuracy ties.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// A frozen model with everything needed to reproduce its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub arch: ArchConfig,
    /// Authoritative class order. Detection checkpoints list the negative class first.
    pub classes: Vec<String>,
    pub policy: PreprocPolicy,
    pub params: Vec<NamedTensor>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    arch: ArchConfig,
    classes: Vec<String>,
    subset: PairSubset,
    policy: PreprocPolicy,
    policy_fingerprint: String,
    metadata: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

impl ModelCheckpoint {
    pub fn from_model(
        model: &MiniXception<f32>,
        classes: Vec<String>,
        policy: PreprocPolicy,
        meta: TrainingMeta,
    ) -> Result<Self> {
        let ckpt = Self {
            format_version: FORMAT_VERSION,
            arch: model.config().clone(),
            classes,
            policy,
            params: model
                .params()
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.weights.clone(),
                })
                .collect(),
            meta,
        };
        ckpt.validate_classes()?;
        Ok(ckpt)
    }

    pub fn subset(&self) -> &PairSubset {
        &self.policy.subset
    }

    pub fn head(&self) -> Head {
        self.arch.head
    }

    fn validate_classes(&self) -> Result<()> {
        let expected = match self.arch.head {
            Head::Detection => 2,
            Head::Attribution(c) => c,
        };
        if self.classes.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{:?} head needs {expected} class names, got {}",
                self.arch.head,
                self.classes.len()
            )));
        }
        Ok(())
    }

    /// Rebuilds the network; parameter names and shapes must match the architecture.
    pub fn to_model(&self) -> Result<MiniXception<f32>> {
        let mut model = MiniXception::build(self.arch.clone(), 0)?;
        if let Some((p, t)) = model
            .params()
            .params()
            .iter()
            .zip(&self.params)
            .find(|(p, t)| p.name != t.name)
        {
            return Err(Error::Shape(format!(
                "parameter order mismatch: architecture has {}, checkpoint has {}",
                p.name, t.name
            )));
        }
        model
            .params_mut()
            .load_weights(self.params.iter().map(|t| t.tensor.clone()).collect())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: self.format_version,
            arch: self.arch.clone(),
            classes: self.classes.clone(),
            subset: self.policy.subset.clone(),
            policy: self.policy.clone(),
            policy_fingerprint: self.policy.fingerprint(),
            metadata: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let blobs: Vec<&[f32]> = self.params.iter().map(|t| t.tensor.data()).collect();
        Ok(encode_container(CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?, &blobs))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blobs) = decode_container(bytes, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader =
            serde_json::from_slice(header).map_err(|e| Error::format("header", e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "header",
                format!(
                    "format_version {} is not supported (expected {FORMAT_VERSION})",
                    header.format_version
                ),
            ));
        }
        if header.subset != header.policy.subset {
            return Err(Error::format("header", "pair subset disagrees with the stored policy"));
        }
        let shapes: Vec<&[usize]> = header.tensors.iter().map(|t| t.shape.as_slice()).collect();
        let tensors = split_blobs(blobs, &shapes)?;
        let ckpt = Self {
            format_version: header.format_version,
            arch: header.arch,
            classes: header.classes,
            policy: header.policy,
            params: header
                .tensors
                .into_iter()
                .zip(tensors)
                .map(|(e, tensor)| NamedTensor { name: e.name, tensor })
                .collect(),
            meta: header.metadata,
        };
        ckpt.validate_classes().map_err(|e| Error::format("header", e.to_string()))?;
        let expected = MiniXception::<f32>::build(ckpt.arch.clone(), 0)
            .map_err(|e| Error::format("header", e.to_string()))?;
        let arch_shapes: Vec<&[usize]> = expected.params().params().iter().map(|p| p.weights.shape()).collect();
        let stored: Vec<&[usize]> = ckpt.params.iter().map(|t| t.tensor.shape()).collect();
        if arch_shapes != stored {
            return Err(Error::format("blobs", "tensor shapes do not match the architecture"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Digest of the serialized checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint(&self.to_bytes()?))
    }
}

/// One feature tensor with the image region it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub source: String,
    pub origin: (usize, usize),
    pub tensor: CoocTensor,
}

#[derive(Serialize, Deserialize)]
struct FeatureEntry {
    source: String,
    origin: (usize, usize),
    source_dims: (usize, usize),
    subset: PairSubset,
    shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    format_version: u32,
    records: Vec<FeatureEntry>,
}

pub fn write_feature_dump(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let header = FeatureHeader {
        format_version: FORMAT_VERSION,
        records: records
            .iter()
            .map(|r| FeatureEntry {
                source: r.source.clone(),
                origin: r.origin,
                source_dims: r.tensor.source_dims(),
                subset: r.tensor.subset().clone(),
                shape: r.tensor.shape(),
            })
            .collect(),
    };
    let blobs: Vec<&[f32]> = records.iter().map(|r| r.tensor.values()).collect();
    write_atomic(
        path.as_ref(),
        &encode_container(FEATURE_MAGIC, &serde_json::to_vec(&header)?, &blobs),
    )
}

pub fn read_feature_dump(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, blobs) = decode_container(&bytes, FEATURE_MAGIC)?;
    let header: FeatureHeader = serde_json::from_slice(header).map_err(|e| Error::format("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "header",
            format!("format_version {} is not supported", header.format_version),
        ));
    }
    let shapes: Vec<&[usize]> = header.records.iter().map(|r| r.shape.as_slice()).collect();
    let tensors = split_blobs(blobs, &shapes)?;
    header
        .records
        .into_iter()
        .zip(tensors)
        .map(|(e, t)| {
            let tensor = CoocTensor::from_values(t.into_data(), e.shape[2], e.source_dims, e.subset)
                .map_err(|err| Error::format("blobs", err.to_string()))?;
            Ok(FeatureRecord {
                source: e.source,
                origin: e.origin,
                tensor,
            })
        })
        .collect()
}

fn encode_container(magic: &[u8; 8], header: &[u8], blobs: &[&[f32]]) -> Vec<u8> {
    let floats: usize = blobs.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + 4 * floats);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    for blob in blobs {
        for v in *blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_container<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 8 {
        return Err(Error::format("magic", format!("file is {} bytes, too short for a magic", bytes.len())));
    }
    if &bytes[..8] != magic {
        let found = String::from_utf8_lossy(&bytes[..8]);
        return Err(Error::format(
            "magic",
            format!("expected {}, found {found:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < 16 {
        return Err(Error::format("header-length", "file ends inside the header length"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::format(
                "header",
                format!("header of {len} bytes overruns a {}-byte file", bytes.len()),
            )
        })?;
    Ok((&bytes[16..end], &bytes[end..]))
}

fn split_blobs(blobs: &[u8], shapes: &[&[usize]]) -> Result<Vec<Tensor<f32>>> {
    let needed: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * 4;
    if blobs.len() != needed {
        return Err(Error::format(
            "blobs",
            format!("header describes {needed} bytes of tensor data, file holds {}", blobs.len()),
        ));
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let data = blobs[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            Tensor::new(shape, data).map_err(|e| Error::format("blobs", e.to_string()))
        })
        .collect()
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
