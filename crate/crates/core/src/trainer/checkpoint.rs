//! Checkpoint container: `"STVAE1\0"`, an 8-byte little-endian manifest
//! length, a UTF-8 JSON manifest, then raw little-endian f32 blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::iae::{IaeArchitecture, IaeParams};
use crate::model::{StyleModel, VltConfig, VltParams};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"STVAE1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Iae,
    Vlt,
}

/// Network shapes; its canonical JSON is hashed into the checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub iae: IaeArchitecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlt: Option<VltConfig>,
}

impl Architecture {
    pub fn hash(&self) -> String {
        architecture_hash(&serde_json::to_value(self).expect("architecture serializes"))
    }
}

/// SHA-256 of the compact, key-sorted JSON encoding.
pub fn architecture_hash(arch: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(arch).expect("JSON value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub phase: Phase,
    pub step: u64,
    pub loss_history: Vec<f64>,
    pub seed: u64,
    pub architecture: serde_json::Value,
    pub architecture_hash: String,
    /// Free-form training settings, for reference only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

impl Metadata {
    pub fn new(phase: Phase, arch: &Architecture, seed: u64) -> Self {
        Self {
            phase,
            step: 0,
            loss_history: Vec::new(),
            seed,
            architecture: serde_json::to_value(arch).expect("architecture serializes"),
            architecture_hash: arch.hash(),
            training: None,
        }
    }

    pub fn parsed_architecture(&self) -> Result<Architecture> {
        serde_json::from_value(self.architecture.clone())
            .map_err(|e| Error::Manifest(format!("unreadable architecture: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_iae(iae: &IaeParams, metadata: Metadata) -> Self {
        Self {
            metadata,
            tensors: owned(iae.named()),
        }
    }

    pub fn from_model(model: &StyleModel, metadata: Metadata) -> Self {
        let mut tensors = owned(model.iae.named());
        tensors.extend(owned(model.vlt.named()));
        Self { metadata, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iae(&self) -> Result<IaeParams> {
        let arch = self.metadata.parsed_architecture()?;
        let mut p = IaeParams::zeros(arch.iae)?;
        self.fill(&mut p)?;
        Ok(p)
    }

    pub fn model(&self) -> Result<StyleModel> {
        let arch = self.metadata.parsed_architecture()?;
        let cfg = arch.vlt.ok_or_else(|| {
            Error::Manifest("checkpoint holds only an autoencoder; train the VLT phase first".into())
        })?;
        let iae = self.iae()?;
        let mut vlt = VltParams::zeros(&cfg, iae.architecture().feature_channels());
        self.fill(&mut vlt)?;
        StyleModel::new(iae, vlt, cfg)
    }

    fn fill<P: ParamSet>(&self, p: &mut P) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = p
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), dst) in names.into_iter().zip(p.tensors_mut()) {
            let src = self.tensor(&name).ok_or_else(|| Error::Checkpoint {
                tensor: name.clone(),
                message: "missing from checkpoint".into(),
            })?;
            if src.shape() != shape.as_slice() {
                return Err(Error::Checkpoint {
                    tensor: name,
                    message: format!("shape {:?}, architecture expects {shape:?}", src.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = 4 * t.len() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let manifest = serde_json::to_vec(&Manifest {
            metadata: self.metadata.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Manifest(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.to_f32_vec() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Manifest("not a checkpoint (bad magic)".into()));
        }
        let len_bytes: [u8; 8] = bytes[7..15].try_into().expect("8 bytes");
        let len = u64::from_le_bytes(len_bytes);
        let start = 15u64;
        let blob_start = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Manifest(format!("manifest length {len} exceeds file size {}", bytes.len())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[start as usize..blob_start as usize])
            .map_err(|e| Error::Manifest(format!("corrupt manifest: {e}")))?;
        let blob = &bytes[blob_start as usize..];

        let found = architecture_hash(&manifest.metadata.architecture);
        if found != manifest.metadata.architecture_hash {
            return Err(Error::ArchitectureMismatch {
                expected: manifest.metadata.architecture_hash.clone(),
                found,
            });
        }

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        for e in &manifest.tensors {
            let bad = |message: String| Error::Checkpoint {
                tensor: e.name.clone(),
                message,
            };
            if e.dtype != "f32" {
                return Err(bad(format!("unsupported dtype {}", e.dtype)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad("shape overflows".into()))?;
            if count == 0 || e.nbytes != 4 * count {
                return Err(bad(format!("{} bytes do not hold shape {:?}", e.nbytes, e.shape)));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= blob.len() as u64)
                .ok_or_else(|| {
                    bad(format!(
                        "bytes {}..{} out of bounds of {}-byte blob",
                        e.offset,
                        e.offset.saturating_add(e.nbytes),
                        blob.len()
                    ))
                })?;
            spans.push((e.offset, end, &e.name));
            let data: Vec<f32> = blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_f32(e.shape.clone(), &data)?));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Checkpoint {
                    tensor: w[1].2.to_string(),
                    message: format!("overlaps tensor `{}`", w[0].2),
                });
            }
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }
}

fn owned(named: Vec<(String, &Tensor)>) -> Vec<(String, Tensor)> {
    named.into_iter().map(|(n, t)| (n, t.clone())).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
