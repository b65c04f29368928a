//! On-disk formats: frame datasets and named-tensor checkpoints.
//!
//! A dataset is a directory holding `manifest.json` and `frames.bin`, the
//! latter being `count` contiguous `width·height·3` RGB records.
//!
//! A checkpoint file is laid out as
//!
//! ```text
//! "LSRL" | version: u32 LE | header_len: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! where the header lists every tensor as `{name, shape, dtype: "f32",
//! offset, length}` (byte offsets into the payload) plus free-form model
//! metadata, and the payload is little-endian `f32` data.

use crate::error::{Error, Result};
use crate::sim::Frame;
use crate::sac::{ObsSpec, SacAgent, SacConfig};
use crate::tensor::NamedTensor;
use crate::vae::{Vae, VaeConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.bin";
pub const RECORD_FORMAT: &str = "rgb8";

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LSRL";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    Human,
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub count: usize,
    pub record_format: String,
    pub source: FrameSource,
    pub sim_config_hash: String,
}

impl DatasetManifest {
    pub fn record_len(&self) -> usize {
        self.width * self.height * self.channels
    }

    fn validate(&self) -> Result<()> {
        if self.channels != Frame::CHANNELS || self.record_format != RECORD_FORMAT {
            return Err(Error::Corruption(format!(
                "unsupported record layout: {} channels, format `{}`",
                self.channels, self.record_format
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameDataset {
    pub manifest: DatasetManifest,
    blob: Vec<u8>,
}

impl FrameDataset {
    pub fn new(manifest: DatasetManifest, blob: Vec<u8>) -> Result<Self> {
        manifest.validate()?;
        let expected = manifest.count * manifest.record_len();
        if blob.len() != expected {
            return Err(Error::Corruption(format!(
                "frame blob holds {} bytes, manifest implies {expected}",
                blob.len()
            )));
        }
        Ok(Self { manifest, blob })
    }

    /// All frames must share one resolution.
    pub fn from_frames(frames: &[Frame], source: FrameSource, sim_config_hash: impl Into<String>) -> Result<Self> {
        let (width, height) = frames.first().map_or((0, 0), |f| (f.width(), f.height()));
        let mut blob = Vec::with_capacity(frames.len() * width * height * 3);
        for f in frames {
            if (f.width(), f.height()) != (width, height) {
                return Err(Error::shape("dataset frame", &[f.height(), f.width()], &[height, width]));
            }
            blob.extend_from_slice(f.data());
        }
        Self::new(
            DatasetManifest {
                width,
                height,
                channels: Frame::CHANNELS,
                count: frames.len(),
                record_format: RECORD_FORMAT.into(),
                source,
                sim_config_hash: sim_config_hash.into(),
            },
            blob,
        )
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    pub fn frame(&self, i: usize) -> Frame {
        let n = self.manifest.record_len();
        Frame::new(self.manifest.width, self.manifest.height, self.blob[i * n..(i + 1) * n].to_vec())
            .expect("record length checked")
    }

    pub fn frames(&self) -> Vec<Frame> {
        (0..self.len()).map(|i| self.frame(i)).collect()
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write to a sibling temp file, flush, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_dataset(dataset: &FrameDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(FRAMES_FILE), &dataset.blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&dataset.manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<FrameDataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(FRAMES_FILE))?;
    FrameDataset::new(manifest, blob)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
    pub metadata: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub metadata: Value,
}

pub fn encode_checkpoint(tensors: &[NamedTensor], metadata: &Value) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Usage(format!("duplicate tensor name `{}`", t.name)));
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::shape("checkpoint tensor", &t.shape, &[t.data.len()]));
        }
        let length = 4 * t.data.len() as u64;
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
            length,
        });
        offset += length;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        tensors: entries,
        metadata: metadata.clone(),
    })?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Corruption(format!(
            "checkpoint is {} bytes, shorter than its {PREAMBLE}-byte preamble",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREAMBLE..];
    if header_len > rest.len() as u64 {
        return Err(Error::Corruption(format!(
            "header length {header_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let (header, payload) = rest.split_at(header_len as usize);
    let header: CheckpointHeader = serde_json::from_slice(header)?;
    validate_entries(&header.tensors, payload.len() as u64)?;

    let tensors = header
        .tensors
        .iter()
        .map(|e| {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            }
        })
        .collect();
    Ok(Checkpoint {
        tensors,
        metadata: header.metadata,
    })
}

fn validate_entries(entries: &[TensorEntry], payload_len: u64) -> Result<()> {
    let mut names = HashSet::new();
    let mut total = 0u64;
    for e in entries {
        if !names.insert(e.name.as_str()) {
            return Err(Error::Corruption(format!("tensor `{}` listed twice", e.name)));
        }
        if e.dtype != "f32" {
            return Err(Error::Corruption(format!("tensor `{}` has dtype `{}`", e.name, e.dtype)));
        }
        let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(4)) != Some(e.length) {
            return Err(Error::Corruption(format!(
                "tensor `{}` of shape {:?} declares {} bytes",
                e.name, e.shape, e.length
            )));
        }
        match e.offset.checked_add(e.length) {
            Some(end) if end <= payload_len => {}
            _ => {
                return Err(Error::Corruption(format!(
                    "tensor `{}` at {}+{} runs past the {payload_len}-byte payload",
                    e.name, e.offset, e.length
                )))
            }
        }
        total += e.length;
    }
    let mut spans: Vec<(u64, u64, &str)> = entries.iter().map(|e| (e.offset, e.length, e.name.as_str())).collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            return Err(Error::Corruption(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    if total != payload_len {
        return Err(Error::Corruption(format!(
            "tensor lengths sum to {total} bytes, payload is {payload_len}"
        )));
    }
    Ok(())
}

pub fn save_checkpoint(tensors: &[NamedTensor], metadata: &Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(path, &encode_checkpoint(tensors, metadata)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Metadata key naming the model family stored in a checkpoint.
pub const KIND_KEY: &str = "kind";

pub fn save_vae(vae: &Vae, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::json!({
        KIND_KEY: "vae",
        "config": vae.config(),
        "seed": seed,
    });
    save_checkpoint(&vae.to_tensors(), &meta, path)
}

pub fn vae_from_checkpoint(ckpt: &Checkpoint) -> Result<Vae> {
    let config: VaeConfig = match ckpt.metadata.get("config") {
        Some(c) => serde_json::from_value(c.clone())?,
        None => return Err(Error::Config("checkpoint metadata has no VAE config".into())),
    };
    Vae::from_tensors(config, &ckpt.tensors)
}

pub fn load_vae(path: impl AsRef<Path>) -> Result<Vae> {
    vae_from_checkpoint(&load_checkpoint(path)?)
}

pub fn save_sac(agent: &SacAgent, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::json!({
        KIND_KEY: "sac",
        "config": agent.config(),
        "observation": agent.spec(),
        "seed": seed,
    });
    save_checkpoint(&agent.to_tensors(), &meta, path)
}

pub fn sac_from_checkpoint(ckpt: &Checkpoint) -> Result<SacAgent> {
    // a checkpoint of another model family fails on tensor names first
    const PROBE: &str = "actor.l0.weight";
    if !ckpt.tensors.iter().any(|t| t.name == PROBE) {
        return Err(Error::MissingTensor(PROBE.into()));
    }
    let field = |k: &str| {
        ckpt.metadata
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("checkpoint metadata has no `{k}` entry")))
    };
    let config: SacConfig = serde_json::from_value(field("config")?)?;
    let spec: ObsSpec = serde_json::from_value(field("observation")?)?;
    let seed = ckpt.metadata.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let mut agent = SacAgent::new(config, spec, seed)?;
    agent.load_tensors(&ckpt.tensors)?;
    Ok(agent)
}

pub fn load_sac(path: impl AsRef<Path>) -> Result<SacAgent> {
    sac_from_checkpoint(&load_checkpoint(path)?)
}
