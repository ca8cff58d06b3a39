//! Binary checkpoint: `u64` little-endian header length, a JSON header, then
//! the tensors as contiguous little-endian `f32`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PlugError, Result};
use crate::model::{AblationFlags, ModelConfig, PlugModel, FROZEN_PREFIX};
use crate::nn::Params;
use crate::scalar::Scalar;

pub const MAGIC: &str = "PLUGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub magic: String,
    pub version: u32,
    pub model: ModelConfig,
    pub flags: Option<AblationFlags>,
    /// Full run configuration the checkpoint was produced with.
    pub config: serde_json::Value,
    pub frozen_base_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: Header,
    pub model: PlugModel<T>,
}

fn f32_bytes<T: Scalar>(model: &PlugModel<T>, pred: impl Fn(&str) -> bool) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in model.named("") {
        if pred(&name) {
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    out
}

/// SHA-256 of the encoder-base tensors as they are stored on disk.
pub fn frozen_base_hash<T: Scalar>(model: &PlugModel<T>) -> String {
    let digest = Sha256::digest(f32_bytes(model, |n| n.starts_with(FROZEN_PREFIX)));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn header_for<T: Scalar>(model: &PlugModel<T>, flags: Option<AblationFlags>, config: serde_json::Value) -> Header {
    let mut offset = 0u64;
    let tensors = model
        .named("")
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    Header {
        magic: MAGIC.into(),
        version: VERSION,
        model: model.cfg.clone(),
        flags,
        config,
        frozen_base_sha256: frozen_base_hash(model),
        tensors,
    }
}

pub fn to_bytes<T: Scalar>(model: &PlugModel<T>, flags: Option<AblationFlags>, config: serde_json::Value) -> Result<Vec<u8>> {
    let header = header_for(model, flags, config);
    let json = serde_json::to_vec(&header).map_err(|e| PlugError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&f32_bytes(model, |_| true));
    Ok(out)
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &PlugModel<T>,
    flags: Option<AblationFlags>,
    config: serde_json::Value,
) -> Result<()> {
    let bytes = to_bytes(model, flags, config)?;
    fs::write(path, bytes).map_err(|e| PlugError::io(path, e))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: String| PlugError::Checkpoint(m);
    if bytes.len() < 8 {
        return Err(bad("file too short".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..body_start]).map_err(|e| bad(e.to_string()))?;
    if header.magic != MAGIC || header.version != VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.magic, header.version)));
    }
    let body = &bytes[body_start..];

    let has = |p: &str| header.tensors.iter().any(|t| t.name.starts_with(p));
    let flags = AblationFlags {
        ft: has("lora.a."),
        pt: true,
        rm: has("refine."),
        pl: has("lora.v."),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = PlugModel::<T>::new_base(&header.model, &mut rng)?;
    model.attach(flags, &mut rng);

    let mut slots = model.named_mut("");
    if slots.len() != header.tensors.len() {
        return Err(bad(format!(
            "tensor table has {} entries, configuration implies {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    let mut expected = 0u64;
    for ((name, t), e) in slots.iter_mut().zip(&header.tensors) {
        if *name != e.name || t.shape() != e.shape.as_slice() || e.dtype != "f32" {
            return Err(bad(format!("tensor {} does not match {name} {:?}", e.name, t.shape())));
        }
        if e.byte_offset != expected {
            return Err(bad(format!("tensor {} has offset {} (expected {expected})", e.name, e.byte_offset)));
        }
        let n = t.numel();
        let start = e.byte_offset as usize;
        let chunk = body
            .get(start..start + 4 * n)
            .ok_or_else(|| bad(format!("body truncated in {}", e.name)))?;
        for (v, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *v = T::lit(f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))));
        }
        expected += 4 * n as u64;
    }
    drop(slots);
    if body.len() as u64 != expected {
        return Err(bad(format!("body has {} bytes, table describes {expected}", body.len())));
    }
    let hash = frozen_base_hash(&model);
    if hash != header.frozen_base_sha256 {
        return Err(bad("frozen-base hash does not match tensor data".into()));
    }
    Ok(Checkpoint { header, model })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| PlugError::io(path, e))?;
    from_bytes(&bytes)
}
