//! `TMLAB1` checkpoints: a text manifest followed by a little-endian f32 blob.
//!
//! Layout: the line `TMLAB1`, a line with the manifest length in bytes, the
//! TOML manifest, then the blob. The manifest lists every tensor's name, shape
//! and byte offset into the blob and carries the blob's SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tmlab_core::autodiff::{ParamStore, Tensor};
use tmlab_core::ensemble::WeightNet;
use tmlab_core::model::{Checkpoint, Model, ModelConfig, RetrievalSettings};

use crate::error::{CliError, Result};
use crate::fsio;

const MAGIC: &str = "TMLAB1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    config: ModelConfig,
    /// Hex, so the full 64 bits survive TOML's signed integers.
    vocab_fingerprint: String,
    retrieval: RetrievalSettings,
    steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    dtype: String,
    blob_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weightnet_d_model: Option<usize>,
    tensors: Vec<TensorEntry>,
}

fn encode(mut manifest: Manifest, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    for id in params.ids() {
        let t = params.get(id);
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    manifest.blob_sha256 = fsio::sha256_hex(&blob);
    let text = toml::to_string(&manifest).map_err(|e| CliError::data(format!("checkpoint manifest: {e}")))?;
    let mut out = format!("{MAGIC}\n{}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

fn decode(bytes: &[u8], origin: &str) -> Result<(Manifest, ParamStore<f32>)> {
    let bad = |msg: &str| CliError::data(format!("{origin}: {msg}"));
    let mut lines = bytes.splitn(3, |b| *b == b'\n');
    if lines.next() != Some(MAGIC.as_bytes()) {
        return Err(bad("not a TMLAB1 checkpoint"));
    }
    let len: usize = lines
        .next()
        .and_then(|l| std::str::from_utf8(l).ok())
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| bad("bad manifest length"))?;
    let rest = lines.next().ok_or_else(|| bad("truncated"))?;
    if rest.len() < len {
        return Err(bad("truncated manifest"));
    }
    let text = std::str::from_utf8(&rest[..len]).map_err(|_| bad("manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| bad(&format!("manifest: {e}")))?;
    let blob = &rest[len..];
    if manifest.dtype != "f32" {
        return Err(bad(&format!("unsupported dtype {}", manifest.dtype)));
    }
    if fsio::sha256_hex(blob) != manifest.blob_sha256 {
        return Err(bad("blob checksum mismatch"));
    }
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        if t.bytes != 4 * n || t.offset + t.bytes > blob.len() {
            return Err(bad(&format!("tensor {} has an inconsistent extent", t.name)));
        }
        let data = blob[t.offset..t.offset + t.bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| bad(&e.to_string()))?;
        params.add(t.name.clone(), tensor);
    }
    Ok((manifest, params))
}

fn empty(kind: &str) -> Manifest {
    Manifest {
        kind: kind.into(),
        dtype: "f32".into(),
        blob_sha256: String::new(),
        model: None,
        weightnet_d_model: None,
        tensors: Vec::new(),
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut m = empty("model");
    m.model = Some(ModelSection {
        config: ckpt.model.config.clone(),
        vocab_fingerprint: format!("{:016x}", ckpt.vocab_fingerprint),
        retrieval: ckpt.retrieval,
        steps: ckpt.steps,
    });
    encode(m, &ckpt.model.params)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let (m, params) = decode(bytes, origin)?;
    let section = match (m.kind.as_str(), m.model) {
        ("model", Some(s)) => s,
        _ => return Err(CliError::data(format!("{origin}: not a model checkpoint"))),
    };
    let vocab_fingerprint = u64::from_str_radix(&section.vocab_fingerprint, 16)
        .map_err(|_| CliError::data(format!("{origin}: bad vocab fingerprint")))?;
    let model = Model::from_params(section.config, params).map_err(|e| CliError::data(format!("{origin}: {e}")))?;
    Ok(Checkpoint {
        model,
        vocab_fingerprint,
        retrieval: section.retrieval,
        steps: section.steps,
    })
}

pub fn encode_weightnet(net: &WeightNet<f32>) -> Result<Vec<u8>> {
    let mut m = empty("weightnet");
    m.weightnet_d_model = Some(net.d_model);
    encode(m, &net.params)
}

pub fn decode_weightnet(bytes: &[u8], origin: &str) -> Result<WeightNet<f32>> {
    let (m, params) = decode(bytes, origin)?;
    match (m.kind.as_str(), m.weightnet_d_model) {
        ("weightnet", Some(d)) => WeightNet::from_params(d, params).map_err(|e| CliError::data(format!("{origin}: {e}"))),
        _ => Err(CliError::data(format!("{origin}: not a weighting-network checkpoint"))),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fsio::atomic_write(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fsio::read(path)?, &path.display().to_string())
}

pub fn save_weightnet(path: &Path, net: &WeightNet<f32>) -> Result<()> {
    fsio::atomic_write(path, &encode_weightnet(net)?)
}

pub fn load_weightnet(path: &Path) -> Result<WeightNet<f32>> {
    decode_weightnet(&fsio::read(path)?, &path.display().to_string())
}
