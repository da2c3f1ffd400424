//! Binary checkpoints for backbones and soft prompts.
//!
//! Layout: 8-byte magic, little-endian u64 header length, a JSON header,
//! then little-endian f32 data. Backbone hashes are the SHA-256 of the whole
//! serialized backbone file.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use policyprobe_core::model::{FrozenModel, ModelConfig, TensorInfo, Transformer};
use policyprobe_core::optim::Adam;
use policyprobe_core::tokenizer::Tokenizer;
use policyprobe_core::tuner::SoftPrompt;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const BACKBONE_MAGIC: &[u8; 8] = b"PPROBEBB";
pub const SOFT_PROMPT_MAGIC: &[u8; 8] = b"PPROBESP";

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    config: ModelConfig,
    tokenizer: Tokenizer,
    tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptHeader {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub step_count: u64,
    pub backbone_hash: String,
    /// Present when Adam moments follow the embeddings.
    #[serde(default)]
    pub optimizer_step: Option<u64>,
}

fn encode<H: Serialize>(magic: &[u8; 8], header: &H, data: &[&[f32]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let n: usize = data.iter().map(|d| d.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * n);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for d in data {
        for x in *d {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    ensure!(bytes.len() >= 16 && &bytes[..8] == magic, "not a {} file", String::from_utf8_lossy(magic));
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.checked_add(len).context("header length overflow")?).context("truncated header")?;
    let header: H = serde_json::from_slice(body).context("bad checkpoint header")?;
    let data = &bytes[16 + len..];
    ensure!(data.len().is_multiple_of(4), "data section is not a whole number of f32 values");
    Ok((header, data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()))
}

pub fn backbone_bytes(model: &FrozenModel) -> Result<Vec<u8>> {
    let w = model.weights();
    let header = BackboneHeader { config: *model.config(), tokenizer: model.tokenizer().clone(), tensors: w.index.tensors(model.config()) };
    encode(BACKBONE_MAGIC, &header, &[&w.params])
}

pub fn backbone_from_bytes(bytes: &[u8]) -> Result<FrozenModel> {
    let (h, params): (BackboneHeader, _) = decode(BACKBONE_MAGIC, bytes)?;
    let t = Transformer::from_params(h.config, params)?;
    ensure!(t.index.tensors(&h.config) == h.tensors, "tensor table does not match the configuration");
    Ok(FrozenModel::freeze(t, h.tokenizer)?)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn backbone_hash(model: &FrozenModel) -> Result<String> {
    Ok(hash_bytes(&backbone_bytes(model)?))
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn save_backbone(model: &FrozenModel, path: &Path) -> Result<String> {
    let bytes = backbone_bytes(model)?;
    write_atomic(path, &bytes)?;
    Ok(hash_bytes(&bytes))
}

/// The model and its hash.
pub fn load_backbone(path: &Path) -> Result<(FrozenModel, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let model = backbone_from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, hash_bytes(&bytes)))
}

pub fn soft_prompt_bytes(soft: &SoftPrompt, backbone_hash: &str, adam: Option<&Adam>) -> Result<Vec<u8>> {
    let header = SoftPromptHeader {
        n: soft.n,
        d: soft.d,
        seed: soft.init_seed,
        step_count: soft.step_count,
        backbone_hash: backbone_hash.to_string(),
        optimizer_step: adam.map(|a| a.step),
    };
    match adam {
        Some(a) => encode(SOFT_PROMPT_MAGIC, &header, &[&soft.embeddings, &a.m, &a.v]),
        None => encode(SOFT_PROMPT_MAGIC, &header, &[&soft.embeddings]),
    }
}

/// Decode a soft prompt, refusing one tuned against another backbone.
pub fn soft_prompt_from_bytes(bytes: &[u8], backbone_hash: &str) -> Result<(SoftPrompt, Option<Adam>)> {
    let (h, data): (SoftPromptHeader, Vec<f32>) = decode(SOFT_PROMPT_MAGIC, bytes)?;
    if h.backbone_hash != backbone_hash {
        bail!("soft prompt was tuned against backbone {} but the loaded backbone is {}", h.backbone_hash, backbone_hash);
    }
    let k = h.n * h.d;
    let parts = if h.optimizer_step.is_some() { 3 } else { 1 };
    ensure!(data.len() == k * parts, "soft prompt data has {} values, expected {}", data.len(), k * parts);
    let soft = SoftPrompt { n: h.n, d: h.d, embeddings: data[..k].to_vec(), init_seed: h.seed, step_count: h.step_count };
    let adam = h.optimizer_step.map(|step| {
        let mut a = Adam::new(k);
        a.step = step;
        a.m.copy_from_slice(&data[k..2 * k]);
        a.v.copy_from_slice(&data[2 * k..]);
        a
    });
    Ok((soft, adam))
}

pub fn save_soft_prompt(soft: &SoftPrompt, backbone_hash: &str, adam: Option<&Adam>, path: &Path) -> Result<()> {
    write_atomic(path, &soft_prompt_bytes(soft, backbone_hash, adam)?)
}

pub fn load_soft_prompt(path: &Path, backbone_hash: &str) -> Result<(SoftPrompt, Option<Adam>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    soft_prompt_from_bytes(&bytes, backbone_hash).with_context(|| format!("loading {}", path.display()))
}
