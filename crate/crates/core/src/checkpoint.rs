//! Binary tensor container.
//!
//! Layout: `b"MRPC"`, format version (u32 LE), header length (u64 LE), a
//! UTF-8 JSON header, then little-endian f32 payloads in header order.
//! Offsets in the header are relative to the first payload byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::diffusion::{DecodeTrace, DraftRecord, StepKind, StepRecord};
use crate::error::{Error, Result};
use crate::mrp::{MrpConfig, MrpHead};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MRPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorRecord>,
    #[serde(default)]
    meta: Value,
}

pub fn encode(tensors: &[(&str, &Tensor)], meta: Value) -> Result<Vec<u8>> {
    let mut records = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        records.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header { tensors: records, meta })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<(String, Tensor)>, Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing MRPC magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header runs past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    let payload = &bytes[payload_start..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for r in header.tensors {
        if r.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor {} has dtype {}", r.name, r.dtype)));
        }
        let n: usize = r.shape.iter().product();
        let start = r.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past end of file", r.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((r.name, Tensor::new(r.shape, data)?));
    }
    Ok((out, header.meta))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn store_tensors(store: &ParamStore) -> Vec<(&str, &Tensor)> {
    store.iter().map(|p| (p.name.as_str(), &p.value)).collect()
}

fn to_store(tensors: Vec<(String, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in tensors {
        s.add(name, t);
    }
    s
}

pub fn backbone_bytes(b: &Backbone) -> Result<Vec<u8>> {
    let meta = serde_json::json!({ "kind": "backbone", "config": b.config });
    encode(&store_tensors(&b.params), meta)
}

pub fn save_backbone(path: &Path, b: &Backbone) -> Result<()> {
    write_bytes(path, &backbone_bytes(b)?)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let (tensors, meta) = decode(&read_bytes(path)?)?;
    if meta.get("kind").and_then(Value::as_str) != Some("backbone") {
        return Err(Error::Checkpoint(format!("{} is not a backbone checkpoint", path.display())));
    }
    let config: BackboneConfig = serde_json::from_value(meta["config"].clone())?;
    Backbone::from_params(config, to_store(tensors))
}

pub fn mrp_bytes(h: &MrpHead) -> Result<Vec<u8>> {
    let meta = serde_json::json!({
        "kind": "mrp",
        "config": h.config,
        "d_model": h.d_model,
        "n_heads": h.n_heads,
        "norm_eps": h.norm_eps,
    });
    encode(&store_tensors(&h.params), meta)
}

pub fn save_mrp(path: &Path, h: &MrpHead) -> Result<()> {
    write_bytes(path, &mrp_bytes(h)?)
}

pub fn load_mrp(path: &Path) -> Result<MrpHead> {
    let (tensors, meta) = decode(&read_bytes(path)?)?;
    if meta.get("kind").and_then(Value::as_str) != Some("mrp") {
        return Err(Error::Checkpoint(format!("{} is not an MRP checkpoint", path.display())));
    }
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("MRP header lacks {k}")))
    };
    let config: MrpConfig = serde_json::from_value(field("config")?)?;
    let d_model: usize = serde_json::from_value(field("d_model")?)?;
    let n_heads: usize = serde_json::from_value(field("n_heads")?)?;
    let norm_eps: f64 = serde_json::from_value(field("norm_eps")?)?;
    MrpHead::from_params(config, d_model, n_heads, norm_eps, to_store(tensors))
}

#[derive(Serialize, Deserialize)]
struct StepMeta {
    kind: StepKind,
    block: usize,
    ids: Vec<usize>,
    masked: Vec<bool>,
    revealed: Vec<(usize, usize)>,
    drafts: Vec<DraftRecord>,
    accepted: Vec<usize>,
    rejected: Vec<usize>,
}

/// Trace in the container format: tensors `step{i}.h` and `step{i}.logits`,
/// everything else in the header's `steps` list. Values pass through f32.
pub fn trace_bytes(trace: &DecodeTrace) -> Result<Vec<u8>> {
    let names: Vec<(String, String)> = (0..trace.steps.len())
        .map(|i| (format!("step{i}.h"), format!("step{i}.logits")))
        .collect();
    let mut tensors = Vec::with_capacity(2 * trace.steps.len());
    for (s, (nh, nl)) in trace.steps.iter().zip(&names) {
        tensors.push((nh.as_str(), &s.h));
        tensors.push((nl.as_str(), &s.logits));
    }
    let steps: Vec<StepMeta> = trace
        .steps
        .iter()
        .map(|s| StepMeta {
            kind: s.kind,
            block: s.block,
            ids: s.ids.clone(),
            masked: s.masked.clone(),
            revealed: s.revealed.clone(),
            drafts: s.drafts.clone(),
            accepted: s.accepted.clone(),
            rejected: s.rejected.clone(),
        })
        .collect();
    encode(&tensors, serde_json::json!({ "kind": "trace", "steps": steps }))
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<DecodeTrace> {
    let (tensors, meta) = decode(bytes)?;
    let steps: Vec<StepMeta> = serde_json::from_value(meta["steps"].clone())?;
    if tensors.len() != 2 * steps.len() {
        return Err(Error::Checkpoint("trace tensor count does not match steps".into()));
    }
    let mut it = tensors.into_iter();
    let steps = steps
        .into_iter()
        .map(|m| {
            let (_, h) = it.next().expect("counted");
            let (_, logits) = it.next().expect("counted");
            StepRecord {
                kind: m.kind,
                block: m.block,
                ids: m.ids,
                masked: m.masked,
                h,
                logits,
                revealed: m.revealed,
                drafts: m.drafts,
                accepted: m.accepted,
                rejected: m.rejected,
            }
        })
        .collect();
    Ok(DecodeTrace { steps })
}
