//! Parameter checkpoints.
//!
//! Layout: one line of JSON (the header), a `\n`, then every tensor's values
//! as little-endian `f64`, tensors in header order, each row-major. The
//! header names the model kind, its layout and init seed, and lists each
//! tensor's name and shape, so the payload length is
//! `8 · Σ prod(shape)` bytes exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, CnnArch, CnnParams, FusionParams, HeadKind, Parameters};

pub const FORMAT: &str = "fuselab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    /// `basic`, `deeper` or `custom` for CNNs; `fusion` otherwise.
    pub architecture: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<CnnArch>,
    pub head: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize_inputs: Option<bool>,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn head_fields(kind: crate::losses::LossKind, scale: Option<f64>) -> (String, Option<f64>) {
    match kind {
        crate::losses::LossKind::Bce => ("linear".into(), None),
        crate::losses::LossKind::Lmcl => ("cosine".into(), scale),
    }
}

fn entries(p: &impl Parameters) -> Vec<TensorEntry> {
    p.names()
        .into_iter()
        .zip(p.tensors())
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn arch_name(arch: &CnnArch) -> String {
    [Architecture::Basic, Architecture::Deeper]
        .into_iter()
        .find(|a| CnnArch::new(*a, arch.patch_size) == *arch)
        .map_or("custom".into(), |a| a.to_string())
}

pub fn cnn_header(p: &CnnParams) -> Header {
    let (head, scale) = head_fields(p.head.kind(), p.head.scale());
    Header {
        format: FORMAT.into(),
        version: VERSION,
        model: ModelKind::Cnn,
        architecture: arch_name(&p.arch),
        layout: Some(p.arch.clone()),
        head,
        scale,
        normalize_inputs: None,
        seed: p.seed,
        tensors: entries(p),
    }
}

pub fn fusion_header(p: &FusionParams) -> Header {
    let (head, scale) = head_fields(p.head.kind(), p.head.scale());
    Header {
        format: FORMAT.into(),
        version: VERSION,
        model: ModelKind::Fusion,
        architecture: "fusion".into(),
        layout: None,
        head,
        scale,
        normalize_inputs: Some(p.normalize_inputs),
        seed: p.seed,
        tensors: entries(p),
    }
}

fn encode(header: &Header, p: &impl Parameters) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serialises");
    out.push(b'\n');
    for t in p.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_cnn(p: &CnnParams) -> Vec<u8> {
    encode(&cnn_header(p), p)
}

pub fn encode_fusion(p: &FusionParams) -> Vec<u8> {
    encode(&fusion_header(p), p)
}

/// Splits a checkpoint into its parsed header and payload.
pub fn decode_header<'a>(bytes: &'a [u8], origin: &Path) -> Result<(Header, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(origin, "checkpoint has no header line"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::parse(origin, format!("checkpoint header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::parse(
            origin,
            format!("unsupported checkpoint {} v{}", header.format, header.version),
        ));
    }
    Ok((header, &bytes[nl + 1..]))
}

fn head_kind(h: &Header, origin: &Path) -> Result<HeadKind> {
    match (h.head.as_str(), h.scale) {
        ("linear", None) => Ok(HeadKind::Linear),
        ("cosine", Some(scale)) => Ok(HeadKind::Cosine { scale }),
        (other, _) => Err(Error::parse(origin, format!("unknown head `{other}`"))),
    }
}

/// Copies the payload into a freshly initialised model of the right layout,
/// checking names and shapes against the header.
fn fill(p: &mut impl Parameters, h: &Header, payload: &[u8], origin: &Path) -> Result<()> {
    let expected = entries(p);
    if expected != h.tensors {
        return Err(Error::parse(origin, "tensor list does not match the declared layout"));
    }
    let total: usize = p.tensors().iter().map(|t| t.len()).sum();
    if payload.len() != total * 8 {
        return Err(Error::parse(
            origin,
            format!("payload is {} bytes, expected {}", payload.len(), total * 8),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(())
}

pub fn decode_cnn(bytes: &[u8], origin: &Path) -> Result<CnnParams> {
    let (h, payload) = decode_header(bytes, origin)?;
    if h.model != ModelKind::Cnn {
        return Err(Error::parse(origin, "checkpoint holds a fusion network, not a CNN"));
    }
    let arch = h
        .layout
        .clone()
        .ok_or_else(|| Error::parse(origin, "CNN checkpoint lacks a layout"))?;
    let mut p = CnnParams::init(&arch, head_kind(&h, origin)?, h.seed).map_err(|e| Error::parse(origin, e.to_string()))?;
    fill(&mut p, &h, payload, origin)?;
    Ok(p)
}

pub fn decode_fusion(bytes: &[u8], origin: &Path) -> Result<FusionParams> {
    let (h, payload) = decode_header(bytes, origin)?;
    if h.model != ModelKind::Fusion {
        return Err(Error::parse(origin, "checkpoint holds a CNN, not a fusion network"));
    }
    let mut p = FusionParams::init(head_kind(&h, origin)?, h.normalize_inputs.unwrap_or(false), h.seed);
    fill(&mut p, &h, payload, origin)?;
    Ok(p)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_cnn(p: &CnnParams, path: &Path) -> Result<()> {
    write(path, &encode_cnn(p))
}

pub fn save_fusion(p: &FusionParams, path: &Path) -> Result<()> {
    write(path, &encode_fusion(p))
}

pub fn load_cnn(path: &Path) -> Result<CnnParams> {
    decode_cnn(&read(path)?, path)
}

pub fn load_fusion(path: &Path) -> Result<FusionParams> {
    decode_fusion(&read(path)?, path)
}
