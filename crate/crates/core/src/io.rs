//! On-disk formats for models and tensor maps.
//!
//! Both share one layout: a UTF-8 JSON header terminated by a single `\n`,
//! followed immediately by raw little-endian value blobs in the order the
//! header declares them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, Init, ModelGraph, ModuleKind, OutputSpec, ParamRole};
use crate::tensor::{DType, Tensor};
use crate::tensormap::{FlatMap, TensorMap};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDecl {
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleDecl {
    pub name: String,
    pub kind: ModuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<ParamDecl>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub version: u32,
    pub dtype: DType,
    pub byte_order: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<OutputSpec>,
    pub modules: Vec<ModuleDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDecl {
    key: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapHeader {
    version: u32,
    byte_order: String,
    batch_shape: Vec<usize>,
    entries: Vec<EntryDecl>,
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("header is not newline-terminated".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

fn check_byte_order(order: &str) -> Result<()> {
    if order != "LE" {
        return Err(Error::Format(format!("unsupported byte_order {order:?}, expected \"LE\"")));
    }
    Ok(())
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

fn encode_values(t: &Tensor, dtype: DType, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

/// Reads `shape` values of `dtype` from the front of `blob`.
fn decode_values(blob: &mut &[u8], key: &str, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let need = n * dtype.size_of();
    if blob.len() < need {
        return Err(Error::BlobLength { key: key.to_string(), expected: need, found: blob.len() });
    }
    let (head, rest) = blob.split_at(need);
    *blob = rest;
    let data = match dtype {
        DType::F32 => head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
        DType::F64 => head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
    };
    Tensor::with_dtype(shape.to_vec(), data, dtype)
}

fn with_header(header: &impl Serialize, blobs: Vec<u8>) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend(blobs);
    Ok(out)
}

pub fn encode_tensormap(map: &TensorMap) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blobs = Vec::new();
    for (key, t) in map.flatten_keys() {
        encode_values(&t, t.dtype(), &mut blobs);
        entries.push(EntryDecl { key, dtype: t.dtype(), shape: t.shape().to_vec() });
    }
    let header = MapHeader {
        version: FORMAT_VERSION,
        byte_order: "LE".into(),
        batch_shape: map.batch_shape().to_vec(),
        entries,
    };
    with_header(&header, blobs)
}

pub fn decode_tensormap(bytes: &[u8]) -> Result<TensorMap> {
    let (head, mut blob) = split_header(bytes)?;
    let header: MapHeader = serde_json::from_slice(head)?;
    check_version(header.version)?;
    check_byte_order(&header.byte_order)?;
    let mut flat = FlatMap::new();
    for e in &header.entries {
        let t = decode_values(&mut blob, &e.key, &e.shape, e.dtype)?;
        if flat.insert(e.key.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate key {:?}", e.key)));
        }
    }
    if !blob.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after last blob", blob.len())));
    }
    TensorMap::unflatten_keys_with_batch(flat, header.batch_shape)
}

pub fn encode_model(model: &ModelGraph) -> Result<Vec<u8>> {
    let dtype = model.dtype();
    let mut blobs = Vec::new();
    let mut modules = Vec::new();
    for m in model.modules() {
        let mut params = Vec::new();
        for role in [ParamRole::Weight, ParamRole::Bias] {
            if let Some(t) = m.param(role) {
                params.push(ParamDecl { role, shape: t.shape().to_vec() });
                encode_values(t, dtype, &mut blobs);
            }
        }
        modules.push(ModuleDecl {
            name: m.name().to_string(),
            kind: m.kind().clone(),
            sources: Some(m.sources().to_vec()),
            params,
        });
    }
    let header = ModelHeader {
        version: FORMAT_VERSION,
        dtype,
        byte_order: "LE".into(),
        inputs: model.input_keys().to_vec(),
        outputs: model.outputs().to_vec(),
        modules,
        init: None,
        seed: None,
    };
    with_header(&header, blobs)
}

/// Builds a graph from a model document.
///
/// Parameters come from the blobs when the modules declare them, or from
/// the header's `init` scheme and `seed` when no module does.
pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    let (head, mut blob) = split_header(bytes)?;
    let header: ModelHeader = serde_json::from_slice(head).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("unknown variant") {
            Error::UnknownKind(msg)
        } else {
            Error::Format(msg)
        }
    })?;
    check_version(header.version)?;
    check_byte_order(&header.byte_order)?;
    let mut builder = GraphBuilder::new().dtype(header.dtype);
    for k in &header.inputs {
        builder = builder.input(k);
    }
    for m in &header.modules {
        builder = match &m.sources {
            Some(s) => builder.module_from(&m.name, m.kind.clone(), s),
            None => builder.module(&m.name, m.kind.clone()),
        };
    }
    for o in &header.outputs {
        builder = builder.output(&o.key, &o.module);
    }
    let declares_params = header.modules.iter().any(|m| !m.params.is_empty());
    if !declares_params {
        let init: Init = header
            .init
            .as_deref()
            .ok_or_else(|| Error::Format("model declares neither parameter blobs nor an init scheme".into()))?
            .parse()?;
        if !blob.is_empty() {
            return Err(Error::Format("parameter blobs present but no parameters declared".into()));
        }
        return builder.build(init, header.seed.unwrap_or(0));
    }
    let mut params = TensorMap::new();
    for m in &header.modules {
        for p in &m.params {
            let expected = match p.role {
                ParamRole::Weight => m.kind.weight_shape(),
                ParamRole::Bias => m.kind.bias_shape(),
            };
            let key = format!("{}.{}", m.name, p.role.key());
            if expected.as_deref() != Some(p.shape.as_slice()) {
                return Err(Error::Shape(format!(
                    "parameter {key}: declared {:?}, module kind needs {expected:?}",
                    p.shape
                )));
            }
            let t = decode_values(&mut blob, &key, &p.shape, header.dtype)?;
            params.put(key.as_str(), t)?;
        }
    }
    if !blob.is_empty() {
        return Err(Error::BlobLength { key: "<end of parameters>".into(), expected: 0, found: blob.len() });
    }
    builder.build_with_params(&params)
}

pub fn read_tensormap(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode_tensormap(&fs::read(path)?)
}

pub fn write_tensormap(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    fs::write(path, encode_tensormap(map)?)?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    decode_model(&fs::read(path)?)
}

pub fn write_model(path: impl AsRef<Path>, model: &ModelGraph) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}
