//! Portable weight file.
//!
//! ```text
//! "TGW1"                      4 bytes magic
//! header_len                  u64 little-endian
//! header                      UTF-8 JSON, header_len bytes
//! data                        raw little-endian f32 values
//! ```
//!
//! The header is `{"tensors": {name: {"dtype": "f32", "shape": [...],
//! "offset": o, "byte_length": n}}, "meta": {...}}`. Offsets are relative to
//! the start of the data region and 8-byte aligned; each tensor is stored
//! row-major, exactly as laid out in memory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::inception::attach_head;
use super::inception::build_backbone_with_eps;
use super::spec::GraphSpec;
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TGW1";
const ALIGN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

/// Architecture parameters needed to rebuild the graph a file belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightFileMeta {
    pub format_version: u32,
    pub input_height: usize,
    pub input_width: usize,
    pub bn_eps: f64,
    pub hidden_units: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub classes: Option<usize>,
}

impl WeightFileMeta {
    pub fn for_graph(graph: &GraphSpec) -> Self {
        let [h, w, _] = graph.input_size();
        let bn_eps = graph
            .layers()
            .iter()
            .find_map(|l| match l.kind {
                super::spec::LayerKind::BatchNorm { eps } => Some(eps),
                _ => None,
            })
            .unwrap_or(crate::ops::DEFAULT_BN_EPS);
        let head = graph.head();
        Self {
            format_version: 1,
            input_height: h,
            input_width: w,
            bn_eps,
            hidden_units: head.map(|h| h.hidden_units),
            dropout_rate: head.map(|h| h.dropout_rate),
            classes: head.map(|h| h.classes),
        }
    }

    /// Rebuild the graph described by this metadata.
    pub fn build_graph(&self) -> Result<GraphSpec> {
        let backbone = build_backbone_with_eps(self.input_height, self.input_width, self.bn_eps)?;
        match (self.hidden_units, self.dropout_rate, self.classes) {
            (Some(hidden), Some(rate), Some(classes)) => attach_head(backbone, hidden, rate, classes),
            (None, None, None) => Ok(backbone),
            _ => Err(Error::CorruptHeader("incomplete head metadata".into())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, TensorEntry>,
    meta: WeightFileMeta,
}

/// Serialize `store` in its own order.
pub fn encode_weights(store: &WeightStore, meta: &WeightFileMeta) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0usize;
    for (name, entry) in store.iter() {
        let byte_length = entry.tensor.len() * 4;
        tensors.insert(
            name.to_string(),
            TensorEntry {
                dtype: "f32".into(),
                shape: entry.tensor.shape().to_vec(),
                offset: offset as u64,
                byte_length: byte_length as u64,
            },
        );
        offset += byte_length.next_multiple_of(ALIGN);
    }
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: meta.clone(),
    })
    .map_err(|e| Error::CorruptHeader(e.to_string()))?;

    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, entry) in store.iter() {
        let start = out.len();
        for v in entry.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let written = out.len() - start;
        out.resize(start + written.next_multiple_of(ALIGN), 0);
    }
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptHeader("missing TGW1 magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let end = 12u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::CorruptHeader(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let header: Header = serde_json::from_slice(&bytes[12..end])
        .map_err(|e| Error::CorruptHeader(format!("invalid header JSON: {e}")))?;
    for (name, t) in &header.tensors {
        if t.dtype != "f32" {
            return Err(Error::CorruptHeader(format!("`{name}` has unsupported dtype {}", t.dtype)));
        }
        let numel: usize = t.shape.iter().product();
        if t.byte_length != numel as u64 * 4 {
            return Err(Error::CorruptHeader(format!(
                "`{name}` byte_length {} does not match shape {:?}",
                t.byte_length, t.shape
            )));
        }
        if t.offset % ALIGN as u64 != 0 {
            return Err(Error::CorruptHeader(format!("`{name}` offset {} is not 8-byte aligned", t.offset)));
        }
    }
    Ok((header, &bytes[end..]))
}

fn read_tensor(name: &str, entry: &TensorEntry, data: &[u8]) -> Result<Tensor> {
    let start = entry.offset as usize;
    let bytes = start
        .checked_add(entry.byte_length as usize)
        .and_then(|end| data.get(start..end))
        .ok_or_else(|| Error::TruncatedData { name: name.to_string() })?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(entry.shape.clone(), values)
}

/// Decode a weight file and validate names and shapes against `graph`.
pub fn decode_weights(graph: &GraphSpec, bytes: &[u8]) -> Result<WeightStore> {
    let (header, data) = split_header(bytes)?;
    let mut store = WeightStore::new();
    for layer in graph.layers() {
        for w in &layer.weights {
            let entry = header
                .tensors
                .get(&w.name)
                .ok_or_else(|| Error::MissingWeight(w.name.clone()))?;
            if entry.shape != w.shape {
                return Err(Error::WeightShape {
                    name: w.name.clone(),
                    expected: w.shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            let tensor = read_tensor(&w.name, entry, data)?;
            let trainable = super::params::TrainablePolicy::FullFinetune.is_trainable(w, layer.in_head());
            store.insert(w.name.clone(), tensor, trainable);
        }
    }
    if let Some(extra) = header.tensors.keys().find(|k| store.entry(k).is_none()) {
        return Err(Error::ExtraWeight(extra.clone()));
    }
    Ok(store)
}

pub fn export_weights(graph: &GraphSpec, store: &WeightStore, path: &Path) -> Result<()> {
    store.validate(graph)?;
    let bytes = encode_weights(store, &WeightFileMeta::for_graph(graph))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(graph: &GraphSpec, path: &Path) -> Result<WeightStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(graph, &bytes)
}

pub fn read_meta(path: &Path) -> Result<WeightFileMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0.meta)
}

/// Read the architecture from the file header, rebuild the graph and load.
pub fn load_with_graph(path: &Path) -> Result<(GraphSpec, WeightStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = split_header(&bytes)?;
    let graph = header.meta.build_graph()?;
    let store = decode_weights(&graph, &bytes)?;
    Ok((graph, store))
}
