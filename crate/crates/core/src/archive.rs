//! Safetensors-compatible tensor archives.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
//! tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the raw payload. Offsets are relative to
//! the start of the payload and must tile it exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::write_atomic;

const METADATA_KEY: &str = "__metadata__";

/// Largest header accepted when parsing (100 MiB, same cap as the reference
/// implementation of the format).
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
    I64,
    I32,
    I16,
    I8,
    U8,
    Bool,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F16 | Dtype::BF16 | Dtype::I16 => 2,
            Dtype::I8 | Dtype::U8 | Dtype::Bool => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::I64 => "I64",
            Dtype::I32 => "I32",
            Dtype::I16 => "I16",
            Dtype::I8 => "I8",
            Dtype::U8 => "U8",
            Dtype::Bool => "BOOL",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "F64" => Dtype::F64,
            "F32" => Dtype::F32,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "I64" => Dtype::I64,
            "I32" => Dtype::I32,
            "I16" => Dtype::I16,
            "I8" => Dtype::I8,
            "U8" => Dtype::U8,
            "BOOL" => Dtype::Bool,
            _ => return None,
        })
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// `[begin, end)` byte range within the payload.
    pub offsets: (usize, usize),
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.offsets.1 - self.offsets.0
    }
}

/// A parsed archive: header entries, the payload they index and the
/// free-form string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, TensorInfo>,
    payload: Vec<u8>,
    metadata: BTreeMap<String, String>,
}

/// Header entries in file order; duplicate keys are kept so they can be
/// rejected instead of silently collapsed by a map.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn parse_entry(name: &str, value: &Value) -> Result<TensorInfo> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(format!("entry `{name}` is not an object")))?;
    let tag = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("entry `{name}` lacks a dtype")))?;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::DtypeUnsupported {
        tensor: name.to_string(),
        dtype: tag.to_string(),
    })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(format!("entry `{name}` lacks a shape")))?
        .iter()
        .map(|d| {
            d.as_u64()
                .map(|d| d as usize)
                .ok_or_else(|| malformed(format!("entry `{name}` has a non-integer dimension")))
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| malformed(format!("entry `{name}` lacks a data_offsets pair")))?;
    let begin = offsets[0]
        .as_u64()
        .ok_or_else(|| malformed(format!("entry `{name}` has a bad begin offset")))? as usize;
    let end = offsets[1]
        .as_u64()
        .ok_or_else(|| malformed(format!("entry `{name}` has a bad end offset")))? as usize;
    if end < begin {
        return Err(malformed(format!("entry `{name}` has end before begin")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed(format!("entry `{name}` shape overflows")))?;
    if numel.checked_mul(dtype.size()) != Some(end - begin) {
        return Err(malformed(format!(
            "entry `{name}`: shape {shape:?} of {dtype} needs {} bytes but offsets span {}",
            numel.saturating_mul(dtype.size()),
            end - begin
        )));
    }
    Ok(TensorInfo {
        dtype,
        shape,
        offsets: (begin, end),
    })
}

impl TensorArchive {
    /// Parses a complete archive image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(malformed("file shorter than the 8-byte length prefix"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
            return Err(malformed(format!("header length {header_len} exceeds file")));
        }
        let header_end = 8 + header_len as usize;
        let header_text =
            std::str::from_utf8(&bytes[8..header_end]).map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
        let RawHeader(entries) =
            serde_json::from_str(header_text).map_err(|e| malformed(format!("header JSON: {e}")))?;

        let mut tensors = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut seen_metadata = false;
        for (name, value) in entries {
            if name == METADATA_KEY {
                if seen_metadata {
                    return Err(malformed("duplicate __metadata__"));
                }
                seen_metadata = true;
                let obj = value
                    .as_object()
                    .ok_or_else(|| malformed("__metadata__ is not an object"))?;
                for (k, v) in obj {
                    let s = v
                        .as_str()
                        .ok_or_else(|| malformed(format!("metadata `{k}` is not a string")))?;
                    metadata.insert(k.clone(), s.to_string());
                }
                continue;
            }
            let info = parse_entry(&name, &value)?;
            if tensors.insert(name.clone(), info).is_some() {
                return Err(malformed(format!("duplicate tensor name `{name}`")));
            }
        }

        let payload = bytes[header_end..].to_vec();
        check_tiling(&tensors, payload.len())?;
        Ok(Self {
            tensors,
            payload,
            metadata,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Serialises with tensors laid out in lexicographic name order and the
    /// header padded with spaces to an 8-byte boundary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            let meta: serde_json::Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        for (name, info) in &self.tensors {
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": info.dtype.tag(),
                    "shape": info.shape,
                    "data_offsets": [info.offsets.0, info.offsets.1],
                }),
            );
        }
        let mut text = serde_json::to_string(&Value::Object(header)).expect("header serialises");
        while (8 + text.len()) % 8 != 0 {
            text.push(' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + self.payload.len());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorInfo> {
        &self.tensors
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.get(name)
    }

    pub fn tensor_bytes(&self, name: &str) -> Option<&[u8]> {
        self.tensors
            .get(name)
            .map(|info| &self.payload[info.offsets.0..info.offsets.1])
    }

    /// Reads a floating-point tensor as f32; F16 and BF16 are widened.
    pub fn tensor_f32(&self, name: &str) -> Result<Vec<f32>> {
        let info = self
            .info(name)
            .ok_or_else(|| Error::InvalidInput(format!("archive has no tensor `{name}`")))?;
        let bytes = &self.payload[info.offsets.0..info.offsets.1];
        Ok(match info.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => {
                return Err(Error::DtypeUnsupported {
                    tensor: name.to_string(),
                    dtype: other.to_string(),
                })
            }
        })
    }

    /// Reads an F64 or F32 tensor as f64.
    pub fn tensor_f64(&self, name: &str) -> Result<Vec<f64>> {
        let info = self
            .info(name)
            .ok_or_else(|| Error::InvalidInput(format!("archive has no tensor `{name}`")))?;
        let bytes = &self.payload[info.offsets.0..info.offsets.1];
        Ok(match info.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => {
                return Err(Error::DtypeUnsupported {
                    tensor: name.to_string(),
                    dtype: other.to_string(),
                })
            }
        })
    }

    /// Header as the JSON value that would be written, without padding.
    pub fn header_json(&self) -> Value {
        let mut header = serde_json::Map::new();
        for (name, info) in &self.tensors {
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": info.dtype.tag(),
                    "shape": info.shape,
                    "data_offsets": [info.offsets.0, info.offsets.1],
                }),
            );
        }
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("string map"),
            );
        }
        Value::Object(header)
    }
}

fn check_tiling(tensors: &BTreeMap<String, TensorInfo>, payload_len: usize) -> Result<()> {
    let mut spans: Vec<(usize, usize, &str)> = tensors
        .iter()
        .map(|(n, i)| (i.offsets.0, i.offsets.1, n.as_str()))
        .collect();
    spans.sort();
    let mut cursor = 0usize;
    for (begin, end, name) in spans {
        if begin < cursor {
            return Err(malformed(format!("tensor `{name}` overlaps its predecessor")));
        }
        if begin > cursor {
            return Err(malformed(format!(
                "gap in payload before tensor `{name}` ({cursor}..{begin})"
            )));
        }
        cursor = end;
    }
    if cursor > payload_len {
        return Err(malformed(format!(
            "declared offsets end at {cursor} but payload has {payload_len} bytes"
        )));
    }
    if cursor < payload_len {
        return Err(malformed(format!(
            "payload has {} trailing bytes not covered by any tensor",
            payload_len - cursor
        )));
    }
    Ok(())
}

/// Accumulates tensors and produces an archive laid out in name order.
#[derive(Debug, Default)]
pub struct ArchiveBuilder {
    tensors: BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)>,
    metadata: BTreeMap<String, String>,
}

impl ArchiveBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn insert_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Adds raw little-endian bytes.
    pub fn add_raw(&mut self, name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) -> Result<()> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel * dtype.size() != bytes.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}`: shape {shape:?} of {dtype} needs {} bytes, got {}",
                numel * dtype.size(),
                bytes.len()
            )));
        }
        if name == METADATA_KEY {
            return Err(Error::InvalidInput(format!("`{METADATA_KEY}` is reserved")));
        }
        if self.tensors.insert(name.clone(), (dtype, shape, bytes)).is_some() {
            return Err(Error::InvalidInput(format!("duplicate tensor `{name}`")));
        }
        Ok(())
    }

    pub fn add_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f32]) -> Result<()> {
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.add_raw(name, Dtype::F32, shape, bytes)
    }

    pub fn add_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.add_raw(name, Dtype::F64, shape, bytes)
    }

    pub fn build(self) -> TensorArchive {
        let mut tensors = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, (dtype, shape, bytes)) in self.tensors {
            let begin = payload.len();
            payload.extend_from_slice(&bytes);
            tensors.insert(
                name,
                TensorInfo {
                    dtype,
                    shape,
                    offsets: (begin, payload.len()),
                },
            );
        }
        TensorArchive {
            tensors,
            payload,
            metadata: self.metadata,
        }
    }
}
