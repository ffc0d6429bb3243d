//! Tensor checkpoint container: bit-exact load, save, and layout validation.
//!
//! File layout: an 8-byte little-endian unsigned header length `N`, then `N`
//! bytes of UTF-8 JSON mapping each tensor name to
//! `{"dtype": "F64"|"F32"|"F16", "shape": [u64...], "data_offsets": [begin, end]}`
//! (plus an optional `"__metadata__"` string map), then the raw data block of
//! little-endian IEEE-754 values in row-major order. Offsets are relative to
//! the start of the data block, and the declared ranges must tile the block
//! exactly — no gaps, no overlaps.
//!
//! Values are promoted to f64 on load and narrowed (round-to-nearest-even)
//! back to each tensor's tagged dtype on save. Tensors iterate in
//! lexicographic name order everywhere, so outputs are deterministic
//! regardless of the layout of input files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use half::f16;
use serde_json::Value;

use crate::error::CheckpointError;

/// Element type tag for stored tensor data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F16,
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Dtype> {
        match tag {
            "F16" => Some(Dtype::F16),
            "F32" => Some(Dtype::F32),
            "F64" => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Decode a little-endian byte slice into working-precision values.
    /// `raw.len()` must be a multiple of the element width.
    fn decode(self, raw: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes(b.try_into().unwrap()).to_f64())
                .collect(),
        }
    }

    /// Narrow working-precision values into this dtype and append the
    /// little-endian bytes. Overflow narrows to the signed infinity.
    fn encode_into(self, values: &[f64], out: &mut Vec<u8>) {
        match self {
            Dtype::F64 => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for v in values {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Dtype::F16 => {
                for v in values {
                    out.extend_from_slice(&f16::from_f64(*v).to_le_bytes());
                }
            }
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Header-level description of one tensor: what the wire format declares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte range [begin, end) relative to the data block.
    pub data_offsets: (u64, u64),
}

/// One materialised tensor: dtype tag, shape, and values promoted to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    pub fn element_count(&self) -> usize {
        self.values.len()
    }
}

/// An ordered map of named tensors plus optional string metadata.
///
/// Immutable once built; all pipeline stages take checkpoints by shared
/// reference and produce fresh ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorData>,
    pub metadata: Option<BTreeMap<String, String>>,
}

const METADATA_KEY: &str = "__metadata__";

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a tensor, validating the checkpoint invariants: non-empty,
    /// non-reserved, unique name, and a buffer whose length matches the
    /// shape product.
    pub fn insert_tensor(
        &mut self,
        name: impl Into<String>,
        dtype: Dtype,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<(), CheckpointError> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::InvalidTensor {
                name,
                reason: "tensor name must be non-empty".into(),
            });
        }
        if name == METADATA_KEY {
            return Err(CheckpointError::InvalidTensor {
                name,
                reason: format!("{METADATA_KEY} is reserved for the metadata map"),
            });
        }
        let expected = shape_product(&shape).ok_or_else(|| CheckpointError::InvalidTensor {
            name: name.clone(),
            reason: "shape product overflows".into(),
        })?;
        if values.len() != expected {
            return Err(CheckpointError::InvalidTensor {
                name,
                reason: format!(
                    "buffer holds {} values but shape {:?} requires {}",
                    values.len(),
                    shape,
                    expected
                ),
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(CheckpointError::InvalidTensor {
                name,
                reason: "duplicate tensor name".into(),
            });
        }
        self.tensors.insert(
            name,
            TensorData {
                dtype,
                shape,
                values,
            },
        );
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorData> {
        self.tensors.get(name)
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of elements across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.values.len()).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Atomic save: the encoded bytes land in a temporary file that is
    /// renamed over `path`, so a failed save never leaves a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
        tmp.write_all(&bytes).map_err(io_err)?;
        tmp.persist(path).map_err(|e| io_err(e.error)).map(|_| ())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::MalformedHeader {
                offset: bytes.len() as u64,
                reason: "file shorter than the 8-byte header length prefix".into(),
            });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| CheckpointError::MalformedHeader {
                offset: bytes.len() as u64,
                reason: format!(
                    "header declares {header_len} bytes but only {} are present",
                    bytes.len().saturating_sub(8)
                ),
            })?;
        let header = &bytes[8..header_end as usize];
        let entries: serde_json::Map<String, Value> =
            serde_json::from_slice(header).map_err(|e| CheckpointError::MalformedHeader {
                offset: 8 + json_error_offset(header, &e),
                reason: e.to_string(),
            })?;

        let mut metadata = None;
        let mut metas: Vec<TensorMeta> = Vec::new();
        for (name, value) in &entries {
            if name == METADATA_KEY {
                metadata = Some(parse_metadata(header, value)?);
                continue;
            }
            metas.push(parse_tensor_entry(header, name, value)?);
        }

        let data_start = header_end;
        let block_len = bytes.len() as u64 - data_start;
        check_tiling(&metas, data_start, block_len)?;

        let mut ckpt = Checkpoint {
            tensors: BTreeMap::new(),
            metadata,
        };
        for meta in metas {
            let (begin, end) = meta.data_offsets;
            let raw = &bytes[(data_start + begin) as usize..(data_start + end) as usize];
            let values = meta.dtype.decode(raw);
            ckpt.tensors.insert(
                meta.name,
                TensorData {
                    dtype: meta.dtype,
                    shape: meta.shape,
                    values,
                },
            );
        }
        Ok(ckpt)
    }

    /// Canonical encoding: tensors in lexicographic name order, offsets tiling
    /// the data block in that same order. Saving the result of a load is
    /// byte-identical when the source file used this canonical layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if let Some(md) = &self.metadata {
            let map: serde_json::Map<String, Value> = md
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(map));
        }
        let mut cursor = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = (t.values.len() * t.dtype.byte_width()) as u64;
            let entry = serde_json::json!({
                "dtype": t.dtype.tag(),
                "shape": t.shape,
                "data_offsets": [cursor, cursor + nbytes],
            });
            header.insert(name.clone(), entry);
            cursor += nbytes;
        }
        let header_bytes =
            serde_json::to_vec(&Value::Object(header)).expect("header is valid JSON");

        let mut out = Vec::with_capacity(8 + header_bytes.len() + cursor as usize);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            t.dtype.encode_into(&t.values, &mut out);
        }
        out
    }
}

/// Succeeds iff `a` and `b` have identical name sets and, per name, identical
/// shapes and dtype tags. Reports the first divergence in lexicographic
/// order.
pub fn validate_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<(), CheckpointError> {
    let mut ia = a.tensors();
    let mut ib = b.tensors();
    loop {
        match (ia.next(), ib.next()) {
            (None, None) => return Ok(()),
            (Some((name, _)), None) => {
                return Err(CheckpointError::Incompatible {
                    name: name.to_string(),
                    reason: "missing from the second checkpoint".into(),
                })
            }
            (None, Some((name, _))) => {
                return Err(CheckpointError::Incompatible {
                    name: name.to_string(),
                    reason: "missing from the first checkpoint".into(),
                })
            }
            (Some((na, ta)), Some((nb, tb))) => {
                if na != nb {
                    // Lexicographic iteration means the smaller name is
                    // absent from the other checkpoint.
                    let (name, reason) = if na < nb {
                        (na, "missing from the second checkpoint")
                    } else {
                        (nb, "missing from the first checkpoint")
                    };
                    return Err(CheckpointError::Incompatible {
                        name: name.to_string(),
                        reason: reason.into(),
                    });
                }
                if ta.shape != tb.shape {
                    return Err(CheckpointError::Incompatible {
                        name: na.to_string(),
                        reason: format!("shape {:?} vs {:?}", ta.shape, tb.shape),
                    });
                }
                if ta.dtype != tb.dtype {
                    return Err(CheckpointError::Incompatible {
                        name: na.to_string(),
                        reason: format!("dtype {} vs {}", ta.dtype, tb.dtype),
                    });
                }
            }
        }
    }
}

fn shape_product(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Byte offset of a JSON parse error within `raw` (not the whole file).
fn json_error_offset(raw: &[u8], err: &serde_json::Error) -> u64 {
    let (line, col) = (err.line().max(1), err.column().max(1));
    let mut line_start = 0usize;
    let mut remaining = line - 1;
    for (i, &b) in raw.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            line_start = i + 1;
        }
    }
    (line_start + col - 1).min(raw.len()) as u64
}

/// Best-effort absolute byte position of a tensor's key within the file, for
/// error reporting. Falls back to the header start.
fn key_offset(header: &[u8], name: &str) -> u64 {
    let needle = match serde_json::to_string(name) {
        Ok(s) => s,
        Err(_) => return 8,
    };
    if needle.is_empty() || needle.len() > header.len() {
        return 8;
    }
    header
        .windows(needle.len())
        .position(|w| w == needle.as_bytes())
        .map(|p| 8 + p as u64)
        .unwrap_or(8)
}

fn parse_metadata(
    header: &[u8],
    value: &Value,
) -> Result<BTreeMap<String, String>, CheckpointError> {
    let obj = value
        .as_object()
        .ok_or_else(|| CheckpointError::MalformedHeader {
            offset: key_offset(header, METADATA_KEY),
            reason: format!("{METADATA_KEY} must be an object of strings"),
        })?;
    let mut map = BTreeMap::new();
    for (k, v) in obj {
        let s = v.as_str().ok_or_else(|| CheckpointError::MalformedHeader {
            offset: key_offset(header, METADATA_KEY),
            reason: format!("{METADATA_KEY} value for {k:?} is not a string"),
        })?;
        map.insert(k.clone(), s.to_string());
    }
    Ok(map)
}

fn parse_tensor_entry(
    header: &[u8],
    name: &str,
    value: &Value,
) -> Result<TensorMeta, CheckpointError> {
    let offset = key_offset(header, name);
    let bad = |reason: String| CheckpointError::BadTensor {
        name: name.to_string(),
        offset,
        reason,
    };
    if name.is_empty() {
        return Err(bad("tensor name must be non-empty".into()));
    }
    let obj = value
        .as_object()
        .ok_or_else(|| bad("entry is not a JSON object".into()))?;

    let tag = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string field \"dtype\"".into()))?;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| CheckpointError::UnknownDtype {
        name: name.to_string(),
        tag: tag.to_string(),
        offset,
    })?;

    let shape_val = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array field \"shape\"".into()))?;
    let mut shape = Vec::with_capacity(shape_val.len());
    for d in shape_val {
        let d = d
            .as_u64()
            .ok_or_else(|| bad(format!("shape entry {d} is not a non-negative integer")))?;
        shape.push(d as usize);
    }

    let offs = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array field \"data_offsets\"".into()))?;
    if offs.len() != 2 {
        return Err(bad(format!(
            "data_offsets must hold exactly [begin, end], got {} entries",
            offs.len()
        )));
    }
    let begin = offs[0]
        .as_u64()
        .ok_or_else(|| bad("data_offsets begin is not a non-negative integer".into()))?;
    let end = offs[1]
        .as_u64()
        .ok_or_else(|| bad("data_offsets end is not a non-negative integer".into()))?;
    if end < begin {
        return Err(bad(format!(
            "data_offsets end {end} precedes begin {begin}"
        )));
    }

    let elements = shape_product(&shape).ok_or_else(|| bad("shape product overflows".into()))?;
    let expected = (elements as u64)
        .checked_mul(dtype.byte_width() as u64)
        .ok_or_else(|| bad("byte size overflows".into()))?;
    if end - begin != expected {
        return Err(bad(format!(
            "declared range holds {} bytes but shape {:?} at dtype {} requires {}",
            end - begin,
            shape,
            dtype,
            expected
        )));
    }

    Ok(TensorMeta {
        name: name.to_string(),
        dtype,
        shape,
        data_offsets: (begin, end),
    })
}

/// The declared ranges must tile [0, block_len) contiguously in some order.
fn check_tiling(
    metas: &[TensorMeta],
    data_start: u64,
    block_len: u64,
) -> Result<(), CheckpointError> {
    for meta in metas {
        if meta.data_offsets.1 > block_len {
            return Err(CheckpointError::Truncated {
                name: meta.name.clone(),
                needed: data_start + meta.data_offsets.1,
                available: data_start + block_len,
            });
        }
    }
    let mut ranges: Vec<&TensorMeta> = metas
        .iter()
        .filter(|m| m.data_offsets.0 != m.data_offsets.1)
        .collect();
    ranges.sort_by_key(|m| m.data_offsets);
    let mut cursor = 0u64;
    for meta in ranges {
        let (begin, end) = meta.data_offsets;
        if begin > cursor {
            return Err(CheckpointError::OffsetGap {
                offset: data_start + cursor,
            });
        }
        if begin < cursor {
            return Err(CheckpointError::OffsetOverlap {
                name: meta.name.clone(),
                offset: data_start + begin,
            });
        }
        cursor = end;
    }
    if cursor != block_len {
        return Err(CheckpointError::OffsetGap {
            offset: data_start + cursor,
        });
    }
    Ok(())
}
