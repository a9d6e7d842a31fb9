//! Flat tensor container: `name -> (dtype, shape, little-endian data)`.
//!
//! The byte layout is the safetensors one, so public checkpoints converted
//! with the usual tooling load directly:
//!
//! ```text
//! [u64 LE header_len][header_len bytes of JSON][raw tensor bytes]
//! header = { "<name>": { "dtype": "F32", "shape": [..], "data_offsets": [begin, end] }, ... }
//! ```
//!
//! Offsets are relative to the first byte after the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One decoded tensor, always widened to `f64` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Deserialize)]
struct EntryHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Serialize)]
struct EntryHeaderOut<'a> {
    dtype: &'a str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

/// Parses a container held in memory.
pub fn parse(bytes: &[u8]) -> Result<BTreeMap<String, RawTensor>> {
    if bytes.len() < 8 {
        return Err(Error::Load(
            "container shorter than its 8-byte header length".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Load(format!("header length {header_len} exceeds file size")))?;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..body_start])
        .map_err(|e| Error::Load(format!("malformed container header: {e}")))?;
    let body = &bytes[body_start..];

    let mut out = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: EntryHeader = serde_json::from_value(value)
            .map_err(|e| Error::Load(format!("bad header entry for `{name}`: {e}")))?;
        let dtype = match entry.dtype.as_str() {
            "F32" => Dtype::F32,
            "F64" => Dtype::F64,
            other => {
                return Err(Error::Load(format!(
                    "tensor `{name}` has unsupported dtype {other}"
                )))
            }
        };
        let [begin, end] = entry.data_offsets;
        let numel: usize = entry.shape.iter().product();
        if begin > end || end > body.len() || end - begin != numel * dtype.size() {
            return Err(Error::Load(format!(
                "tensor `{name}` data offsets [{begin}, {end}) inconsistent with shape {:?}",
                entry.shape
            )));
        }
        let raw = &body[begin..end];
        let data = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        out.insert(
            name,
            RawTensor {
                dtype,
                shape: entry.shape,
                data,
            },
        );
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<BTreeMap<String, RawTensor>> {
    let bytes = std::fs::read(path.as_ref())?;
    parse(&bytes)
}

/// Serializes tensors as single-precision floats.
pub fn serialize<'a, I>(tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
{
    let mut header = serde_json::Map::new();
    let mut body = Vec::new();
    for (name, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let begin = body.len();
        for v in data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let entry = EntryHeaderOut {
            dtype: "F32",
            shape,
            data_offsets: [begin, body.len()],
        };
        header.insert(
            name.to_string(),
            serde_json::to_value(entry).expect("header entry"),
        );
    }
    let mut header_bytes = serde_json::to_vec(&header).expect("header json");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + body.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&body);
    out
}
