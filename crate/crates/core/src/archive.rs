//! Named-tensor archive format.
//!
//! ```text
//! [0..8)        u64 little-endian header length L
//! [8..8+L)      UTF-8 JSON object, keys in lexicographic order:
//!               {"name": {"dtype": "f32", "shape": [..], "offsets": [begin, end]}, ...}
//! [8+L..)       raw little-endian f32 data, row-major, in offset order
//! ```
//!
//! Offsets are relative to the start of the data region. Entries are
//! contiguous and non-overlapping; the data region ends exactly at the last
//! entry's `end`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Tensors keyed by name, iterated in lexicographic order.
pub type TensorMap = BTreeMap<String, Tensor>;

const DTYPE_F32: &str = "f32";
const LEN_PREFIX: usize = 8;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive truncated: {0}")]
    Truncated(String),
    #[error("header length {declared} exceeds the {available} bytes that follow it")]
    HeaderLengthOverflow { declared: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name:?}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("tensors {first:?} and {second:?} overlap")]
    Overlap { first: String, second: String },
    #[error("data region not contiguous: {0}")]
    Gap(String),
    #[error("{0} bytes of trailing data after the last tensor")]
    TrailingData(u64),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("archive has no tensors")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    dtype: String,
    shape: Vec<usize>,
    offsets: [u64; 2],
}

/// Serialize named tensors to archive bytes.
///
/// Entries may arrive in any order; they are written sorted by name.
pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, ArchiveError> {
    let mut sorted: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, tensor) in entries {
        if name.is_empty() {
            return Err(ArchiveError::InvalidName(name.to_string()));
        }
        if sorted.insert(name, tensor).is_some() {
            return Err(ArchiveError::DuplicateName(name.to_string()));
        }
    }
    if sorted.is_empty() {
        return Err(ArchiveError::Empty);
    }
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, tensor) in &sorted {
        let len = 4 * tensor.numel() as u64;
        header.insert(
            *name,
            EntryHeader { dtype: DTYPE_F32.into(), shape: tensor.shape().to_vec(), offsets: [offset, offset + len] },
        );
        offset += len;
    }
    let json = serde_json::to_vec(&header).map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(LEN_PREFIX + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for tensor in sorted.values() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse and fully validate archive bytes.
pub fn decode(bytes: &[u8]) -> Result<TensorMap, ArchiveError> {
    if bytes.len() < LEN_PREFIX {
        return Err(ArchiveError::Truncated(format!(
            "{} bytes, need at least {LEN_PREFIX} for the header length",
            bytes.len()
        )));
    }
    let declared = u64::from_le_bytes(bytes[..LEN_PREFIX].try_into().expect("8 bytes"));
    let available = (bytes.len() - LEN_PREFIX) as u64;
    if declared > available {
        return Err(ArchiveError::HeaderLengthOverflow { declared, available });
    }
    let header_end = LEN_PREFIX + declared as usize;
    let header_text = std::str::from_utf8(&bytes[LEN_PREFIX..header_end])
        .map_err(|e| ArchiveError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let entries: OrderedEntries =
        serde_json::from_str(header_text).map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
    let entries = entries.0;
    if entries.is_empty() {
        return Err(ArchiveError::Empty);
    }

    let mut seen = BTreeMap::new();
    for (name, entry) in &entries {
        if name.is_empty() {
            return Err(ArchiveError::InvalidName(name.clone()));
        }
        if seen.insert(name.as_str(), ()).is_some() {
            return Err(ArchiveError::DuplicateName(name.clone()));
        }
        if entry.dtype != DTYPE_F32 {
            return Err(ArchiveError::UnsupportedDtype { name: name.clone(), dtype: entry.dtype.clone() });
        }
        let [begin, end] = entry.offsets;
        if end < begin {
            return Err(ArchiveError::ShapeMismatch {
                name: name.clone(),
                detail: format!("offsets [{begin}, {end}] run backwards"),
            });
        }
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(ArchiveError::ShapeMismatch {
                name: name.clone(),
                detail: format!("shape {:?} must be non-empty with positive dims", entry.shape),
            });
        }
        let numel =
            entry.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64)).and_then(|n| n.checked_mul(4));
        if numel != Some(end - begin) {
            return Err(ArchiveError::ShapeMismatch {
                name: name.clone(),
                detail: format!("shape {:?} does not match byte range [{begin}, {end})", entry.shape),
            });
        }
    }

    let mut order: Vec<&(String, EntryHeader)> = entries.iter().collect();
    order.sort_by_key(|(_, e)| (e.offsets[0], e.offsets[1]));
    let mut cursor = 0u64;
    let mut prev: Option<&str> = None;
    for (name, entry) in &order {
        let [begin, end] = entry.offsets;
        if begin < cursor {
            return Err(ArchiveError::Overlap { first: prev.unwrap_or_default().to_string(), second: name.clone() });
        }
        if begin > cursor {
            return Err(ArchiveError::Gap(format!("{} unused bytes before {name:?}", begin - cursor)));
        }
        cursor = end;
        prev = Some(name);
    }

    let data = &bytes[header_end..];
    let data_len = data.len() as u64;
    if data_len < cursor {
        return Err(ArchiveError::Truncated(format!("data region has {data_len} bytes, header needs {cursor}")));
    }
    if data_len > cursor {
        return Err(ArchiveError::TrailingData(data_len - cursor));
    }

    let mut out = TensorMap::new();
    for (name, entry) in entries {
        let [begin, end] = entry.offsets;
        let values = data[begin as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| ArchiveError::ShapeMismatch { name: name.clone(), detail: e.to_string() })?;
        out.insert(name, tensor);
    }
    Ok(out)
}

pub fn write_archive(path: impl AsRef<Path>, tensors: &TensorMap) -> Result<(), ArchiveError> {
    let bytes = encode(tensors.iter().map(|(k, v)| (k.as_str(), v)))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<TensorMap, ArchiveError> {
    decode(&std::fs::read(path)?)
}

/// Header entries in document order, keeping duplicates so they can be reported.
struct OrderedEntries(Vec<(String, EntryHeader)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, EntryHeader>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}
