// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor container.
//!
//! ```text
//! "TARS" | version: u32 LE | header_len: u64 LE | header JSON | f32 LE data
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, offset}` where
//! `offset` is a byte offset into the data section. Free-form metadata lives
//! under [`METADATA_KEY`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"TARS";
pub const VERSION: u32 = 1;
pub const METADATA_KEY: &str = "__metadata__";
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorInfo {
    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parsed header, tensors in data order.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u32,
    pub metadata: Value,
    pub tensors: Vec<(String, TensorInfo)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, String> {
        let mut header = serde_json::Map::new();
        let mut offset = 0u64;
        for t in &self.tensors {
            if t.name == METADATA_KEY {
                return Err(format!("tensor name {METADATA_KEY} is reserved"));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(format!("tensor {}: shape {:?} does not hold {} values", t.name, t.shape, t.data.len()));
            }
            let info = TensorInfo {
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
            };
            if header.insert(t.name.clone(), serde_json::to_value(info).expect("plain struct")).is_some() {
                return Err(format!("duplicate tensor {}", t.name));
            }
            offset += 4 * t.data.len() as u64;
        }
        header.insert(METADATA_KEY.into(), self.metadata.clone());
        let header = serde_json::to_vec(&Value::Object(header)).expect("json value");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let (header, data) = split(bytes)?;
        let tensors = header
            .tensors
            .into_iter()
            .map(|(name, info)| {
                let start = info.offset as usize;
                let end = start + 4 * info.numel().expect("checked in split");
                let data = data[start..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor {
                    name,
                    shape: info.shape,
                    data,
                }
            })
            .collect();
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| CliError::format(path, m))
    }

    /// Writes through a temporary sibling so readers never see a partial file.
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let bytes = self.to_bytes().map_err(|m| CliError::format(path, m))?;
        write_atomic(path, &bytes)
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<Header, String> {
    split(bytes).map(|(h, _)| h)
}

pub fn read_header(path: &Path) -> CliResult<Header> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_header(&bytes).map_err(|m| CliError::format(path, m))
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8]), String> {
    if bytes.len() < PREAMBLE {
        return Err(format!("file is {} bytes, shorter than the preamble", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic, not a TARS container".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("unsupported container version {version}"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREAMBLE..];
    if header_len > rest.len() as u64 {
        return Err(format!("header length {header_len} exceeds file size"));
    }
    let (raw, data) = rest.split_at(header_len as usize);
    let mut map: BTreeMap<String, Value> =
        serde_json::from_slice(raw).map_err(|e| format!("header: {e}"))?;
    let metadata = map.remove(METADATA_KEY).unwrap_or(Value::Null);
    let mut tensors = Vec::with_capacity(map.len());
    for (name, v) in map {
        let info: TensorInfo = serde_json::from_value(v).map_err(|e| format!("tensor {name}: {e}"))?;
        if info.dtype != "f32" {
            return Err(format!("tensor {name}: unsupported dtype {}", info.dtype));
        }
        let bytes_needed = info
            .numel()
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format!("tensor {name}: shape overflows"))?;
        let end = (info.offset as usize).checked_add(bytes_needed);
        if !info.offset.is_multiple_of(4) || end.is_none_or(|e| e > data.len()) {
            return Err(format!("tensor {name}: data range out of bounds"));
        }
        tensors.push((name, info));
    }
    tensors.sort_by(|a, b| a.1.offset.cmp(&b.1.offset).then_with(|| a.0.cmp(&b.0)));
    for pair in tensors.windows(2) {
        let end = pair[0].1.offset + 4 * pair[0].1.numel().expect("checked") as u64;
        if end > pair[1].1.offset {
            return Err(format!("tensors {} and {} overlap", pair[0].0, pair[1].0));
        }
    }
    Ok((
        Header {
            version,
            metadata,
            tensors,
        },
        data,
    ))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
