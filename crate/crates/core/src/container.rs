//! Named-tensor container shared by traces, weight checkpoints and PCA exports.
//!
//! Layout:
//!
//! ```text
//! [u64 LE header length L][L bytes UTF-8 JSON index][raw little-endian f32 buffers]
//! ```
//!
//! The index maps every tensor name to `{"dtype": "F32", "shape": [...],
//! "byte_range": [begin, end)}` with offsets relative to the start of the
//! buffer section. A `"__metadata__"` entry holds string key/value pairs.
//! Tensors are laid out in lexicographic name order and the header is padded
//! with spaces to a multiple of 8 bytes, so identical content always encodes
//! to identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the JSON index size; anything larger is treated as corrupt.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; rejects element-count mismatches and non-finite values.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::Format(format!("`{METADATA_KEY}` is reserved")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}` declares shape {shape:?} ({numel} elements) but holds {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.tensors.insert(name, TensorEntry { shape, data });
        Ok(())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("metadata key `{key}` missing")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| {
            Error::Format(format!("metadata key `{key}` has unparsable value `{raw}`"))
        })
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorEntry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("required tensor `{name}` missing")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Map::new();
        let meta: Map<String, Value> = self
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        index.insert(METADATA_KEY.to_string(), Value::Object(meta));

        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
            let len = t.data.len() * 4;
            index.insert(
                name.clone(),
                json!({ "dtype": "F32", "shape": t.shape, "byte_range": [offset, offset + len] }),
            );
            offset += len;
        }

        let mut header = serde_json::to_vec(&Value::Object(index))?;
        while (8 + header.len()) % 8 != 0 {
            header.push(b' ');
        }

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(&self.to_bytes()?)?;
        sink.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(
                "file shorter than the 8-byte header length".into(),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds file size"
            )));
        }
        let header_end = 8 + header_len as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let index: Map<String, Value> = match serde_json::from_str(header.trim_end())
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?
        {
            Value::Object(m) => m,
            _ => return Err(Error::Format("header is not a JSON object".into())),
        };
        let buffer = &bytes[header_end..];

        let mut out = Container::new();
        let mut ranges: Vec<(usize, usize, String)> = Vec::new();
        for (name, entry) in index {
            if name == METADATA_KEY {
                let Value::Object(meta) = entry else {
                    return Err(Error::Format("metadata is not an object".into()));
                };
                for (k, v) in meta {
                    let Value::String(s) = v else {
                        return Err(Error::Format(format!(
                            "metadata value for `{k}` is not a string"
                        )));
                    };
                    out.metadata.insert(k, s);
                }
                continue;
            }
            let (shape, begin, end) = parse_entry(&name, &entry)?;
            let numel: usize = shape.iter().product();
            if end < begin || end > buffer.len() {
                return Err(Error::Format(format!(
                    "tensor `{name}` byte range [{begin},{end}) out of bounds"
                )));
            }
            if end - begin != numel * 4 {
                return Err(Error::Format(format!(
                    "tensor `{name}` byte range holds {} bytes, shape {shape:?} needs {}",
                    end - begin,
                    numel * 4
                )));
            }
            let data: Vec<f32> = buffer[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
            ranges.push((begin, end, name.clone()));
            out.tensors.insert(name, TensorEntry { shape, data });
        }

        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!(
                    "tensors `{}` and `{}` overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(out)
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_entry(name: &str, entry: &Value) -> Result<(Vec<usize>, usize, usize)> {
    let bad = |what: &str| Error::Format(format!("tensor `{name}`: {what}"));
    let obj = entry
        .as_object()
        .ok_or_else(|| bad("index entry is not an object"))?;
    match obj.get("dtype").and_then(Value::as_str) {
        Some("F32") => {}
        Some(other) => return Err(bad(&format!("unsupported dtype {other}"))),
        None => return Err(bad("missing dtype")),
    }
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| {
            d.as_u64()
                .map(|d| d as usize)
                .ok_or_else(|| bad("shape entries must be non-negative integers"))
        })
        .collect::<Result<Vec<_>>>()?;
    let range = obj
        .get("byte_range")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing byte_range"))?;
    if range.len() != 2 {
        return Err(bad("byte_range must have two entries"));
    }
    let begin = range[0].as_u64().ok_or_else(|| bad("byte_range begin"))? as usize;
    let end = range[1].as_u64().ok_or_else(|| bad("byte_range end"))? as usize;
    Ok((shape, begin, end))
}
