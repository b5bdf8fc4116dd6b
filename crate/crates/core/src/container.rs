//! Binary container: magic, version, JSON header, then flat little-endian
//! `f64` arrays.
//!
//! ```text
//! b"HOMOGBIN" | u32 version | u64 header length | header JSON | payload
//! ```
//!
//! The header carries an `arrays` table of `{name, len, offset}` (offsets in
//! values from the payload start) and `payload_bytes`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HOMOGBIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Value,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

impl Container {
    pub fn new(header: Value) -> Self {
        Container {
            header,
            arrays: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.arrays.insert(name.into(), data);
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut table = Vec::new();
        let mut off = 0usize;
        for (name, data) in &self.arrays {
            table.push(json!({"name": name, "len": data.len(), "offset": off}));
            off += data.len();
        }
        let mut header = self.header.clone();
        let obj = header
            .as_object_mut()
            .ok_or_else(|| Error::Format("header must be a JSON object".into()))?;
        obj.insert("arrays".into(), Value::Array(table));
        obj.insert("payload_bytes".into(), json!(off * 8));
        let hbytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + hbytes.len() + off * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&hbytes);
        for data in self.arrays.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let start = 20 + hlen;
        if bytes.len() < start {
            return Err(Error::Truncated {
                expected: start,
                found: bytes.len(),
            });
        }
        let mut header: Value = serde_json::from_slice(&bytes[20..start])?;
        let payload = &bytes[start..];
        let expected = header["payload_bytes"]
            .as_u64()
            .ok_or_else(|| Error::Format("missing payload_bytes".into()))? as usize;
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let mut arrays = BTreeMap::new();
        let table = header["arrays"]
            .as_array()
            .ok_or_else(|| Error::Format("missing array table".into()))?
            .clone();
        for entry in table {
            let name = entry["name"]
                .as_str()
                .ok_or_else(|| Error::Format("array without name".into()))?;
            let len = entry["len"].as_u64().unwrap_or(0) as usize;
            let off = entry["offset"].as_u64().unwrap_or(0) as usize;
            if (off + len) * 8 > payload.len() {
                return Err(Error::Truncated {
                    expected: (off + len) * 8,
                    found: payload.len(),
                });
            }
            let data = payload[off * 8..(off + len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name.to_string(), data);
        }
        if let Some(obj) = header.as_object_mut() {
            obj.remove("arrays");
            obj.remove("payload_bytes");
        }
        Ok(Container { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the header's `fingerprint` equals `expected`.
    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        let found = self.header["fingerprint"].as_str().unwrap_or("");
        if found != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }
}
