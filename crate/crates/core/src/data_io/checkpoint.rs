//! Checkpoint layout: a textual header
//!
//! ```text
//! LMCKPT
//! version 1
//! tensor <name> <rows> <cols>
//! ...
//! config <key> <value>
//! ...
//! end
//! ```
//!
//! followed by the tensors' little-endian `f32` values, concatenated in
//! header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC_LINE: &str = "LMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelCheckpoint {
    pub tensors: Vec<NamedTensor>,
    /// Echo of the configuration the tensors were trained with.
    pub config: BTreeMap<String, String>,
}

impl ModelCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC_LINE}\nversion {CHECKPOINT_VERSION}\n");
        for t in &self.tensors {
            if t.name.is_empty() || t.name.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("tensor name {:?} must be non-empty without spaces", t.name)));
            }
            if t.rows * t.cols != t.data.len() {
                return Err(Error::shape(format!("tensor {}: {}x{} vs {} values", t.name, t.rows, t.cols, t.data.len())));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {}", t.name)));
            }
            header.push_str(&format!("tensor {} {} {}\n", t.name, t.rows, t.cols));
        }
        for (k, v) in &self.config {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::invalid(format!("config entry {k:?} is not header-safe")));
            }
            header.push_str(&format!("config {k} {v}\n"));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Truncated("checkpoint header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| Error::invalid("checkpoint header is not UTF-8"))
        };

        if bytes.len() < MAGIC_LINE.len() + 1 || &bytes[..MAGIC_LINE.len() + 1] != b"LMCKPT\n" {
            return Err(Error::BadMagic { expected: MAGIC_LINE });
        }
        next_line()?;
        let version = next_line()?;
        let expected = format!("version {CHECKPOINT_VERSION}");
        if version != expected {
            return Err(Error::VersionMismatch {
                found: version.to_string(),
                expected,
            });
        }

        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let mut config = BTreeMap::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("tensor"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::invalid(format!("bad tensor header line {line:?}")))
                    };
                    if f.len() != 3 {
                        return Err(Error::invalid(format!("bad tensor header line {line:?}")));
                    }
                    shapes.push((f[0].to_string(), parse(f[1])?, parse(f[2])?));
                }
                (Some("config"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    config.insert(k.to_string(), v.to_string());
                }
                _ => return Err(Error::invalid(format!("unrecognised header line {line:?}"))),
            }
        }

        let blob = &bytes[pos..];
        let needed: usize = shapes.iter().map(|(_, r, c)| r * c * 4).sum();
        if blob.len() < needed {
            return Err(Error::Truncated(format!(
                "checkpoint blob holds {} values, header declares {}",
                blob.len() / 4,
                needed / 4
            )));
        }
        if blob.len() > needed {
            return Err(Error::shape(format!(
                "checkpoint blob holds {} bytes beyond the declared tensors",
                blob.len() - needed
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            let data: Vec<f32> = blob[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            offset += 4 * n;
            tensors.push(NamedTensor { name, rows, cols, data });
        }
        Ok(Self { tensors, config })
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}
