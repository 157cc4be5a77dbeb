//! The `UNICON01` array container shared by model checkpoints, adapter
//! checkpoints, probe snapshots and dataset cases.
//!
//! Layout:
//!
//! ```text
//! 0..8        magic "UNICON01"
//! 8..16       manifest length M, u64 little-endian
//! 16..16+M    UTF-8 manifest, one record per line:
//!               meta <key> <value>
//!               array <name> f64 <d0,d1,..> <byte offset into payload>
//! 16+M..      payload: every array as little-endian f64, in manifest order
//! ```
//!
//! `meta payload_sha256` holds the SHA-256 of the payload region and is
//! checked on every read.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Parameters};

pub const MAGIC: &[u8; 8] = b"UNICON01";
const HEADER: usize = 16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(p: &dyn Parameters) -> Self {
        let mut c = Self::new();
        p.visit(&mut |n, t| {
            c.arrays.insert(n.to_string(), t.clone());
        });
        c
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format {
                offset: 0,
                reason: format!("manifest lacks meta field {key:?}"),
            })
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays.get(name).ok_or_else(|| Error::Format {
            offset: 0,
            reason: format!("container lacks array {name:?}"),
        })
    }

    pub fn into_store(self) -> ParamStore {
        self.arrays.into_iter().collect()
    }

    pub fn payload_digest(&self) -> String {
        payload_digest(self.arrays.values())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        let mut payload = Vec::new();
        for (k, v) in &self.meta {
            if k == "payload_sha256" {
                continue;
            }
            check_token(k)?;
            if v.contains('\n') {
                return Err(Error::Contract(format!(
                    "meta value for {k:?} contains a newline"
                )));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.arrays {
            check_token(name)?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!(
                "array {name} f64 {} {}\n",
                dims.join(","),
                payload.len()
            ));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        manifest.push_str(&format!(
            "meta payload_sha256 {}\n",
            hex::encode(Sha256::digest(&payload))
        ));
        let mut out = Vec::with_capacity(HEADER + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(format_err(bytes.len(), "truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(format_err(0, "bad magic, expected UNICON01"));
        }
        let m = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER
            .checked_add(m)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_err(bytes.len(), "truncated manifest"))?;
        let manifest = std::str::from_utf8(&bytes[HEADER..payload_start])
            .map_err(|e| format_err(HEADER + e.valid_up_to(), "manifest is not UTF-8"))?;
        let payload = &bytes[payload_start..];

        let mut c = Container::new();
        let mut expected_offset = 0usize;
        let mut line_offset = HEADER;
        for line in manifest.lines() {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => {
                    c.meta.insert(k.to_string(), v.unwrap_or("").to_string());
                }
                (Some("array"), Some(name), Some(rest)) => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    let [dtype, dims, off] = fields[..] else {
                        return Err(format_err(line_offset, "malformed array record"));
                    };
                    if dtype != "f64" {
                        return Err(format_err(
                            line_offset,
                            &format!("unsupported dtype {dtype}"),
                        ));
                    }
                    let shape: Vec<usize> = dims
                        .split(',')
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| format_err(line_offset, "bad shape"))?;
                    let off: usize = off
                        .parse()
                        .map_err(|_| format_err(line_offset, "bad offset"))?;
                    if off != expected_offset {
                        return Err(format_err(line_offset, "non-contiguous array offset"));
                    }
                    let numel: usize = shape.iter().product();
                    let end = off + numel * 8;
                    if end > payload.len() {
                        return Err(format_err(
                            payload_start + payload.len(),
                            &format!("payload truncated inside {name:?}"),
                        ));
                    }
                    let data = payload[off..end]
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    let t = Tensor::new(&shape, data)
                        .map_err(|_| format_err(line_offset, "invalid shape"))?;
                    c.arrays.insert(name.to_string(), t);
                    expected_offset = end;
                }
                _ => return Err(format_err(line_offset, "unrecognised manifest record")),
            }
            line_offset += line.len() + 1;
        }
        if expected_offset != payload.len() {
            return Err(format_err(
                payload_start + expected_offset,
                "trailing bytes after payload",
            ));
        }
        let recorded = c
            .meta
            .remove("payload_sha256")
            .ok_or_else(|| format_err(HEADER, "manifest lacks payload_sha256"))?;
        let actual = hex::encode(Sha256::digest(payload));
        if recorded != actual {
            return Err(Error::Integrity(format!(
                "payload digest {actual} does not match manifest {recorded}"
            )));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 over the little-endian payload encoding of `arrays`, in order.
pub fn payload_digest<'a>(arrays: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in arrays {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Contract(format!(
            "container name {s:?} must be non-empty without whitespace"
        )));
    }
    Ok(())
}

fn format_err(offset: usize, reason: &str) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new()
            .with_meta("kind", "test")
            .with_meta("note", "two words");
        c.arrays
            .insert("b/x".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5));
        c.arrays.insert("a".into(), Tensor::scalar(-1.25));
        c
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], b"UNICON01");
    }

    #[test]
    fn corrupt_payload_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        match Container::from_bytes(&bytes[..bytes.len() - 5]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            Container::from_bytes(&bytes[..10]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn payload_digest_matches_manifest() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.payload_digest(), c.payload_digest());
    }
}
