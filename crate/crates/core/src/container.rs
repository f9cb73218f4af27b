//! Sectioned binary container for checkpoints: a JSON header followed by
//! named little-endian `f64` payload sections.
//!
//! Layout: 8-byte magic, `u32` little-endian header length, the header JSON,
//! then all section payloads concatenated in header order. The header records
//! the format version, section names and lengths, a SHA-256 of the payload,
//! and an arbitrary caller-provided `meta` object. Writing the same content
//! twice produces byte-identical files (header keys are sorted), and `f64`
//! round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"DALNCONT";

/// Current container format version. Readers refuse anything else.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint container (bad magic)")]
    BadMagic,
    #[error("container truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("container header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("container format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("payload checksum mismatch: file is corrupt")]
    ChecksumMismatch,
    #[error("container has no section named {0:?}")]
    SectionMissing(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionInfo {
    name: String,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    sections: Vec<SectionInfo>,
    payload_sha256: String,
    meta: serde_json::Value,
}

/// A parsed container: caller metadata plus named `f64` vectors.
#[derive(Debug)]
pub struct Container {
    pub meta: serde_json::Value,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn section(&self, name: &str) -> Result<&[f64], ContainerError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, data)| data.as_slice())
            .ok_or_else(|| ContainerError::SectionMissing(name.to_string()))
    }
}

/// Serializes and writes a container file.
pub fn write_container(
    path: &Path,
    meta: &serde_json::Value,
    sections: &[(&str, &[f64])],
) -> Result<(), ContainerError> {
    let mut payload = Vec::new();
    for (_, data) in sections {
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&payload);
    let header = Header {
        format_version: FORMAT_VERSION,
        sections: sections
            .iter()
            .map(|(name, data)| SectionInfo {
                name: (*name).to_string(),
                len: data.len() as u64,
            })
            .collect(),
        payload_sha256: hex_string(&digest),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

/// Reads and verifies a container file (magic, version, payload checksum).
pub fn read_container(path: &Path) -> Result<Container, ContainerError> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(ContainerError::Truncated { what: "preamble" });
    }
    if &bytes[..8] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(ContainerError::Truncated { what: "header" });
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(ContainerError::VersionMismatch {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = &bytes[header_end..];
    let expected_len: u64 = header.sections.iter().map(|s| s.len * 8).sum();
    if payload.len() as u64 != expected_len {
        return Err(ContainerError::Truncated { what: "payload" });
    }
    if hex_string(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(ContainerError::ChecksumMismatch);
    }

    let mut sections = Vec::with_capacity(header.sections.len());
    let mut offset = 0usize;
    for info in &header.sections {
        let n = info.len as usize;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = offset + i * 8;
            data.push(f64::from_le_bytes(
                payload[start..start + 8].try_into().unwrap(),
            ));
        }
        offset += n * 8;
        sections.push((info.name.clone(), data));
    }
    Ok(Container {
        meta: header.meta,
        sections,
    })
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// SHA-256 hex digest of arbitrary bytes; used for config digests in
/// checkpoint metadata.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}
