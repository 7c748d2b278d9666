//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! triage-checkpoint\n
//! header_bytes=<n>\n
//! <n bytes of UTF-8 JSON header>
//! <payload: little-endian f32 tensors back to back>
//! ```
//!
//! The header records the format version, the model spec, the compression
//! state, one `(name, shape, offset)` entry per tensor in registry order,
//! the payload length and the CRC-32 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Network};

pub const MAGIC: &str = "triage-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub compressed_block: Option<usize>,
    pub pending_init: bool,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub crc32: u32,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Serializes `net` to bytes.
pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let state = net.state();
    let mut payload = Vec::with_capacity(state.iter().map(|(_, t)| t.len() * 4).sum());
    let mut tensors = Vec::with_capacity(state.len());
    for (name, t) in &state {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        spec: net.spec().clone(),
        compressed_block: net.compressed_block(),
        pending_init: net.awaiting_init(),
        tensors,
        payload_bytes: payload.len(),
        crc32: crc32fast::hash(&payload),
    };
    assemble(&header, &payload)
}

fn assemble(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec_pretty(header)?;
    let mut out = format!("{MAGIC}\nheader_bytes={}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Writes a checkpoint, replacing `path` atomically.
pub fn save(net: &Network, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(net)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    decode(path, &bytes)
}

fn next_line<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a str, &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_error(path, "unterminated preamble line"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| format_error(path, "preamble is not UTF-8"))?;
    Ok((line, &bytes[end + 1..]))
}

fn format_error(path: &Path, message: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Reads the header without verifying the payload.
pub fn read_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    let (magic, rest) = next_line(path, bytes)?;
    if magic != MAGIC {
        return Err(format_error(path, "not a checkpoint file"));
    }
    let (len_line, rest) = next_line(path, rest)?;
    let header_bytes: usize = len_line
        .strip_prefix("header_bytes=")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| format_error(path, "malformed header_bytes line"))?;
    if rest.len() < header_bytes {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_bytes,
            actual: rest.len(),
        });
    }
    let json = &rest[..header_bytes];
    let probe: VersionProbe = serde_json::from_slice(json)?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::Version(probe.format_version));
    }
    let header: Header = serde_json::from_slice(json)?;
    let payload_start = bytes.len() - rest.len() + header_bytes;
    Ok((header, payload_start))
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Network> {
    let (header, start) = read_header(path, bytes)?;
    let payload = &bytes[start..];
    if payload.len() != header.payload_bytes {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header.payload_bytes,
            actual: payload.len(),
        });
    }
    let actual = crc32fast::hash(payload);
    if actual != header.crc32 {
        return Err(Error::Corruption {
            expected: header.crc32,
            actual,
        });
    }
    let mut net = Network::zeroed(&header.spec).map_err(|e| Error::Schema(e.to_string()))?;
    match header.compressed_block {
        Some(b) if b < header.spec.blocks.len() && header.spec.blocks[b].conv_count == 1 => {
            net.mark_compressed(b, header.pending_init)
        }
        Some(b) => return Err(Error::Schema(format!("compressed block {b} is not a single-conv block"))),
        None if header.pending_init => {
            return Err(Error::Schema("pending initialization without a compressed block".into()))
        }
        None => {}
    }
    let mut state = net.state_mut();
    if state.len() != header.tensors.len() {
        return Err(Error::Schema(format!(
            "spec defines {} tensors, table lists {}",
            state.len(),
            header.tensors.len()
        )));
    }
    let mut offset = 0usize;
    for ((name, tensor), entry) in state.iter_mut().zip(&header.tensors) {
        if *name != entry.name {
            return Err(Error::Schema(format!("expected tensor {name}, table has {}", entry.name)));
        }
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Schema(format!(
                "{name}: spec shape {:?}, table shape {:?}",
                tensor.shape(),
                entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(Error::Schema(format!(
                "{name}: offset {} where {offset} was expected",
                entry.offset
            )));
        }
        let bytes = tensor.len() * 4;
        let chunk = payload
            .get(offset..offset + bytes)
            .ok_or_else(|| Error::Schema(format!("{name}: extends past the payload")))?;
        for (dst, src) in tensor.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
        }
        offset += bytes;
    }
    if offset != payload.len() {
        return Err(Error::Schema(format!(
            "table covers {offset} bytes of a {}-byte payload",
            payload.len()
        )));
    }
    drop(state);
    Ok(net)
}
