//! Raw payload files shared by datasets and checkpoints.
//!
//! A payload is a flat run of little-endian `f32` values followed by the
//! CRC32 of those bytes, also little-endian. The accompanying manifest
//! records the element count and the same CRC.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 4 + 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Writes the payload and returns its CRC32.
pub fn write_payload(path: &Path, values: &[f32]) -> Result<u32> {
    let mut bytes = encode_f32(values);
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(crc)
}

/// Reads and verifies a payload of exactly `len` values.
pub fn read_payload(path: &Path, len: usize, expected_crc: u32) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    let want = len * 4 + 4;
    if bytes.len() < want {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: want,
            actual: bytes.len(),
        });
    }
    if bytes.len() > want {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("payload has {} trailing bytes", bytes.len() - want),
        });
    }
    let (data, tail) = bytes.split_at(len * 4);
    let actual = crc32(data);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if actual != expected_crc || stored != expected_crc {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: expected_crc,
            actual,
        });
    }
    Ok(data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_manifest<T: Serialize>(path: &Path, manifest: &T) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Checks the `format_version` key before full deserialization so that a
/// newer file reports a version error rather than a schema error.
pub fn check_version(path: &Path) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Probe {
        format_version: u32,
    }
    let probe: Probe = read_manifest(path)?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// `foo/bar.toml` -> `foo/bar.bin`.
pub fn payload_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Resolves a payload file name relative to its manifest.
pub fn resolve_payload(manifest: &Path, payload_file: &str) -> PathBuf {
    match manifest.parent() {
        Some(dir) => dir.join(payload_file),
        None => PathBuf::from(payload_file),
    }
}
