//! Shared binary container: 4-byte magic, u32 version, u64 metadata length,
//! JSON metadata, then a raw payload. Integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub metadata: Vec<u8>,
    pub payload: Vec<u8>,
}

pub(crate) struct ParsedContainer<'a> {
    pub metadata: &'a [u8],
    pub payload: &'a [u8],
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.metadata.len() + self.payload.len());
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.metadata);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn parse(bytes: &[u8], magic: [u8; 4], version: u32) -> Result<ParsedContainer<'_>> {
        if bytes.len() < 16 {
            return Err(Error::format("header", format!("file is only {} bytes", bytes.len())));
        }
        if bytes[..4] != magic {
            return Err(Error::format(
                "magic",
                format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(&magic),
                    String::from_utf8_lossy(&bytes[..4])
                ),
            ));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if found != version {
            return Err(Error::format(
                "version",
                format!("unsupported version {found}, expected {version}"),
            ));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let end = 16u64
            .checked_add(len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::format(
                    "metadata length",
                    format!("{len} bytes declared, {} available", bytes.len() - 16),
                )
            })? as usize;
        Ok(ParsedContainer {
            metadata: &bytes[16..end],
            payload: &bytes[end..],
        })
    }
}

pub(crate) fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
