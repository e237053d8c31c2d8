//! Readers and canonical writers for the container formats the toolkit
//! descends into: gzip, ustar and zip.
//!
//! The readers are strict about structure (checksums, bounds, signatures) and
//! report the byte offset where parsing failed. The writers always produce the
//! same bytes for the same logical content, which is what normalization
//! relies on.

use thiserror::Error;

pub mod gzip;
pub mod tar;
pub mod zip;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("{format}: truncated input at offset {offset}")]
    Truncated { format: &'static str, offset: usize },
    #[error("{format}: {msg} at offset {offset}")]
    Corrupt {
        format: &'static str,
        offset: usize,
        msg: String,
    },
    #[error("{format}: unsupported {msg} at offset {offset}")]
    Unsupported {
        format: &'static str,
        offset: usize,
        msg: String,
    },
}

impl FormatError {
    pub fn offset(&self) -> usize {
        match self {
            FormatError::Truncated { offset, .. }
            | FormatError::Corrupt { offset, .. }
            | FormatError::Unsupported { offset, .. } => *offset,
        }
    }

    pub(crate) fn corrupt(format: &'static str, offset: usize, msg: impl Into<String>) -> Self {
        FormatError::Corrupt {
            format,
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn unsupported(format: &'static str, offset: usize, msg: impl Into<String>) -> Self {
        FormatError::Unsupported {
            format,
            offset,
            msg: msg.into(),
        }
    }
}

pub(crate) fn crc32(data: &[u8]) -> u32 {
    let mut crc = flate2::Crc::new();
    crc.update(data);
    crc.sum()
}

/// Compression level used whenever the toolkit (re)compresses a deflate
/// stream. Fixed so that equal payloads always yield equal bytes.
pub const DEFLATE_LEVEL: u32 = 9;

pub(crate) fn deflate(data: &[u8]) -> Vec<u8> {
    use std::io::Write;
    let mut enc = flate2::write::DeflateEncoder::new(
        Vec::with_capacity(data.len() / 2 + 16),
        flate2::Compression::new(DEFLATE_LEVEL),
    );
    enc.write_all(data).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

/// Inflates a raw deflate stream, returning the payload and the number of
/// input bytes the stream occupied.
pub(crate) fn inflate(data: &[u8]) -> std::io::Result<(Vec<u8>, usize)> {
    use std::io::Read;
    let mut dec = flate2::bufread::DeflateDecoder::new(data);
    let mut out = Vec::new();
    dec.read_to_end(&mut out)?;
    let rest = dec.into_inner().len();
    Ok((out, data.len() - rest))
}

pub(crate) fn le16(data: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([data[at], data[at + 1]])
}

pub(crate) fn le32(data: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]])
}
