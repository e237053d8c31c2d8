//! gzip (RFC 1952) member parsing and deterministic writing.

use super::{crc32, deflate, inflate, le16, le32, FormatError};

const FMT: &str = "gzip";

pub const MAGIC: [u8; 2] = [0x1f, 0x8b];

const FTEXT: u8 = 0x01;
const FHCRC: u8 = 0x02;
const FEXTRA: u8 = 0x04;
const FNAME: u8 = 0x08;
const FCOMMENT: u8 = 0x10;

/// OS byte for "unknown".
pub const OS_UNKNOWN: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GzipStream {
    /// Header of the first member.
    pub flags: u8,
    pub mtime: u32,
    pub xfl: u8,
    pub os: u8,
    pub extra: Option<Vec<u8>>,
    pub fname: Option<Vec<u8>>,
    pub comment: Option<Vec<u8>>,
    /// Decompressed payload of every member, concatenated.
    pub payload: Vec<u8>,
}

fn zero_terminated(data: &[u8], at: usize) -> Result<(Vec<u8>, usize), FormatError> {
    let len = data
        .get(at..)
        .and_then(|rest| rest.iter().position(|&b| b == 0))
        .ok_or(FormatError::Truncated {
            format: FMT,
            offset: at,
        })?;
    Ok((data[at..at + len].to_vec(), at + len + 1))
}

struct Header {
    flags: u8,
    mtime: u32,
    xfl: u8,
    os: u8,
    extra: Option<Vec<u8>>,
    fname: Option<Vec<u8>>,
    comment: Option<Vec<u8>>,
    body: usize,
}

fn read_header(data: &[u8], base: usize) -> Result<Header, FormatError> {
    let h = &data[base..];
    if h.len() < 10 {
        return Err(FormatError::Truncated {
            format: FMT,
            offset: base + h.len(),
        });
    }
    if h[..2] != MAGIC {
        return Err(FormatError::corrupt(FMT, base, "bad magic"));
    }
    if h[2] != 8 {
        return Err(FormatError::unsupported(
            FMT,
            base + 2,
            format!("compression method {}", h[2]),
        ));
    }
    let flags = h[3];
    if flags & 0xe0 != 0 {
        return Err(FormatError::corrupt(
            FMT,
            base + 3,
            "reserved flag bits set",
        ));
    }
    let mut pos = base + 10;
    let extra = if flags & FEXTRA != 0 {
        if pos + 2 > data.len() {
            return Err(FormatError::Truncated {
                format: FMT,
                offset: pos,
            });
        }
        let xlen = le16(data, pos) as usize;
        pos += 2;
        if pos + xlen > data.len() {
            return Err(FormatError::Truncated {
                format: FMT,
                offset: pos,
            });
        }
        let x = data[pos..pos + xlen].to_vec();
        pos += xlen;
        Some(x)
    } else {
        None
    };
    let fname = if flags & FNAME != 0 {
        let (s, next) = zero_terminated(data, pos)?;
        pos = next;
        Some(s)
    } else {
        None
    };
    let comment = if flags & FCOMMENT != 0 {
        let (s, next) = zero_terminated(data, pos)?;
        pos = next;
        Some(s)
    } else {
        None
    };
    if flags & FHCRC != 0 {
        if pos + 2 > data.len() {
            return Err(FormatError::Truncated {
                format: FMT,
                offset: pos,
            });
        }
        let want = le16(data, pos);
        if (crc32(&data[base..pos]) & 0xffff) as u16 != want {
            return Err(FormatError::corrupt(FMT, pos, "header CRC mismatch"));
        }
        pos += 2;
    }
    Ok(Header {
        flags,
        mtime: le32(data, base + 4),
        xfl: h[8],
        os: h[9],
        extra,
        fname,
        comment,
        body: pos,
    })
}

/// Decodes a gzip stream. Concatenated members are joined into one payload;
/// header fields are taken from the first member.
pub fn read_gzip(data: &[u8]) -> Result<GzipStream, FormatError> {
    let first = read_header(data, 0)?;
    let mut payload = Vec::new();
    let mut body = first.body;
    loop {
        let (chunk, used) = inflate(&data[body..])
            .map_err(|e| FormatError::corrupt(FMT, body, format!("deflate stream: {e}")))?;
        let trailer = body + used;
        if trailer + 8 > data.len() {
            return Err(FormatError::Truncated {
                format: FMT,
                offset: trailer,
            });
        }
        if le32(data, trailer) != crc32(&chunk) {
            return Err(FormatError::corrupt(FMT, trailer, "CRC32 mismatch"));
        }
        if le32(data, trailer + 4) != chunk.len() as u32 {
            return Err(FormatError::corrupt(FMT, trailer + 4, "ISIZE mismatch"));
        }
        payload.extend_from_slice(&chunk);
        let next = trailer + 8;
        if next == data.len() {
            break;
        }
        if data.len() - next >= 2 && data[next..next + 2] == MAGIC {
            body = read_header(data, next)?.body;
            continue;
        }
        if data[next..].iter().all(|&b| b == 0) {
            break;
        }
        return Err(FormatError::corrupt(
            FMT,
            next,
            "trailing garbage after stream",
        ));
    }
    Ok(GzipStream {
        flags: first.flags,
        mtime: first.mtime,
        xfl: first.xfl,
        os: first.os,
        extra: first.extra,
        fname: first.fname,
        comment: first.comment,
        payload,
    })
}

/// Writes a single-member gzip stream compressed at [`super::DEFLATE_LEVEL`].
pub fn write_gzip(payload: &[u8], mtime: u32, fname: Option<&[u8]>, os: u8) -> Vec<u8> {
    let compressed = deflate(payload);
    let mut out = Vec::with_capacity(compressed.len() + 32);
    out.extend_from_slice(&MAGIC);
    out.push(8);
    out.push(if fname.is_some() { FNAME } else { 0 });
    out.extend_from_slice(&mtime.to_le_bytes());
    // XFL 2: maximum compression.
    out.push(2);
    out.push(os);
    if let Some(name) = fname {
        out.extend_from_slice(name);
        out.push(0);
    }
    out.extend_from_slice(&compressed);
    out.extend_from_slice(&crc32(payload).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out
}

impl GzipStream {
    pub fn is_text_flagged(&self) -> bool {
        self.flags & FTEXT != 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_name() {
        let bytes = write_gzip(b"abc", 1_600_000_000, Some(b"abc.txt"), 3);
        let s = read_gzip(&bytes).unwrap();
        assert_eq!(s.payload, b"abc");
        assert_eq!(s.mtime, 1_600_000_000);
        assert_eq!(s.fname.as_deref(), Some(&b"abc.txt"[..]));
        assert_eq!(s.os, 3);
    }

    #[test]
    fn concatenated_members() {
        let mut bytes = write_gzip(b"hello ", 5, None, 255);
        bytes.extend(write_gzip(b"world", 9, None, 255));
        let s = read_gzip(&bytes).unwrap();
        assert_eq!(s.payload, b"hello world");
        assert_eq!(s.mtime, 5);
    }

    #[test]
    fn corrupt_crc_detected() {
        let mut bytes = write_gzip(b"payload", 0, None, 255);
        let n = bytes.len();
        bytes[n - 8] ^= 0xff;
        assert!(matches!(
            read_gzip(&bytes),
            Err(FormatError::Corrupt { .. })
        ));
        assert!(matches!(
            read_gzip(&bytes[..6]),
            Err(FormatError::Truncated { .. })
        ));
    }
}
