//! Zip reading (central-directory driven) and canonical writing.
//!
//! Only stored (0) and deflated (8) members can be decompressed; other
//! methods are parsed structurally and reported per member. Zip64 and
//! encrypted archives are rejected.

use super::{crc32, deflate, inflate, le16, le32, FormatError};
use crate::timeutil::{civil_from_unix, unix_from_civil, Civil};

const FMT: &str = "zip";

const LOCAL_SIG: u32 = 0x0403_4b50;
const CENTRAL_SIG: u32 = 0x0201_4b50;
const EOCD_SIG: u32 = 0x0605_4b50;

pub const METHOD_STORED: u16 = 0;
pub const METHOD_DEFLATED: u16 = 8;

/// Extra-field ids: extended timestamp ("UT").
pub const EXTRA_EXT_TIMESTAMP: u16 = 0x5455;
/// Extra-field ids: Info-ZIP unix uid/gid ("ux").
pub const EXTRA_UNIX_OWNER: u16 = 0x7875;
/// Extra-field ids: old Info-ZIP unix ("UX", times + ids).
pub const EXTRA_OLD_UNIX: u16 = 0x5855;
/// Extra-field ids: NTFS timestamps.
pub const EXTRA_NTFS: u16 = 0x000a;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZipEntry {
    pub name: String,
    pub version_made_by: u16,
    pub version_needed: u16,
    pub flags: u16,
    pub method: u16,
    pub dos_time: u16,
    pub dos_date: u16,
    pub crc32: u32,
    pub uncompressed_size: u32,
    /// Member data exactly as stored (possibly compressed).
    pub raw: Vec<u8>,
    pub local_extra: Vec<u8>,
    pub central_extra: Vec<u8>,
    pub comment: Vec<u8>,
    pub internal_attr: u16,
    pub external_attr: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ZipArchive {
    pub entries: Vec<ZipEntry>,
    pub comment: Vec<u8>,
}

/// Converts a DOS date/time pair (interpreted as UTC) to Unix seconds.
/// Out-of-range components are clamped into a valid date.
pub fn dos_to_unix(date: u16, time: u16) -> i64 {
    let year = 1980 + i64::from(date >> 9);
    let month = u32::from((date >> 5) & 0x0f).clamp(1, 12);
    let day = u32::from(date & 0x1f).clamp(1, 31);
    let hour = u32::from(time >> 11).min(23);
    let minute = u32::from((time >> 5) & 0x3f).min(59);
    let second = (u32::from(time & 0x1f) * 2).min(59);
    unix_from_civil(Civil {
        year,
        month,
        day,
        hour,
        minute,
        second,
    })
}

/// Converts Unix seconds to a DOS (date, time) pair, flooring to the
/// 2-second resolution and clamping to the representable 1980..=2107 range.
pub fn unix_to_dos(secs: i64) -> (u16, u16) {
    let min = unix_from_civil(Civil {
        year: 1980,
        month: 1,
        day: 1,
        hour: 0,
        minute: 0,
        second: 0,
    });
    let max = unix_from_civil(Civil {
        year: 2107,
        month: 12,
        day: 31,
        hour: 23,
        minute: 59,
        second: 58,
    });
    let c = civil_from_unix(secs.clamp(min, max));
    let date = (((c.year - 1980) as u16) << 9) | ((c.month as u16) << 5) | c.day as u16;
    let time = ((c.hour as u16) << 11) | ((c.minute as u16) << 5) | (c.second as u16 / 2);
    (date, time)
}

/// Splits an extra-field blob into (id, data) records. A malformed tail is
/// kept as an opaque record with id `u16::MAX`.
pub fn extra_records(extra: &[u8]) -> Vec<(u16, &[u8])> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + 4 <= extra.len() {
        let id = le16(extra, pos);
        let len = le16(extra, pos + 2) as usize;
        if pos + 4 + len > extra.len() {
            break;
        }
        out.push((id, &extra[pos + 4..pos + 4 + len]));
        pos += 4 + len;
    }
    if pos < extra.len() {
        out.push((u16::MAX, &extra[pos..]));
    }
    out
}

/// Rebuilds an extra-field blob without the records whose id is in `drop`.
pub fn strip_extra(extra: &[u8], drop: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(extra.len());
    for (id, data) in extra_records(extra) {
        if drop.contains(&id) {
            continue;
        }
        if id == u16::MAX {
            out.extend_from_slice(data);
            continue;
        }
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&(data.len() as u16).to_le_bytes());
        out.extend_from_slice(data);
    }
    out
}

impl ZipEntry {
    /// A stored (uncompressed) entry with neutral metadata.
    pub fn stored(name: impl Into<String>, content: &[u8]) -> Self {
        let (dos_date, dos_time) = unix_to_dos(0);
        ZipEntry {
            name: name.into(),
            version_made_by: (3 << 8) | 20,
            version_needed: 20,
            flags: 0,
            method: METHOD_STORED,
            dos_time,
            dos_date,
            crc32: crc32(content),
            uncompressed_size: content.len() as u32,
            raw: content.to_vec(),
            local_extra: Vec::new(),
            central_extra: Vec::new(),
            comment: Vec::new(),
            internal_attr: 0,
            external_attr: 0o100644 << 16,
        }
    }

    pub fn mtime(&self) -> i64 {
        dos_to_unix(self.dos_date, self.dos_time)
    }

    /// Unix permission bits when the entry was made on a unix host.
    pub fn unix_mode(&self) -> Option<u32> {
        (self.version_made_by >> 8 == 3 && self.external_attr >> 16 != 0)
            .then_some(self.external_attr >> 16)
    }

    /// uid/gid from an Info-ZIP "ux" extra field, if present.
    pub fn unix_owner(&self) -> Option<(u64, u64)> {
        let (_, data) = extra_records(&self.local_extra)
            .into_iter()
            .chain(extra_records(&self.central_extra))
            .find(|(id, _)| *id == EXTRA_UNIX_OWNER)?;
        if data.len() < 3 || data[0] != 1 {
            return None;
        }
        let read = |at: usize| -> Option<(u64, usize)> {
            let n = *data.get(at)? as usize;
            let bytes = data.get(at + 1..at + 1 + n)?;
            let mut v = 0u64;
            for (i, &b) in bytes.iter().enumerate().take(8) {
                v |= u64::from(b) << (8 * i);
            }
            Some((v, at + 1 + n))
        };
        let (uid, next) = read(1)?;
        let (gid, _) = read(next)?;
        Some((uid, gid))
    }

    /// Decompressed member data, checked against the stored CRC and size.
    pub fn content(&self) -> Result<Vec<u8>, FormatError> {
        let out = match self.method {
            METHOD_STORED => self.raw.clone(),
            METHOD_DEFLATED => {
                inflate(&self.raw)
                    .map_err(|e| {
                        FormatError::corrupt(FMT, 0, format!("{}: deflate stream: {e}", self.name))
                    })?
                    .0
            }
            m => {
                return Err(FormatError::unsupported(
                    FMT,
                    0,
                    format!("compression method {m} for {}", self.name),
                ))
            }
        };
        if out.len() != self.uncompressed_size as usize || crc32(&out) != self.crc32 {
            return Err(FormatError::corrupt(
                FMT,
                0,
                format!("{}: CRC or size mismatch", self.name),
            ));
        }
        Ok(out)
    }

    /// Replaces the member data, compressing with the entry's method when it
    /// is deflate. Other methods are stored.
    pub fn set_content(&mut self, content: &[u8]) {
        self.crc32 = crc32(content);
        self.uncompressed_size = content.len() as u32;
        if self.method == METHOD_DEFLATED {
            self.raw = deflate(content);
        } else {
            self.method = METHOD_STORED;
            self.raw = content.to_vec();
        }
    }
}

fn find_eocd(data: &[u8]) -> Result<usize, FormatError> {
    if data.len() < 22 {
        return Err(FormatError::Truncated {
            format: FMT,
            offset: data.len(),
        });
    }
    let lowest = data.len().saturating_sub(22 + 0xffff);
    (lowest..=data.len() - 22)
        .rev()
        .find(|&at| {
            le32(data, at) == EOCD_SIG && at + 22 + le16(data, at + 20) as usize == data.len()
        })
        .ok_or_else(|| FormatError::corrupt(FMT, data.len(), "end of central directory not found"))
}

/// Parses a zip archive, returning entries in central-directory order.
pub fn read_zip(data: &[u8]) -> Result<ZipArchive, FormatError> {
    let eocd = find_eocd(data)?;
    let count = le16(data, eocd + 10) as usize;
    let cd_size = le32(data, eocd + 12) as usize;
    let cd_offset = le32(data, eocd + 16) as usize;
    if count == 0xffff || cd_size == 0xffff_ffff || cd_offset == 0xffff_ffff {
        return Err(FormatError::unsupported(FMT, eocd, "zip64 archive"));
    }
    if le16(data, eocd + 4) != 0 || le16(data, eocd + 6) != 0 {
        return Err(FormatError::unsupported(
            FMT,
            eocd + 4,
            "multi-disk archive",
        ));
    }
    if cd_offset + cd_size > eocd {
        return Err(FormatError::corrupt(
            FMT,
            eocd + 16,
            "central directory out of bounds",
        ));
    }
    let comment = data[eocd + 22..].to_vec();

    let mut entries = Vec::with_capacity(count);
    let mut pos = cd_offset;
    for _ in 0..count {
        if pos + 46 > eocd {
            return Err(FormatError::Truncated {
                format: FMT,
                offset: pos,
            });
        }
        if le32(data, pos) != CENTRAL_SIG {
            return Err(FormatError::corrupt(
                FMT,
                pos,
                "bad central directory signature",
            ));
        }
        let flags = le16(data, pos + 8);
        if flags & 0x0001 != 0 {
            return Err(FormatError::unsupported(FMT, pos, "encrypted member"));
        }
        let compressed_size = le32(data, pos + 20) as usize;
        let name_len = le16(data, pos + 28) as usize;
        let extra_len = le16(data, pos + 30) as usize;
        let comment_len = le16(data, pos + 32) as usize;
        let local = le32(data, pos + 42) as usize;
        let var = pos + 46;
        let end = var + name_len + extra_len + comment_len;
        if end > eocd {
            return Err(FormatError::Truncated {
                format: FMT,
                offset: var,
            });
        }
        let name = String::from_utf8(data[var..var + name_len].to_vec())
            .map_err(|_| FormatError::unsupported(FMT, var, "non-UTF-8 member name"))?;
        if name.is_empty() {
            return Err(FormatError::corrupt(FMT, var, "empty member name"));
        }
        let central_extra = data[var + name_len..var + name_len + extra_len].to_vec();
        let entry_comment = data[var + name_len + extra_len..end].to_vec();

        if local + 30 > data.len() {
            return Err(FormatError::Truncated {
                format: FMT,
                offset: local,
            });
        }
        if le32(data, local) != LOCAL_SIG {
            return Err(FormatError::corrupt(
                FMT,
                local,
                "bad local header signature",
            ));
        }
        let lname = le16(data, local + 26) as usize;
        let lextra = le16(data, local + 28) as usize;
        let data_start = local + 30 + lname + lextra;
        if data_start + compressed_size > data.len() {
            return Err(FormatError::Truncated {
                format: FMT,
                offset: data_start,
            });
        }
        entries.push(ZipEntry {
            name,
            version_made_by: le16(data, pos + 4),
            version_needed: le16(data, pos + 6),
            flags,
            method: le16(data, pos + 10),
            dos_time: le16(data, pos + 12),
            dos_date: le16(data, pos + 14),
            crc32: le32(data, pos + 16),
            uncompressed_size: le32(data, pos + 24),
            raw: data[data_start..data_start + compressed_size].to_vec(),
            local_extra: data[local + 30 + lname..data_start].to_vec(),
            central_extra,
            comment: entry_comment,
            internal_attr: le16(data, pos + 36),
            external_attr: le32(data, pos + 38),
        });
        pos = end;
    }
    Ok(ZipArchive { entries, comment })
}

fn put16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Writes entries in the given order. Sizes always live in the local header
/// (no data descriptors), so bit 3 of the flags is cleared.
pub fn write_zip(archive: &ZipArchive) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    let mut offsets = Vec::with_capacity(archive.entries.len());
    for e in &archive.entries {
        if e.name.len() > 0xffff || e.local_extra.len() > 0xffff || e.central_extra.len() > 0xffff {
            return Err(FormatError::unsupported(
                FMT,
                out.len(),
                "oversized header field",
            ));
        }
        let offset = u32::try_from(out.len())
            .map_err(|_| FormatError::unsupported(FMT, out.len(), "archive larger than 4 GiB"))?;
        offsets.push(offset);
        put32(&mut out, LOCAL_SIG);
        put16(&mut out, e.version_needed);
        put16(&mut out, e.flags & !0x0008);
        put16(&mut out, e.method);
        put16(&mut out, e.dos_time);
        put16(&mut out, e.dos_date);
        put32(&mut out, e.crc32);
        put32(&mut out, e.raw.len() as u32);
        put32(&mut out, e.uncompressed_size);
        put16(&mut out, e.name.len() as u16);
        put16(&mut out, e.local_extra.len() as u16);
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&e.local_extra);
        out.extend_from_slice(&e.raw);
    }
    let cd_start = out.len();
    for (e, offset) in archive.entries.iter().zip(offsets) {
        put32(&mut out, CENTRAL_SIG);
        put16(&mut out, e.version_made_by);
        put16(&mut out, e.version_needed);
        put16(&mut out, e.flags & !0x0008);
        put16(&mut out, e.method);
        put16(&mut out, e.dos_time);
        put16(&mut out, e.dos_date);
        put32(&mut out, e.crc32);
        put32(&mut out, e.raw.len() as u32);
        put32(&mut out, e.uncompressed_size);
        put16(&mut out, e.name.len() as u16);
        put16(&mut out, e.central_extra.len() as u16);
        put16(&mut out, e.comment.len() as u16);
        put16(&mut out, 0);
        put16(&mut out, e.internal_attr);
        put32(&mut out, e.external_attr);
        put32(&mut out, offset);
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&e.central_extra);
        out.extend_from_slice(&e.comment);
    }
    let cd_size = out.len() - cd_start;
    let count = u16::try_from(archive.entries.len())
        .map_err(|_| FormatError::unsupported(FMT, cd_start, "more than 65535 entries"))?;
    put32(&mut out, EOCD_SIG);
    put16(&mut out, 0);
    put16(&mut out, 0);
    put16(&mut out, count);
    put16(&mut out, count);
    put32(&mut out, cd_size as u32);
    put32(&mut out, cd_start as u32);
    put16(&mut out, archive.comment.len() as u16);
    out.extend_from_slice(&archive.comment);
    Ok(out)
}
