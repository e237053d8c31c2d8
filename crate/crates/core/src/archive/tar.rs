//! POSIX ustar reading and canonical writing.
//!
//! The reader also understands the GNU long-name (`L`/`K`) and pax (`x`/`g`)
//! extension headers well enough to recover long paths. The writer emits
//! plain ustar only, byte-compatible with GNU tar's `--format=ustar` output:
//! NUL-terminated zero-padded octal fields, `ustar\0` + `00` magic and the
//! archive padded to a 10240-byte record.

use super::FormatError;

pub const BLOCK: usize = 512;
/// GNU tar default blocking factor (20) times the block size.
pub const RECORD: usize = 20 * BLOCK;

const FMT: &str = "tar";

pub const REGULAR: u8 = b'0';
pub const DIRECTORY: u8 = b'5';
pub const SYMLINK: u8 = b'2';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TarEntry {
    pub name: String,
    pub mode: u32,
    pub uid: u64,
    pub gid: u64,
    pub mtime: i64,
    pub typeflag: u8,
    pub linkname: String,
    pub uname: String,
    pub gname: String,
    pub devmajor: u32,
    pub devminor: u32,
    pub data: Vec<u8>,
}

impl TarEntry {
    /// A regular file entry with neutral metadata.
    pub fn file(name: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        TarEntry {
            name: name.into(),
            mode: 0o644,
            uid: 0,
            gid: 0,
            mtime: 0,
            typeflag: REGULAR,
            linkname: String::new(),
            uname: String::new(),
            gname: String::new(),
            devmajor: 0,
            devminor: 0,
            data: data.into(),
        }
    }
}

fn field_str(raw: &[u8], offset: usize) -> Result<String, FormatError> {
    let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
    String::from_utf8(raw[..end].to_vec())
        .map_err(|_| FormatError::unsupported(FMT, offset, "non-UTF-8 name"))
}

fn parse_numeric(raw: &[u8], offset: usize) -> Result<u64, FormatError> {
    if raw.first().is_some_and(|b| b & 0x80 != 0) {
        // GNU base-256: big-endian, high bit of the first byte is a marker.
        if raw[0] & 0x40 != 0 {
            return Err(FormatError::corrupt(
                FMT,
                offset,
                "negative base-256 number",
            ));
        }
        let mut v: u64 = u64::from(raw[0] & 0x3f);
        for &b in &raw[1..] {
            v = v
                .checked_mul(256)
                .and_then(|v| v.checked_add(u64::from(b)))
                .ok_or_else(|| FormatError::corrupt(FMT, offset, "numeric field overflow"))?;
        }
        return Ok(v);
    }
    let text: Vec<u8> = raw
        .iter()
        .copied()
        .skip_while(|&b| b == b' ')
        .take_while(|&b| b != 0 && b != b' ')
        .collect();
    if text.is_empty() {
        return Ok(0);
    }
    let mut v: u64 = 0;
    for b in text {
        if !(b'0'..=b'7').contains(&b) {
            return Err(FormatError::corrupt(
                FMT,
                offset,
                "invalid octal digit in header",
            ));
        }
        v = v
            .checked_mul(8)
            .and_then(|v| v.checked_add(u64::from(b - b'0')))
            .ok_or_else(|| FormatError::corrupt(FMT, offset, "numeric field overflow"))?;
    }
    Ok(v)
}

fn header_checksum(block: &[u8]) -> u64 {
    block
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (148..156).contains(&i) {
                32
            } else {
                u64::from(b)
            }
        })
        .sum()
}

fn signed_header_checksum(block: &[u8]) -> i64 {
    block
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (148..156).contains(&i) {
                32
            } else {
                i64::from(b as i8)
            }
        })
        .sum()
}

fn pax_records(data: &[u8], offset: usize) -> Result<Vec<(String, String)>, FormatError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < data.len() {
        if data[pos] == 0 {
            break;
        }
        let space = data[pos..]
            .iter()
            .position(|&b| b == b' ')
            .ok_or_else(|| FormatError::corrupt(FMT, offset, "malformed pax record"))?;
        let len: usize = std::str::from_utf8(&data[pos..pos + space])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::corrupt(FMT, offset, "malformed pax record length"))?;
        if len <= space + 1 || pos + len > data.len() || data[pos + len - 1] != b'\n' {
            return Err(FormatError::corrupt(FMT, offset, "malformed pax record"));
        }
        let record = &data[pos + space + 1..pos + len - 1];
        let eq = record
            .iter()
            .position(|&b| b == b'=')
            .ok_or_else(|| FormatError::corrupt(FMT, offset, "pax record without '='"))?;
        let key = String::from_utf8_lossy(&record[..eq]).into_owned();
        let value = String::from_utf8(record[eq + 1..].to_vec())
            .map_err(|_| FormatError::unsupported(FMT, offset, "non-UTF-8 pax value"))?;
        out.push((key, value));
        pos += len;
    }
    Ok(out)
}

/// Parses a tar archive into its entries, in archive order.
///
/// Extension headers are folded into the entry they describe and do not
/// appear in the output.
pub fn read_tar(data: &[u8]) -> Result<Vec<TarEntry>, FormatError> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut long_name: Option<String> = None;
    let mut long_link: Option<String> = None;
    let mut pax_path: Option<String> = None;
    let mut pax_link: Option<String> = None;

    loop {
        if offset == data.len() {
            break;
        }
        if offset + BLOCK > data.len() {
            return Err(FormatError::Truncated {
                format: FMT,
                offset,
            });
        }
        let block = &data[offset..offset + BLOCK];
        if block.iter().all(|&b| b == 0) {
            break;
        }
        let stored = parse_numeric(&block[148..156], offset + 148)?;
        if stored != header_checksum(block) && stored as i64 != signed_header_checksum(block) {
            return Err(FormatError::corrupt(
                FMT,
                offset,
                "header checksum mismatch",
            ));
        }
        let size = parse_numeric(&block[124..136], offset + 124)? as usize;
        let start = offset + BLOCK;
        let end =
            start
                .checked_add(size)
                .filter(|&e| e <= data.len())
                .ok_or(FormatError::Truncated {
                    format: FMT,
                    offset: start,
                })?;
        let payload = &data[start..end];
        let typeflag = block[156];
        let next = start + size.div_ceil(BLOCK) * BLOCK;

        match typeflag {
            b'L' => {
                long_name = Some(field_str(payload, start)?);
                offset = next;
                continue;
            }
            b'K' => {
                long_link = Some(field_str(payload, start)?);
                offset = next;
                continue;
            }
            b'x' => {
                for (k, v) in pax_records(payload, start)? {
                    match k.as_str() {
                        "path" => pax_path = Some(v),
                        "linkpath" => pax_link = Some(v),
                        _ => {}
                    }
                }
                offset = next;
                continue;
            }
            b'g' => {
                offset = next;
                continue;
            }
            _ => {}
        }

        let is_ustar = &block[257..263] == b"ustar\0";
        let mut name = field_str(&block[0..100], offset)?;
        if is_ustar {
            let prefix = field_str(&block[345..500], offset + 345)?;
            if !prefix.is_empty() {
                name = format!("{prefix}/{name}");
            }
        }
        if let Some(n) = pax_path.take().or(long_name.take()) {
            name = n;
        }
        let mut linkname = field_str(&block[157..257], offset + 157)?;
        if let Some(l) = pax_link.take().or(long_link.take()) {
            linkname = l;
        }
        if name.is_empty() {
            return Err(FormatError::corrupt(FMT, offset, "empty member name"));
        }
        entries.push(TarEntry {
            name,
            mode: parse_numeric(&block[100..108], offset + 100)? as u32,
            uid: parse_numeric(&block[108..116], offset + 108)?,
            gid: parse_numeric(&block[116..124], offset + 116)?,
            mtime: parse_numeric(&block[136..148], offset + 136)? as i64,
            typeflag,
            linkname,
            uname: field_str(&block[265..297], offset + 265)?,
            gname: field_str(&block[297..329], offset + 297)?,
            devmajor: parse_numeric(&block[329..337], offset + 329)? as u32,
            devminor: parse_numeric(&block[337..345], offset + 337)? as u32,
            data: payload.to_vec(),
        });
        offset = next;
    }
    Ok(entries)
}

fn put_octal(field: &mut [u8], value: u64, what: &str, index: usize) -> Result<(), FormatError> {
    let digits = field.len() - 1;
    let text = format!("{value:0digits$o}");
    if text.len() > digits {
        return Err(FormatError::unsupported(
            FMT,
            index * BLOCK,
            format!("{what} value {value} for ustar"),
        ));
    }
    field[..digits].copy_from_slice(text.as_bytes());
    field[digits] = 0;
    Ok(())
}

fn put_str(field: &mut [u8], value: &str, what: &str, index: usize) -> Result<(), FormatError> {
    let bytes = value.as_bytes();
    if bytes.len() > field.len() {
        return Err(FormatError::unsupported(
            FMT,
            index * BLOCK,
            format!("{what} longer than {} bytes", field.len()),
        ));
    }
    field[..bytes.len()].copy_from_slice(bytes);
    Ok(())
}

fn split_name(name: &str, index: usize) -> Result<(&str, &str), FormatError> {
    if name.len() <= 100 {
        return Ok(("", name));
    }
    for (i, _) in name.match_indices('/') {
        let (prefix, rest) = (&name[..i], &name[i + 1..]);
        if prefix.len() <= 155 && !rest.is_empty() && rest.len() <= 100 {
            return Ok((prefix, rest));
        }
    }
    Err(FormatError::unsupported(
        FMT,
        index * BLOCK,
        format!("name too long for ustar: {name}"),
    ))
}

/// Encodes a single ustar header block.
pub fn encode_header(entry: &TarEntry, index: usize) -> Result<[u8; BLOCK], FormatError> {
    let mut h = [0u8; BLOCK];
    let (prefix, name) = split_name(&entry.name, index)?;
    put_str(&mut h[0..100], name, "name", index)?;
    put_octal(&mut h[100..108], u64::from(entry.mode), "mode", index)?;
    put_octal(&mut h[108..116], entry.uid, "uid", index)?;
    put_octal(&mut h[116..124], entry.gid, "gid", index)?;
    put_octal(&mut h[124..136], entry.data.len() as u64, "size", index)?;
    let mtime = u64::try_from(entry.mtime)
        .map_err(|_| FormatError::unsupported(FMT, index * BLOCK, "negative mtime for ustar"))?;
    put_octal(&mut h[136..148], mtime, "mtime", index)?;
    h[156] = if entry.typeflag == 0 {
        REGULAR
    } else {
        entry.typeflag
    };
    put_str(&mut h[157..257], &entry.linkname, "linkname", index)?;
    h[257..263].copy_from_slice(b"ustar\0");
    h[263..265].copy_from_slice(b"00");
    put_str(&mut h[265..297], &entry.uname, "uname", index)?;
    put_str(&mut h[297..329], &entry.gname, "gname", index)?;
    put_octal(
        &mut h[329..337],
        u64::from(entry.devmajor),
        "devmajor",
        index,
    )?;
    put_octal(
        &mut h[337..345],
        u64::from(entry.devminor),
        "devminor",
        index,
    )?;
    put_str(&mut h[345..500], prefix, "prefix", index)?;
    let sum = header_checksum(&h);
    let text = format!("{sum:06o}");
    h[148..154].copy_from_slice(text.as_bytes());
    h[154] = 0;
    h[155] = b' ';
    Ok(h)
}

/// Writes entries, in the given order, as a canonical ustar archive.
pub fn write_tar(entries: &[TarEntry]) -> Result<Vec<u8>, FormatError> {
    let body: usize = entries
        .iter()
        .map(|e| BLOCK + e.data.len().div_ceil(BLOCK) * BLOCK)
        .sum();
    let total = (body + 2 * BLOCK).div_ceil(RECORD) * RECORD;
    let mut out = Vec::with_capacity(total);
    let mut block_index = 0;
    for entry in entries {
        out.extend_from_slice(&encode_header(entry, block_index)?);
        out.extend_from_slice(&entry.data);
        let pad = entry.data.len().div_ceil(BLOCK) * BLOCK - entry.data.len();
        out.resize(out.len() + pad, 0);
        block_index += 1 + entry.data.len().div_ceil(BLOCK);
    }
    out.resize(total, 0);
    Ok(out)
}
