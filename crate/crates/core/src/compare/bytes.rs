//! Localizing byte-level differences.
//!
//! Common prefix and suffix are trimmed first. If what remains has equal
//! length on both sides it is scanned position by position and differing
//! spans separated by fewer than [`RESYNC_WINDOW`] equal bytes are merged;
//! otherwise the whole remainder is one range.

use serde::Serialize;

pub const RESYNC_WINDOW: usize = 64;
/// Maximum number of bytes rendered into an excerpt.
pub const EXCERPT_BYTES: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ByteRange {
    pub offset: usize,
    pub len_first: usize,
    pub len_second: usize,
    /// Hex of at most [`EXCERPT_BYTES`] leading bytes of each side's range.
    pub first_hex: String,
    pub second_hex: String,
    /// The whole range is zero bytes (false for empty ranges).
    pub first_zero: bool,
    pub second_zero: bool,
}

impl ByteRange {
    fn new(a: &[u8], b: &[u8], offset: usize, len_first: usize, len_second: usize) -> Self {
        let ra = &a[offset..offset + len_first];
        let rb = &b[offset..offset + len_second];
        ByteRange {
            offset,
            len_first,
            len_second,
            first_hex: hex::encode(&ra[..ra.len().min(EXCERPT_BYTES)]),
            second_hex: hex::encode(&rb[..rb.len().min(EXCERPT_BYTES)]),
            first_zero: !ra.is_empty() && ra.iter().all(|&x| x == 0),
            second_zero: !rb.is_empty() && rb.iter().all(|&x| x == 0),
        }
    }

    pub fn mirrored(&self) -> ByteRange {
        ByteRange {
            offset: self.offset,
            len_first: self.len_second,
            len_second: self.len_first,
            first_hex: self.second_hex.clone(),
            second_hex: self.first_hex.clone(),
            first_zero: self.second_zero,
            second_zero: self.first_zero,
        }
    }
}

pub fn byte_ranges(a: &[u8], b: &[u8]) -> Vec<ByteRange> {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let suffix = a[prefix..]
        .iter()
        .rev()
        .zip(b[prefix..].iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    let (la, lb) = (a.len() - prefix - suffix, b.len() - prefix - suffix);
    if la == 0 && lb == 0 {
        return Vec::new();
    }
    if la != lb {
        return vec![ByteRange::new(a, b, prefix, la, lb)];
    }
    let mut out = Vec::new();
    let mut span: Option<(usize, usize)> = None;
    for i in prefix..prefix + la {
        if a[i] == b[i] {
            continue;
        }
        span = match span {
            Some((start, last)) if i - last <= RESYNC_WINDOW => Some((start, i)),
            Some((start, last)) => {
                out.push(ByteRange::new(
                    a,
                    b,
                    start,
                    last - start + 1,
                    last - start + 1,
                ));
                Some((i, i))
            }
            None => Some((i, i)),
        };
    }
    if let Some((start, last)) = span {
        out.push(ByteRange::new(
            a,
            b,
            start,
            last - start + 1,
            last - start + 1,
        ));
    }
    out
}

/// One range spanning both payloads entirely.
pub fn whole_range(a: &[u8], b: &[u8]) -> Vec<ByteRange> {
    vec![ByteRange::new(a, b, 0, a.len(), b.len())]
}
