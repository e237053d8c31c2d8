//! Archive normalization: clamp timestamps, drop ownership, fix member order
//! and recompress deterministically.
//!
//! Timestamps are clamped, never overwritten: a member older than the policy
//! epoch keeps its time, anything newer becomes the epoch. Member names and
//! content bytes are never changed.

use std::path::Path;

use thiserror::Error;

use crate::archive::zip::{
    self, ZipArchive, EXTRA_EXT_TIMESTAMP, EXTRA_NTFS, EXTRA_OLD_UNIX, EXTRA_UNIX_OWNER,
};
use crate::archive::{gzip, tar, FormatError};
use crate::compare::{detect_format, Format, DESCENT};
use crate::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalizePolicy {
    /// Clamp reference in Unix seconds.
    pub epoch: u64,
    pub zero_ownership: bool,
    pub sort_members: bool,
    /// Remove the gzip FNAME header field.
    pub strip_names: bool,
}

impl NormalizePolicy {
    pub fn new(epoch: u64) -> Self {
        NormalizePolicy {
            epoch,
            zero_ownership: true,
            sort_members: true,
            strip_names: true,
        }
    }

    /// Epoch from `SOURCE_DATE_EPOCH`, or 0 when it is unset.
    pub fn from_env() -> Result<Self, NormalizeError> {
        match std::env::var("SOURCE_DATE_EPOCH") {
            Ok(v) => v
                .trim()
                .parse()
                .map(Self::new)
                .map_err(|_| NormalizeError::BadEpoch(v)),
            Err(_) => Ok(Self::new(0)),
        }
    }

    fn clamp(&self, t: i64) -> i64 {
        t.min(i64::try_from(self.epoch).unwrap_or(i64::MAX))
    }
}

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("{path}: {source}")]
    Format {
        path: String,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("SOURCE_DATE_EPOCH is not a non-negative integer: {0:?}")]
    BadEpoch(String),
}

/// Zip flag bits kept after normalization: only bit 11 (UTF-8 names).
const ZIP_KEPT_FLAGS: u16 = 1 << 11;
const ZIP_STRIPPED_EXTRAS: [u16; 4] = [
    EXTRA_EXT_TIMESTAMP,
    EXTRA_UNIX_OWNER,
    EXTRA_OLD_UNIX,
    EXTRA_NTFS,
];

fn sort_by_name<T>(items: &mut [T], name: impl Fn(&T) -> &str) {
    items.sort_by(|a, b| name(a).as_bytes().cmp(name(b).as_bytes()));
}

fn tar_entries(entries: &mut [tar::TarEntry], p: &NormalizePolicy) {
    for e in entries.iter_mut() {
        e.mtime = p.clamp(e.mtime);
        if p.zero_ownership {
            e.uid = 0;
            e.gid = 0;
            e.uname = "root".into();
            e.gname = "root".into();
        }
    }
    if p.sort_members {
        sort_by_name(entries, |e| &e.name);
    }
}

pub fn normalize_tar(data: &[u8], p: &NormalizePolicy) -> Result<Vec<u8>, FormatError> {
    let mut entries = tar::read_tar(data)?;
    tar_entries(&mut entries, p);
    tar::write_tar(&entries)
}

fn gzip_with_payload(s: &gzip::GzipStream, payload: &[u8], p: &NormalizePolicy) -> Vec<u8> {
    let mtime = p.clamp(i64::from(s.mtime)) as u32;
    let fname = if p.strip_names {
        None
    } else {
        s.fname.as_deref()
    };
    gzip::write_gzip(payload, mtime, fname, gzip::OS_UNKNOWN)
}

/// Rewrites a gzip stream as a single member with the clamped header time,
/// no FNAME (per policy), no comment or extra field, OS 255 and a payload
/// recompressed at the fixed level.
pub fn normalize_gzip(data: &[u8], p: &NormalizePolicy) -> Result<Vec<u8>, FormatError> {
    let s = gzip::read_gzip(data)?;
    Ok(gzip_with_payload(&s, &s.payload, p))
}

fn zip_entries(archive: &mut ZipArchive, p: &NormalizePolicy) {
    for e in archive.entries.iter_mut() {
        let (date, time) = zip::unix_to_dos(p.clamp(e.mtime()));
        e.dos_date = date;
        e.dos_time = time;
        if p.zero_ownership {
            e.local_extra = zip::strip_extra(&e.local_extra, &ZIP_STRIPPED_EXTRAS);
            e.central_extra = zip::strip_extra(&e.central_extra, &ZIP_STRIPPED_EXTRAS);
        } else {
            let times = [EXTRA_EXT_TIMESTAMP, EXTRA_NTFS];
            e.local_extra = zip::strip_extra(&e.local_extra, &times);
            e.central_extra = zip::strip_extra(&e.central_extra, &times);
        }
        e.flags &= ZIP_KEPT_FLAGS;
    }
    if p.sort_members {
        sort_by_name(&mut archive.entries, |e| &e.name);
    }
}

/// Recompresses every member from its decompressed content.
fn zip_recompress(archive: &mut ZipArchive) -> Result<(), FormatError> {
    for e in archive.entries.iter_mut() {
        let content = e.content()?;
        e.set_content(&content);
    }
    Ok(())
}

pub fn normalize_zip(data: &[u8], p: &NormalizePolicy) -> Result<Vec<u8>, FormatError> {
    let mut archive = zip::read_zip(data)?;
    zip_recompress(&mut archive)?;
    zip_entries(&mut archive, p);
    zip::write_zip(&archive)
}

/// Reads `path` and normalizes it recursively.
pub fn normalize_auto(path: &Path, p: &NormalizePolicy) -> Result<Vec<u8>, NormalizeError> {
    normalize_auto_with(path, p, Exec::default())
}

pub fn normalize_auto_with(
    path: &Path,
    p: &NormalizePolicy,
    exec: Exec,
) -> Result<Vec<u8>, NormalizeError> {
    let label = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let data = std::fs::read(path).map_err(|source| NormalizeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    normalize_bytes(&data, &label, p, exec)
}

/// Normalizes any supported container, inner archives first; other data is
/// returned unchanged. `label` names the input in error messages.
pub fn normalize_bytes(
    data: &[u8],
    label: &str,
    p: &NormalizePolicy,
    exec: Exec,
) -> Result<Vec<u8>, NormalizeError> {
    let ctx = |source: FormatError| NormalizeError::Format {
        path: label.to_string(),
        source,
    };
    let inner = |name: &str| format!("{label}{DESCENT}{name}");
    match detect_format(data) {
        Format::Gzip => {
            let s = gzip::read_gzip(data).map_err(ctx)?;
            let name = s
                .fname
                .as_deref()
                .map(|n| String::from_utf8_lossy(n).into_owned())
                .unwrap_or_else(|| "content".into());
            let payload = normalize_bytes(&s.payload, &inner(&name), p, exec)?;
            Ok(gzip_with_payload(&s, &payload, p))
        }
        Format::Tar => {
            let mut entries = tar::read_tar(data).map_err(ctx)?;
            let bodies = exec.map(&entries, |e| {
                normalize_bytes(&e.data, &inner(&e.name), p, exec)
            });
            for (e, body) in entries.iter_mut().zip(bodies) {
                e.data = body?;
            }
            tar_entries(&mut entries, p);
            tar::write_tar(&entries).map_err(ctx)
        }
        Format::Zip => {
            let mut archive = zip::read_zip(data).map_err(ctx)?;
            let contents = exec.map(&archive.entries, |e| {
                let c = e.content().map_err(|source| NormalizeError::Format {
                    path: inner(&e.name),
                    source,
                })?;
                normalize_bytes(&c, &inner(&e.name), p, exec)
            });
            for (e, c) in archive.entries.iter_mut().zip(contents) {
                e.set_content(&c?);
            }
            zip_entries(&mut archive, p);
            zip::write_zip(&archive).map_err(ctx)
        }
        Format::Text | Format::Binary => Ok(data.to_vec()),
    }
}
