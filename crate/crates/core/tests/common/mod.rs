//! Archive builders for integration tests. They go through the `tar`,
//! `zip` and `flate2` crates so the code under test never grades itself.
#![allow(dead_code)]

use std::io::{Cursor, Read, Write};

use flate2::write::GzEncoder;
use flate2::Compression;

#[derive(Clone, Debug)]
pub struct Meta {
    pub mtime: u64,
    pub uid: u64,
    pub gid: u64,
    pub mode: u32,
    pub uname: String,
}

impl Default for Meta {
    fn default() -> Self {
        Meta {
            mtime: 1_600_000_000,
            uid: 0,
            gid: 0,
            mode: 0o644,
            uname: "root".into(),
        }
    }
}

pub fn tar_of(files: &[(String, Vec<u8>, Meta)]) -> Vec<u8> {
    let mut b = tar::Builder::new(Vec::new());
    for (name, data, m) in files {
        let mut h = tar::Header::new_ustar();
        h.set_path(name).unwrap();
        h.set_size(data.len() as u64);
        h.set_mode(m.mode);
        h.set_uid(m.uid);
        h.set_gid(m.gid);
        h.set_mtime(m.mtime);
        h.set_username(&m.uname).unwrap();
        h.set_groupname(&m.uname).unwrap();
        h.set_entry_type(tar::EntryType::Regular);
        h.set_cksum();
        b.append(&h, data.as_slice()).unwrap();
    }
    b.into_inner().unwrap()
}

pub fn tar_contents(data: &[u8]) -> Vec<(String, Vec<u8>)> {
    let mut a = tar::Archive::new(Cursor::new(data));
    a.entries()
        .unwrap()
        .map(|e| {
            let mut e = e.unwrap();
            let name = e.path().unwrap().to_string_lossy().into_owned();
            let mut buf = Vec::new();
            e.read_to_end(&mut buf).unwrap();
            (name, buf)
        })
        .collect()
}

pub fn gzip_of(payload: &[u8], mtime: u32, name: Option<&str>) -> Vec<u8> {
    let mut b = flate2::GzBuilder::new().mtime(mtime);
    if let Some(n) = name {
        b = b.filename(n);
    }
    let mut e: GzEncoder<Vec<u8>> = b.write(Vec::new(), Compression::default());
    e.write_all(payload).unwrap();
    e.finish().unwrap()
}

pub fn gunzip(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(data)
        .read_to_end(&mut out)
        .unwrap();
    out
}

pub fn zip_of(files: &[(String, Vec<u8>, Meta)]) -> Vec<u8> {
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    for (name, data, m) in files {
        let secs = m.mtime as i64;
        let days = secs.div_euclid(86_400);
        let (y, mo, d) = civil(days);
        let rem = secs.rem_euclid(86_400);
        let dt = zip::DateTime::from_date_and_time(
            y as u16,
            mo as u8,
            d as u8,
            (rem / 3600) as u8,
            (rem / 60 % 60) as u8,
            (rem % 60) as u8,
        )
        .unwrap();
        let opts = zip::write::SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated)
            .last_modified_time(dt)
            .unix_permissions(m.mode);
        w.start_file(name.as_str(), opts).unwrap();
        w.write_all(data).unwrap();
    }
    w.finish().unwrap().into_inner()
}

pub fn zip_contents(data: &[u8]) -> Vec<(String, Vec<u8>)> {
    let mut a = zip::ZipArchive::new(Cursor::new(data)).unwrap();
    (0..a.len())
        .map(|i| {
            let mut f = a.by_index(i).unwrap();
            let mut buf = Vec::new();
            f.read_to_end(&mut buf).unwrap();
            (f.name().to_string(), buf)
        })
        .collect()
}

/// Days since 1970-01-01 to a proleptic Gregorian date.
fn civil(days: i64) -> (i64, i64, i64) {
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    (yoe + era * 400 + i64::from(m <= 2), m, d)
}
