//! Recursive artifact comparison.
//!
//! [`compare_bytes`] detects the container format of both inputs, unpacks
//! matching containers, pairs their members by name and recurses. The result
//! is a [`DiffNode`] tree whose paths use `!` for each container descent,
//! e.g. `pkg.tar.gz!pkg.tar!docs/a.txt`.
//!
//! Member metadata (mtime, ownership, mode) is compared separately from
//! content: a member whose bytes match but whose metadata differs becomes a
//! node carrying a [`Detail::MetaDiff`] with its content node (status
//! `Same`) as the only child. A container whose members are equal as sets
//! but stored in a different sequence gets a `MetaDiff` on the `order`
//! pseudo-field.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::archive::{self, FormatError};
use crate::Exec;

mod bytes;
mod render;
mod textdiff;

pub use bytes::{byte_ranges, ByteRange, EXCERPT_BYTES, RESYNC_WINDOW};
pub use render::{render_bundle, render_report, render_report_with, ReportStyle, IDENTICAL};
pub use textdiff::{unified_hunks, Hunk, HunkLine, LineTag};

pub const DEFAULT_MAX_DEPTH: usize = 8;
pub const DEFAULT_CONTEXT: usize = 3;

/// Separator between a container path and a member name.
pub const DESCENT: char = '!';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Gzip,
    Tar,
    Zip,
    Text,
    Binary,
}

impl Format {
    pub fn is_container(self) -> bool {
        matches!(self, Format::Gzip | Format::Tar | Format::Zip)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Format::Gzip => "gzip",
            Format::Tar => "tar",
            Format::Zip => "zip",
            Format::Text => "text",
            Format::Binary => "binary",
        }
    }
}

/// Classifies bytes by magic numbers, falling back to a UTF-8 text test.
pub fn detect_format(data: &[u8]) -> Format {
    if data.starts_with(&archive::gzip::MAGIC) {
        Format::Gzip
    } else if data.starts_with(b"PK\x03\x04") {
        Format::Zip
    } else if data.get(257..262) == Some(b"ustar") {
        Format::Tar
    } else if !data.contains(&0) && std::str::from_utf8(data).is_ok() {
        Format::Text
    } else {
        Format::Binary
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemberMeta {
    pub mtime: Option<i64>,
    pub uid: Option<u64>,
    pub gid: Option<u64>,
    pub uname: Option<String>,
    pub gname: Option<String>,
    pub mode: Option<u32>,
}

impl MemberMeta {
    /// (field, rendered value) pairs in a fixed order.
    fn fields(&self) -> [(&'static str, Option<String>); 6] {
        [
            ("mtime", self.mtime.map(|v| v.to_string())),
            ("uid", self.uid.map(|v| v.to_string())),
            ("gid", self.gid.map(|v| v.to_string())),
            ("uname", self.uname.clone()),
            ("gname", self.gname.clone()),
            ("mode", self.mode.map(|m| format!("{m:04o}"))),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Member {
    pub name: String,
    pub content: Vec<u8>,
    pub meta: MemberMeta,
    /// Set when the member could not be extracted; `content` then holds the
    /// raw stored bytes.
    pub error: Option<String>,
}

/// Lists a container's members in archive order.
pub fn unpack(data: &[u8], fmt: Format) -> Result<Vec<Member>, FormatError> {
    match fmt {
        Format::Gzip => {
            let s = archive::gzip::read_gzip(data)?;
            Ok(vec![Member {
                name: s
                    .fname
                    .as_deref()
                    .map(|n| String::from_utf8_lossy(n).into_owned())
                    .filter(|n| !n.is_empty())
                    .unwrap_or_else(|| "content".to_string()),
                content: s.payload,
                meta: MemberMeta {
                    mtime: Some(i64::from(s.mtime)),
                    ..MemberMeta::default()
                },
                error: None,
            }])
        }
        Format::Tar => Ok(archive::tar::read_tar(data)?
            .into_iter()
            .map(|e| Member {
                name: e.name,
                content: e.data,
                meta: MemberMeta {
                    mtime: Some(e.mtime),
                    uid: Some(e.uid),
                    gid: Some(e.gid),
                    uname: Some(e.uname),
                    gname: Some(e.gname),
                    mode: Some(e.mode),
                },
                error: None,
            })
            .collect()),
        Format::Zip => Ok(archive::zip::read_zip(data)?
            .entries
            .into_iter()
            .map(|e| {
                let owner = e.unix_owner();
                let meta = MemberMeta {
                    mtime: Some(e.mtime()),
                    uid: owner.map(|o| o.0),
                    gid: owner.map(|o| o.1),
                    uname: None,
                    gname: None,
                    mode: e.unix_mode(),
                };
                match e.content() {
                    Ok(content) => Member {
                        name: e.name,
                        content,
                        meta,
                        error: None,
                    },
                    Err(err) => Member {
                        name: e.name.clone(),
                        content: e.raw,
                        meta,
                        error: Some(err.to_string()),
                    },
                }
            })
            .collect()),
        Format::Text | Format::Binary => Err(FormatError::unsupported(
            "unpack",
            0,
            format!("{} is not a container", fmt.as_str()),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Same,
    Differs,
    OnlyInFirst,
    OnlyInSecond,
}

impl Status {
    pub fn mirrored(self) -> Status {
        match self {
            Status::OnlyInFirst => Status::OnlyInSecond,
            Status::OnlyInSecond => Status::OnlyInFirst,
            s => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MetaField {
    pub field: String,
    pub first: String,
    pub second: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detail {
    None,
    TextDiff {
        hunks: Vec<Hunk>,
    },
    ByteRanges {
        ranges: Vec<ByteRange>,
        depth_limited: bool,
    },
    MetaDiff {
        fields: Vec<MetaField>,
    },
}

impl Detail {
    pub fn is_none(&self) -> bool {
        matches!(self, Detail::None)
    }

    pub fn mirrored(&self) -> Detail {
        match self {
            Detail::None => Detail::None,
            Detail::TextDiff { hunks } => Detail::TextDiff {
                hunks: hunks.iter().map(Hunk::inverted).collect(),
            },
            Detail::ByteRanges {
                ranges,
                depth_limited,
            } => Detail::ByteRanges {
                ranges: ranges.iter().map(ByteRange::mirrored).collect(),
                depth_limited: *depth_limited,
            },
            Detail::MetaDiff { fields } => Detail::MetaDiff {
                fields: fields
                    .iter()
                    .map(|f| MetaField {
                        field: f.field.clone(),
                        first: f.second.clone(),
                        second: f.first.clone(),
                    })
                    .collect(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DiffNode {
    pub path: String,
    pub format: Format,
    pub status: Status,
    pub detail: Detail,
    pub children: Vec<DiffNode>,
}

impl DiffNode {
    fn leaf(path: &str, format: Format, status: Status, detail: Detail) -> Self {
        DiffNode {
            path: path.to_string(),
            format,
            status,
            detail,
            children: Vec::new(),
        }
    }

    pub fn is_same(&self) -> bool {
        self.status == Status::Same
    }

    /// Number of container descents in this node's path.
    pub fn depth(&self) -> usize {
        self.path.matches(DESCENT).count()
    }

    /// The tree as it would come out of comparing the two sides swapped.
    pub fn mirrored(&self) -> DiffNode {
        DiffNode {
            path: self.path.clone(),
            format: self.format,
            status: self.status.mirrored(),
            detail: self.detail.mirrored(),
            children: self.children.iter().map(DiffNode::mirrored).collect(),
        }
    }

    /// Pre-order traversal.
    pub fn walk(&self) -> Vec<&DiffNode> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.walk());
        }
        out
    }

    /// Structural invariants every produced tree satisfies.
    pub fn check_invariants(&self) -> Result<(), String> {
        let differing_child = self.children.iter().any(|c| !c.is_same());
        match self.status {
            Status::Same => {
                if !self.detail.is_none() || differing_child {
                    return Err(format!(
                        "{}: Same node with detail or differing child",
                        self.path
                    ));
                }
            }
            Status::Differs => {
                if self.detail.is_none() && !differing_child {
                    return Err(format!("{}: Differs node with nothing to show", self.path));
                }
            }
            Status::OnlyInFirst | Status::OnlyInSecond => {
                if !self.children.is_empty() {
                    return Err(format!("{}: one-sided node with children", self.path));
                }
            }
        }
        if differing_child && self.status != Status::Differs {
            return Err(format!(
                "{}: differing child under a non-Differs node",
                self.path
            ));
        }
        for c in &self.children {
            if !c.path.starts_with(&self.path) {
                return Err(format!(
                    "{}: child path outside parent {}",
                    c.path, self.path
                ));
            }
            c.check_invariants()?;
        }
        Ok(())
    }
}

/// Comparison settings.
#[derive(Clone, Copy, Debug)]
pub struct Comparator {
    pub max_depth: usize,
    pub context: usize,
    pub exec: Exec,
}

impl Default for Comparator {
    fn default() -> Self {
        Comparator {
            max_depth: DEFAULT_MAX_DEPTH,
            context: DEFAULT_CONTEXT,
            exec: Exec::default(),
        }
    }
}

/// Compares two artifacts with default settings.
pub fn compare_bytes(a: &[u8], b: &[u8], path: &str, depth: usize) -> DiffNode {
    Comparator::default().compare(a, b, path, depth)
}

fn gzip_member_name(path: &str) -> String {
    let base = path.rsplit([DESCENT, '/']).next().unwrap_or(path);
    if let Some(stem) = base.strip_suffix(".tgz") {
        format!("{stem}.tar")
    } else if let Some(stem) = base.strip_suffix(".gz").filter(|s| !s.is_empty()) {
        stem.to_string()
    } else {
        "content".to_string()
    }
}

/// Member keys unique within one archive: repeated names get `#2`, `#3`...
fn keyed(members: Vec<Member>) -> (Vec<String>, BTreeMap<String, Member>) {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut order = Vec::with_capacity(members.len());
    let mut map = BTreeMap::new();
    for m in members {
        let n = seen.entry(m.name.clone()).or_insert(0);
        *n += 1;
        let key = if *n == 1 {
            m.name.clone()
        } else {
            format!("{}#{}", m.name, n)
        };
        order.push(key.clone());
        map.insert(key, m);
    }
    (order, map)
}

fn meta_diff(a: &MemberMeta, b: &MemberMeta) -> Vec<MetaField> {
    a.fields()
        .into_iter()
        .zip(b.fields())
        .filter(|((_, x), (_, y))| x != y)
        .map(|((field, x), (_, y))| MetaField {
            field: field.to_string(),
            first: x.unwrap_or_default(),
            second: y.unwrap_or_default(),
        })
        .collect()
}

enum Pair {
    Both(Member, Member),
    First(Member),
    Second(Member),
}

impl Comparator {
    pub fn compare(&self, a: &[u8], b: &[u8], path: &str, depth: usize) -> DiffNode {
        let (fa, fb) = (detect_format(a), detect_format(b));
        if a == b {
            return DiffNode::leaf(path, fa, Status::Same, Detail::None);
        }
        if fa == fb && fa.is_container() {
            if depth >= self.max_depth {
                return DiffNode::leaf(
                    path,
                    fa,
                    Status::Differs,
                    Detail::ByteRanges {
                        ranges: bytes::whole_range(a, b),
                        depth_limited: true,
                    },
                );
            }
            if let (Ok(ma), Ok(mb)) = (unpack(a, fa), unpack(b, fb)) {
                return self.compare_containers(a, b, fa, ma, mb, path, depth);
            }
            return self.binary(a, b, path);
        }
        if fa == Format::Text && fb == Format::Text {
            let (ta, tb) = (
                std::str::from_utf8(a).expect("detected as text"),
                std::str::from_utf8(b).expect("detected as text"),
            );
            return DiffNode::leaf(
                path,
                Format::Text,
                Status::Differs,
                Detail::TextDiff {
                    hunks: unified_hunks(ta, tb, self.context),
                },
            );
        }
        self.binary(a, b, path)
    }

    fn binary(&self, a: &[u8], b: &[u8], path: &str) -> DiffNode {
        DiffNode::leaf(
            path,
            Format::Binary,
            Status::Differs,
            Detail::ByteRanges {
                ranges: byte_ranges(a, b),
                depth_limited: false,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn compare_containers(
        &self,
        a: &[u8],
        b: &[u8],
        fmt: Format,
        ma: Vec<Member>,
        mb: Vec<Member>,
        path: &str,
        depth: usize,
    ) -> DiffNode {
        let mut container_fields = Vec::new();
        let pairs: Vec<(String, Pair)> = if fmt == Format::Gzip {
            let (x, y) = (
                ma.into_iter().next().expect("gzip has one member"),
                mb.into_iter().next().expect("gzip has one member"),
            );
            if x.name != y.name {
                container_fields.push(MetaField {
                    field: "name".into(),
                    first: x.name.clone(),
                    second: y.name.clone(),
                });
            }
            let name = if x.name == y.name && x.name != "content" {
                x.name.clone()
            } else {
                gzip_member_name(path)
            };
            vec![(name, Pair::Both(x, y))]
        } else {
            let (order_a, mut map_a) = keyed(ma);
            let (order_b, mut map_b) = keyed(mb);
            let common_a: Vec<&String> =
                order_a.iter().filter(|k| map_b.contains_key(*k)).collect();
            let common_b: Vec<&String> =
                order_b.iter().filter(|k| map_a.contains_key(*k)).collect();
            if common_a != common_b {
                container_fields.push(MetaField {
                    field: "order".into(),
                    first: order_a.join(", "),
                    second: order_b.join(", "),
                });
            }
            let mut keys: Vec<String> = map_a.keys().chain(map_b.keys()).cloned().collect();
            keys.sort_by(|x, y| x.as_bytes().cmp(y.as_bytes()));
            keys.dedup();
            keys.into_iter()
                .map(|k| {
                    let pair = match (map_a.remove(&k), map_b.remove(&k)) {
                        (Some(x), Some(y)) => Pair::Both(x, y),
                        (Some(x), None) => Pair::First(x),
                        (None, Some(y)) => Pair::Second(y),
                        (None, None) => unreachable!("key came from one of the maps"),
                    };
                    (k, pair)
                })
                .collect()
        };

        let children: Vec<DiffNode> = self.exec.map(&pairs, |(name, pair)| {
            let child_path = format!("{path}{DESCENT}{name}");
            match pair {
                Pair::First(m) => DiffNode::leaf(
                    &child_path,
                    detect_format(&m.content),
                    Status::OnlyInFirst,
                    Detail::None,
                ),
                Pair::Second(m) => DiffNode::leaf(
                    &child_path,
                    detect_format(&m.content),
                    Status::OnlyInSecond,
                    Detail::None,
                ),
                Pair::Both(x, y) => {
                    let content = self.compare(&x.content, &y.content, &child_path, depth + 1);
                    let fields = meta_diff(&x.meta, &y.meta);
                    if fields.is_empty() {
                        content
                    } else {
                        DiffNode {
                            path: child_path,
                            format: content.format,
                            status: Status::Differs,
                            detail: Detail::MetaDiff { fields },
                            children: vec![content],
                        }
                    }
                }
            }
        });

        let any_child = children.iter().any(|c| !c.is_same());
        let detail = if !container_fields.is_empty() {
            Detail::MetaDiff {
                fields: container_fields,
            }
        } else if !any_child {
            // Equal members, equal order, different bytes: only the raw
            // encoding can explain it.
            Detail::ByteRanges {
                ranges: byte_ranges(a, b),
                depth_limited: false,
            }
        } else {
            Detail::None
        };
        DiffNode {
            path: path.to_string(),
            format: fmt,
            status: Status::Differs,
            detail,
            children,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::{gzip, tar::write_tar, tar::TarEntry};

    #[test]
    fn magic_detection() {
        assert_eq!(detect_format(&[0x1f, 0x8b, 0x08, 0]), Format::Gzip);
        let mut block = vec![0u8; 600];
        block[257..262].copy_from_slice(b"ustar");
        assert_eq!(detect_format(&block), Format::Tar);
        assert_eq!(detect_format(b"hello\n"), Format::Text);
        assert_eq!(detect_format(b"PK\x03\x04rest"), Format::Zip);
        assert_eq!(detect_format(b"a\0b"), Format::Binary);
        assert_eq!(detect_format(&[0xff, 0xfe]), Format::Binary);
        assert_eq!(detect_format(b""), Format::Text);
    }

    #[test]
    fn identity_is_same() {
        let n = compare_bytes(b"xyz", b"xyz", "f", 0);
        assert_eq!(n.status, Status::Same);
        assert!(n.detail.is_none() && n.children.is_empty());
    }

    #[test]
    fn uid_only_difference_is_metadata() {
        let mut x = TarEntry::file("a", b"same".to_vec());
        x.uid = 1000;
        let mut y = x.clone();
        y.uid = 0;
        let n = compare_bytes(
            &write_tar(&[x]).unwrap(),
            &write_tar(&[y]).unwrap(),
            "t.tar",
            0,
        );
        n.check_invariants().unwrap();
        let leaf = &n.children[0];
        assert_eq!(leaf.path, "t.tar!a");
        assert_eq!(
            leaf.detail,
            Detail::MetaDiff {
                fields: vec![MetaField {
                    field: "uid".into(),
                    first: "1000".into(),
                    second: "0".into()
                }]
            }
        );
        assert_eq!(leaf.children[0].status, Status::Same);
    }

    #[test]
    fn reordered_members_surface_as_order() {
        let (a, b) = (
            TarEntry::file("a", b"1".to_vec()),
            TarEntry::file("b", b"2".to_vec()),
        );
        let n = compare_bytes(
            &write_tar(&[a.clone(), b.clone()]).unwrap(),
            &write_tar(&[b, a]).unwrap(),
            "t.tar",
            0,
        );
        n.check_invariants().unwrap();
        match &n.detail {
            Detail::MetaDiff { fields } => {
                assert_eq!(fields[0].field, "order");
                assert_eq!(fields[0].first, "a, b");
                assert_eq!(fields[0].second, "b, a");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(n.children.iter().all(DiffNode::is_same));
    }

    #[test]
    fn one_sided_members() {
        let a = write_tar(&[TarEntry::file("a", b"1".to_vec())]).unwrap();
        let b = write_tar(&[TarEntry::file("b", b"1".to_vec())]).unwrap();
        let n = compare_bytes(&a, &b, "t.tar", 0);
        let statuses: Vec<_> = n
            .children
            .iter()
            .map(|c| (c.path.as_str(), c.status))
            .collect();
        assert_eq!(
            statuses,
            vec![
                ("t.tar!a", Status::OnlyInFirst),
                ("t.tar!b", Status::OnlyInSecond)
            ]
        );
    }

    #[test]
    fn gzip_header_only_difference() {
        let a = gzip::write_gzip(b"payload", 0, Some(b"x"), 255);
        let b = gzip::write_gzip(b"payload", 0, Some(b"y"), 255);
        let n = compare_bytes(&a, &b, "p.gz", 0);
        n.check_invariants().unwrap();
        assert!(matches!(n.detail, Detail::MetaDiff { .. }));
        assert_eq!(n.children[0].path, "p.gz!p");
        assert!(n.children[0].is_same());
    }

    #[test]
    fn depth_limit_flags_node() {
        let inner = write_tar(&[TarEntry::file("a", b"1".to_vec())]).unwrap();
        let other = write_tar(&[TarEntry::file("a", b"2".to_vec())]).unwrap();
        let cmp = Comparator {
            max_depth: 0,
            ..Comparator::default()
        };
        let n = cmp.compare(&inner, &other, "t.tar", 0);
        assert!(matches!(
            n.detail,
            Detail::ByteRanges {
                depth_limited: true,
                ..
            }
        ));
    }

    #[test]
    fn corrupt_container_falls_back_to_binary() {
        let good = write_tar(&[TarEntry::file("a", b"1".to_vec())]).unwrap();
        let mut bad = good.clone();
        bad[0] = b'z';
        let n = compare_bytes(&good, &bad, "t.tar", 0);
        assert_eq!(n.format, Format::Binary);
        assert!(matches!(n.detail, Detail::ByteRanges { .. }));
    }

    #[test]
    fn gzip_member_naming() {
        assert_eq!(gzip_member_name("pkg.tar.gz"), "pkg.tar");
        assert_eq!(gzip_member_name("x!inner.tgz"), "inner.tar");
        assert_eq!(gzip_member_name("blob"), "content");
    }
}
