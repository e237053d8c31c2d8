//! `.buildinfo`-style build attestations.
//!
//! An [`Attestation`] binds a source package and the environment it was built
//! in to the checksums of the artifacts produced. The wire format is a strict,
//! closed subset of Debian's `.buildinfo` control format:
//!
//! ```text
//! Source: black
//! Version: 20.8b1-1
//! Checksums-Sha1:
//!   9915459ae7a1a5c3efb984d7e5472f7976e996b1 2584 black_20.8b1-1.dsc
//! Checksums-Sha256:
//!   <64 hex> 2584 black_20.8b1-1.dsc
//! Build-Architecture: amd64
//! Installed-Build-Depends:
//!  gcc (= 4:10.2.0-1)
//! Environment:
//!  LANG="C.UTF-8"
//! Builder-Id: alice
//! ```
//!
//! Parsing is strict: unknown, duplicate or out-of-order fields, unsorted
//! lists and trailing whitespace are all errors, so that one attestation has
//! exactly one byte representation.
//!
//! Signatures are detached Ed25519 over the canonical body.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ed25519_dalek::{Signer as _, Verifier as _};
use sha1::Sha1;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::Exec;

#[derive(Debug, Error)]
pub enum AttestationError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact directory {dir}: {msg}")]
    Structure { dir: PathBuf, msg: String },
    #[error("missing field: {0}")]
    MissingField(&'static str),
    #[error("line {line}: duplicate field: {name}")]
    DuplicateField { line: usize, name: String },
    #[error("line {line}: unknown field: {name}")]
    UnknownField { line: usize, name: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid attestation: {0}")]
    Validation(String),
    #[error("invalid key: {0}")]
    Key(String),
    #[error("malformed signed attestation: {0}")]
    SignedFormat(String),
}

pub type Result<T, E = AttestationError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChecksumEntry {
    pub filename: String,
    pub size: u64,
    pub sha1: String,
    pub sha256: String,
}

impl ChecksumEntry {
    pub fn from_bytes(filename: impl Into<String>, data: &[u8]) -> Self {
        ChecksumEntry {
            filename: filename.into(),
            size: data.len() as u64,
            sha1: hex::encode(Sha1::digest(data)),
            sha256: sha256_hex(data),
        }
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DependencyPin {
    pub name: String,
    pub version: String,
}

impl DependencyPin {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        DependencyPin {
            name: name.into(),
            version: version.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attestation {
    pub source: String,
    pub version: String,
    pub architecture: String,
    pub checksums: Vec<ChecksumEntry>,
    pub depends: Vec<DependencyPin>,
    pub environment: BTreeMap<String, String>,
    pub builder_id: String,
}

const SOURCE: &str = "Source";
const VERSION: &str = "Version";
const SHA1: &str = "Checksums-Sha1";
const SHA256: &str = "Checksums-Sha256";
const ARCH: &str = "Build-Architecture";
const DEPENDS: &str = "Installed-Build-Depends";
const ENVIRONMENT: &str = "Environment";
const BUILDER: &str = "Builder-Id";

const FIELD_ORDER: [&str; 8] = [
    SOURCE,
    VERSION,
    SHA1,
    SHA256,
    ARCH,
    DEPENDS,
    ENVIRONMENT,
    BUILDER,
];

fn is_list_field(name: &str) -> bool {
    matches!(name, SHA1 | SHA256 | DEPENDS | ENVIRONMENT)
}

fn is_lower_hex(s: &str, len: usize) -> bool {
    s.len() == len
        && s.bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn valid_scalar(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

/// Builder ids double as file names in the attestation store.
pub fn valid_builder_id(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('.')
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"._@+-".contains(&b))
}

fn valid_filename(s: &str) -> bool {
    valid_scalar(s) && !s.contains('/') && s != "." && s != ".."
}

fn valid_package_name(s: &str) -> bool {
    let b = s.as_bytes();
    !b.is_empty()
        && (b[0].is_ascii_lowercase() || b[0].is_ascii_digit())
        && b.iter()
            .all(|&c| c.is_ascii_lowercase() || c.is_ascii_digit() || b"+.-".contains(&c))
}

fn valid_env_name(s: &str) -> bool {
    let b = s.as_bytes();
    !b.is_empty()
        && (b[0].is_ascii_alphabetic() || b[0] == b'_')
        && b.iter().all(|&c| c.is_ascii_alphanumeric() || c == b'_')
}

fn valid_env_value(s: &str) -> bool {
    !s.contains('"') && !s.contains('\\') && !s.chars().any(char::is_control)
}

impl Attestation {
    /// Checks every type invariant: scalar shapes, checksum shapes, sort
    /// order and uniqueness of list entries.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AttestationError::Validation(msg));
        for (field, value) in [
            (SOURCE, &self.source),
            (VERSION, &self.version),
            (ARCH, &self.architecture),
        ] {
            if !valid_scalar(value) {
                return bad(format!(
                    "{field} must be nonempty without whitespace: {value:?}"
                ));
            }
        }
        if !valid_builder_id(&self.builder_id) {
            return bad(format!("invalid builder id {:?}", self.builder_id));
        }
        for c in &self.checksums {
            if !valid_filename(&c.filename) {
                return bad(format!("invalid artifact file name {:?}", c.filename));
            }
            if !is_lower_hex(&c.sha1, 40) || !is_lower_hex(&c.sha256, 64) {
                return bad(format!("malformed digest for {}", c.filename));
            }
        }
        for pair in self.checksums.windows(2) {
            if pair[0].filename.as_bytes() >= pair[1].filename.as_bytes() {
                return bad(format!(
                    "checksums not strictly sorted by filename at {}",
                    pair[1].filename
                ));
            }
        }
        for d in &self.depends {
            if !valid_package_name(&d.name) || !valid_scalar(&d.version) {
                return bad(format!(
                    "invalid dependency pin {} (= {})",
                    d.name, d.version
                ));
            }
        }
        for pair in self.depends.windows(2) {
            if pair[0].name.as_bytes() >= pair[1].name.as_bytes() {
                return bad(format!(
                    "depends not strictly sorted by name at {}",
                    pair[1].name
                ));
            }
        }
        for (k, v) in &self.environment {
            if !valid_env_name(k) || !valid_env_value(v) {
                return bad(format!("invalid environment entry {k}={v:?}"));
            }
        }
        Ok(())
    }

    /// The attested SHA-256 for an artifact, if present.
    pub fn sha256_of(&self, filename: &str) -> Option<&str> {
        self.checksums
            .iter()
            .find(|c| c.filename == filename)
            .map(|c| c.sha256.as_str())
    }
}

/// Hashes every file in a flat artifact directory. Entries come back sorted
/// by file name.
pub fn compute_checksums(artifact_dir: &Path) -> Result<Vec<ChecksumEntry>> {
    compute_checksums_with(artifact_dir, Exec::default())
}

pub fn compute_checksums_with(artifact_dir: &Path, exec: Exec) -> Result<Vec<ChecksumEntry>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AttestationError::Io { path, source }
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(artifact_dir).map_err(io(artifact_dir))? {
        let entry = entry.map_err(io(artifact_dir))?;
        let path = entry.path();
        let kind = entry.file_type().map_err(io(&path))?;
        let structure = |msg: String| AttestationError::Structure {
            dir: artifact_dir.to_path_buf(),
            msg,
        };
        let name = entry
            .file_name()
            .into_string()
            .map_err(|n| structure(format!("non-UTF-8 file name {n:?}")))?;
        if kind.is_dir() {
            return Err(structure(format!(
                "subdirectory {name} (artifact directories are flat)"
            )));
        }
        if !kind.is_file() {
            return Err(structure(format!("{name} is not a regular file")));
        }
        if !valid_filename(&name) {
            return Err(structure(format!("unsupported file name {name:?}")));
        }
        files.push((name, path));
    }
    files.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    exec.map(&files, |(name, path)| {
        std::fs::read(path)
            .map(|data| ChecksumEntry::from_bytes(name.clone(), &data))
            .map_err(io(path))
    })
    .into_iter()
    .collect()
}

/// Serializes to the canonical wire format.
pub fn serialize_buildinfo(att: &Attestation) -> Result<Vec<u8>> {
    att.validate()?;
    let mut s = String::new();
    let _ = writeln!(s, "{SOURCE}: {}", att.source);
    let _ = writeln!(s, "{VERSION}: {}", att.version);
    let _ = writeln!(s, "{SHA1}:");
    for c in &att.checksums {
        let _ = writeln!(s, "  {} {} {}", c.sha1, c.size, c.filename);
    }
    let _ = writeln!(s, "{SHA256}:");
    for c in &att.checksums {
        let _ = writeln!(s, "  {} {} {}", c.sha256, c.size, c.filename);
    }
    let _ = writeln!(s, "{ARCH}: {}", att.architecture);
    let _ = writeln!(s, "{DEPENDS}:");
    for d in &att.depends {
        let _ = writeln!(s, " {} (= {})", d.name, d.version);
    }
    let _ = writeln!(s, "{ENVIRONMENT}:");
    for (k, v) in &att.environment {
        let _ = writeln!(s, " {k}=\"{v}\"");
    }
    let _ = writeln!(s, "{BUILDER}: {}", att.builder_id);
    Ok(s.into_bytes())
}

struct RawField<'a> {
    line: usize,
    value: &'a str,
    continuation: Vec<(usize, &'a str)>,
}

/// Parses the canonical wire format.
pub fn parse_buildinfo(bytes: &[u8]) -> Result<Attestation> {
    let text = std::str::from_utf8(bytes).map_err(|e| AttestationError::Parse {
        line: 1 + bytes[..e.valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count(),
        msg: "invalid UTF-8".into(),
    })?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(AttestationError::Parse {
            line: text.lines().count(),
            msg: "missing final newline".into(),
        });
    }

    let mut fields: BTreeMap<&'static str, RawField> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    let mut last_index: Option<usize> = None;
    for (i, line) in text.split_terminator('\n').enumerate() {
        let line_no = i + 1;
        let perr = |msg: &str| AttestationError::Parse {
            line: line_no,
            msg: msg.into(),
        };
        if line.contains('\r') {
            return Err(perr("carriage return (LF line endings only)"));
        }
        if line.ends_with(char::is_whitespace) {
            return Err(perr("trailing whitespace"));
        }
        if line.is_empty() {
            return Err(perr("empty line"));
        }
        if line.starts_with(' ') {
            let Some(name) = current.filter(|n| is_list_field(n)) else {
                return Err(perr("continuation line outside a list field"));
            };
            fields
                .get_mut(name)
                .expect("current field is registered")
                .continuation
                .push((line_no, line));
            continue;
        }
        let Some((name, rest)) = line.split_once(':') else {
            return Err(perr("expected 'Field: value'"));
        };
        let Some(index) = FIELD_ORDER.iter().position(|f| *f == name) else {
            return Err(AttestationError::UnknownField {
                line: line_no,
                name: name.to_string(),
            });
        };
        let canonical = FIELD_ORDER[index];
        if fields.contains_key(canonical) {
            return Err(AttestationError::DuplicateField {
                line: line_no,
                name: name.to_string(),
            });
        }
        if last_index.is_some_and(|last| index < last) {
            return Err(perr(&format!("field {name} out of order")));
        }
        let value = if is_list_field(canonical) {
            if !rest.is_empty() {
                return Err(perr(&format!("{name} takes no inline value")));
            }
            ""
        } else {
            rest.strip_prefix(' ')
                .filter(|v| valid_scalar(v))
                .ok_or_else(|| perr(&format!("{name} needs a single nonempty value")))?
        };
        fields.insert(
            canonical,
            RawField {
                line: line_no,
                value,
                continuation: Vec::new(),
            },
        );
        current = Some(canonical);
        last_index = Some(index);
    }

    let take = |name: &'static str| fields.get(name).ok_or(AttestationError::MissingField(name));
    let source = take(SOURCE)?.value.to_string();
    let version = take(VERSION)?.value.to_string();
    let sha1 = parse_checksum_lines(take(SHA1)?, 40)?;
    let sha256 = parse_checksum_lines(take(SHA256)?, 64)?;
    let architecture = take(ARCH)?.value.to_string();
    let depends = parse_depends(take(DEPENDS)?)?;
    let environment = parse_environment(take(ENVIRONMENT)?)?;
    let builder_id = take(BUILDER)?.value.to_string();

    if sha1.len() != sha256.len()
        || sha1
            .iter()
            .zip(&sha256)
            .any(|(a, b)| a.1 != b.1 || a.2 != b.2)
    {
        return Err(AttestationError::Parse {
            line: take(SHA256)?.line,
            msg: "Checksums-Sha256 entries do not match Checksums-Sha1 entries".into(),
        });
    }
    let checksums = sha1
        .into_iter()
        .zip(sha256)
        .map(|((h1, size, filename), (h256, _, _))| ChecksumEntry {
            filename,
            size,
            sha1: h1,
            sha256: h256,
        })
        .collect();

    let att = Attestation {
        source,
        version,
        architecture,
        checksums,
        depends,
        environment,
        builder_id,
    };
    att.validate().map_err(|e| match e {
        AttestationError::Validation(msg) => AttestationError::Parse { line: 0, msg },
        other => other,
    })?;
    Ok(att)
}

fn parse_checksum_lines(field: &RawField, hex_len: usize) -> Result<Vec<(String, u64, String)>> {
    let mut out: Vec<(String, u64, String)> = Vec::new();
    for &(line, text) in &field.continuation {
        let perr = |msg: &str| AttestationError::Parse {
            line,
            msg: format!("malformed checksum line: {msg}"),
        };
        let body = text
            .strip_prefix("  ")
            .filter(|b| !b.starts_with(' '))
            .ok_or_else(|| perr("expected two-space indent"))?;
        let tokens: Vec<&str> = body.split(' ').collect();
        let [hash, size, filename] = tokens[..] else {
            return Err(perr("expected 'hash size filename'"));
        };
        if !is_lower_hex(hash, hex_len) {
            return Err(perr(&format!("expected {hex_len} lowercase hex digits")));
        }
        if size.is_empty()
            || !size.bytes().all(|b| b.is_ascii_digit())
            || (size.len() > 1 && size.starts_with('0'))
        {
            return Err(perr("bad size"));
        }
        let size: u64 = size.parse().map_err(|_| perr("size out of range"))?;
        if !valid_filename(filename) {
            return Err(perr("bad file name"));
        }
        if let Some(prev) = out.last() {
            if prev.2.as_bytes() >= filename.as_bytes() {
                return Err(AttestationError::Parse {
                    line,
                    msg: "checksum entries not strictly sorted by filename".into(),
                });
            }
        }
        out.push((hash.to_string(), size, filename.to_string()));
    }
    Ok(out)
}

fn parse_depends(field: &RawField) -> Result<Vec<DependencyPin>> {
    let mut out: Vec<DependencyPin> = Vec::new();
    for &(line, text) in &field.continuation {
        let perr = || AttestationError::Parse {
            line,
            msg: "malformed dependency line, expected ' name (= version)'".into(),
        };
        let body = text
            .strip_prefix(' ')
            .filter(|b| !b.starts_with(' '))
            .ok_or_else(perr)?;
        let (name, rest) = body.split_once(" (= ").ok_or_else(perr)?;
        let version = rest.strip_suffix(')').ok_or_else(perr)?;
        if !valid_package_name(name) || !valid_scalar(version) || version.contains(')') {
            return Err(perr());
        }
        if let Some(prev) = out.last() {
            if prev.name.as_bytes() >= name.as_bytes() {
                return Err(AttestationError::Parse {
                    line,
                    msg: "dependencies not strictly sorted by name".into(),
                });
            }
        }
        out.push(DependencyPin::new(name, version));
    }
    Ok(out)
}

fn parse_environment(field: &RawField) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut last: Option<&str> = None;
    for &(line, text) in &field.continuation {
        let perr = || AttestationError::Parse {
            line,
            msg: "malformed environment line, expected ' NAME=\"value\"'".into(),
        };
        let body = text.strip_prefix(' ').ok_or_else(perr)?;
        let (name, quoted) = body.split_once('=').ok_or_else(perr)?;
        let value = quoted
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .ok_or_else(perr)?;
        if !valid_env_name(name) || !valid_env_value(value) {
            return Err(perr());
        }
        if last.is_some_and(|prev| prev.as_bytes() >= name.as_bytes()) {
            return Err(AttestationError::Parse {
                line,
                msg: "environment not strictly sorted by name".into(),
            });
        }
        last = Some(name);
        out.insert(name.to_string(), value.to_string());
    }
    Ok(out)
}

/// Ed25519 signing key.
#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

/// Ed25519 verifying key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PublicKey(ed25519_dalek::VerifyingKey);

impl SigningKey {
    pub fn generate() -> Self {
        SigningKey(ed25519_dalek::SigningKey::generate(&mut rand::rngs::OsRng))
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        SigningKey(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    /// Loads a key from its 32-byte seed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let seed: [u8; 32] = bytes.try_into().map_err(|_| {
            AttestationError::Key(format!("expected 32 bytes, got {}", bytes.len()))
        })?;
        Ok(Self::from_seed(seed))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.0.verifying_key())
    }
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigningKey({})", self.public_key().fingerprint())
    }
}

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw: [u8; 32] = bytes.try_into().map_err(|_| {
            AttestationError::Key(format!("expected 32 bytes, got {}", bytes.len()))
        })?;
        ed25519_dalek::VerifyingKey::from_bytes(&raw)
            .map(PublicKey)
            .map_err(|e| AttestationError::Key(e.to_string()))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    /// Lowercase hex SHA-256 of the raw public key bytes.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedAttestation {
    pub body: Vec<u8>,
    pub signature: Vec<u8>,
    pub public_key_fingerprint: String,
}

pub const SIGNATURE_MARKER: &str = "-----SIGNATURE-----\n";

impl SignedAttestation {
    /// Container encoding: body, marker line, hex signature, hex fingerprint.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body.clone();
        out.extend_from_slice(SIGNATURE_MARKER.as_bytes());
        out.extend_from_slice(hex::encode(&self.signature).as_bytes());
        out.push(b'\n');
        out.extend_from_slice(self.public_key_fingerprint.as_bytes());
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| AttestationError::SignedFormat(msg.into());
        let marker = SIGNATURE_MARKER.as_bytes();
        let at = bytes
            .windows(marker.len())
            .enumerate()
            .filter(|(i, w)| *w == marker && (*i == 0 || bytes[i - 1] == b'\n'))
            .map(|(i, _)| i)
            .next_back()
            .ok_or_else(|| bad("signature marker not found"))?;
        let body = bytes[..at].to_vec();
        let tail = std::str::from_utf8(&bytes[at + marker.len()..])
            .map_err(|_| bad("non-UTF-8 signature block"))?;
        let lines: Vec<&str> = tail.split('\n').collect();
        let [sig_hex, fingerprint, ""] = lines[..] else {
            return Err(bad("expected signature and fingerprint lines"));
        };
        if !is_lower_hex(fingerprint, 64) {
            return Err(bad("fingerprint must be 64 lowercase hex digits"));
        }
        if sig_hex.is_empty() || sig_hex.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(bad("signature must be lowercase hex"));
        }
        let signature = hex::decode(sig_hex).map_err(|_| bad("signature is not hex"))?;
        Ok(SignedAttestation {
            body,
            signature,
            public_key_fingerprint: fingerprint.to_string(),
        })
    }

    /// Parses the signed body.
    pub fn attestation(&self) -> Result<Attestation> {
        parse_buildinfo(&self.body)
    }
}

pub fn sign_attestation(att: &Attestation, key: &SigningKey) -> Result<SignedAttestation> {
    let body = serialize_buildinfo(att)?;
    let signature = key.0.sign(&body).to_bytes().to_vec();
    Ok(SignedAttestation {
        body,
        signature,
        public_key_fingerprint: key.public_key().fingerprint(),
    })
}

/// True iff `sa.signature` is a valid signature over `sa.body` under `key`.
/// Malformed signature bytes yield `false`.
pub fn verify_signature(sa: &SignedAttestation, key: &PublicKey) -> bool {
    let Ok(sig) = ed25519_dalek::Signature::from_slice(&sa.signature) else {
        return false;
    };
    key.0.verify(&sa.body, &sig).is_ok()
}
