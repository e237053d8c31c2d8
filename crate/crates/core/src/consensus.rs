//! Multi-builder attestation store and the unique-majority trust rule.
//!
//! Builders register a pinned Ed25519 key, then submit signed attestations.
//! For a given artifact the store counts how many distinct builders report
//! each SHA-256; a checksum is trusted only when it holds at least half of
//! the votes and no other checksum ties it.
//!
//! On disk a store is plain files:
//!
//! ```text
//! <root>/keys/<builder_id>.pub                                   32 raw key bytes
//! <root>/att/<source>_<version>_<arch>/<builder_id>.buildinfo.signed
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::attestation::{
    valid_builder_id, verify_signature, Attestation, AttestationError, PublicKey, SignedAttestation,
};

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid builder id {0:?}")]
    BadBuilderId(String),
    #[error("builder {0} is already registered with a different key")]
    KeyConflict(String),
    #[error("builder {0} is not registered")]
    UnknownBuilder(String),
    #[error("attestation from {builder} rejected: {reason}")]
    Rejected { builder: String, reason: String },
    #[error("attestation body does not parse: {0}")]
    Body(#[source] AttestationError),
    #[error("{0:?} cannot be used as a store path component")]
    BadComponent(String),
    #[error("no attestations for {source_pkg} {version} {arch}")]
    Empty {
        source_pkg: String,
        version: String,
        arch: String,
    },
    #[error("no builder attests {artifact} for {source_pkg} {version} {arch}")]
    ArtifactNotAttested {
        source_pkg: String,
        version: String,
        arch: String,
        artifact: String,
    },
    #[error("corrupt store entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

pub type Result<T, E = ConsensusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ConsensusError + '_ {
    move |source| ConsensusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `(source, version, architecture)`. Environment is deliberately not part
/// of the identity: builders in different environments must agree.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PackageKey {
    pub source: String,
    pub version: String,
    pub arch: String,
}

impl PackageKey {
    pub fn new(
        source: impl Into<String>,
        version: impl Into<String>,
        arch: impl Into<String>,
    ) -> Self {
        PackageKey {
            source: source.into(),
            version: version.into(),
            arch: arch.into(),
        }
    }

    fn of(att: &Attestation) -> Self {
        PackageKey::new(&att.source, &att.version, &att.architecture)
    }

    fn dir_name(&self) -> Result<String> {
        for c in [&self.source, &self.version, &self.arch] {
            if c.is_empty() || c.contains('/') || c.contains('\0') || c == "." || c == ".." {
                return Err(ConsensusError::BadComponent(c.clone()));
            }
        }
        Ok(format!("{}_{}_{}", self.source, self.version, self.arch))
    }
}

impl fmt::Display for PackageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.source, self.version, self.arch)
    }
}

#[derive(Clone, Debug)]
struct Entry {
    signed: SignedAttestation,
    parsed: Attestation,
}

/// Keys and attestations, optionally mirrored to a directory.
///
/// Mutation takes `&mut self`, which gives the single-writer contract;
/// tallies borrow immutably and see a consistent snapshot.
#[derive(Clone, Debug, Default)]
pub struct AttestationStore {
    root: Option<PathBuf>,
    keys: BTreeMap<String, PublicKey>,
    entries: BTreeMap<PackageKey, BTreeMap<String, Entry>>,
}

const KEYS_DIR: &str = "keys";
const ATT_DIR: &str = "att";
const KEY_SUFFIX: &str = ".pub";
const ATT_SUFFIX: &str = ".buildinfo.signed";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("store paths have parents");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .expect("store paths have names")
            .to_string_lossy()
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io_err(dir))?;
    v.sort();
    Ok(v)
}

impl AttestationStore {
    /// An empty store that lives only in memory.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a store directory. Every key and
    /// attestation is re-verified; any mismatch is reported as corruption.
    pub fn open(root: &Path) -> Result<Self> {
        let keys_dir = root.join(KEYS_DIR);
        let att_dir = root.join(ATT_DIR);
        fs::create_dir_all(&keys_dir).map_err(io_err(&keys_dir))?;
        fs::create_dir_all(&att_dir).map_err(io_err(&att_dir))?;
        let mut store = AttestationStore {
            root: Some(root.to_path_buf()),
            ..Default::default()
        };
        let corrupt = |path: &Path, reason: String| ConsensusError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };

        for path in sorted_dir(&keys_dir)? {
            let name = path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            if name.starts_with('.') {
                continue;
            }
            let id = name
                .strip_suffix(KEY_SUFFIX)
                .filter(|id| valid_builder_id(id))
                .ok_or_else(|| corrupt(&path, "unexpected file in key registry".into()))?;
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let key = PublicKey::from_bytes(&bytes).map_err(|e| corrupt(&path, e.to_string()))?;
            store.keys.insert(id.to_string(), key);
        }

        for pkg_dir in sorted_dir(&att_dir)? {
            if !pkg_dir.is_dir() {
                return Err(corrupt(&pkg_dir, "expected a package directory".into()));
            }
            for path in sorted_dir(&pkg_dir)? {
                let name = path
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                if name.starts_with('.') {
                    continue;
                }
                let id = name.strip_suffix(ATT_SUFFIX).ok_or_else(|| {
                    corrupt(&path, "unexpected file in attestation directory".into())
                })?;
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let signed = SignedAttestation::from_bytes(&bytes)
                    .map_err(|e| corrupt(&path, e.to_string()))?;
                let entry = store
                    .check(signed)
                    .map_err(|e| corrupt(&path, e.to_string()))?;
                if entry.parsed.builder_id != id {
                    return Err(corrupt(
                        &path,
                        format!("signed by {}", entry.parsed.builder_id),
                    ));
                }
                let key = PackageKey::of(&entry.parsed);
                if pkg_dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    != Some(key.dir_name()?)
                {
                    return Err(corrupt(&path, format!("attests {key}, filed elsewhere")));
                }
                store
                    .entries
                    .entry(key)
                    .or_default()
                    .insert(id.to_string(), entry);
            }
        }
        Ok(store)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn key(&self, builder_id: &str) -> Option<&PublicKey> {
        self.keys.get(builder_id)
    }

    /// Pins `key` for `builder_id`. Re-registering the same key is a no-op;
    /// a different key is refused.
    pub fn register_builder(&mut self, builder_id: &str, key: PublicKey) -> Result<()> {
        if !valid_builder_id(builder_id) {
            return Err(ConsensusError::BadBuilderId(builder_id.to_string()));
        }
        match self.keys.get(builder_id) {
            Some(k) if *k == key => return Ok(()),
            Some(_) => return Err(ConsensusError::KeyConflict(builder_id.to_string())),
            None => {}
        }
        if let Some(root) = &self.root {
            write_atomic(
                &root
                    .join(KEYS_DIR)
                    .join(format!("{builder_id}{KEY_SUFFIX}")),
                &key.to_bytes(),
            )?;
        }
        self.keys.insert(builder_id.to_string(), key);
        Ok(())
    }

    fn check(&self, signed: SignedAttestation) -> Result<Entry> {
        let parsed = signed.attestation().map_err(ConsensusError::Body)?;
        let builder = parsed.builder_id.clone();
        let key = self
            .keys
            .get(&builder)
            .ok_or_else(|| ConsensusError::UnknownBuilder(builder.clone()))?;
        let reject = |reason: &str| ConsensusError::Rejected {
            builder: builder.clone(),
            reason: reason.into(),
        };
        if signed.public_key_fingerprint != key.fingerprint() {
            return Err(reject("key fingerprint does not match the registered key"));
        }
        if !verify_signature(&signed, key) {
            return Err(reject("bad signature"));
        }
        Ok(Entry { signed, parsed })
    }

    /// Verifies and stores an attestation, replacing any earlier one from the
    /// same builder for the same package. Returns the package it was filed
    /// under. On error the store is unchanged.
    pub fn submit(&mut self, signed: SignedAttestation) -> Result<PackageKey> {
        let entry = self.check(signed)?;
        let key = PackageKey::of(&entry.parsed);
        let dir = key.dir_name()?;
        let builder = entry.parsed.builder_id.clone();
        if let Some(root) = &self.root {
            let path = root
                .join(ATT_DIR)
                .join(dir)
                .join(format!("{builder}{ATT_SUFFIX}"));
            write_atomic(&path, &entry.signed.to_bytes())?;
        }
        self.entries
            .entry(key.clone())
            .or_default()
            .insert(builder, entry);
        Ok(key)
    }

    /// Attestations for a package, in builder-id order.
    pub fn attestations(&self, key: &PackageKey) -> Vec<&Attestation> {
        self.entries
            .get(key)
            .map(|m| m.values().map(|e| &e.parsed).collect())
            .unwrap_or_default()
    }

    pub fn signed(&self, key: &PackageKey, builder_id: &str) -> Option<&SignedAttestation> {
        self.entries.get(key)?.get(builder_id).map(|e| &e.signed)
    }

    /// Per-checksum vote counts for one artifact. Builders whose attestation
    /// does not list the artifact do not vote.
    pub fn tally(&self, key: &PackageKey, artifact: &str) -> Result<ConsensusTally> {
        let atts = self.attestations(key);
        if atts.is_empty() {
            return Err(ConsensusError::Empty {
                source_pkg: key.source.clone(),
                version: key.version.clone(),
                arch: key.arch.clone(),
            });
        }
        let mut counts = BTreeMap::new();
        for att in atts {
            if let Some(h) = att.sha256_of(artifact) {
                *counts.entry(h.to_string()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(ConsensusError::ArtifactNotAttested {
                source_pkg: key.source.clone(),
                version: key.version.clone(),
                arch: key.arch.clone(),
                artifact: artifact.to_string(),
            });
        }
        Ok(ConsensusTally::new(artifact, counts))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConsensusTally {
    pub artifact: String,
    pub counts: BTreeMap<String, usize>,
    pub total_builders: usize,
}

impl ConsensusTally {
    /// Builds a tally from nonempty counts; zero counts are dropped.
    pub fn new(artifact: impl Into<String>, mut counts: BTreeMap<String, usize>) -> Self {
        counts.retain(|_, c| *c > 0);
        assert!(!counts.is_empty(), "a tally needs at least one vote");
        let total_builders = counts.values().sum();
        ConsensusTally {
            artifact: artifact.into(),
            counts,
            total_builders,
        }
    }

    /// The checksum with the unique maximal count, if it reaches half the
    /// votes (rounded up).
    pub fn majority(&self) -> Option<(&str, usize)> {
        let max = *self.counts.values().max()?;
        let mut at_max = self.counts.iter().filter(|(_, c)| **c == max);
        let (h, _) = at_max.next()?;
        if at_max.next().is_some() || 2 * max < self.total_builders {
            return None;
        }
        Some((h.as_str(), max))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Trusted,
    Rejected,
    Inconclusive,
}

impl Decision {
    pub fn exit_code(self) -> i32 {
        match self {
            Decision::Trusted => 0,
            Decision::Rejected => 1,
            Decision::Inconclusive => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Trusted => "trusted",
            Decision::Rejected => "rejected",
            Decision::Inconclusive => "inconclusive",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub decision: Decision,
    pub majority_checksum: Option<String>,
    pub agreeing: usize,
    pub total: usize,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.majority_checksum {
            Some(m) => write!(
                f,
                "{}: {}/{} builders report {m}",
                self.decision, self.agreeing, self.total
            ),
            None => write!(
                f,
                "{}: no unique majority among {} builders",
                self.decision, self.total
            ),
        }
    }
}

/// Judges a locally obtained checksum against the tally.
pub fn verdict(t: &ConsensusTally, local_sha256: &str) -> Verdict {
    match t.majority() {
        Some((m, n)) => Verdict {
            decision: if m.eq_ignore_ascii_case(local_sha256) {
                Decision::Trusted
            } else {
                Decision::Rejected
            },
            majority_checksum: Some(m.to_string()),
            agreeing: n,
            total: t.total_builders,
        },
        None => Verdict {
            decision: Decision::Inconclusive,
            majority_checksum: None,
            agreeing: t.counts.values().copied().max().unwrap_or(0),
            total: t.total_builders,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{sign_attestation, ChecksumEntry, SigningKey};

    const K: &str = "1337";
    const K2: &str = "baad";

    fn tally(pairs: &[(&str, usize)]) -> ConsensusTally {
        ConsensusTally::new(
            "f",
            pairs.iter().map(|(h, c)| (h.to_string(), *c)).collect(),
        )
    }

    fn att(builder: &str, files: &[(&str, &[u8])]) -> Attestation {
        Attestation {
            source: "hello".into(),
            version: "1.0-1".into(),
            architecture: "amd64".into(),
            checksums: files
                .iter()
                .map(|(n, d)| ChecksumEntry::from_bytes(*n, d))
                .collect(),
            depends: vec![],
            environment: Default::default(),
            builder_id: builder.into(),
        }
    }

    fn key(n: u8) -> SigningKey {
        SigningKey::from_seed([n; 32])
    }

    fn pkg() -> PackageKey {
        PackageKey::new("hello", "1.0-1", "amd64")
    }

    #[test]
    fn verdict_examples() {
        let t = tally(&[(K, 2), (K2, 1)]);
        assert_eq!(t.total_builders, 3);
        let v = verdict(&t, K);
        assert_eq!((v.decision, v.agreeing, v.total), (Decision::Trusted, 2, 3));
        assert_eq!(verdict(&t, K2).decision, Decision::Rejected);
        assert_eq!(verdict(&t, K2).majority_checksum.as_deref(), Some(K));
        let tie = tally(&[(K, 1), (K2, 1)]);
        assert_eq!(verdict(&tie, K).decision, Decision::Inconclusive);
        assert_eq!(verdict(&tie, K2).decision, Decision::Inconclusive);
        assert_eq!(verdict(&tally(&[(K, 1)]), K).decision, Decision::Trusted);
    }

    #[test]
    fn plurality_below_half_is_inconclusive() {
        let t = tally(&[("a", 2), ("b", 1), ("c", 1), ("d", 1)]);
        assert_eq!(verdict(&t, "a").decision, Decision::Inconclusive);
        let t = tally(&[("a", 2), ("b", 1), ("c", 1)]);
        assert_eq!(verdict(&t, "a").decision, Decision::Trusted);
    }

    #[test]
    fn key_pinning() {
        let mut s = AttestationStore::in_memory();
        s.register_builder("alice", key(1).public_key()).unwrap();
        s.register_builder("alice", key(1).public_key()).unwrap();
        assert!(matches!(
            s.register_builder("alice", key(2).public_key()),
            Err(ConsensusError::KeyConflict(_))
        ));
        assert!(matches!(
            s.register_builder("../x", key(2).public_key()),
            Err(ConsensusError::BadBuilderId(_))
        ));
    }

    #[test]
    fn submit_checks_and_replaces() {
        let mut s = AttestationStore::in_memory();
        let sa = sign_attestation(&att("alice", &[("f", b"x")]), &key(1)).unwrap();
        assert!(matches!(
            s.submit(sa.clone()),
            Err(ConsensusError::UnknownBuilder(_))
        ));
        s.register_builder("alice", key(1).public_key()).unwrap();
        s.submit(sa).unwrap();
        assert_eq!(s.attestations(&pkg()).len(), 1);

        let mut tampered = sign_attestation(&att("alice", &[("f", b"y")]), &key(1)).unwrap();
        let i = tampered.body.len() - 2;
        tampered.body[i] ^= 1;
        assert!(s.submit(tampered).is_err());
        let forged = sign_attestation(&att("alice", &[("f", b"y")]), &key(2)).unwrap();
        assert!(matches!(
            s.submit(forged),
            Err(ConsensusError::Rejected { .. })
        ));
        assert_eq!(
            s.tally(&pkg(), "f").unwrap().counts.keys().next().unwrap(),
            &crate::attestation::sha256_hex(b"x")
        );

        s.submit(sign_attestation(&att("alice", &[("f", b"y")]), &key(1)).unwrap())
            .unwrap();
        assert_eq!(s.attestations(&pkg()).len(), 1);
        let t = s.tally(&pkg(), "f").unwrap();
        assert_eq!(
            t.counts.get(&crate::attestation::sha256_hex(b"y")),
            Some(&1)
        );
    }

    #[test]
    fn tally_counts_and_exclusions() {
        let mut s = AttestationStore::in_memory();
        for (i, id) in ["a", "b", "c", "d"].iter().enumerate() {
            s.register_builder(id, key(i as u8).public_key()).unwrap();
        }
        s.submit(sign_attestation(&att("a", &[("f", b"K")]), &key(0)).unwrap())
            .unwrap();
        s.submit(sign_attestation(&att("b", &[("f", b"K")]), &key(1)).unwrap())
            .unwrap();
        s.submit(sign_attestation(&att("c", &[("f", b"K'")]), &key(2)).unwrap())
            .unwrap();
        s.submit(sign_attestation(&att("d", &[("g", b"K'")]), &key(3)).unwrap())
            .unwrap();
        let t = s.tally(&pkg(), "f").unwrap();
        assert_eq!(t.total_builders, 3);
        assert_eq!(
            t.counts
                .values()
                .copied()
                .collect::<Vec<_>>()
                .iter()
                .sum::<usize>(),
            3
        );
        assert!(matches!(
            s.tally(&pkg(), "h"),
            Err(ConsensusError::ArtifactNotAttested { .. })
        ));
        assert!(matches!(
            s.tally(&PackageKey::new("x", "1", "all"), "f"),
            Err(ConsensusError::Empty { .. })
        ));
    }

    #[test]
    fn disk_store_round_trips_and_detects_corruption() {
        let d = tempfile::tempdir().unwrap();
        {
            let mut s = AttestationStore::open(d.path()).unwrap();
            s.register_builder("alice", key(1).public_key()).unwrap();
            s.submit(sign_attestation(&att("alice", &[("f", b"x")]), &key(1)).unwrap())
                .unwrap();
        }
        let s = AttestationStore::open(d.path()).unwrap();
        assert_eq!(s.attestations(&pkg()).len(), 1);
        assert_eq!(s.key("alice"), Some(&key(1).public_key()));

        let p = d
            .path()
            .join("att/hello_1.0-1_amd64/alice.buildinfo.signed");
        let mut bytes = fs::read(&p).unwrap();
        bytes[8] ^= 0x20;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            AttestationStore::open(d.path()),
            Err(ConsensusError::Corrupt { .. })
        ));
    }

    #[test]
    fn misfiled_attestation_is_corrupt() {
        let d = tempfile::tempdir().unwrap();
        let mut s = AttestationStore::open(d.path()).unwrap();
        s.register_builder("alice", key(1).public_key()).unwrap();
        s.submit(sign_attestation(&att("alice", &[("f", b"x")]), &key(1)).unwrap())
            .unwrap();
        let from = d
            .path()
            .join("att/hello_1.0-1_amd64/alice.buildinfo.signed");
        let to = d.path().join("att/hello_1.0-1_amd64/bob.buildinfo.signed");
        fs::rename(from, to).unwrap();
        assert!(matches!(
            AttestationStore::open(d.path()),
            Err(ConsensusError::Corrupt { .. })
        ));
    }
}
