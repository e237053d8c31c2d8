use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use reprokit::attestation::{sha256_hex, verify_signature, SigningKey};
use reprokit::fixtures::{generate_fixture, FixtureKind};
use reprokit::runner::{attest_build, double_build};
use reprokit::varenv::{apply_profile_at, default_profiles, ordered_entries, FsOrdering};

fn content_set(root: &Path) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert((rel, sha256_hex(&fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn profiles_copy_identical_contents() {
    let d = tempfile::tempdir().unwrap();
    let req = generate_fixture(FixtureKind::FsOrdering, &d.path().join("src")).unwrap();
    let (a, b) = default_profiles();
    let pa = apply_profile_at(&a, &req, &d.path().join("stage"), 1_700_000_000).unwrap();
    let pb = apply_profile_at(&b, &req, &d.path().join("stage"), 1_700_000_000).unwrap();
    assert_ne!(pa.workdir, pb.workdir);
    let want = content_set(&req.source_dir);
    assert_eq!(content_set(&pa.workdir), want);
    assert_eq!(content_set(&pb.workdir), want);
    assert_ne!(pa.creation_order, pb.creation_order);
    assert_eq!(
        pa.env["REPRO_EPOCH"].parse::<i64>().unwrap() + b.clock_skew_seconds,
        pb.env["REPRO_EPOCH"].parse::<i64>().unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ordered_entries_is_a_permutation(
        names in proptest::collection::btree_set("[a-zA-Z0-9_.-]{1,10}", 0..12),
        seed in any::<u64>(),
    ) {
        let names: BTreeSet<String> = names.into_iter().filter(|n| n != "." && n != "..").collect();
        let d = tempfile::tempdir().unwrap();
        for n in &names {
            fs::write(d.path().join(n), b"").unwrap();
        }
        for ord in [FsOrdering::Forward, FsOrdering::Reverse, FsOrdering::Shuffled(seed)] {
            let got = ordered_entries(d.path(), ord).unwrap();
            prop_assert_eq!(got.iter().cloned().collect::<BTreeSet<_>>(), names.clone());
            prop_assert_eq!(got.len(), names.len());
            if ord == FsOrdering::Forward {
                prop_assert_eq!(got, names.iter().cloned().collect::<Vec<_>>());
            }
        }
    }
}

#[test]
fn control_harness_is_deterministic_and_verifiable() {
    let d = tempfile::tempdir().unwrap();
    let req = generate_fixture(FixtureKind::Control, &d.path().join("src")).unwrap();
    let (a, b) = default_profiles();
    let v1 = double_build(&req, (&a, &b), &d.path().join("s1")).unwrap();
    let v2 = double_build(&req, (&a, &b), &d.path().join("s2")).unwrap();
    assert!(v1.reproducible && v2.reproducible);
    let sums = [&v1.first, &v1.second, &v2.first, &v2.second].map(|r| r.checksums.clone());
    assert!(sums.iter().all(|s| *s == sums[0]));

    let key = SigningKey::from_seed([7; 32]);
    let sa = attest_build(&v1.first, &req, "alice", &key).unwrap();
    assert!(verify_signature(&sa, &key.public_key()));
    let att = sa.attestation().unwrap();
    let artifact = v1.first.artifacts.as_ref().unwrap().join("hello.txt");
    let mut bytes = fs::read(&artifact).unwrap();
    assert_eq!(
        att.sha256_of("hello.txt"),
        Some(sha256_hex(&bytes).as_str())
    );
    bytes[0] ^= 1;
    assert_ne!(
        att.sha256_of("hello.txt"),
        Some(sha256_hex(&bytes).as_str())
    );
}
