//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reprokit::attestation::{
    parse_buildinfo, serialize_buildinfo, Attestation, ChecksumEntry, DependencyPin,
};
use reprokit::compare::{unified_hunks, Comparator, Detail, Status};
use reprokit::consensus::{verdict, ConsensusTally, Decision};
use reprokit::fixtures::FixtureKind;
use reprokit::normalize::{normalize_gzip, normalize_tar, normalize_zip, NormalizePolicy};

use common::{gunzip, gzip_of, tar_contents, tar_of, zip_contents, zip_of, Meta};

const BIN: &str = env!("CARGO_BIN_EXE_reprokit");
const BLACK_BUILDINFO: &[u8] = include_bytes!("../../core/tests/data/black.buildinfo");

type Outcome = Result<String, String>;

fn reprokit(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn generate_corpus(dest: &Path) -> Result<(), String> {
    let o = reprokit(&[
        "fixtures",
        "generate",
        "--all",
        "--dest",
        dest.to_str().unwrap(),
    ]);
    if code(&o) != 0 {
        return Err(format!(
            "fixture generation failed: {}",
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(())
}

/// Runs `check` on every fixture; returns (kind, exit code, stdout).
fn check_corpus(dest: &Path) -> Vec<(FixtureKind, i32, String)> {
    FixtureKind::ALL
        .iter()
        .map(|k| {
            let o = reprokit(&["check", dest.join(k.name()).to_str().unwrap()]);
            (*k, code(&o), stdout(&o))
        })
        .collect()
}

fn criterion_1_and_2(corpus: &Path) -> (Outcome, Outcome) {
    if let Err(e) = generate_corpus(corpus) {
        return (Err(e.clone()), Err(e));
    }
    let start = Instant::now();
    let runs = check_corpus(corpus);
    let elapsed = start.elapsed();

    let wrong: Vec<String> = runs
        .iter()
        .filter(|(k, c, _)| *c != if *k == FixtureKind::Control { 0 } else { 1 })
        .map(|(k, c, _)| format!("{k} exited {c}"))
        .collect();
    let c1 = if !wrong.is_empty() {
        Err(wrong.join(", "))
    } else if elapsed >= Duration::from_secs(180) {
        Err(format!("corpus took {elapsed:?}"))
    } else {
        Ok(format!(
            "control exit 0, 8/8 defects exit 1, {:.1}s",
            elapsed.as_secs_f64()
        ))
    };

    let mut hits = 0;
    let mut misses = Vec::new();
    for (k, _, out) in &runs {
        let Some(cause) = k.designed_cause() else {
            continue;
        };
        let want = format!("primary finding: {cause} ");
        if out.contains(&want) {
            hits += 1;
        } else {
            misses.push(format!("{k}: {}", out.trim()));
        }
    }
    let c2 = if hits >= 7 {
        Ok(format!(
            "{hits}/8 primary findings match the designed cause"
        ))
    } else {
        Err(format!("{hits}/8; misses: {}", misses.join("; ")))
    };
    (c1, c2)
}

fn criterion_3(corpus: &Path) -> Outcome {
    let o = reprokit(&[
        "fixtures",
        "remediate",
        "--all",
        "--dest",
        corpus.to_str().unwrap(),
    ]);
    if code(&o) != 0 {
        return Err(format!(
            "remediation failed: {}",
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    let failing: Vec<String> = check_corpus(corpus)
        .into_iter()
        .filter(|(_, c, _)| *c != 0)
        .map(|(k, c, out)| format!("{k} exited {c}: {}", out.trim()))
        .collect();
    if failing.is_empty() {
        Ok("9/9 fixtures reproducible after remediation".into())
    } else {
        Err(failing.join("; "))
    }
}

const EPOCH: u64 = 1_600_000_000;

fn random_contents(rng: &mut ChaCha8Rng) -> BTreeMap<String, Vec<u8>> {
    let n = rng.gen_range(1..6);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(0..300);
            let dir = if rng.gen_bool(0.3) { "sub/" } else { "" };
            (
                format!("{dir}m{i}-{}.dat", rng.gen_range(0..1000)),
                (0..len).map(|_| rng.gen()).collect(),
            )
        })
        .collect()
}

fn random_members(
    rng: &mut ChaCha8Rng,
    c: &BTreeMap<String, Vec<u8>>,
) -> Vec<(String, Vec<u8>, Meta)> {
    let mut v: Vec<_> = c
        .iter()
        .map(|(n, d)| {
            let m = Meta {
                mtime: rng.gen_range(EPOCH..EPOCH + 300_000_000),
                uid: rng.gen_range(0..70_000),
                gid: rng.gen_range(0..70_000),
                mode: 0o644,
                uname: ["root", "builder", "alice", "bob"]
                    .choose(rng)
                    .unwrap()
                    .to_string(),
            };
            (n.clone(), d.clone(), m)
        })
        .collect();
    v.shuffle(rng);
    v
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = NormalizePolicy::new(EPOCH);
    let mut report = Vec::new();
    let mut ok = true;
    for format in ["tar", "gzip", "zip"] {
        let (mut conv, mut idem, mut kept) = (0, 0, 0);
        for _ in 0..200 {
            let c = random_contents(&mut rng);
            let (ma, mb) = (random_members(&mut rng, &c), random_members(&mut rng, &c));
            let (na, nb, content_ok) = match format {
                "tar" => {
                    let na = normalize_tar(&tar_of(&ma), &p).unwrap();
                    let nb = normalize_tar(&tar_of(&mb), &p).unwrap();
                    let back: BTreeMap<_, _> = tar_contents(&na).into_iter().collect();
                    let idem = normalize_tar(&na, &p).unwrap() == na;
                    (na, nb, (back == c, idem))
                }
                "zip" => {
                    let na = normalize_zip(&zip_of(&ma), &p).unwrap();
                    let nb = normalize_zip(&zip_of(&mb), &p).unwrap();
                    let back: BTreeMap<_, _> = zip_contents(&na).into_iter().collect();
                    let idem = normalize_zip(&na, &p).unwrap() == na;
                    (na, nb, (back == c, idem))
                }
                _ => {
                    let payload = c.values().next().unwrap().clone();
                    let name = |rng: &mut ChaCha8Rng| {
                        rng.gen_bool(0.5)
                            .then(|| format!("f{}", rng.gen_range(0..99)))
                    };
                    let (n1, n2) = (name(&mut rng), name(&mut rng));
                    let t1 = rng.gen_range(EPOCH as u32..u32::MAX);
                    let t2 = rng.gen_range(EPOCH as u32..u32::MAX);
                    let na = normalize_gzip(&gzip_of(&payload, t1, n1.as_deref()), &p).unwrap();
                    let nb = normalize_gzip(&gzip_of(&payload, t2, n2.as_deref()), &p).unwrap();
                    let idem = normalize_gzip(&na, &p).unwrap() == na;
                    let back = gunzip(&na) == payload;
                    (na, nb, (back, idem))
                }
            };
            conv += usize::from(na == nb);
            kept += usize::from(content_ok.0);
            idem += usize::from(content_ok.1);
        }
        ok &= conv == 200 && idem == 200 && kept == 200;
        report.push(format!(
            "{format} converge {conv}/200 idempotent {idem}/200 content {kept}/200"
        ));
    }
    if ok {
        Ok(report.join(", "))
    } else {
        Err(report.join(", "))
    }
}

fn random_word(rng: &mut ChaCha8Rng, first: &[u8], rest: &[u8], max: usize) -> String {
    let mut s = String::new();
    s.push(*first.choose(rng).unwrap() as char);
    for _ in 0..rng.gen_range(0..max) {
        s.push(*rest.choose(rng).unwrap() as char);
    }
    s
}

fn random_attestation(rng: &mut ChaCha8Rng) -> Attestation {
    const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    const PKG: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789+.-";
    const VER: &[u8] = b"0123456789abcdef.+:~-";
    const FILE: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789._+-";
    const ENV: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ_0123456789";
    const VAL: &[u8] = b"abc XYZ 019:/._=,-";
    let files: BTreeMap<String, Vec<u8>> = (0..rng.gen_range(0..6))
        .map(|_| {
            let n = random_word(rng, &FILE[..62], FILE, 16);
            let d: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
            (n, d)
        })
        .collect();
    let deps: BTreeMap<String, String> = (0..rng.gen_range(0..6))
        .map(|_| {
            (
                random_word(rng, LOWER, PKG, 12),
                random_word(rng, b"0123456789", VER, 10),
            )
        })
        .collect();
    let env: BTreeMap<String, String> = (0..rng.gen_range(0..6))
        .map(|_| {
            let v = (0..rng.gen_range(0..12))
                .map(|_| *VAL.choose(rng).unwrap() as char)
                .collect();
            (random_word(rng, &ENV[..27], ENV, 10), v)
        })
        .collect();
    Attestation {
        source: random_word(rng, LOWER, PKG, 15),
        version: random_word(rng, b"0123456789", VER, 10),
        architecture: ["all", "amd64", "arm64", "riscv64"]
            .choose(rng)
            .unwrap()
            .to_string(),
        checksums: files
            .iter()
            .map(|(n, d)| ChecksumEntry::from_bytes(n.clone(), d))
            .collect(),
        depends: deps
            .into_iter()
            .map(|(n, v)| DependencyPin::new(n, v))
            .collect(),
        environment: env,
        builder_id: random_word(rng, LOWER, b"abcdefghijklmnopqrstuvwxyz0123456789._@+-", 12),
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = 0;
    for _ in 0..1000 {
        let att = random_attestation(&mut rng);
        let Ok(bytes) = serialize_buildinfo(&att) else {
            continue;
        };
        let again = parse_buildinfo(&bytes)
            .ok()
            .and_then(|a| serialize_buildinfo(&a).ok());
        ok += usize::from(again.as_deref() == Some(bytes.as_slice()));
    }
    let golden = parse_buildinfo(BLACK_BUILDINFO).map_err(|e| format!("golden file: {e}"))?;
    let golden_ok = golden.source == "black"
        && golden.version == "20.8b1-1"
        && golden.architecture == "amd64"
        && golden.checksums.len() == 3
        && golden.checksums[0].sha1 == "9915459ae7a1a5c3efb984d7e5472f7976e996b1"
        && golden
            .depends
            .contains(&DependencyPin::new("gcc", "4:10.2.0-1"));
    match (ok, golden_ok) {
        (1000, true) => {
            Ok("1000/1000 byte-stable round trips, black .buildinfo golden fields match".into())
        }
        _ => Err(format!(
            "{ok}/1000 round trips, golden fields ok: {golden_ok}"
        )),
    }
}

fn criterion_6() -> Outcome {
    const K: &str = "1337";
    const BAD: &str = "baad";
    let decide = |votes: &[&str], local: &str| {
        let mut counts = BTreeMap::new();
        for v in votes {
            *counts.entry(v.to_string()).or_insert(0usize) += 1;
        }
        verdict(&ConsensusTally::new("a.deb", counts), local).decision
    };
    let oracle = |votes: &[&str], local: &str| {
        let n = votes.len();
        let count = |c: &str| votes.iter().filter(|v| **v == c).count();
        let w: Vec<&str> = [K, BAD]
            .into_iter()
            .filter(|c| 2 * count(c) >= n && [K, BAD].iter().all(|d| d == c || count(d) < count(c)))
            .collect();
        match w[..] {
            [x] if x == local => Decision::Trusted,
            [_] => Decision::Rejected,
            _ => Decision::Inconclusive,
        }
    };
    let (mut cases, mut agree) = (0, 0);
    let mut compromise_ok = true;
    for n in 1..=5usize {
        for mask in 0..1u32 << n {
            let votes: Vec<&str> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { BAD } else { K })
                .collect();
            for local in [K, BAD] {
                cases += 1;
                agree += usize::from(decide(&votes, local) == oracle(&votes, local));
            }
            let evil = mask.count_ones() as usize;
            if n % 2 == 1 && n >= 3 && evil <= n / 2 {
                compromise_ok &= decide(&votes, K) == Decision::Trusted
                    && decide(&votes, BAD) == Decision::Rejected;
            }
        }
    }
    if agree == cases && compromise_ok {
        Ok(format!(
            "{agree}/{cases} verdicts match the oracle, f-compromise holds for n=3,5"
        ))
    } else {
        Err(format!(
            "{agree}/{cases} match, f-compromise ok: {compromise_ok}"
        ))
    }
}

fn random_artifact(rng: &mut ChaCha8Rng) -> (String, Vec<u8>) {
    let text = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        (0..rng.gen_range(0..10))
            .map(|_| format!("line {}\n", rng.gen_range(0..20)))
            .collect::<String>()
            .into_bytes()
    };
    let files = |rng: &mut ChaCha8Rng| -> Vec<(String, Vec<u8>, Meta)> {
        (0..rng.gen_range(0..4))
            .map(|i| {
                let m = Meta {
                    mtime: rng.gen_range(EPOCH..EPOCH + 1000),
                    uid: rng.gen_range(0..3),
                    ..Meta::default()
                };
                (format!("f{i}.txt"), text(rng), m)
            })
            .collect()
    };
    match rng.gen_range(0..5) {
        0 => ("a.txt".into(), text(rng)),
        1 => (
            "a.bin".into(),
            (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect(),
        ),
        2 => ("a.tar".into(), tar_of(&files(rng))),
        3 => ("a.zip".into(), zip_of(&files(rng))),
        _ => {
            let t = tar_of(&files(rng));
            ("a.tar.gz".into(), gzip_of(&t, rng.gen(), None))
        }
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cmp = Comparator::default();
    let mut reflexive = 0;
    for _ in 0..100 {
        let (name, a) = random_artifact(&mut rng);
        reflexive += usize::from(cmp.compare(&a, &a, &name, 0).status == Status::Same);
    }
    let mut symmetric = 0;
    for _ in 0..100 {
        let (name, a) = random_artifact(&mut rng);
        let (_, b) = random_artifact(&mut rng);
        symmetric +=
            usize::from(cmp.compare(&a, &b, &name, 0).mirrored() == cmp.compare(&b, &a, &name, 0));
    }

    let inner_a = "one\ntwo\nthree\nfour\nfive\nsix\nseven\n";
    let inner_b = "one\ntwo\nTHREE\nfour\nfive\nsix\nseven\neight\n";
    let wrap = |s: &str| {
        gzip_of(
            &tar_of(&[(
                "doc/notes.txt".into(),
                s.as_bytes().to_vec(),
                Meta::default(),
            )]),
            0,
            None,
        )
    };
    let tree = cmp.compare(&wrap(inner_a), &wrap(inner_b), "src.tar.gz", 0);
    let leaf = tree
        .walk()
        .into_iter()
        .find(|n| n.children.is_empty() && !n.is_same());
    let nested_ok = match leaf {
        Some(n) => {
            n.depth() == 2
                && n.path == "src.tar.gz!src.tar!doc/notes.txt"
                && matches!(&n.detail, Detail::TextDiff { hunks } if *hunks == unified_hunks(inner_a, inner_b, 3))
        }
        None => false,
    };
    if reflexive == 100 && symmetric == 100 && nested_ok {
        Ok(
            "reflexive 100/100, symmetric 100/100, nested leaf at depth 2 matches plain diff"
                .into(),
        )
    } else {
        Err(format!(
            "reflexive {reflexive}/100, symmetric {symmetric}/100, nested ok: {nested_ok}"
        ))
    }
}

fn criterion_8(root: &Path) -> Outcome {
    let src = root.join("control");
    let o = reprokit(&[
        "fixtures",
        "generate",
        "--kind",
        "control",
        "--dest",
        src.to_str().unwrap(),
    ]);
    if code(&o) != 0 {
        return Err("could not generate control".into());
    }
    let mut runs = Vec::new();
    for i in 0..2 {
        let report = root.join(format!("report-{i}.txt"));
        let o = reprokit(&[
            "check",
            src.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ]);
        let bytes = fs::read(&report).map_err(|e| format!("report {i}: {e}"))?;
        runs.push((code(&o), stdout(&o), bytes));
    }
    if runs[0] == runs[1] && runs[0].0 == 0 {
        Ok(format!(
            "identical exit codes ({}) and {}-byte reports",
            runs[0].0,
            runs[0].2.len()
        ))
    } else {
        Err(format!(
            "exit codes {} vs {}, reports equal: {}",
            runs[0].0,
            runs[1].0,
            runs[0].2 == runs[1].2
        ))
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let corpus = root.path().join("corpus");
    let (c1, c2) = criterion_1_and_2(&corpus);
    let results: Vec<(&str, Outcome)> = vec![
        ("corpus detection", c1),
        ("classifier accuracy", c2),
        ("remediation soundness", criterion_3(&corpus)),
        ("normalizer convergence", criterion_4()),
        ("attestation round-trip", criterion_5()),
        ("consensus oracle equivalence", criterion_6()),
        ("comparator properties", criterion_7()),
        ("harness self-determinism", criterion_8(root.path())),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
