mod common;

use proptest::collection::vec;
use proptest::prelude::*;
use reprokit::compare::{unified_hunks, Comparator, Detail, Format, Status};
use reprokit::Exec;

use common::{gzip_of, tar_of, zip_of, Meta};

fn text() -> impl Strategy<Value = Vec<u8>> {
    vec("[a-z ]{0,12}", 0..12).prop_map(|lines| {
        lines
            .iter()
            .map(|l| format!("{l}\n"))
            .collect::<String>()
            .into_bytes()
    })
}

fn files() -> impl Strategy<Value = Vec<(String, Vec<u8>, Meta)>> {
    vec(
        (
            "[a-z]{1,6}\\.txt",
            text(),
            1_500_000_000u64..1_700_000_000,
            0u64..2000,
        ),
        0..5,
    )
    .prop_map(|v| {
        let mut seen = std::collections::BTreeSet::new();
        v.into_iter()
            .filter(|(n, ..)| seen.insert(n.clone()))
            .map(|(n, d, mtime, uid)| {
                (
                    n,
                    d,
                    Meta {
                        mtime,
                        uid,
                        ..Meta::default()
                    },
                )
            })
            .collect()
    })
}

/// Random artifacts of every supported shape, nested ones included.
fn artifact() -> impl Strategy<Value = (String, Vec<u8>)> {
    prop_oneof![
        text().prop_map(|t| ("a.txt".to_string(), t)),
        vec(any::<u8>(), 0..300).prop_map(|b| ("a.bin".to_string(), b)),
        files().prop_map(|f| ("a.tar".to_string(), tar_of(&f))),
        files().prop_map(|f| ("a.zip".to_string(), zip_of(&f))),
        (text(), any::<u32>())
            .prop_map(|(t, m)| ("a.txt.gz".to_string(), gzip_of(&t, m, Some("a.txt")))),
        (files(), any::<u32>())
            .prop_map(|(f, m)| ("a.tar.gz".to_string(), gzip_of(&tar_of(&f), m, None))),
    ]
}

fn pair() -> impl Strategy<Value = (String, Vec<u8>, Vec<u8>)> {
    prop_oneof![
        (artifact(), artifact()).prop_map(|((n, a), (_, b))| (n, a, b)),
        (files(), files(), any::<u32>()).prop_map(|(a, b, m)| (
            "p.tar.gz".to_string(),
            gzip_of(&tar_of(&a), m, None),
            gzip_of(&tar_of(&b), m, None)
        )),
        (files(), files()).prop_map(|(a, b)| ("p.zip".to_string(), zip_of(&a), zip_of(&b))),
        (text(), text()).prop_map(|(a, b)| ("p.txt".to_string(), a, b)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reflexive((name, a) in artifact()) {
        let n = Comparator::default().compare(&a, &a, &name, 0);
        prop_assert_eq!(n.status, Status::Same);
        prop_assert!(n.detail.is_none());
    }

    #[test]
    fn swap_symmetric((name, a, b) in pair()) {
        let cmp = Comparator::default();
        let ab = cmp.compare(&a, &b, &name, 0);
        let ba = cmp.compare(&b, &a, &name, 0);
        prop_assert_eq!(ab.mirrored(), ba);
        prop_assert_eq!(ab.is_same(), a == b);
        ab.check_invariants().map_err(TestCaseError::fail)?;
    }

    #[test]
    fn strategy_does_not_change_results((name, a, b) in pair()) {
        let seq = Comparator { exec: Exec::Sequential, ..Comparator::default() };
        let par = Comparator { exec: Exec::Parallel, ..Comparator::default() };
        prop_assert_eq!(seq.compare(&a, &b, &name, 0), par.compare(&a, &b, &name, 0));
    }
}

#[test]
fn nested_leaf_sits_at_depth_two_with_plain_hunks() {
    let inner_a = "alpha\nbeta\ngamma\ndelta\nepsilon\nzeta\neta\ntheta\n";
    let inner_b = "alpha\nbeta\ngamma\nDELTA\nepsilon\nzeta\neta\ntheta\niota\n";
    let wrap = |body: &str| {
        let tar = tar_of(&[
            ("README".to_string(), b"same\n".to_vec(), Meta::default()),
            (
                "inner/file.txt".to_string(),
                body.as_bytes().to_vec(),
                Meta::default(),
            ),
        ]);
        gzip_of(&tar, 1_600_000_000, Some("pkg.tar"))
    };
    let tree = Comparator::default().compare(&wrap(inner_a), &wrap(inner_b), "pkg.tar.gz", 0);
    assert_eq!(tree.status, Status::Differs);
    let leaves: Vec<_> = tree
        .walk()
        .into_iter()
        .filter(|n| n.children.is_empty() && !n.is_same())
        .collect();
    assert_eq!(leaves.len(), 1, "{tree:#?}");
    let leaf = leaves[0];
    assert_eq!(leaf.path, "pkg.tar.gz!pkg.tar!inner/file.txt");
    assert_eq!(leaf.depth(), 2);
    assert_eq!(leaf.format, Format::Text);
    let Detail::TextDiff { hunks } = &leaf.detail else {
        panic!("expected a text diff, got {:?}", leaf.detail)
    };
    assert_eq!(hunks, &unified_hunks(inner_a, inner_b, 3));
}

fn long_text() -> impl Strategy<Value = String> {
    // Mostly unique lines with a few repeated ones, long enough to take the
    // anchored path.
    vec(prop_oneof![4 => (0u32..600).prop_map(|n| format!("row {n}\n")), 1 => Just("dup\n".to_string())], 300..500)
        .prop_map(|ls| ls.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn long_diffs_apply_and_mirror(a in long_text(), b in long_text()) {
        let fwd = unified_hunks(&a, &b, 3);
        let back = unified_hunks(&b, &a, 3);
        let inverted: Vec<_> = fwd.iter().map(|h| h.inverted()).collect();
        prop_assert_eq!(back, inverted);
        let removed = fwd.iter().flat_map(|h| &h.lines).filter(|l| l.tag == reprokit::compare::LineTag::Removed).count();
        let added = fwd.iter().flat_map(|h| &h.lines).filter(|l| l.tag == reprokit::compare::LineTag::Added).count();
        let (na, nb) = (a.lines().count(), b.lines().count());
        prop_assert_eq!(na - removed, nb - added);
    }
}
