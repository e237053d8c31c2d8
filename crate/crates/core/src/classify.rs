//! Root-cause classification of difference trees.
//!
//! Every node that carries a [`Detail`] gets exactly one finding. Rules are
//! tried in a fixed priority order and the first match wins:
//!
//! 1. [`RootCause::ArchiveMetadata`]: metadata-only differences.
//! 2. [`RootCause::Timestamp`]: differing date strings or epoch integers.
//! 3. [`RootCause::BuildPath`]: absolute paths with a shared tail.
//! 4. [`RootCause::FsOrdering`]: line permutations and member reordering.
//! 5. [`RootCause::LocaleOrTimezone`]: month or day names, zone offsets.
//! 6. [`RootCause::Randomness`]: same-length high-entropy tokens.
//! 7. [`RootCause::UninitializedMemory`]: zero-filled against non-zero bytes.
//!
//! Anything else is [`RootCause::Unknown`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use crate::compare::{ByteRange, Detail, DiffNode, Format, Hunk, LineTag, MetaField, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum RootCause {
    ArchiveMetadata,
    Timestamp,
    BuildPath,
    FsOrdering,
    LocaleOrTimezone,
    Randomness,
    UninitializedMemory,
    Unknown,
}

impl RootCause {
    pub const ALL: [RootCause; 8] = [
        RootCause::ArchiveMetadata,
        RootCause::Timestamp,
        RootCause::BuildPath,
        RootCause::FsOrdering,
        RootCause::LocaleOrTimezone,
        RootCause::Randomness,
        RootCause::UninitializedMemory,
        RootCause::Unknown,
    ];

    /// Rule number; lower fires first.
    pub fn priority(self) -> u8 {
        self as u8 + 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RootCause::ArchiveMetadata => "ArchiveMetadata",
            RootCause::Timestamp => "Timestamp",
            RootCause::BuildPath => "BuildPath",
            RootCause::FsOrdering => "FsOrdering",
            RootCause::LocaleOrTimezone => "LocaleOrTimezone",
            RootCause::Randomness => "Randomness",
            RootCause::UninitializedMemory => "UninitializedMemory",
            RootCause::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for RootCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confidence::High => "High",
            Confidence::Medium => "Medium",
            Confidence::Low => "Low",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RootCauseFinding {
    pub cause: RootCause,
    pub node_path: String,
    pub confidence: Confidence,
    pub evidence: (String, String),
}

impl fmt::Display for RootCauseFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({}) at {}: {:?} vs {:?}",
            self.cause, self.confidence, self.node_path, self.evidence.0, self.evidence.1
        )
    }
}

/// Facts about the builds that produced the compared artifacts.
#[derive(Clone, Debug, Default)]
pub struct ClassifyContext {
    /// REPRO_EPOCH values of the builds, for the epoch-integer heuristic.
    pub epochs: Vec<i64>,
}

/// Half-width of the epoch-integer window: five years of 365.25 days.
pub const EPOCH_WINDOW_SECONDS: i64 = 157_788_000;
pub const MIN_RANDOM_TOKEN: usize = 12;
pub const ENTROPY_THRESHOLD: f64 = 3.0;
/// In-place byte ranges up to this size count as garbage bytes in a record.
const SMALL_RANGE: usize = 64;

const METADATA_FIELDS: [&str; 7] = ["mtime", "uid", "gid", "uname", "gname", "mode", "name"];

pub fn classify(root: &DiffNode) -> Vec<RootCauseFinding> {
    classify_with(root, &ClassifyContext::default())
}

pub fn classify_with(root: &DiffNode, ctx: &ClassifyContext) -> Vec<RootCauseFinding> {
    let mut out: Vec<RootCauseFinding> = root
        .walk()
        .into_iter()
        .filter_map(|n| classify_node(n, ctx))
        .collect();
    out.sort_by(|a, b| a.node_path.as_bytes().cmp(b.node_path.as_bytes()));
    out
}

/// The single most telling finding: highest confidence, then rule priority,
/// then path.
pub fn primary_finding(findings: &[RootCauseFinding]) -> Option<&RootCauseFinding> {
    findings.iter().min_by(|a, b| {
        (a.confidence, a.cause.priority(), a.node_path.as_bytes()).cmp(&(
            b.confidence,
            b.cause.priority(),
            b.node_path.as_bytes(),
        ))
    })
}

fn finding(
    n: &DiffNode,
    cause: RootCause,
    confidence: Confidence,
    first: String,
    second: String,
) -> RootCauseFinding {
    RootCauseFinding {
        cause,
        node_path: n.path.clone(),
        confidence,
        evidence: (first, second),
    }
}

fn classify_node(n: &DiffNode, ctx: &ClassifyContext) -> Option<RootCauseFinding> {
    match n.status {
        Status::Same => return None,
        Status::OnlyInFirst => {
            return Some(finding(
                n,
                RootCause::Unknown,
                Confidence::Low,
                n.path.clone(),
                String::new(),
            ))
        }
        Status::OnlyInSecond => {
            return Some(finding(
                n,
                RootCause::Unknown,
                Confidence::Low,
                String::new(),
                n.path.clone(),
            ))
        }
        Status::Differs => {}
    }
    let f = match &n.detail {
        Detail::None => return None,
        Detail::MetaDiff { fields } => classify_meta(n, fields),
        Detail::TextDiff { hunks } => classify_text(n, hunks, ctx),
        Detail::ByteRanges {
            ranges,
            depth_limited,
        } => classify_bytes(n, ranges, *depth_limited),
    };
    Some(f)
}

fn meta_evidence(f: &MetaField) -> (String, String) {
    (
        format!("{}={}", f.field, f.first),
        format!("{}={}", f.field, f.second),
    )
}

fn classify_meta(n: &DiffNode, fields: &[MetaField]) -> RootCauseFinding {
    if let Some(order) = fields.iter().find(|f| f.field == "order") {
        let mut x: Vec<&str> = order.first.split(", ").collect();
        let mut y: Vec<&str> = order.second.split(", ").collect();
        x.sort_unstable();
        y.sort_unstable();
        let conf = if x == y {
            Confidence::High
        } else {
            Confidence::Medium
        };
        return finding(
            n,
            RootCause::FsOrdering,
            conf,
            order.first.clone(),
            order.second.clone(),
        );
    }
    let (first, second) = fields.first().map(meta_evidence).unwrap_or_default();
    if fields
        .iter()
        .all(|f| METADATA_FIELDS.contains(&f.field.as_str()))
    {
        let conf = if n.children.iter().all(DiffNode::is_same) {
            Confidence::High
        } else {
            Confidence::Medium
        };
        return finding(n, RootCause::ArchiveMetadata, conf, first, second);
    }
    finding(n, RootCause::Unknown, Confidence::Low, first, second)
}

// ---------------------------------------------------------------- text rules

struct Sides<'a> {
    removed: Vec<&'a str>,
    added: Vec<&'a str>,
}

impl<'a> Sides<'a> {
    fn of(hunks: &'a [Hunk]) -> Self {
        let mut s = Sides {
            removed: Vec::new(),
            added: Vec::new(),
        };
        for l in hunks.iter().flat_map(|h| &h.lines) {
            match l.tag {
                LineTag::Removed => s.removed.push(&l.text),
                LineTag::Added => s.added.push(&l.text),
                LineTag::Context => {}
            }
        }
        s
    }

    fn first_lines(&self) -> (String, String) {
        (
            self.removed
                .first()
                .map(|s| s.to_string())
                .unwrap_or_default(),
            self.added
                .first()
                .map(|s| s.to_string())
                .unwrap_or_default(),
        )
    }

    /// Matches of `re` on each side, minus those matched equally often on the
    /// other side.
    fn differing_matches(&self, re: &Regex) -> (Vec<&'a str>, Vec<&'a str>) {
        let collect = |lines: &[&'a str]| -> Vec<&'a str> {
            lines
                .iter()
                .flat_map(|l| re.find_iter(l).map(|m| m.as_str()))
                .collect()
        };
        multiset_difference(collect(&self.removed), collect(&self.added))
    }
}

fn multiset_difference<'a>(a: Vec<&'a str>, b: Vec<&'a str>) -> (Vec<&'a str>, Vec<&'a str>) {
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for x in &a {
        *counts.entry(x).or_default() += 1;
    }
    for y in &b {
        *counts.entry(y).or_default() -= 1;
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut budget = counts.clone();
    for x in a {
        let c = budget.get_mut(x).expect("counted");
        if *c > 0 {
            left.push(x);
            *c -= 1;
        }
    }
    let mut budget = counts;
    for y in b {
        let c = budget.get_mut(y).expect("counted");
        if *c < 0 {
            right.push(y);
            *c += 1;
        }
    }
    (left, right)
}

fn first_pair(l: &[&str], r: &[&str], fallback: &(String, String)) -> (String, String) {
    (
        l.first()
            .map(|s| s.to_string())
            .unwrap_or_else(|| fallback.0.clone()),
        r.first()
            .map(|s| s.to_string())
            .unwrap_or_else(|| fallback.1.clone()),
    )
}

fn date_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let mon = "(?:Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Oct|Nov|Dec)";
        let day = "(?:Mon|Tue|Wed|Thu|Fri|Sat|Sun)";
        let iso = r"\d{4}-\d{2}-\d{2}(?:[T ]\d{2}:\d{2}(?::\d{2}(?:\.\d+)?)?(?:Z|[+-]\d{2}:?\d{2})?)?";
        let rfc2822 = format!(r"(?:{day}, )?\d{{1,2}} {mon} \d{{4}} \d{{2}}:\d{{2}}(?::\d{{2}})? (?:[+-]\d{{4}}|[A-Z]{{2,4}})");
        let ctime = format!(r"{day} {mon} [ \d]\d \d{{2}}:\d{{2}}:\d{{2}} \d{{4}}");
        let macro_date = format!(r"{mon} [ \d]?\d \d{{4}}");
        Regex::new(&format!(r"\b(?:{rfc2822}|{ctime}|{iso}|{macro_date})\b")).expect("valid date regex")
    })
}

fn epoch_int_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b\d{9,10}\b").expect("valid regex"))
}

fn abs_path_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:/[A-Za-z0-9._+@~-]+)+").expect("valid regex"))
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[+-]\d{2}:?\d{2}\b|[\p{L}\p{N}]+").expect("valid regex"))
}

fn random_candidate_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z0-9+/]{12,}={0,2}").expect("valid regex"))
}

fn tz_offset_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-](?:0\d|1[0-4]):?[0-5]\d$").expect("valid regex"))
}

/// Month and weekday names, full and abbreviated, in English, French and
/// German. Compared case-insensitively.
const CALENDAR_WORDS: &[&str] = &[
    // English
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
    "jan",
    "feb",
    "mar",
    "apr",
    "jun",
    "jul",
    "aug",
    "sep",
    "sept",
    "oct",
    "nov",
    "dec",
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "mon",
    "tue",
    "wed",
    "thu",
    "fri",
    "sat",
    "sun",
    // French
    "janvier",
    "février",
    "fevrier",
    "mars",
    "avril",
    "mai",
    "juin",
    "juillet",
    "août",
    "aout",
    "septembre",
    "octobre",
    "novembre",
    "décembre",
    "decembre",
    "janv",
    "févr",
    "avr",
    "juil",
    "déc",
    "lundi",
    "mardi",
    "mercredi",
    "jeudi",
    "vendredi",
    "samedi",
    "dimanche",
    "lun",
    "mer",
    "jeu",
    "ven",
    "sam",
    "dim",
    // German
    "januar",
    "februar",
    "märz",
    "maerz",
    "juni",
    "juli",
    "oktober",
    "dezember",
    "jän",
    "mär",
    "okt",
    "dez",
    "montag",
    "dienstag",
    "mittwoch",
    "donnerstag",
    "freitag",
    "samstag",
    "sonntag",
    "mo",
    "di",
    "mi",
    "do",
    "fr",
    "sa",
    "so",
];

const TZ_ABBREVIATIONS: &[&str] = &[
    "UTC", "GMT", "Z", "WET", "WEST", "CET", "CEST", "EET", "EEST", "MSK", "IST", "PKT", "ICT",
    "WIB", "CST", "HKT", "JST", "KST", "AEST", "AEDT", "ACST", "AWST", "NZST", "NZDT", "LINT",
    "HST", "AKST", "AKDT", "PST", "PDT", "MST", "MDT", "CDT", "EST", "EDT", "AST", "ADT", "NST",
    "BRT", "ART", "CLT", "SAST", "WAT", "EAT", "CAT",
];

fn is_calendar_word(w: &str) -> bool {
    let lower = w.to_lowercase();
    CALENDAR_WORDS.contains(&lower.as_str())
}

fn is_tz_token(w: &str) -> bool {
    TZ_ABBREVIATIONS.contains(&w) || tz_offset_re().is_match(w)
}

/// Shannon entropy in bits per character.
pub fn shannon_entropy(s: &str) -> f64 {
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut n = 0usize;
    for c in s.chars() {
        *counts.entry(c).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    counts
        .values()
        .map(|&k| {
            let p = k as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TokenClass {
    Digits,
    Hex,
    Base64,
}

fn token_class(t: &str) -> Option<TokenClass> {
    let body = t.trim_end_matches('=');
    if body.is_empty() {
        return None;
    }
    if body.bytes().all(|b| b.is_ascii_digit()) && body.len() == t.len() {
        Some(TokenClass::Digits)
    } else if body.bytes().all(|b| b.is_ascii_hexdigit()) && body.len() == t.len() {
        Some(TokenClass::Hex)
    } else if body.bytes().any(|b| b.is_ascii_digit())
        && body.bytes().any(|b| b.is_ascii_alphabetic())
    {
        Some(TokenClass::Base64)
    } else {
        None
    }
}

/// Compact numeric dates such as `20200913` or `20200913122640`.
fn looks_like_date(t: &str) -> bool {
    if date_re().is_match(t) {
        return true;
    }
    if !(t.len() == 8 || t.len() == 12 || t.len() == 14) || !t.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let num = |r: std::ops::Range<usize>| t[r].parse::<u32>().unwrap_or(0);
    (1970..=2100).contains(&num(0..4))
        && (1..=12).contains(&num(4..6))
        && (1..=31).contains(&num(6..8))
}

fn is_absolute_path_at(line: &str, start: usize) -> bool {
    match line[..start].chars().next_back() {
        None => true,
        Some(c) => {
            !(c.is_alphanumeric() || c == '/' || c == '.' || c == '_' || c == '-' || c == ':')
        }
    }
}

fn abs_paths(lines: &[&str]) -> Vec<String> {
    lines
        .iter()
        .flat_map(|l| {
            abs_path_re()
                .find_iter(l)
                .filter(move |m| is_absolute_path_at(l, m.start()))
                .map(|m| m.as_str().to_string())
        })
        .collect()
}

/// Paths `p` and `q` end in the same components but start differently.
fn shares_tail_with_different_head(p: &str, q: &str) -> bool {
    let a: Vec<&str> = p.split('/').filter(|c| !c.is_empty()).collect();
    let b: Vec<&str> = q.split('/').filter(|c| !c.is_empty()).collect();
    let tail = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    tail >= 1 && tail < a.len().max(b.len()) && p != q
}

fn classify_text(n: &DiffNode, hunks: &[Hunk], ctx: &ClassifyContext) -> RootCauseFinding {
    let sides = Sides::of(hunks);
    let lines = sides.first_lines();

    // Rule 2: timestamps.
    let (dl, dr) = sides.differing_matches(date_re());
    if !dl.is_empty() || !dr.is_empty() {
        let (a, b) = first_pair(&dl, &dr, &lines);
        return finding(n, RootCause::Timestamp, Confidence::High, a, b);
    }
    if !ctx.epochs.is_empty() {
        let near = |t: &&str| {
            t.parse::<i64>()
                .map(|v| {
                    ctx.epochs
                        .iter()
                        .any(|e| (v - e).abs() <= EPOCH_WINDOW_SECONDS)
                })
                .unwrap_or(false)
        };
        let (il, ir) = sides.differing_matches(epoch_int_re());
        let il: Vec<&str> = il.into_iter().filter(near).collect();
        let ir: Vec<&str> = ir.into_iter().filter(near).collect();
        if !il.is_empty() || !ir.is_empty() {
            let (a, b) = first_pair(&il, &ir, &lines);
            return finding(n, RootCause::Timestamp, Confidence::Medium, a, b);
        }
    }

    // Rule 3: build paths.
    let (pl, pr) = (abs_paths(&sides.removed), abs_paths(&sides.added));
    let (pl, pr) = multiset_difference(
        pl.iter().map(String::as_str).collect(),
        pr.iter().map(String::as_str).collect(),
    );
    for p in &pl {
        if let Some(q) = pr.iter().find(|q| shares_tail_with_different_head(p, q)) {
            return finding(
                n,
                RootCause::BuildPath,
                Confidence::High,
                p.to_string(),
                q.to_string(),
            );
        }
    }

    // Rule 4: line permutation.
    let mut sl = sides.removed.clone();
    let mut sr = sides.added.clone();
    sl.sort_unstable();
    sr.sort_unstable();
    if !sl.is_empty() && sl == sr {
        return finding(n, RootCause::FsOrdering, Confidence::High, lines.0, lines.1);
    }

    // Rule 5: locale and time zone.
    let (wl, wr) = sides.differing_matches(word_re());
    let cal_l: Vec<&str> = wl.iter().copied().filter(|w| is_calendar_word(w)).collect();
    let cal_r: Vec<&str> = wr.iter().copied().filter(|w| is_calendar_word(w)).collect();
    if !cal_l.is_empty() && !cal_r.is_empty() {
        let (a, b) = first_pair(&cal_l, &cal_r, &lines);
        return finding(n, RootCause::LocaleOrTimezone, Confidence::High, a, b);
    }
    let tz_l: Vec<&str> = wl.iter().copied().filter(|w| is_tz_token(w)).collect();
    let tz_r: Vec<&str> = wr.iter().copied().filter(|w| is_tz_token(w)).collect();
    if !tz_l.is_empty() && !tz_r.is_empty() {
        let (a, b) = first_pair(&tz_l, &tz_r, &lines);
        return finding(n, RootCause::LocaleOrTimezone, Confidence::Medium, a, b);
    }

    // Rule 6: randomness.
    let (rl, rr) = sides.differing_matches(random_candidate_re());
    for a in &rl {
        let Some(class) = token_class(a) else {
            continue;
        };
        if looks_like_date(a) {
            continue;
        }
        let hit = rr.iter().find(|b| {
            b.len() == a.len()
                && token_class(b) == Some(class)
                && !looks_like_date(b)
                && shannon_entropy(a).max(shannon_entropy(b)) > ENTROPY_THRESHOLD
        });
        if let Some(b) = hit {
            return finding(
                n,
                RootCause::Randomness,
                Confidence::High,
                a.to_string(),
                b.to_string(),
            );
        }
    }

    finding(n, RootCause::Unknown, Confidence::Low, lines.0, lines.1)
}

fn classify_bytes(n: &DiffNode, ranges: &[ByteRange], depth_limited: bool) -> RootCauseFinding {
    let hex = |r: &ByteRange| (r.first_hex.clone(), r.second_hex.clone());
    if let Some(r) = ranges
        .iter()
        .find(|r| r.first_zero != r.second_zero && r.len_first > 0 && r.len_second > 0)
    {
        let (a, b) = hex(r);
        return finding(n, RootCause::UninitializedMemory, Confidence::Medium, a, b);
    }
    if !depth_limited
        && n.format == Format::Binary
        && !ranges.is_empty()
        && ranges
            .iter()
            .all(|r| r.len_first == r.len_second && r.len_first <= SMALL_RANGE)
    {
        let (a, b) = hex(&ranges[0]);
        return finding(n, RootCause::UninitializedMemory, Confidence::Low, a, b);
    }
    let (a, b) = ranges.first().map(hex).unwrap_or_default();
    finding(n, RootCause::Unknown, Confidence::Low, a, b)
}
