//! Line diff producing unified hunks.
//!
//! An LCS alignment is computed by dynamic programming over the region left
//! after trimming the common prefix and suffix. Large regions are first cut
//! at lines that occur once on each side, and only the gaps go through the
//! DP. Ties between equally long
//! alignments are broken by comparing the competing lines themselves rather
//! than by favouring one side, so diffing `(b, a)` yields exactly the mirror
//! image of diffing `(a, b)`.

use std::collections::HashMap;

use serde::Serialize;

/// DP cells above which a region is reported as one replacement.
const MAX_CELLS: usize = 16 << 20;
/// Middle regions larger than this are first split at unique common lines.
const ANCHOR_CELLS: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LineTag {
    #[serde(rename = " ")]
    Context,
    #[serde(rename = "-")]
    Removed,
    #[serde(rename = "+")]
    Added,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HunkLine {
    pub tag: LineTag,
    pub text: String,
    /// The line was the last one of its file and had no terminating newline.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub no_newline: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<HunkLine>,
}

impl Hunk {
    pub fn header(&self) -> String {
        format!(
            "@@ -{},{} +{},{} @@",
            self.old_start, self.old_len, self.new_start, self.new_len
        )
    }

    /// The same hunk seen from the other side.
    pub fn inverted(&self) -> Hunk {
        let mut lines = Vec::with_capacity(self.lines.len());
        let mut run: (Vec<HunkLine>, Vec<HunkLine>) = (Vec::new(), Vec::new());
        let flush = |lines: &mut Vec<HunkLine>, run: &mut (Vec<HunkLine>, Vec<HunkLine>)| {
            lines.append(&mut run.0);
            lines.append(&mut run.1);
        };
        for l in &self.lines {
            match l.tag {
                LineTag::Context => {
                    flush(&mut lines, &mut run);
                    lines.push(l.clone());
                }
                LineTag::Added => run.0.push(HunkLine {
                    tag: LineTag::Removed,
                    ..l.clone()
                }),
                LineTag::Removed => run.1.push(HunkLine {
                    tag: LineTag::Added,
                    ..l.clone()
                }),
            }
        }
        flush(&mut lines, &mut run);
        Hunk {
            old_start: self.new_start,
            old_len: self.new_len,
            new_start: self.old_start,
            new_len: self.old_len,
            lines,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Equal(usize, usize),
    Delete(usize),
    Insert(usize),
}

fn align(a: &[&str], b: &[&str]) -> Vec<Op> {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let suffix = a[prefix..]
        .iter()
        .rev()
        .zip(b[prefix..].iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    let (ma, mb) = (&a[prefix..a.len() - suffix], &b[prefix..b.len() - suffix]);
    let mut ops: Vec<Op> = (0..prefix).map(|i| Op::Equal(i, i)).collect();

    if ma.len().saturating_mul(mb.len()) > ANCHOR_CELLS {
        let (mut pa, mut pb) = (0, 0);
        for (i, j) in anchors(ma, mb) {
            lcs(&ma[pa..i], &mb[pb..j], prefix + pa, prefix + pb, &mut ops);
            ops.push(Op::Equal(prefix + i, prefix + j));
            (pa, pb) = (i + 1, j + 1);
        }
        lcs(&ma[pa..], &mb[pb..], prefix + pa, prefix + pb, &mut ops);
    } else {
        lcs(ma, mb, prefix, prefix, &mut ops);
    }
    let (ta, tb) = (a.len() - suffix, b.len() - suffix);
    ops.extend((0..suffix).map(|k| Op::Equal(ta + k, tb + k)));
    ops
}

/// Lines occurring exactly once on each side whose pairing crosses no other
/// such pairing. The set is the same whichever side comes first.
fn anchors(a: &[&str], b: &[&str]) -> Vec<(usize, usize)> {
    let mut seen: HashMap<&str, (u32, u32, usize, usize)> = HashMap::new();
    for (i, l) in a.iter().enumerate() {
        let e = seen.entry(l).or_default();
        e.0 += 1;
        e.2 = i;
    }
    for (j, l) in b.iter().enumerate() {
        let e = seen.entry(l).or_default();
        e.1 += 1;
        e.3 = j;
    }
    let mut pairs: Vec<(usize, usize)> = seen
        .into_values()
        .filter(|c| c.0 == 1 && c.1 == 1)
        .map(|c| (c.2, c.3))
        .collect();
    pairs.sort_unstable();
    let mut suffix_min = vec![usize::MAX; pairs.len() + 1];
    for k in (0..pairs.len()).rev() {
        suffix_min[k] = suffix_min[k + 1].min(pairs[k].1);
    }
    let mut max_before = None;
    let mut out = Vec::new();
    for (k, &(i, j)) in pairs.iter().enumerate() {
        if max_before.is_none_or(|m| j > m) && j < suffix_min[k + 1] {
            out.push((i, j));
        }
        max_before = max_before.max(Some(j));
    }
    out
}

fn lcs(ma: &[&str], mb: &[&str], off_a: usize, off_b: usize, ops: &mut Vec<Op>) {
    let (n, m) = (ma.len(), mb.len());
    if n.saturating_mul(m) > MAX_CELLS {
        ops.extend((0..n).map(|i| Op::Delete(off_a + i)));
        ops.extend((0..m).map(|j| Op::Insert(off_b + j)));
        return;
    }
    let w = m + 1;
    let mut table = vec![0u32; (n + 1) * w];
    for i in 1..=n {
        for j in 1..=m {
            table[i * w + j] = if ma[i - 1] == mb[j - 1] {
                table[(i - 1) * w + j - 1] + 1
            } else {
                table[(i - 1) * w + j].max(table[i * w + j - 1])
            };
        }
    }
    let mut rev = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && ma[i - 1] == mb[j - 1] {
            rev.push(Op::Equal(off_a + i - 1, off_b + j - 1));
            i -= 1;
            j -= 1;
        } else if j == 0 {
            rev.push(Op::Delete(off_a + i - 1));
            i -= 1;
        } else if i == 0 {
            rev.push(Op::Insert(off_b + j - 1));
            j -= 1;
        } else {
            let up = table[(i - 1) * w + j];
            let left = table[i * w + j - 1];
            // On a tie drop the bytewise-greater line; this is the same
            // decision whichever side is called "first".
            let delete = up > left || (up == left && ma[i - 1] > mb[j - 1]);
            if delete {
                rev.push(Op::Delete(off_a + i - 1));
                i -= 1;
            } else {
                rev.push(Op::Insert(off_b + j - 1));
                j -= 1;
            }
        }
    }
    ops.extend(rev.into_iter().rev());
}

fn split_lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

fn hunk_line(tag: LineTag, raw: &str) -> HunkLine {
    match raw.strip_suffix('\n') {
        Some(t) => HunkLine {
            tag,
            text: t.to_string(),
            no_newline: false,
        },
        None => HunkLine {
            tag,
            text: raw.to_string(),
            no_newline: true,
        },
    }
}

/// Unified-diff hunks turning `a` into `b`, with `context` lines of context.
pub fn unified_hunks(a: &str, b: &str, context: usize) -> Vec<Hunk> {
    let (la, lb) = (split_lines(a), split_lines(b));
    let ops = align(&la, &lb);
    let changes: Vec<usize> = ops
        .iter()
        .enumerate()
        .filter(|(_, op)| !matches!(op, Op::Equal(..)))
        .map(|(k, _)| k)
        .collect();
    if changes.is_empty() {
        return Vec::new();
    }

    let mut groups: Vec<(usize, usize)> = Vec::new();
    for &k in &changes {
        match groups.last_mut() {
            Some((_, end)) if k - *end <= 2 * context + 1 => *end = k,
            _ => groups.push((k, k)),
        }
    }

    // Line positions before each op: (old lines consumed, new lines consumed).
    let mut before = Vec::with_capacity(ops.len() + 1);
    let (mut oi, mut ni) = (0usize, 0usize);
    for op in &ops {
        before.push((oi, ni));
        match op {
            Op::Equal(..) => {
                oi += 1;
                ni += 1;
            }
            Op::Delete(_) => oi += 1,
            Op::Insert(_) => ni += 1,
        }
    }
    before.push((oi, ni));

    groups
        .into_iter()
        .map(|(first, last)| {
            let start = first.saturating_sub(context);
            let end = (last + 1 + context).min(ops.len());
            let mut lines = Vec::new();
            let mut run: (Vec<HunkLine>, Vec<HunkLine>) = (Vec::new(), Vec::new());
            for op in &ops[start..end] {
                match *op {
                    Op::Equal(i, _) => {
                        lines.append(&mut run.0);
                        lines.append(&mut run.1);
                        lines.push(hunk_line(LineTag::Context, la[i]));
                    }
                    Op::Delete(i) => run.0.push(hunk_line(LineTag::Removed, la[i])),
                    Op::Insert(j) => run.1.push(hunk_line(LineTag::Added, lb[j])),
                }
            }
            lines.append(&mut run.0);
            lines.append(&mut run.1);
            let (o0, n0) = before[start];
            let (o1, n1) = before[end];
            let (old_len, new_len) = (o1 - o0, n1 - n0);
            Hunk {
                old_start: if old_len == 0 { o0 } else { o0 + 1 },
                old_len,
                new_start: if new_len == 0 { n0 } else { n0 + 1 },
                new_len,
                lines,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Applies hunks to `a`, independently of how they were computed.
    fn apply(a: &str, hunks: &[Hunk]) -> String {
        let lines: Vec<&str> = a.split_inclusive('\n').collect();
        let mut out = String::new();
        let mut next = 0usize;
        for h in hunks {
            let start = if h.old_len == 0 {
                h.old_start
            } else {
                h.old_start - 1
            };
            for l in &lines[next..start] {
                out.push_str(l);
            }
            next = start;
            for l in &h.lines {
                let text = if l.no_newline {
                    l.text.clone()
                } else {
                    format!("{}\n", l.text)
                };
                match l.tag {
                    LineTag::Context => {
                        assert_eq!(lines[next], text);
                        out.push_str(&text);
                        next += 1;
                    }
                    LineTag::Removed => {
                        assert_eq!(lines[next], text);
                        next += 1;
                    }
                    LineTag::Added => out.push_str(&text),
                }
            }
        }
        for l in &lines[next..] {
            out.push_str(l);
        }
        out
    }

    #[test]
    fn simple_replacement() {
        let h = unified_hunks("a\nb\nc\n", "a\nB\nc\n", 3);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].header(), "@@ -1,3 +1,3 @@");
        let tags: Vec<_> = h[0]
            .lines
            .iter()
            .map(|l| (l.tag, l.text.as_str()))
            .collect();
        assert_eq!(
            tags,
            vec![
                (LineTag::Context, "a"),
                (LineTag::Removed, "b"),
                (LineTag::Added, "B"),
                (LineTag::Context, "c")
            ]
        );
    }

    #[test]
    fn distant_changes_split_into_hunks() {
        let a: String = (0..30).map(|i| format!("line {i}\n")).collect();
        let b = a
            .replace("line 2\n", "line two\n")
            .replace("line 25\n", "line twenty-five\n");
        let h = unified_hunks(&a, &b, 3);
        assert_eq!(h.len(), 2);
        assert_eq!(apply(&a, &h), b);
    }

    #[test]
    fn insertion_into_empty() {
        let h = unified_hunks("", "x\ny", 3);
        assert_eq!(h[0].header(), "@@ -0,0 +1,2 @@");
        assert!(h[0].lines[1].no_newline);
        assert_eq!(apply("", &h), "x\ny");
    }

    #[test]
    fn swap_gives_inverted_hunks() {
        let a = "x\ny\nz\nq\n";
        let b = "y\nx\nq\nz\n";
        let fwd = unified_hunks(a, b, 3);
        let back = unified_hunks(b, a, 3);
        let inverted: Vec<Hunk> = fwd.iter().map(Hunk::inverted).collect();
        assert_eq!(back, inverted);
        assert_eq!(apply(a, &fwd), b);
    }

    #[test]
    fn identical_texts_have_no_hunks() {
        assert!(unified_hunks("same\n", "same\n", 3).is_empty());
    }

    #[test]
    fn anchors_skip_crossing_pairs() {
        let a = ["u", "v", "d", "w", "x", "d"];
        let b = ["u", "x", "w", "v", "d"];
        assert_eq!(anchors(&a, &b), vec![(0, 0)]);
        let mirrored: Vec<_> = anchors(&b, &a).into_iter().map(|(j, i)| (i, j)).collect();
        assert_eq!(mirrored, anchors(&a, &b));
    }

    #[test]
    fn large_inputs_are_anchored_and_symmetric() {
        let a: String = (0..2000)
            .map(|i| {
                if i % 97 == 0 {
                    "dup\n".to_string()
                } else {
                    format!("row {i}\n")
                }
            })
            .collect();
        let b = a
            .replace("row 5\n", "row five\n")
            .replace("row 1999\n", "")
            .replace("row 1000\n", "dup\n");
        let fwd = unified_hunks(&a, &b, 3);
        assert_eq!(fwd.len(), 3);
        assert_eq!(apply(&a, &fwd), b);
        let inverted: Vec<Hunk> = fwd.iter().map(Hunk::inverted).collect();
        assert_eq!(unified_hunks(&b, &a, 3), inverted);
    }
}
