//! Text, JSON and HTML renderings of a [`DiffNode`] tree.

use std::fmt::{self, Write as _};

use serde::Serialize;

use super::{Detail, DiffNode, Hunk, LineTag, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportStyle {
    Text,
    Json,
    Html,
}

pub const IDENTICAL: &str = "artifacts are identical\n";

/// Renders a comparison tree alone.
pub fn render_report(root: &DiffNode, style: ReportStyle) -> Vec<u8> {
    render_report_with::<NoFindings>(root, None, style)
}

/// Renders a comparison tree followed by findings. In JSON the findings sit
/// under a `findings` key next to the root node's own fields.
pub fn render_report_with<F: Serialize + fmt::Display>(
    root: &DiffNode,
    findings: Option<&[F]>,
    style: ReportStyle,
) -> Vec<u8> {
    match style {
        ReportStyle::Text => text(root, findings).into_bytes(),
        ReportStyle::Json => json(root, findings),
        ReportStyle::Html => html(root, findings).into_bytes(),
    }
}

#[derive(Serialize)]
enum NoFindings {}

impl fmt::Display for NoFindings {
    fn fmt(&self, _: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {}
    }
}

fn status_word(s: Status) -> &'static str {
    match s {
        Status::Same => "same",
        Status::Differs => "differs",
        Status::OnlyInFirst => "only in first",
        Status::OnlyInSecond => "only in second",
    }
}

fn push_hunk_text(out: &mut String, indent: &str, h: &Hunk) {
    let _ = writeln!(out, "{indent}{}", h.header());
    for l in &h.lines {
        let tag = match l.tag {
            LineTag::Context => ' ',
            LineTag::Removed => '-',
            LineTag::Added => '+',
        };
        let _ = writeln!(out, "{indent}{tag}{}", l.text);
        if l.no_newline {
            let _ = writeln!(out, "{indent}\\ No newline at end of file");
        }
    }
}

fn text_node(out: &mut String, n: &DiffNode, level: usize) {
    if n.is_same() {
        return;
    }
    let indent = "  ".repeat(level);
    let _ = writeln!(
        out,
        "{indent}{} [{}] {}",
        n.path,
        n.format.as_str(),
        status_word(n.status)
    );
    let inner = format!("{indent}    ");
    match &n.detail {
        Detail::None => {}
        Detail::TextDiff { hunks } => {
            for h in hunks {
                push_hunk_text(out, &inner, h);
            }
        }
        Detail::ByteRanges {
            ranges,
            depth_limited,
        } => {
            if *depth_limited {
                let _ = writeln!(out, "{inner}depth-limited: not unpacked further");
            }
            for r in ranges {
                let _ = writeln!(
                    out,
                    "{inner}@ 0x{:08x} {} vs {} bytes: {} | {}",
                    r.offset, r.len_first, r.len_second, r.first_hex, r.second_hex
                );
            }
        }
        Detail::MetaDiff { fields } => {
            for f in fields {
                let _ = writeln!(out, "{inner}{}: {} -> {}", f.field, f.first, f.second);
            }
        }
    }
    for c in &n.children {
        text_node(out, c, level + 1);
    }
}

fn text<F: fmt::Display>(root: &DiffNode, findings: Option<&[F]>) -> String {
    let mut out = String::new();
    if root.is_same() {
        out.push_str(IDENTICAL);
    } else {
        text_node(&mut out, root, 0);
    }
    if let Some(fs) = findings.filter(|f| !f.is_empty()) {
        out.push_str("\nfindings:\n");
        for f in fs {
            let _ = writeln!(out, "  {f}");
        }
    }
    out
}

#[derive(Serialize)]
struct WithFindings<'a, F> {
    #[serde(flatten)]
    root: &'a DiffNode,
    findings: &'a [F],
}

fn json<F: Serialize>(root: &DiffNode, findings: Option<&[F]>) -> Vec<u8> {
    let mut out = match findings {
        Some(findings) => serde_json::to_vec_pretty(&WithFindings { root, findings }),
        None => serde_json::to_vec_pretty(root),
    }
    .expect("report serialization cannot fail");
    out.push(b'\n');
    out
}

pub(crate) fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;margin:1em}\
.node{margin-left:1.5em;border-left:1px solid #ccc;padding-left:.5em}\
.path{font-family:monospace;font-weight:bold}\
table.diff{border-collapse:collapse;font-family:monospace;width:100%;margin:.3em 0}\
table.diff td{padding:0 .4em;white-space:pre-wrap;vertical-align:top;width:50%}\
td.del{background:#fdd}td.add{background:#dfd}td.hdr{background:#eef;color:#446}\
td.empty{background:#f4f4f4}\
table.meta td,table.meta th{border:1px solid #ccc;padding:0 .4em;font-family:monospace}";

type Row<'a> = (Option<&'a str>, Option<&'a str>, &'static str);

fn flush_run<'a>(rows: &mut Vec<Row<'a>>, dels: &mut Vec<&'a str>, adds: &mut Vec<&'a str>) {
    let n = dels.len().max(adds.len());
    for i in 0..n {
        rows.push((dels.get(i).copied(), adds.get(i).copied(), "change"));
    }
    dels.clear();
    adds.clear();
}

/// Pairs removed and added runs row by row for a side-by-side table.
fn side_by_side(h: &Hunk) -> Vec<Row<'_>> {
    let mut rows = Vec::new();
    let mut dels = Vec::new();
    let mut adds = Vec::new();
    for l in &h.lines {
        match l.tag {
            LineTag::Context => {
                flush_run(&mut rows, &mut dels, &mut adds);
                rows.push((Some(l.text.as_str()), Some(l.text.as_str()), "context"));
            }
            LineTag::Removed => dels.push(l.text.as_str()),
            LineTag::Added => adds.push(l.text.as_str()),
        }
    }
    flush_run(&mut rows, &mut dels, &mut adds);
    rows
}

fn html_cell(out: &mut String, text: Option<&str>, class: &str) {
    match text {
        Some(t) => {
            let _ = write!(out, "<td class=\"{class}\">{}</td>", escape_html(t));
        }
        None => out.push_str("<td class=\"empty\"></td>"),
    }
}

fn html_node(out: &mut String, n: &DiffNode) {
    if n.is_same() {
        return;
    }
    let _ = writeln!(
        out,
        "<div class=\"node\"><p><span class=\"path\">{}</span> [{}] {}</p>",
        escape_html(&n.path),
        n.format.as_str(),
        status_word(n.status)
    );
    match &n.detail {
        Detail::None => {}
        Detail::TextDiff { hunks } => {
            out.push_str("<table class=\"diff\">\n");
            for h in hunks {
                let _ = writeln!(
                    out,
                    "<tr><td class=\"hdr\" colspan=\"2\">{}</td></tr>",
                    escape_html(&h.header())
                );
                for (l, r, kind) in side_by_side(h) {
                    out.push_str("<tr>");
                    if kind == "context" {
                        html_cell(out, l, "ctx");
                        html_cell(out, r, "ctx");
                    } else {
                        html_cell(out, l, "del");
                        html_cell(out, r, "add");
                    }
                    out.push_str("</tr>\n");
                }
            }
            out.push_str("</table>\n");
        }
        Detail::ByteRanges {
            ranges,
            depth_limited,
        } => {
            if *depth_limited {
                out.push_str("<p>depth-limited: not unpacked further</p>\n");
            }
            out.push_str("<table class=\"diff\">\n");
            for r in ranges {
                let _ = write!(
                    out,
                    "<tr><td class=\"hdr\" colspan=\"2\">offset 0x{:08x}: {} vs {} bytes</td></tr>\n\
                     <tr><td class=\"del\">{}</td><td class=\"add\">{}</td></tr>\n",
                    r.offset, r.len_first, r.len_second, r.first_hex, r.second_hex
                );
            }
            out.push_str("</table>\n");
        }
        Detail::MetaDiff { fields } => {
            out.push_str(
                "<table class=\"meta\"><tr><th>field</th><th>first</th><th>second</th></tr>\n",
            );
            for f in fields {
                let _ = writeln!(
                    out,
                    "<tr><td>{}</td><td>{}</td><td>{}</td></tr>",
                    escape_html(&f.field),
                    escape_html(&f.first),
                    escape_html(&f.second)
                );
            }
            out.push_str("</table>\n");
        }
    }
    for c in &n.children {
        html_node(out, c);
    }
    out.push_str("</div>\n");
}

fn html_head(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title><style>{STYLE}</style></head><body>\n",
        escape_html(title)
    );
}

fn html_tree<F: fmt::Display>(out: &mut String, root: &DiffNode, findings: Option<&[F]>) {
    if root.is_same() {
        out.push_str("<p>artifacts are identical</p>\n");
    } else {
        html_node(out, root);
    }
    if let Some(fs) = findings.filter(|f| !f.is_empty()) {
        out.push_str("<h2>findings</h2>\n<ul>\n");
        for f in fs {
            let _ = writeln!(out, "<li><code>{}</code></li>", escape_html(&f.to_string()));
        }
        out.push_str("</ul>\n");
    }
}

fn html<F: fmt::Display>(root: &DiffNode, findings: Option<&[F]>) -> String {
    let mut out = String::new();
    html_head(&mut out, &root.path);
    html_tree(&mut out, root, findings);
    out.push_str("</body></html>\n");
    out
}

/// Several trees, each with its own findings, under one heading. Used for
/// multi-artifact build comparisons.
pub fn render_bundle<F: Serialize + fmt::Display>(
    title: &str,
    items: &[(&DiffNode, &[F])],
    style: ReportStyle,
) -> Vec<u8> {
    match style {
        ReportStyle::Text => {
            let mut out = format!("{title}\n");
            for (root, fs) in items {
                out.push('\n');
                out.push_str(&text(root, Some(fs)));
            }
            out.into_bytes()
        }
        ReportStyle::Json => {
            #[derive(Serialize)]
            struct Bundle<'a, F> {
                title: &'a str,
                artifacts: Vec<WithFindings<'a, F>>,
            }
            let b = Bundle {
                title,
                artifacts: items
                    .iter()
                    .map(|(root, findings)| WithFindings { root, findings })
                    .collect(),
            };
            let mut out = serde_json::to_vec_pretty(&b).expect("report serializes");
            out.push(b'\n');
            out
        }
        ReportStyle::Html => {
            let mut out = String::new();
            html_head(&mut out, title);
            let _ = writeln!(out, "<h1>{}</h1>", escape_html(title));
            for (root, fs) in items {
                html_tree(&mut out, root, Some(fs));
            }
            out.push_str("</body></html>\n");
            out.into_bytes()
        }
    }
}
