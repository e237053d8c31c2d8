use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use reprokit::attestation::{
    sha256_hex, verify_signature, PublicKey, SignedAttestation, SigningKey,
};
use reprokit::classify::{classify_with, primary_finding, RootCauseFinding};
use reprokit::compare::{render_bundle, render_report, Comparator, DiffNode, ReportStyle};
use reprokit::consensus::{verdict, AttestationStore, PackageKey};
use reprokit::fixtures::{detect_kind, generate_fixture, remediate_fixture, FixtureKind};
use reprokit::normalize::{normalize_auto, NormalizePolicy};
use reprokit::runner::{attest_build, double_build, run_build, ReproVerdict};
use reprokit::varenv::{apply_profile, default_profiles, BuildRequest, VariationProfile};

const EXIT_OK: u8 = 0;
const EXIT_MISMATCH: u8 = 1;
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(
    name = "reprokit",
    version,
    about = "Verify that builds are reproducible, and explain why they are not"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Write the full report to this file.
    #[arg(long, global = true, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Profile file for the first build, layered over the built-in profile A.
    #[arg(long, global = true, value_name = "FILE")]
    profile_a: Option<PathBuf>,
    /// Profile file for the second build, layered over the built-in profile B.
    #[arg(long, global = true, value_name = "FILE")]
    profile_b: Option<PathBuf>,
    /// Keep build trees and logs under this directory.
    #[arg(long, global = true, value_name = "DIR")]
    staging: Option<PathBuf>,
    /// Colour diff lines printed to the terminal.
    #[arg(long, global = true)]
    color: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Html,
}

impl From<Format> for ReportStyle {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportStyle::Text,
            Format::Json => ReportStyle::Json,
            Format::Html => ReportStyle::Html,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a source package twice under divergent environments and compare.
    Check { source_dir: PathBuf },
    /// Recursively compare two artifacts.
    Diff {
        first: PathBuf,
        second: PathBuf,
        #[arg(long, default_value_t = reprokit::compare::DEFAULT_MAX_DEPTH)]
        max_depth: usize,
        #[arg(long, default_value_t = reprokit::compare::DEFAULT_CONTEXT)]
        context: usize,
    },
    /// Strip environment-dependent metadata from a tar, gzip or zip file.
    Normalize {
        file: PathBuf,
        /// Clamp reference; defaults to SOURCE_DATE_EPOCH, else 0.
        #[arg(long)]
        epoch: Option<u64>,
        #[arg(long)]
        keep_owners: bool,
        #[arg(long)]
        no_sort: bool,
        /// Keep the original file name in gzip headers.
        #[arg(long)]
        keep_names: bool,
        /// Output path, or `-` for stdout. Defaults to `<file>.norm`.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Create keys and signed build attestations.
    #[command(subcommand)]
    Attest(AttestCommand),
    /// Check a downloaded file against a signed attestation.
    Verify {
        file: PathBuf,
        #[arg(long)]
        attestation: PathBuf,
        /// Builder public key; when given the signature is checked too.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Artifact name in the attestation; defaults to the file's name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Multi-builder attestation store and trust verdicts.
    #[command(subcommand)]
    Consensus(ConsensusCommand),
    /// Generate or fix the defect corpus.
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Subcommand)]
enum AttestCommand {
    /// Write a new signing key to PATH and its public key to PATH.pub.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build once under profile A and sign the result.
    Build {
        source_dir: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        builder_id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StoreArg {
    #[arg(long)]
    store: PathBuf,
}

#[derive(Subcommand)]
enum ConsensusCommand {
    /// Pin a builder's public key.
    Register {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        builder_id: String,
        #[arg(long)]
        key: PathBuf,
    },
    /// Add signed attestations.
    Submit {
        #[command(flatten)]
        store: StoreArg,
        #[arg(required = true)]
        attestations: Vec<PathBuf>,
    },
    /// Judge a local checksum against the builders' majority.
    Verdict {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        source: String,
        #[arg(long)]
        version: String,
        #[arg(long)]
        arch: String,
        #[arg(long)]
        artifact: String,
        #[arg(long)]
        local_sha256: String,
    },
}

#[derive(Args)]
struct KindSelect {
    #[arg(long, conflicts_with = "all")]
    kind: Option<FixtureKind>,
    /// Every kind, each in `<dest>/<kind>`.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    dest: PathBuf,
}

#[derive(Subcommand)]
enum FixturesCommand {
    /// Write fixture source trees with their defects in place.
    Generate(KindSelect),
    /// Switch fixtures to their fixed build scripts.
    Remediate(KindSelect),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(EXIT_ERROR)
        }
    }
}

/// Joins the cause chain, skipping causes whose text an outer message
/// already includes.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    match cli.command {
        Command::Check { source_dir } => cmd_check(g, &source_dir),
        Command::Diff {
            first,
            second,
            max_depth,
            context,
        } => cmd_diff(g, &first, &second, max_depth, context),
        Command::Normalize {
            file,
            epoch,
            keep_owners,
            no_sort,
            keep_names,
            output,
        } => {
            let mut p = match epoch {
                Some(e) => NormalizePolicy::new(e),
                None => NormalizePolicy::from_env()?,
            };
            p.zero_ownership = !keep_owners;
            p.sort_members = !no_sort;
            p.strip_names = !keep_names;
            cmd_normalize(&file, &p, output)
        }
        Command::Attest(AttestCommand::Keygen { out }) => cmd_keygen(&out),
        Command::Attest(AttestCommand::Build {
            source_dir,
            key,
            builder_id,
            out,
        }) => cmd_attest_build(g, &source_dir, &key, &builder_id, &out),
        Command::Verify {
            file,
            attestation,
            key,
            name,
        } => cmd_verify(&file, &attestation, key.as_deref(), name),
        Command::Consensus(c) => cmd_consensus(g, c),
        Command::Fixtures(FixturesCommand::Generate(sel)) => {
            for (kind, dest) in selected(&sel)? {
                generate_fixture(kind, &dest)?;
                println!("generated {kind} in {}", dest.display());
            }
            Ok(EXIT_OK)
        }
        Command::Fixtures(FixturesCommand::Remediate(sel)) => {
            let targets = if sel.kind.is_none() && !sel.all {
                vec![(detect_kind(&sel.dest)?, sel.dest.clone())]
            } else {
                selected(&sel)?
            };
            for (kind, dest) in targets {
                remediate_fixture(kind, &dest)?;
                println!("remediated {kind} in {}", dest.display());
            }
            Ok(EXIT_OK)
        }
    }
}

fn selected(sel: &KindSelect) -> Result<Vec<(FixtureKind, PathBuf)>> {
    match (sel.kind, sel.all) {
        (Some(k), false) => Ok(vec![(k, sel.dest.clone())]),
        (None, true) => Ok(FixtureKind::ALL
            .iter()
            .map(|k| (*k, sel.dest.join(k.name())))
            .collect()),
        _ => bail!("pass exactly one of --kind or --all"),
    }
}

fn profiles(g: &Global) -> Result<(VariationProfile, VariationProfile)> {
    let (mut a, mut b) = default_profiles();
    if let Some(p) = &g.profile_a {
        a = VariationProfile::load(p, &a)?;
    }
    if let Some(p) = &g.profile_b {
        b = VariationProfile::load(p, &b)?;
    }
    Ok((a, b))
}

/// Where builds happen. A private temporary directory is removed afterwards
/// unless a build fails, so its log stays readable.
enum Staging {
    Temp(tempfile::TempDir),
    Kept(PathBuf),
}

impl Staging {
    fn new(g: &Global) -> Result<Self> {
        Ok(match &g.staging {
            Some(dir) => {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let t = tempfile::Builder::new().prefix("check-").tempdir_in(dir)?;
                Staging::Kept(t.keep())
            }
            None => Staging::Temp(tempfile::Builder::new().prefix("reprokit-").tempdir()?),
        })
    }

    fn path(&self) -> &Path {
        match self {
            Staging::Temp(t) => t.path(),
            Staging::Kept(p) => p,
        }
    }

    fn keep(self) {
        if let Staging::Temp(t) = self {
            let _ = t.keep();
        }
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if path == Path::new("-") {
        std::io::stdout().write_all(bytes)?;
        return Ok(());
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_check(g: &Global, source_dir: &Path) -> Result<u8> {
    let req = BuildRequest::load(source_dir)
        .with_context(|| format!("loading package in {}", source_dir.display()))?;
    let (a, b) = profiles(g)?;
    let staging = Staging::new(g)?;
    let v = double_build(&req, (&a, &b), staging.path())?;
    if let Some(failed) = [&v.first, &v.second].into_iter().find(|r| !r.succeeded()) {
        eprintln!(
            "build failed under profile {} (exit code {}); log: {}",
            failed.profile_name,
            failed.exit_code,
            failed.log_path.display()
        );
        staging.keep();
        return Ok(EXIT_ERROR);
    }

    if v.reproducible {
        let line = format!(
            "reproducible: {} artifact(s) bit-for-bit identical",
            v.first.checksums.len()
        );
        println!("{line}");
        if let Some(path) = &g.report {
            write_output(path, &identical_report(&line, &v, g.format))?;
        }
        return Ok(EXIT_OK);
    }

    let trees = v.diff_trees(&Comparator::default())?;
    let ctx = v.classify_context();
    let findings: Vec<Vec<RootCauseFinding>> =
        trees.iter().map(|t| classify_with(t, &ctx)).collect();
    let all: Vec<RootCauseFinding> = findings.iter().flatten().cloned().collect();
    let differing = v.mismatched_files.len() + v.missing_in_one.len();
    let primary = match primary_finding(&all) {
        Some(f) => format!(
            "primary finding: {} ({}) at {}",
            f.cause, f.confidence, f.node_path
        ),
        None => "no finding".to_string(),
    };
    let line = format!("unreproducible: {differing} artifact(s) differ; {primary}");
    println!("{line}");
    if let Some(path) = &g.report {
        let items: Vec<(&DiffNode, &[RootCauseFinding])> = trees
            .iter()
            .zip(&findings)
            .map(|(t, f)| (t, f.as_slice()))
            .collect();
        write_output(path, &render_bundle(&line, &items, g.format.into()))?;
    }
    Ok(EXIT_MISMATCH)
}

fn identical_report(line: &str, v: &ReproVerdict, format: Format) -> Vec<u8> {
    match format {
        Format::Text => {
            let mut s = format!("{line}\n\n");
            for c in &v.first.checksums {
                s.push_str(&format!("{}  {}\n", c.sha256, c.filename));
            }
            s.into_bytes()
        }
        Format::Json => {
            let artifacts: Vec<_> = v
                .first
                .checksums
                .iter()
                .map(|c| json!({ "filename": c.filename, "size": c.size, "sha256": c.sha256 }))
                .collect();
            let mut out =
                serde_json::to_vec_pretty(&json!({ "reproducible": true, "artifacts": artifacts }))
                    .expect("json value serializes");
            out.push(b'\n');
            out
        }
        Format::Html => {
            let mut s = format!(
                "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>reproducible</title></head><body>\n<p>{line}</p>\n<ul>\n"
            );
            for c in &v.first.checksums {
                s.push_str(&format!(
                    "<li><code>{}</code> {}</li>\n",
                    c.sha256,
                    html_escape(&c.filename)
                ));
            }
            s.push_str("</ul>\n</body></html>\n");
            s.into_bytes()
        }
    }
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn colorize(report: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(report);
    let mut out = String::with_capacity(text.len());
    for line in text.split_inclusive('\n') {
        let body = line.trim_start_matches(' ');
        let code = if body.starts_with('+') {
            Some("32")
        } else if body.starts_with('-') {
            Some("31")
        } else if body.starts_with("@@") {
            Some("36")
        } else {
            None
        };
        match code {
            Some(c) => {
                let (content, nl) = line.strip_suffix('\n').map_or((line, ""), |l| (l, "\n"));
                out.push_str(&format!("\x1b[{c}m{content}\x1b[0m{nl}"));
            }
            None => out.push_str(line),
        }
    }
    out.into_bytes()
}

fn cmd_diff(
    g: &Global,
    first: &Path,
    second: &Path,
    max_depth: usize,
    context: usize,
) -> Result<u8> {
    let a = fs::read(first).with_context(|| format!("reading {}", first.display()))?;
    let b = fs::read(second).with_context(|| format!("reading {}", second.display()))?;
    let label = first
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| first.display().to_string());
    let cmp = Comparator {
        max_depth,
        context,
        ..Comparator::default()
    };
    let tree = cmp.compare(&a, &b, &label, 0);
    let report = render_report(&tree, g.format.into());
    match &g.report {
        Some(path) => write_output(path, &report)?,
        None if g.color && matches!(g.format, Format::Text) => {
            std::io::stdout().write_all(&colorize(&report))?
        }
        None => std::io::stdout().write_all(&report)?,
    }
    Ok(if tree.is_same() {
        EXIT_OK
    } else {
        EXIT_MISMATCH
    })
}

fn cmd_normalize(file: &Path, p: &NormalizePolicy, output: Option<PathBuf>) -> Result<u8> {
    let out = normalize_auto(file, p)?;
    let dest = output.unwrap_or_else(|| {
        let mut s = file.as_os_str().to_owned();
        s.push(".norm");
        PathBuf::from(s)
    });
    write_output(&dest, &out)?;
    if dest != Path::new("-") {
        eprintln!("wrote {} ({})", dest.display(), sha256_hex(&out));
    }
    Ok(EXIT_OK)
}

fn read_signing_key(path: &Path) -> Result<SigningKey> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    SigningKey::from_bytes(&bytes).with_context(|| format!("loading key {}", path.display()))
}

fn read_public_key(path: &Path) -> Result<PublicKey> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    PublicKey::from_bytes(&bytes).with_context(|| format!("loading key {}", path.display()))
}

fn read_signed(path: &Path) -> Result<SignedAttestation> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    SignedAttestation::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_keygen(out: &Path) -> Result<u8> {
    use std::os::unix::fs::OpenOptionsExt;
    let key = SigningKey::generate();
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .mode(0o600)
        .open(out)
        .with_context(|| format!("creating {}", out.display()))?;
    f.write_all(&key.to_bytes())?;
    let mut pub_path = out.as_os_str().to_owned();
    pub_path.push(".pub");
    fs::write(&pub_path, key.public_key().to_bytes())?;
    println!("{}", key.public_key().fingerprint());
    Ok(EXIT_OK)
}

fn cmd_attest_build(
    g: &Global,
    source_dir: &Path,
    key: &Path,
    builder_id: &str,
    out: &Path,
) -> Result<u8> {
    let key = read_signing_key(key)?;
    let req = BuildRequest::load(source_dir)?;
    let (a, _) = profiles(g)?;
    let staging = Staging::new(g)?;
    let pb = apply_profile(&a, &req, staging.path())?;
    let br = run_build(&pb, &req)?;
    if !br.succeeded() {
        eprintln!(
            "build failed (exit code {}); log: {}",
            br.exit_code,
            br.log_path.display()
        );
        staging.keep();
        return Ok(EXIT_ERROR);
    }
    let sa = attest_build(&br, &req, builder_id, &key)?;
    fs::write(out, sa.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
    for c in &br.checksums {
        println!("{}  {}", c.sha256, c.filename);
    }
    Ok(EXIT_OK)
}

fn cmd_verify(
    file: &Path,
    attestation: &Path,
    key: Option<&Path>,
    name: Option<String>,
) -> Result<u8> {
    let sa = read_signed(attestation)?;
    if let Some(k) = key {
        if !verify_signature(&sa, &read_public_key(k)?) {
            println!("signature: INVALID");
            return Ok(EXIT_MISMATCH);
        }
        println!("signature: valid");
    }
    let att = sa.attestation()?;
    let name = match name {
        Some(n) => n,
        None => file
            .file_name()
            .context("file has no name")?
            .to_string_lossy()
            .into_owned(),
    };
    let Some(expected) = att.sha256_of(&name) else {
        println!("{name}: not listed in the attestation");
        return Ok(EXIT_MISMATCH);
    };
    let actual =
        sha256_hex(&fs::read(file).with_context(|| format!("reading {}", file.display()))?);
    if actual == expected {
        println!("{name}: OK ({actual})");
        Ok(EXIT_OK)
    } else {
        println!("{name}: MISMATCH (attested {expected}, got {actual})");
        Ok(EXIT_MISMATCH)
    }
}

fn cmd_consensus(g: &Global, c: ConsensusCommand) -> Result<u8> {
    match c {
        ConsensusCommand::Register {
            store,
            builder_id,
            key,
        } => {
            let mut s = AttestationStore::open(&store.store)?;
            s.register_builder(&builder_id, read_public_key(&key)?)?;
            Ok(EXIT_OK)
        }
        ConsensusCommand::Submit {
            store,
            attestations,
        } => {
            let mut s = AttestationStore::open(&store.store)?;
            for p in attestations {
                let pkg = s
                    .submit(read_signed(&p)?)
                    .with_context(|| format!("submitting {}", p.display()))?;
                println!("stored {} for {pkg}", p.display());
            }
            Ok(EXIT_OK)
        }
        ConsensusCommand::Verdict {
            store,
            source,
            version,
            arch,
            artifact,
            local_sha256,
        } => {
            let s = AttestationStore::open(&store.store)?;
            let t = s.tally(&PackageKey::new(source, version, arch), &artifact)?;
            let v = verdict(&t, &local_sha256);
            match g.format {
                Format::Json => {
                    let mut out = serde_json::to_vec_pretty(&json!({ "tally": t, "verdict": v }))?;
                    out.push(b'\n');
                    std::io::stdout().write_all(&out)?;
                }
                _ => println!("{v}"),
            }
            Ok(v.decision.exit_code() as u8)
        }
    }
}
