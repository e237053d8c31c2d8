//! The adversarial double build.
//!
//! [`double_build`] stages the source under profile A, runs it, moves the
//! finished workdir aside, then does the same under profile B. Artifacts are
//! compared file by file on SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::attestation::{
    self, sign_attestation, Attestation, AttestationError, ChecksumEntry, DependencyPin,
    SignedAttestation, SigningKey,
};
use crate::classify::ClassifyContext;
use crate::compare::{Comparator, Detail, DiffNode, Format, Status};
use crate::varenv::{
    apply_profile_at, now_epoch, BuildRequest, PreparedBuild, VarenvError, VariationProfile,
};
use crate::Exec;

/// Exit code reported for a build killed at its deadline.
pub const TIMEOUT_EXIT_CODE: i32 = 124;

const POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Setup(#[from] VarenvError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("build entry point missing: {0}")]
    MissingEntry(PathBuf),
    #[error(transparent)]
    Artifacts(#[from] AttestationError),
    #[error("cannot attest a failed build (profile {profile}, exit code {code})")]
    FailedBuild { profile: String, code: i32 },
}

type Result<T> = std::result::Result<T, RunnerError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildResult {
    pub profile_name: String,
    pub exit_code: i32,
    /// The artifact directory; present exactly when the build exited 0.
    pub artifacts: Option<PathBuf>,
    pub checksums: Vec<ChecksumEntry>,
    pub duration_ms: u64,
    /// Combined stdout and stderr.
    pub log: Vec<u8>,
    pub log_path: PathBuf,
    /// The complete environment the build ran with.
    pub env: BTreeMap<String, String>,
}

impl BuildResult {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0
    }

    fn repro_epoch(&self) -> Option<i64> {
        self.env.get("REPRO_EPOCH").and_then(|v| v.parse().ok())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReproVerdict {
    pub reproducible: bool,
    pub first: BuildResult,
    pub second: BuildResult,
    pub mismatched_files: Vec<String>,
    /// Files produced by one build only, with the side that has them.
    pub missing_in_one: Vec<(String, Side)>,
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

/// Runs the entry point with exactly `pb.env`, inside `pb.workdir`, under
/// the profile's umask and in its own process group.
pub fn run_build(pb: &PreparedBuild, req: &BuildRequest) -> Result<BuildResult> {
    run_build_with(pb, req, Exec::default())
}

pub fn run_build_with(pb: &PreparedBuild, req: &BuildRequest, exec: Exec) -> Result<BuildResult> {
    let entry = pb.workdir.join(&req.build_entry);
    if !entry.is_file() {
        return Err(RunnerError::MissingEntry(entry));
    }
    let mut log_path = pb.workdir.clone().into_os_string();
    log_path.push(".log");
    let log_path = PathBuf::from(log_path);
    let log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let log_err = log_file.try_clone().map_err(io_err(&log_path))?;

    let umask = pb.profile.umask as libc::mode_t;
    let mut cmd = Command::new(&entry);
    cmd.env_clear()
        .envs(&pb.env)
        .current_dir(&pb.workdir)
        .stdin(Stdio::null())
        .stdout(log_file)
        .stderr(log_err);
    // SAFETY: umask and setpgid are async-signal-safe.
    unsafe {
        cmd.pre_exec(move || {
            libc::umask(umask);
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }

    let started = Instant::now();
    let deadline = started + Duration::from_secs(req.timeout_seconds);
    let mut child = cmd.spawn().map_err(io_err(&entry))?;
    let code = loop {
        if let Some(status) = child.try_wait().map_err(io_err(&entry))? {
            break exit_code(status);
        }
        if Instant::now() >= deadline {
            // SAFETY: plain syscall on the child's own process group.
            unsafe {
                libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
            }
            let _ = child.wait();
            break TIMEOUT_EXIT_CODE;
        }
        std::thread::sleep(POLL_INTERVAL);
    };
    let duration_ms = started.elapsed().as_millis() as u64;
    let log = fs::read(&log_path).map_err(io_err(&log_path))?;

    let (artifacts, checksums) = if code == 0 {
        let dir = pb.workdir.join(&req.output_subdir);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let sums = attestation::compute_checksums_with(&dir, exec)?;
        (Some(dir), sums)
    } else {
        (None, Vec::new())
    };
    Ok(BuildResult {
        profile_name: pb.profile.name.clone(),
        exit_code: code,
        artifacts,
        checksums,
        duration_ms,
        log,
        log_path,
        env: pb.env.clone(),
    })
}

/// Moves a finished workdir and its log under `staging/run-<n>/` so the next
/// build may use the same path.
fn retire(
    result: &mut BuildResult,
    pb: &PreparedBuild,
    staging_root: &Path,
    n: usize,
) -> Result<()> {
    let run_dir = staging_root.join(format!("run-{n}"));
    fs::create_dir(&run_dir).map_err(io_err(&run_dir))?;
    let name = pb
        .workdir
        .file_name()
        .expect("workdir has a final component");
    let new_workdir = run_dir.join(name);
    fs::rename(&pb.workdir, &new_workdir).map_err(io_err(&pb.workdir))?;
    let new_log = run_dir.join(result.log_path.file_name().expect("log has a file name"));
    fs::rename(&result.log_path, &new_log).map_err(io_err(&result.log_path))?;
    result.log_path = new_log;
    if let Some(a) = &result.artifacts {
        let rel = a
            .strip_prefix(&pb.workdir)
            .expect("artifacts live in the workdir");
        result.artifacts = Some(new_workdir.join(rel));
    }
    Ok(())
}

pub fn compare_checksums(
    first: &[ChecksumEntry],
    second: &[ChecksumEntry],
) -> (Vec<String>, Vec<(String, Side)>) {
    let a: BTreeMap<&str, &str> = first
        .iter()
        .map(|c| (c.filename.as_str(), c.sha256.as_str()))
        .collect();
    let b: BTreeMap<&str, &str> = second
        .iter()
        .map(|c| (c.filename.as_str(), c.sha256.as_str()))
        .collect();
    let mut mismatched = Vec::new();
    let mut missing = Vec::new();
    for (name, h) in &a {
        match b.get(name) {
            Some(h2) if h2 != h => mismatched.push(name.to_string()),
            Some(_) => {}
            None => missing.push((name.to_string(), Side::First)),
        }
    }
    for name in b.keys().filter(|n| !a.contains_key(*n)) {
        missing.push((name.to_string(), Side::Second));
    }
    missing.sort_by(|x, y| x.0.as_bytes().cmp(y.0.as_bytes()));
    (mismatched, missing)
}

/// Builds `req` under each profile in turn and compares the outputs.
pub fn double_build(
    req: &BuildRequest,
    profiles: (&VariationProfile, &VariationProfile),
    staging_root: &Path,
) -> Result<ReproVerdict> {
    double_build_with(req, profiles, staging_root, Exec::default())
}

pub fn double_build_with(
    req: &BuildRequest,
    profiles: (&VariationProfile, &VariationProfile),
    staging_root: &Path,
    exec: Exec,
) -> Result<ReproVerdict> {
    let base = now_epoch();
    let mut results = Vec::with_capacity(2);
    for (n, p) in [profiles.0, profiles.1].into_iter().enumerate() {
        let pb = apply_profile_at(p, req, staging_root, base)?;
        let mut r = run_build_with(&pb, req, exec)?;
        retire(&mut r, &pb, staging_root, n + 1)?;
        results.push(r);
    }
    let second = results.pop().expect("two builds");
    let first = results.pop().expect("two builds");
    let (mismatched_files, missing_in_one) = compare_checksums(&first.checksums, &second.checksums);
    let reproducible = first.succeeded()
        && second.succeeded()
        && mismatched_files.is_empty()
        && missing_in_one.is_empty();
    Ok(ReproVerdict {
        reproducible,
        first,
        second,
        mismatched_files,
        missing_in_one,
    })
}

impl ReproVerdict {
    /// Epochs the two builds ran with, for the classifier.
    pub fn classify_context(&self) -> ClassifyContext {
        let mut epochs: Vec<i64> = [&self.first, &self.second]
            .iter()
            .filter_map(|r| r.repro_epoch())
            .collect();
        epochs.dedup();
        ClassifyContext { epochs }
    }

    /// One comparison tree per differing artifact, in file-name order, plus
    /// one-sided nodes for files only one build produced.
    pub fn diff_trees(&self, cmp: &Comparator) -> Result<Vec<DiffNode>> {
        let (Some(da), Some(db)) = (&self.first.artifacts, &self.second.artifacts) else {
            return Ok(Vec::new());
        };
        let read = |dir: &Path, name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(io_err(&p))
        };
        let mut out = Vec::new();
        for name in &self.mismatched_files {
            out.push(cmp.compare(&read(da, name)?, &read(db, name)?, name, 0));
        }
        for (name, side) in &self.missing_in_one {
            out.push(DiffNode {
                path: name.clone(),
                format: Format::Binary,
                status: match side {
                    Side::First => Status::OnlyInFirst,
                    Side::Second => Status::OnlyInSecond,
                },
                detail: Detail::None,
                children: Vec::new(),
            });
        }
        out.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
        Ok(out)
    }
}

/// Signs an attestation for a successful build: package identity from
/// `repro.meta`, checksums from the build, environment from the profile.
pub fn attest_build(
    br: &BuildResult,
    req: &BuildRequest,
    builder_id: &str,
    key: &SigningKey,
) -> Result<SignedAttestation> {
    if !br.succeeded() {
        return Err(RunnerError::FailedBuild {
            profile: br.profile_name.clone(),
            code: br.exit_code,
        });
    }
    let mut depends: Vec<DependencyPin> = req
        .meta
        .depends
        .iter()
        .map(|(n, v)| DependencyPin::new(n, v))
        .collect();
    depends.sort_by(|a, b| a.name.as_bytes().cmp(b.name.as_bytes()));
    let att = Attestation {
        source: req.meta.source.clone(),
        version: req.meta.version.clone(),
        architecture: req.meta.arch.clone(),
        checksums: br.checksums.clone(),
        depends,
        environment: br.env.clone(),
        builder_id: builder_id.to_string(),
    };
    Ok(sign_attestation(&att, key)?)
}
