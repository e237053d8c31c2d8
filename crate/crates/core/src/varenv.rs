//! Divergent build-environment profiles and the staging of source trees
//! under them.
//!
//! A [`VariationProfile`] describes one environment of the adversarial pair.
//! [`apply_profile`] copies a source tree to `staging/<build_path_component>`
//! and materializes the environment contract the child build receives:
//! `TZ`, `LC_ALL`, `LANG`, `HOSTNAME`, `USER`, `UMASK`, `REPRO_EPOCH`,
//! `REPRO_FS_ORDER` and, in profiles that export it, `SOURCE_DATE_EPOCH`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Eighteen months of 30.4375 days.
pub const EIGHTEEN_MONTHS: i64 = 47_336_400;
pub const DEFAULT_PATH: &str = "/usr/local/bin:/usr/bin:/bin";
pub const META_FILE: &str = "repro.meta";
pub const DEFAULT_ENTRY: &str = "build.sh";
pub const DEFAULT_OUTPUT: &str = "out";
pub const DEFAULT_TIMEOUT_SECONDS: u64 = 300;

#[derive(Debug, Error)]
pub enum VarenvError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Config {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("invalid profile {name:?}: {msg}")]
    Invalid { name: String, msg: String },
    #[error("workdir already exists: {0}")]
    Collision(PathBuf),
    #[error("{0}: name is not valid UTF-8")]
    NonUtf8Name(PathBuf),
}

type Result<T> = std::result::Result<T, VarenvError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VarenvError + '_ {
    move |source| VarenvError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FsOrdering {
    Forward,
    Reverse,
    Shuffled(u64),
}

impl fmt::Display for FsOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FsOrdering::Forward => f.write_str("forward"),
            FsOrdering::Reverse => f.write_str("reverse"),
            FsOrdering::Shuffled(seed) => write!(f, "shuffled:{seed}"),
        }
    }
}

impl FromStr for FsOrdering {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "forward" => Ok(FsOrdering::Forward),
            "reverse" => Ok(FsOrdering::Reverse),
            _ => s
                .strip_prefix("shuffled:")
                .and_then(|n| n.parse().ok())
                .map(FsOrdering::Shuffled)
                .ok_or_else(|| format!("expected forward, reverse or shuffled:<u64>, got {s:?}")),
        }
    }
}

impl FsOrdering {
    /// Reorders names (already distinct) according to this ordering.
    pub fn arrange(self, mut names: Vec<String>) -> Vec<String> {
        names.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
        match self {
            FsOrdering::Forward => {}
            FsOrdering::Reverse => names.reverse(),
            FsOrdering::Shuffled(seed) => names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
        names
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariationProfile {
    pub name: String,
    /// Full static environment: every knob's materialization plus `PATH`
    /// and any extra variables from a profile file. `REPRO_EPOCH` and
    /// `SOURCE_DATE_EPOCH` are added by [`apply_profile`].
    pub env: BTreeMap<String, String>,
    pub clock_skew_seconds: i64,
    pub build_path_component: String,
    pub fs_ordering: FsOrdering,
    pub umask: u32,
    pub locale: String,
    pub timezone: String,
    pub hostname: String,
    pub username: String,
    /// Whether `SOURCE_DATE_EPOCH` is exported to the build.
    pub source_date_epoch: bool,
}

/// Variables owned by knobs; profile files may not set them through `env.`.
const KNOB_VARS: [&str; 10] = [
    "TZ",
    "LC_ALL",
    "LANG",
    "HOSTNAME",
    "USER",
    "UMASK",
    "REPRO_FS_ORDER",
    "REPRO_EPOCH",
    "SOURCE_DATE_EPOCH",
    "PATH",
];

impl VariationProfile {
    fn knob_env(&self) -> BTreeMap<String, String> {
        [
            ("PATH", DEFAULT_PATH.to_string()),
            ("TZ", self.timezone.clone()),
            ("LC_ALL", self.locale.clone()),
            ("LANG", self.locale.clone()),
            ("HOSTNAME", self.hostname.clone()),
            ("USER", self.username.clone()),
            ("UMASK", format!("{:04o}", self.umask)),
            ("REPRO_FS_ORDER", self.fs_ordering.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Recomputes the knob-owned part of `env`, keeping extra variables.
    pub fn sync_env(&mut self) {
        self.env.retain(|k, _| !KNOB_VARS.contains(&k.as_str()));
        self.env.extend(self.knob_env());
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(VarenvError::Invalid {
                name: self.name.clone(),
                msg: msg.to_string(),
            })
        };
        let c = &self.build_path_component;
        if self.name.is_empty() {
            return bad("empty name");
        }
        if c.is_empty() || c == "." || c == ".." || c.contains(['/', '\\', '\0']) {
            return bad("build_path_component must be a single path segment");
        }
        if self.umask > 0o777 {
            return bad("umask out of range");
        }
        if self.env != {
            let mut synced = self.clone();
            synced.sync_env();
            synced.env
        } {
            return bad("env does not match the knobs");
        }
        Ok(())
    }

    /// Parses `knob = value` lines over `base`. Unset knobs keep the base
    /// value; `env.NAME = value` adds an extra variable.
    pub fn from_config_str(text: &str, file: &str, base: &VariationProfile) -> Result<Self> {
        let mut p = base.clone();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| VarenvError::Config {
                file: file.to_string(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `knob = value`".into()))?;
            let num = |v: &str| {
                v.parse::<i64>()
                    .map_err(|_| err(format!("{key}: not an integer: {v:?}")))
            };
            match key {
                "name" => p.name = value.into(),
                "clock_skew_seconds" => p.clock_skew_seconds = num(value)?,
                "build_path_component" => p.build_path_component = value.into(),
                "fs_ordering" => p.fs_ordering = value.parse().map_err(err)?,
                "umask" => {
                    p.umask = u32::from_str_radix(value, 8)
                        .map_err(|_| err(format!("umask: not octal: {value:?}")))?
                }
                "locale" => p.locale = value.into(),
                "timezone" => p.timezone = value.into(),
                "hostname" => p.hostname = value.into(),
                "username" => p.username = value.into(),
                "source_date_epoch" => {
                    p.source_date_epoch = match value {
                        "true" | "yes" | "1" => true,
                        "false" | "no" | "0" => false,
                        _ => {
                            return Err(err(format!(
                                "source_date_epoch: expected true or false, got {value:?}"
                            )))
                        }
                    }
                }
                _ => match key.strip_prefix("env.") {
                    Some(var) if !var.is_empty() && !KNOB_VARS.contains(&var) => {
                        p.env.insert(var.to_string(), value.to_string());
                    }
                    Some(var) => return Err(err(format!("{var:?} is owned by a knob"))),
                    None => return Err(err(format!("unknown knob {key:?}"))),
                },
            }
        }
        p.sync_env();
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path, base: &VariationProfile) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_config_str(&text, &path.display().to_string(), base)
    }
}

/// The adversarial pair: a baseline A and a B that differs in every knob.
pub fn default_profiles() -> (VariationProfile, VariationProfile) {
    let mut a = VariationProfile {
        name: "A".into(),
        env: BTreeMap::new(),
        clock_skew_seconds: 0,
        build_path_component: "build-1st".into(),
        fs_ordering: FsOrdering::Forward,
        umask: 0o022,
        locale: "C".into(),
        timezone: "UTC".into(),
        hostname: "alpha".into(),
        username: "builder-a".into(),
        source_date_epoch: true,
    };
    let mut b = VariationProfile {
        name: "B".into(),
        env: BTreeMap::new(),
        clock_skew_seconds: EIGHTEEN_MONTHS,
        build_path_component: "build-2nd-with-a-much-longer-name".into(),
        fs_ordering: FsOrdering::Reverse,
        umask: 0o077,
        locale: "fr_FR.UTF-8".into(),
        timezone: "Pacific/Kiritimati".into(),
        hostname: "beta".into(),
        username: "builder-b".into(),
        source_date_epoch: false,
    };
    a.sync_env();
    b.sync_env();
    (a, b)
}

/// Package identity and build inputs read from `repro.meta`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReproMeta {
    pub source: String,
    pub version: String,
    pub arch: String,
    /// `dep=<name>=<version>` lines, in file order.
    pub depends: Vec<(String, String)>,
    /// `epoch=<secs>`: the source tree's own timestamp, exported as
    /// `SOURCE_DATE_EPOCH` where the profile asks for it.
    pub epoch: Option<u64>,
    /// `entry=<path>`: build entry point, default `build.sh`.
    pub entry: Option<String>,
}

impl ReproMeta {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut m = ReproMeta::default();
        let (mut source, mut version, mut arch) = (None, None, None);
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| VarenvError::Config {
                file: file.to_string(),
                line: i + 1,
                msg,
            };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key=value".into()))?;
            let slot = match k {
                "source" => &mut source,
                "version" => &mut version,
                "arch" => &mut arch,
                "dep" => {
                    let (n, ver) = v
                        .split_once('=')
                        .ok_or_else(|| err("expected dep=<name>=<version>".into()))?;
                    m.depends.push((n.to_string(), ver.to_string()));
                    continue;
                }
                "epoch" => {
                    m.epoch = Some(
                        v.parse()
                            .map_err(|_| err(format!("epoch: not an integer: {v:?}")))?,
                    );
                    continue;
                }
                "entry" => {
                    m.entry = Some(v.to_string());
                    continue;
                }
                _ => return Err(err(format!("unknown key {k:?}"))),
            };
            if slot.replace(v.to_string()).is_some() {
                return Err(err(format!("duplicate key {k:?}")));
            }
        }
        let missing = |k: &str| VarenvError::Config {
            file: file.to_string(),
            line: 0,
            msg: format!("missing key {k:?}"),
        };
        m.source = source.ok_or_else(|| missing("source"))?;
        m.version = version.ok_or_else(|| missing("version"))?;
        m.arch = arch.ok_or_else(|| missing("arch"))?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildRequest {
    pub source_dir: PathBuf,
    /// Relative to `source_dir`.
    pub build_entry: PathBuf,
    /// Relative to the workdir.
    pub output_subdir: PathBuf,
    pub timeout_seconds: u64,
    pub meta: ReproMeta,
}

impl BuildRequest {
    /// Reads `repro.meta` from `source_dir` and checks the entry point.
    pub fn load(source_dir: &Path) -> Result<Self> {
        let meta_path = source_dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta = ReproMeta::parse(&text, &meta_path.display().to_string())?;
        let req = BuildRequest {
            source_dir: source_dir.to_path_buf(),
            build_entry: PathBuf::from(meta.entry.as_deref().unwrap_or(DEFAULT_ENTRY)),
            output_subdir: PathBuf::from(DEFAULT_OUTPUT),
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            meta,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        use std::os::unix::fs::PermissionsExt;
        let invalid = |msg: String| VarenvError::Invalid {
            name: self.source_dir.display().to_string(),
            msg,
        };
        if self.build_entry.is_absolute() || self.output_subdir.is_absolute() {
            return Err(invalid("entry and output paths must be relative".into()));
        }
        let entry = self.source_dir.join(&self.build_entry);
        let md = fs::metadata(&entry).map_err(io_err(&entry))?;
        if !md.is_file() || md.permissions().mode() & 0o111 == 0 {
            return Err(invalid(format!(
                "{} is not an executable file",
                entry.display()
            )));
        }
        if self.timeout_seconds == 0 {
            return Err(invalid("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedBuild {
    pub workdir: PathBuf,
    pub env: BTreeMap<String, String>,
    pub profile: VariationProfile,
    /// Relative paths in the order they were created; directories end in `/`.
    pub creation_order: Vec<String>,
}

/// Directory entries of `dir` in the requested order.
pub fn ordered_entries(dir: &Path, ordering: FsOrdering) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry
            .file_name()
            .into_string()
            .map_err(|_| VarenvError::NonUtf8Name(entry.path()))?;
        names.push(name);
    }
    Ok(ordering.arrange(names))
}

/// Copies `from` to `to`, appending each created entry's relative path to
/// `log` as it is created.
fn copy_tree(
    from: &Path,
    to: &Path,
    rel: &str,
    ordering: FsOrdering,
    log: &mut Vec<String>,
) -> Result<()> {
    fs::create_dir(to).map_err(io_err(to))?;
    for name in ordered_entries(from, ordering)? {
        let (src, dst) = (from.join(&name), to.join(&name));
        let md = fs::symlink_metadata(&src).map_err(io_err(&src))?;
        let child = format!("{rel}{name}");
        if md.is_dir() {
            log.push(format!("{child}/"));
            copy_tree(&src, &dst, &format!("{child}/"), ordering, log)?;
            continue;
        }
        log.push(child);
        if md.file_type().is_symlink() {
            let target = fs::read_link(&src).map_err(io_err(&src))?;
            std::os::unix::fs::symlink(target, &dst).map_err(io_err(&dst))?;
        } else {
            fs::copy(&src, &dst).map_err(io_err(&dst))?;
        }
    }
    Ok(())
}

pub fn now_epoch() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// [`apply_profile_at`] with the current time as base epoch.
pub fn apply_profile(
    p: &VariationProfile,
    req: &BuildRequest,
    staging_root: &Path,
) -> Result<PreparedBuild> {
    apply_profile_at(p, req, staging_root, now_epoch())
}

/// Copies the source tree to `staging_root/<build_path_component>` and
/// materializes the environment with `REPRO_EPOCH = base_epoch + skew`.
/// `SOURCE_DATE_EPOCH` is the `epoch=` of `repro.meta`, else `base_epoch`.
pub fn apply_profile_at(
    p: &VariationProfile,
    req: &BuildRequest,
    staging_root: &Path,
    base_epoch: i64,
) -> Result<PreparedBuild> {
    p.validate()?;
    fs::create_dir_all(staging_root).map_err(io_err(staging_root))?;
    let root = fs::canonicalize(staging_root).map_err(io_err(staging_root))?;
    let workdir = root.join(&p.build_path_component);
    if fs::symlink_metadata(&workdir).is_ok() {
        return Err(VarenvError::Collision(workdir));
    }
    let mut creation_order = Vec::new();
    copy_tree(
        &req.source_dir,
        &workdir,
        "",
        p.fs_ordering,
        &mut creation_order,
    )?;

    let mut env = p.env.clone();
    env.insert(
        "REPRO_EPOCH".into(),
        (base_epoch + p.clock_skew_seconds).to_string(),
    );
    if p.source_date_epoch {
        let sde = req.meta.epoch.map(|e| e as i64).unwrap_or(base_epoch);
        env.insert("SOURCE_DATE_EPOCH".into(), sde.to_string());
    }
    Ok(PreparedBuild {
        workdir,
        env,
        profile: p.clone(),
        creation_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::fs::PermissionsExt;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn orderings() {
        let input = names(&["b", "a", "c"]);
        assert_eq!(
            FsOrdering::Forward.arrange(input.clone()),
            names(&["a", "b", "c"])
        );
        assert_eq!(
            FsOrdering::Reverse.arrange(input.clone()),
            names(&["c", "b", "a"])
        );
        let s0 = FsOrdering::Shuffled(0).arrange(input.clone());
        assert_eq!(s0, FsOrdering::Shuffled(0).arrange(names(&["c", "a", "b"])));
        let mut sorted = s0.clone();
        sorted.sort();
        assert_eq!(sorted, names(&["a", "b", "c"]));
    }

    #[test]
    fn ordering_round_trips_through_text() {
        for o in [
            FsOrdering::Forward,
            FsOrdering::Reverse,
            FsOrdering::Shuffled(u64::MAX),
        ] {
            assert_eq!(o.to_string().parse::<FsOrdering>().unwrap(), o);
        }
        assert!("sideways".parse::<FsOrdering>().is_err());
    }

    #[test]
    fn default_pair_differs_everywhere() {
        let (a, b) = default_profiles();
        assert_eq!(
            (a.clock_skew_seconds, b.clock_skew_seconds),
            (0, 47_336_400)
        );
        assert_eq!(
            (a.fs_ordering, b.fs_ordering),
            (FsOrdering::Forward, FsOrdering::Reverse)
        );
        assert_ne!(a.name, b.name);
        assert_ne!(a.build_path_component, b.build_path_component);
        assert_ne!(a.umask, b.umask);
        assert_ne!(a.locale, b.locale);
        assert_ne!(a.timezone, b.timezone);
        assert_ne!(a.hostname, b.hostname);
        assert_ne!(a.username, b.username);
        assert_ne!(a.source_date_epoch, b.source_date_epoch);
        a.validate().unwrap();
        b.validate().unwrap();
        assert_eq!(b.env["TZ"], "Pacific/Kiritimati");
        assert_eq!(a.env["UMASK"], "0022");
    }

    #[test]
    fn config_file_overrides() {
        let (a, _) = default_profiles();
        let text =
            "# custom\nname = C\nfs_ordering = shuffled:7  # seeded\numask = 027\nenv.EXTRA = 1\n";
        let p = VariationProfile::from_config_str(text, "c.conf", &a).unwrap();
        assert_eq!(p.fs_ordering, FsOrdering::Shuffled(7));
        assert_eq!(p.umask, 0o027);
        assert_eq!(p.env["REPRO_FS_ORDER"], "shuffled:7");
        assert_eq!(p.env["EXTRA"], "1");
        let err = VariationProfile::from_config_str("colour = red\n", "c.conf", &a).unwrap_err();
        assert_eq!(err.to_string(), "c.conf:1: unknown knob \"colour\"");
        assert!(VariationProfile::from_config_str("env.TZ = x\n", "c", &a).is_err());
        assert!(
            VariationProfile::from_config_str("build_path_component = a/b\n", "c", &a).is_err()
        );
    }

    #[test]
    fn meta_parsing() {
        let m = ReproMeta::parse(
            "source=hello\nversion=1.0\narch=all\ndep=gcc=4:10.2.0-1\nepoch=1600000000\n",
            "m",
        )
        .unwrap();
        assert_eq!(m.depends, vec![("gcc".into(), "4:10.2.0-1".into())]);
        assert_eq!(m.epoch, Some(1_600_000_000));
        assert!(ReproMeta::parse("source=x\narch=all\n", "m").is_err());
        assert!(ReproMeta::parse("source=x\nsource=y\nversion=1\narch=a\n", "m").is_err());
    }

    fn sample_tree(dir: &Path) {
        fs::write(dir.join("a.txt"), "a").unwrap();
        fs::write(dir.join("b.txt"), "b").unwrap();
        fs::create_dir(dir.join("sub")).unwrap();
        fs::write(dir.join("sub/c.txt"), "c").unwrap();
        fs::write(
            dir.join("repro.meta"),
            "source=s\nversion=1\narch=all\nepoch=1600000000\n",
        )
        .unwrap();
        fs::write(dir.join("build.sh"), "#!/bin/sh\n").unwrap();
        fs::set_permissions(dir.join("build.sh"), fs::Permissions::from_mode(0o755)).unwrap();
    }

    #[test]
    fn apply_copies_and_materializes() {
        let src = tempfile::tempdir().unwrap();
        let staging = tempfile::tempdir().unwrap();
        sample_tree(src.path());
        let req = BuildRequest::load(src.path()).unwrap();
        let (a, b) = default_profiles();
        let pa = apply_profile_at(&a, &req, staging.path(), 1_700_000_000).unwrap();
        let pb = apply_profile_at(&b, &req, staging.path(), 1_700_000_000).unwrap();
        assert!(pa.workdir.ends_with("build-1st"));
        let top: Vec<&str> = pb
            .creation_order
            .iter()
            .map(String::as_str)
            .filter(|p| *p == "sub/" || !p.starts_with("sub/"))
            .collect();
        assert_eq!(top, ["sub/", "repro.meta", "build.sh", "b.txt", "a.txt"]);
        assert_eq!(fs::read(pb.workdir.join("sub/c.txt")).unwrap(), b"c");
        assert_eq!(pa.env["SOURCE_DATE_EPOCH"], "1600000000");
        assert!(!pb.env.contains_key("SOURCE_DATE_EPOCH"));
        assert_eq!(
            pb.env["REPRO_EPOCH"],
            (1_700_000_000 + EIGHTEEN_MONTHS).to_string()
        );
        let again = apply_profile_at(&a, &req, staging.path(), 0);
        assert!(matches!(again, Err(VarenvError::Collision(_))));
    }

    #[test]
    fn missing_entry_point_is_rejected() {
        let src = tempfile::tempdir().unwrap();
        fs::write(
            src.path().join("repro.meta"),
            "source=s\nversion=1\narch=all\n",
        )
        .unwrap();
        assert!(BuildRequest::load(src.path()).is_err());
        assert!(BuildRequest::load(&src.path().join("nowhere")).is_err());
    }
}
