//! A corpus of miniature packages, one per class of reproducibility defect
//! plus a reproducible control.
//!
//! Each fixture is a directory with `repro.meta`, a POSIX `build.sh` and a
//! few source files. The scripts honour the varenv environment contract
//! (`REPRO_EPOCH`, `REPRO_FS_ORDER`, `SOURCE_DATE_EPOCH`, `LC_ALL`, `TZ`,
//! `USER`) and write their artifacts to `out/`. Every script only needs
//! `sh`, coreutils, `awk`, `od` and GNU `tar`.

use std::fmt;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::classify::RootCause;
use crate::varenv::{BuildRequest, ReproMeta, VarenvError, META_FILE};

/// Source timestamp baked into every fixture (2020-09-13T12:26:40Z).
pub const FIXTURE_EPOCH: u64 = 1_600_000_000;
pub const FIXTURE_VERSION: &str = "1.0-1";

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("destination is not empty: {0}")]
    NotEmpty(PathBuf),
    #[error("unknown fixture kind {0:?}")]
    UnknownKind(String),
    #[error("{dir} does not hold a {kind} fixture")]
    NotAFixture { dir: PathBuf, kind: FixtureKind },
    #[error(transparent)]
    Request(#[from] VarenvError),
}

type Result<T> = std::result::Result<T, FixtureError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FixtureError + '_ {
    move |source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FixtureKind {
    Control,
    Timestamp,
    BuildPath,
    FsOrdering,
    ArchiveMetadata,
    Randomness,
    UninitializedMemory,
    LocaleTimezone,
    BuildTimeSecret,
}

impl FixtureKind {
    pub const ALL: [FixtureKind; 9] = [
        FixtureKind::Control,
        FixtureKind::Timestamp,
        FixtureKind::BuildPath,
        FixtureKind::FsOrdering,
        FixtureKind::ArchiveMetadata,
        FixtureKind::Randomness,
        FixtureKind::UninitializedMemory,
        FixtureKind::LocaleTimezone,
        FixtureKind::BuildTimeSecret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FixtureKind::Control => "control",
            FixtureKind::Timestamp => "timestamp",
            FixtureKind::BuildPath => "build-path",
            FixtureKind::FsOrdering => "fs-ordering",
            FixtureKind::ArchiveMetadata => "archive-metadata",
            FixtureKind::Randomness => "randomness",
            FixtureKind::UninitializedMemory => "uninitialized-memory",
            FixtureKind::LocaleTimezone => "locale-timezone",
            FixtureKind::BuildTimeSecret => "build-time-secret",
        }
    }

    /// The root cause this fixture is built to exhibit; `None` for Control.
    /// A leaked build-time secret is a random token, so it reads as
    /// [`RootCause::Randomness`].
    pub fn designed_cause(self) -> Option<RootCause> {
        match self {
            FixtureKind::Control => None,
            FixtureKind::Timestamp => Some(RootCause::Timestamp),
            FixtureKind::BuildPath => Some(RootCause::BuildPath),
            FixtureKind::FsOrdering => Some(RootCause::FsOrdering),
            FixtureKind::ArchiveMetadata => Some(RootCause::ArchiveMetadata),
            FixtureKind::Randomness | FixtureKind::BuildTimeSecret => Some(RootCause::Randomness),
            FixtureKind::UninitializedMemory => Some(RootCause::UninitializedMemory),
            FixtureKind::LocaleTimezone => Some(RootCause::LocaleOrTimezone),
        }
    }

    /// Whether the defect survives two builds in identical environments.
    pub fn internally_nondeterministic(self) -> bool {
        matches!(
            self,
            FixtureKind::Randomness
                | FixtureKind::BuildTimeSecret
                | FixtureKind::UninitializedMemory
        )
    }

    /// The file the build writes to `out/`.
    pub fn artifact(self) -> &'static str {
        match self {
            FixtureKind::Control => "hello.txt",
            FixtureKind::Timestamp => "foo-utils.version",
            FixtureKind::BuildPath => "foo.debug",
            FixtureKind::FsOrdering => "linked.c",
            FixtureKind::ArchiveMetadata => "pkg.tar",
            FixtureKind::Randomness => "config.dump",
            FixtureKind::UninitializedMemory => "record.bin",
            FixtureKind::LocaleTimezone => "release.txt",
            FixtureKind::BuildTimeSecret => "ConfigData.pm",
        }
    }

    fn source_name(self) -> String {
        format!("fixture-{}", self.name())
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixtureKind {
    type Err = FixtureError;

    fn from_str(s: &str) -> Result<Self> {
        FixtureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FixtureError::UnknownKind(s.to_string()))
    }
}

const PRELUDE: &str = "#!/bin/sh\nset -eu\ncd \"$(dirname \"$0\")\"\nrm -rf out\nmkdir -p out\n";

/// `macro_date SECS` prints `Mmm dd yyyy` in UTC, the shape of C's `__DATE__`.
const MACRO_DATE: &str = r#"macro_date() {
    z=$(( $1 / 86400 + 719468 ))
    era=$(( (z >= 0 ? z : z - 146096) / 146097 ))
    doe=$(( z - era * 146097 ))
    yoe=$(( (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365 ))
    doy=$(( doe - (365 * yoe + yoe / 4 - yoe / 100) ))
    mp=$(( (5 * doy + 2) / 153 ))
    d=$(( doy - (153 * mp + 2) / 5 + 1 ))
    m=$(( mp < 10 ? mp + 3 : mp - 9 ))
    y=$(( yoe + era * 400 + (m <= 2 ? 1 : 0) ))
    set -- Jan Feb Mar Apr May Jun Jul Aug Sep Oct Nov Dec
    eval "mon=\${$m}"
    printf '%s %2d %d\n' "$mon" "$d" "$y"
}
"#;

fn sde_line() -> String {
    format!("sde=${{SOURCE_DATE_EPOCH:-{FIXTURE_EPOCH}}}\n")
}

fn script(kind: FixtureKind, remediated: bool) -> String {
    let mut s = String::from(PRELUDE);
    let body = match (kind, remediated) {
        (FixtureKind::Control, _) => "cat src/hello.txt src/greeting.txt > out/hello.txt\n".to_string(),

        (FixtureKind::Timestamp, false) => format!(
            "{MACRO_DATE}printf 'foo-utils version 3.141 (built %s)\\n' \"$(macro_date \"$REPRO_EPOCH\")\" > out/foo-utils.version\n"
        ),
        (FixtureKind::Timestamp, true) => format!(
            "{MACRO_DATE}{}printf 'foo-utils version 3.141 (built %s)\\n' \"$(macro_date \"$sde\")\" > out/foo-utils.version\n",
            sde_line()
        ),

        (FixtureKind::BuildPath, false) => {
            "printf 'DEBUG: boop (%s/src/foo.c:77)\\n' \"$PWD\" > out/foo.debug\n".to_string()
        }
        (FixtureKind::BuildPath, true) => "printf 'DEBUG: boop (src/foo.c:77)\\n' > out/foo.debug\n".to_string(),

        (FixtureKind::FsOrdering, false) => r#"list_src() {
    case "$REPRO_FS_ORDER" in
        forward) ls src | LC_ALL=C sort ;;
        reverse) ls src | LC_ALL=C sort -r ;;
        shuffled:*) ls src | LC_ALL=C sort | awk -v seed="${REPRO_FS_ORDER#shuffled:}" \
            'BEGIN { srand(seed) } { printf "%.12f %s\n", rand(), $0 }' | LC_ALL=C sort | cut -d' ' -f2 ;;
        *) echo "unknown REPRO_FS_ORDER: $REPRO_FS_ORDER" >&2; exit 2 ;;
    esac
}
for f in $(list_src); do cat "src/$f"; done > out/linked.c
"#
        .to_string(),
        (FixtureKind::FsOrdering, true) => {
            "for f in $(ls src | LC_ALL=C sort); do cat \"src/$f\"; done > out/linked.c\n".to_string()
        }

        (FixtureKind::ArchiveMetadata, false) => r#"rm -rf stage
mkdir stage
cat src/README > stage/README
cat src/data.txt > stage/data.txt
touch -d "@$REPRO_EPOCH" stage/README stage/data.txt
tar --format=ustar -C stage --owner="$USER:$(id -u)" --group="$USER:$(id -g)" -cf out/pkg.tar README data.txt
"#
        .to_string(),
        (FixtureKind::ArchiveMetadata, true) => format!(
            r#"{}rm -rf stage
mkdir stage
cat src/README > stage/README
cat src/data.txt > stage/data.txt
tar --format=ustar -C stage --sort=name --owner=root:0 --group=root:0 --mode=644 \
    --mtime="@$sde" --clamp-mtime -cf out/pkg.tar README data.txt
"#,
            sde_line()
        ),

        (FixtureKind::Randomness, false) => r#"{
    echo '# runtime configuration'
    while IFS= read -r kv; do
        printf '%s %s\n' "$(od -An -N4 -tu4 /dev/urandom | tr -d ' ')" "$kv"
    done < src/settings | sort -n | cut -d' ' -f2-
    echo "session-token: $(od -An -N16 -tx1 /dev/urandom | tr -d ' \n')"
} > out/config.dump
"#
        .to_string(),
        (FixtureKind::Randomness, true) => format!(
            r#"{}{{
    echo '# runtime configuration'
    LC_ALL=C sort src/settings
    echo "session-token: $(awk -v s="$sde" 'BEGIN {{ srand(s); for (i = 0; i < 16; i++) printf "%02x", int(rand() * 256) }}')"
}} > out/config.dump
"#,
            sde_line()
        ),

        (FixtureKind::UninitializedMemory, false) | (FixtureKind::UninitializedMemory, true) => {
            let fixed = if remediated { "REPRO_FIXED=1\n" } else { "REPRO_FIXED=${REPRO_FIXED:-0}\n" };
            format!(
                r#"{fixed}if [ "$REPRO_FIXED" = 1 ]; then pad=/dev/zero; else pad=/dev/urandom; fi
{{
    printf 'DIRENT\000\001'
    printf '%-16s' "$(cat src/name)"
    head -c 16 "$pad"
    printf '\000\000\020\000'
}} > out/record.bin
"#
            )
        }

        (FixtureKind::LocaleTimezone, false) | (FixtureKind::LocaleTimezone, true) => {
            let force = if remediated { "LC_ALL=C\nTZ=UTC\n" } else { "" };
            format!(
                r#"{force}{}case "${{LC_ALL:-C}}" in
    fr*) set -- janvier février mars avril mai juin juillet août septembre octobre novembre décembre ;;
    de*) set -- Januar Februar März April Mai Juni Juli August September Oktober November Dezember ;;
    *) set -- January February March April May June July August September October November December ;;
esac
m=$(( ($(cat src/release-day) % 365) / 31 + 1 ))
eval "month=\${{$m}}"
case "${{TZ:-UTC}}" in
    UTC|Etc/UTC|GMT) off=+0000 ;;
    Europe/Paris|Europe/Berlin) off=+0100 ;;
    America/Los_Angeles) off=-0800 ;;
    Pacific/Kiritimati) off=+1400 ;;
    *) off=+0000 ;;
esac
printf 'release-month: %s\nutc-offset: %s\n' "$month" "$off" > out/release.txt
"#,
                ""
            )
        }

        (FixtureKind::BuildTimeSecret, false) => r#"secret=$(od -An -N16 -tx1 /dev/urandom | tr -d ' \n')
{
    echo 'package ConfigData;'
    echo 'my %config = ('
    echo "    'OpenIDConsumerSecret' => '$secret',"
    echo "    'DataDir' => 'data',"
    echo ');'
    echo '1;'
} > out/ConfigData.pm
"#
        .to_string(),
        (FixtureKind::BuildTimeSecret, true) => r#"{
    echo 'package ConfigData;'
    echo 'my %config = ('
    echo "    'OpenIDConsumerSecret' => '',"
    echo "    'DataDir' => 'data',"
    echo ');'
    echo '1;'
} > out/ConfigData.pm
"#
        .to_string(),
    };
    s.push_str(&body);
    s
}

fn sources(kind: FixtureKind) -> Vec<(&'static str, &'static str)> {
    match kind {
        FixtureKind::Control => vec![
            ("src/hello.txt", "hello, world\n"),
            ("src/greeting.txt", "this file depends on nothing but its sources\n"),
        ],
        FixtureKind::Timestamp => vec![("src/foo.c", "const char *built = __DATE__;\n")],
        FixtureKind::BuildPath => vec![("src/foo.c", "fprintf(stderr, \"DEBUG: boop (%s:%d)\\n\", __FILE__, __LINE__);\n")],
        FixtureKind::FsOrdering => vec![
            ("src/alpha.c", "int alpha(void) { return 1; }\n"),
            ("src/beta.c", "int beta(void) { return 2; }\n"),
            ("src/delta.c", "int delta(void) { return 4; }\n"),
            ("src/epsilon.c", "int epsilon(void) { return 5; }\n"),
            ("src/gamma.c", "int gamma(void) { return 3; }\n"),
            ("src/zeta.c", "int zeta(void) { return 6; }\n"),
        ],
        FixtureKind::ArchiveMetadata => vec![
            ("src/README", "pkg: a package whose payload is a tar archive\n"),
            ("src/data.txt", "payload bytes that never change\n"),
        ],
        FixtureKind::Randomness => vec![(
            "src/settings",
            "cache_size=64\ncolour_depth=24\nmax_clients=128\nports=8080\nretry_limit=5\nworker_threads=4\n",
        )],
        FixtureKind::UninitializedMemory => vec![("src/name", "README.TXT")],
        FixtureKind::LocaleTimezone => vec![("src/release-day", "256\n")],
        FixtureKind::BuildTimeSecret => vec![("src/ConfigData.pm.in", "'OpenIDConsumerSecret' => '@SECRET@',\n")],
    }
}

fn meta(kind: FixtureKind) -> String {
    let deps = match kind {
        FixtureKind::ArchiveMetadata => "dep=coreutils=8.32-4\ndep=tar=1.34+dfsg-1\n",
        FixtureKind::FsOrdering | FixtureKind::Randomness | FixtureKind::BuildTimeSecret => {
            "dep=coreutils=8.32-4\ndep=mawk=1.3.4\n"
        }
        _ => "dep=coreutils=8.32-4\ndep=dash=0.5.11\n",
    };
    format!(
        "source={}\nversion={FIXTURE_VERSION}\narch=all\n{deps}epoch={FIXTURE_EPOCH}\nentry=build.sh\n",
        kind.source_name()
    )
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_entry(dest: &Path, kind: FixtureKind, remediated: bool) -> Result<()> {
    let entry = dest.join("build.sh");
    write(&entry, &script(kind, remediated))?;
    fs::set_permissions(&entry, fs::Permissions::from_mode(0o755)).map_err(io_err(&entry))
}

/// Writes a fixture package into `dest`, which must be missing or empty.
pub fn generate_fixture(kind: FixtureKind, dest: &Path) -> Result<BuildRequest> {
    if dest.exists() {
        let mut it = fs::read_dir(dest).map_err(io_err(dest))?;
        if it.next().is_some() {
            return Err(FixtureError::NotEmpty(dest.to_path_buf()));
        }
    }
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    write(&dest.join(META_FILE), &meta(kind))?;
    for (rel, contents) in sources(kind) {
        write(&dest.join(rel), contents)?;
    }
    write_entry(dest, kind, false)?;
    Ok(BuildRequest::load(dest)?)
}

/// Generates every kind into `dest/<kind-name>`.
pub fn generate_all(dest: &Path) -> Result<Vec<(FixtureKind, BuildRequest)>> {
    FixtureKind::ALL
        .into_iter()
        .map(|k| generate_fixture(k, &dest.join(k.name())).map(|r| (k, r)))
        .collect()
}

/// Switches a generated fixture's build script to its fixed variant.
pub fn remediate_fixture(kind: FixtureKind, dest: &Path) -> Result<()> {
    let meta_path = dest.join(META_FILE);
    let not_fixture = || FixtureError::NotAFixture {
        dir: dest.to_path_buf(),
        kind,
    };
    let text = fs::read_to_string(&meta_path).map_err(|_| not_fixture())?;
    let m = ReproMeta::parse(&text, &meta_path.display().to_string())?;
    if m.source != kind.source_name() {
        return Err(not_fixture());
    }
    if kind != FixtureKind::Control {
        write_entry(dest, kind, true)?;
    }
    Ok(())
}

/// Identifies the kind of a generated fixture directory from its metadata.
pub fn detect_kind(dir: &Path) -> Result<FixtureKind> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let m = ReproMeta::parse(&text, &meta_path.display().to_string())?;
    m.source
        .strip_prefix("fixture-")
        .ok_or(FixtureError::UnknownKind(m.source.clone()))?
        .parse()
}
