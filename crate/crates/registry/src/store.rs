//! On-disk record store.
//!
//! Layout: `{root}/{specs|trees}/{name}/{version}.payload` holds the verbatim
//! bytes and `{version}.meta.json` the digest and publication metadata. A
//! version is claimed by hard-linking a complete metadata file into place,
//! which fails if the name is taken; only then is the payload renamed in.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use safebt_core::bt::parse_tree;
use safebt_core::safety::{validate_spec, BarrierSpec};
use semver::Version;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The two document kinds the registry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Spec,
    Tree,
}

impl Kind {
    pub const ALL: [Kind; 2] = [Kind::Spec, Kind::Tree];

    /// Directory and route segment, `specs` or `trees`.
    pub fn plural(self) -> &'static str {
        match self {
            Kind::Spec => "specs",
            Kind::Tree => "trees",
        }
    }

    pub fn from_plural(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.plural() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Spec => "spec",
            Kind::Tree => "tree",
        })
    }
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Kind, String> {
        match s {
            "spec" | "specs" => Ok(Kind::Spec),
            "tree" | "trees" => Ok(Kind::Tree),
            _ => Err(format!("unknown kind `{s}`; expected spec or tree")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub kind: Kind,
    pub name: String,
    pub version: String,
    /// Lowercase hex SHA-256 of the payload bytes.
    pub digest: String,
    /// Milliseconds since the Unix epoch.
    pub published_at: u64,
    pub publisher: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub meta: RecordMeta,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Published {
    Created(RecordMeta),
    /// Identical bytes were already stored under this version.
    Existing(RecordMeta),
}

impl Published {
    pub fn meta(&self) -> &RecordMeta {
        match self {
            Published::Created(m) | Published::Existing(m) => m,
        }
    }

    pub fn created(&self) -> bool {
        matches!(self, Published::Created(_))
    }
}

/// One line of a query result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub name: String,
    /// Newest first.
    pub versions: Vec<String>,
    /// Tags of the newest version.
    pub tags: Vec<String>,
    /// Digest of the newest version.
    pub digest: String,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid name `{0}`: use letters, digits, `_` and `-`, starting with a letter or `_`")]
    BadName(String),
    #[error("invalid version `{version}`: {reason}")]
    BadVersion { version: String, reason: String },
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("{kind} {name}@{version} already exists with digest {existing}; attempted {attempted}")]
    Conflict { kind: Kind, name: String, version: String, existing: String, attempted: String },
    #[error("{kind} {name}@{version} not found")]
    NotFound { kind: Kind, name: String, version: String },
    #[error("integrity error for {kind} {name}@{version}: {detail}")]
    Integrity { kind: Kind, name: String, version: String, detail: String },
    #[error("storage I/O: {0}")]
    Io(#[from] io::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn check_name(name: &str) -> Result<(), StoreError> {
    let mut chars = name.chars();
    let ok = name.len() <= 128
        && matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadName(name.to_owned()))
    }
}

/// Parse a version, insisting on its canonical spelling so that each
/// version has exactly one file name.
pub fn check_version(version: &str) -> Result<Version, StoreError> {
    let bad = |reason: String| StoreError::BadVersion { version: version.to_owned(), reason };
    let v = Version::parse(version).map_err(|e| bad(e.to_string()))?;
    if v.to_string() != version {
        return Err(bad(format!("not in canonical form `{v}`")));
    }
    Ok(v)
}

/// Check that `payload` is a valid document of `kind` stored as `name@version`.
pub fn validate_payload(kind: Kind, name: &str, version: &str, payload: &[u8]) -> Result<(), StoreError> {
    check_name(name)?;
    check_version(version)?;
    let text =
        std::str::from_utf8(payload).map_err(|e| StoreError::Validation(vec![format!("payload is not UTF-8: {e}")]))?;
    match kind {
        Kind::Spec => {
            let spec = BarrierSpec::from_json(text).map_err(|e| StoreError::Validation(vec![e.to_string()]))?;
            let mut errors: Vec<String> = match validate_spec(&spec) {
                Ok(()) => Vec::new(),
                Err(v) => v.iter().map(ToString::to_string).collect(),
            };
            if spec.name != name {
                errors.push(format!("document name `{}` does not match `{name}`", spec.name));
            }
            if spec.version != version {
                errors.push(format!("document version `{}` does not match `{version}`", spec.version));
            }
            if errors.is_empty() {
                Ok(())
            } else {
                Err(StoreError::Validation(errors))
            }
        }
        Kind::Tree => parse_tree(text).map(drop).map_err(|e| StoreError::Validation(vec![e.to_string()])),
    }
}

/// Problem found by [`Store::audit`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub path: String,
    pub problem: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records: usize,
    pub findings: Vec<AuditFinding>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.findings.is_empty()
    }
}

const PAYLOAD_EXT: &str = ".payload";
const META_EXT: &str = ".meta.json";
/// How long a publisher that lost the claim waits for the winner's payload.
const SETTLE_TIMEOUT: Duration = Duration::from_secs(5);

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Store> {
        let root = root.into();
        for k in Kind::ALL {
            fs::create_dir_all(root.join(k.plural()))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, kind: Kind, name: &str) -> PathBuf {
        self.root.join(kind.plural()).join(name)
    }

    fn temp_path(dir: &Path) -> PathBuf {
        let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        dir.join(format!(".tmp-{}-{n}", std::process::id()))
    }

    fn write_temp(dir: &Path, bytes: &[u8]) -> io::Result<PathBuf> {
        let path = Self::temp_path(dir);
        let mut f = File::create_new(&path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(path)
    }

    /// Validate and store `payload`; durable once this returns `Ok`.
    pub fn publish(
        &self,
        kind: Kind,
        name: &str,
        version: &str,
        payload: &[u8],
        publisher: &str,
    ) -> Result<Published, StoreError> {
        validate_payload(kind, name, version, payload)?;
        let digest = sha256_hex(payload);
        let dir = self.dir(kind, name);
        fs::create_dir_all(&dir)?;
        sync_dir(dir.parent().expect("kind directory"))?;
        let meta_path = dir.join(format!("{version}{META_EXT}"));
        let payload_path = dir.join(format!("{version}{PAYLOAD_EXT}"));

        let meta = RecordMeta {
            kind,
            name: name.to_owned(),
            version: version.to_owned(),
            digest: digest.clone(),
            published_at: now_ms(),
            publisher: publisher.to_owned(),
            size: payload.len() as u64,
        };
        let payload_tmp = Self::write_temp(&dir, payload)?;
        let mut meta_bytes = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
        meta_bytes.push(b'\n');
        let meta_tmp = match Self::write_temp(&dir, &meta_bytes) {
            Ok(p) => p,
            Err(e) => {
                let _ = fs::remove_file(&payload_tmp);
                return Err(e.into());
            }
        };
        let claimed = fs::hard_link(&meta_tmp, &meta_path);
        let _ = fs::remove_file(&meta_tmp);
        match claimed {
            Ok(()) => {
                let moved = fs::rename(&payload_tmp, &payload_path).and_then(|()| sync_dir(&dir));
                if let Err(e) = moved {
                    let _ = fs::remove_file(&payload_tmp);
                    return Err(e.into());
                }
                Ok(Published::Created(meta))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                let _ = fs::remove_file(&payload_tmp);
                let existing = read_meta(&meta_path)?;
                if existing.digest != digest {
                    return Err(StoreError::Conflict {
                        kind,
                        name: name.to_owned(),
                        version: version.to_owned(),
                        existing: existing.digest,
                        attempted: digest,
                    });
                }
                self.settle(&payload_path, &existing)?;
                Ok(Published::Existing(existing))
            }
            Err(e) => {
                let _ = fs::remove_file(&payload_tmp);
                Err(e.into())
            }
        }
    }

    /// Wait until the winner of a claim has moved its payload into place.
    fn settle(&self, payload_path: &Path, meta: &RecordMeta) -> Result<(), StoreError> {
        let start = std::time::Instant::now();
        while !payload_path.exists() {
            if start.elapsed() > SETTLE_TIMEOUT {
                return Err(StoreError::Integrity {
                    kind: meta.kind,
                    name: meta.name.clone(),
                    version: meta.version.clone(),
                    detail: "record metadata exists but its payload never appeared".into(),
                });
            }
            thread::sleep(Duration::from_millis(2));
        }
        Ok(())
    }

    /// Stored bytes, re-verified against the recorded digest.
    pub fn fetch(&self, kind: Kind, name: &str, version: &str) -> Result<Record, StoreError> {
        let not_found = || StoreError::NotFound { kind, name: name.to_owned(), version: version.to_owned() };
        if check_name(name).is_err() || check_version(version).is_err() {
            return Err(not_found());
        }
        let dir = self.dir(kind, name);
        let meta = match read_meta(&dir.join(format!("{version}{META_EXT}"))) {
            Ok(m) => m,
            Err(StoreError::Io(e)) if e.kind() == io::ErrorKind::NotFound => return Err(not_found()),
            Err(e) => return Err(e),
        };
        let payload = match fs::read(dir.join(format!("{version}{PAYLOAD_EXT}"))) {
            Ok(p) => p,
            // claimed but not yet moved into place
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(not_found()),
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&payload);
        if actual != meta.digest {
            return Err(StoreError::Integrity {
                kind,
                name: name.to_owned(),
                version: version.to_owned(),
                detail: format!("stored digest {} but payload hashes to {actual}", meta.digest),
            });
        }
        Ok(Record { meta, payload })
    }

    /// Published versions of `name`, newest first; empty if unknown.
    pub fn versions(&self, kind: Kind, name: &str) -> Result<Vec<RecordMeta>, StoreError> {
        if check_name(name).is_err() {
            return Ok(Vec::new());
        }
        let dir = self.dir(kind, name);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for entry in entries {
            let file = entry?.file_name();
            let Some(version) = file.to_str().and_then(|f| f.strip_suffix(META_EXT)) else { continue };
            let Ok(v) = check_version(version) else { continue };
            if !dir.join(format!("{version}{PAYLOAD_EXT}")).exists() {
                continue;
            }
            out.push((v, read_meta(&dir.join(&file))?));
        }
        out.sort_by(|a, b| b.0.cmp(&a.0));
        Ok(out.into_iter().map(|(_, m)| m).collect())
    }

    /// Names of `kind` starting with `prefix` (if given) whose newest version
    /// carries `tag` (if given), in name order.
    pub fn query(&self, kind: Kind, prefix: Option<&str>, tag: Option<&str>) -> Result<Vec<QueryEntry>, StoreError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(self.root.join(kind.plural()))? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            if let Some(n) = entry.file_name().to_str() {
                if check_name(n).is_ok() && prefix.is_none_or(|p| n.starts_with(p)) {
                    names.push(n.to_owned());
                }
            }
        }
        names.sort();
        let mut out = Vec::new();
        for name in names {
            let versions = self.versions(kind, &name)?;
            let Some(latest) = versions.first() else { continue };
            let tags = match kind {
                Kind::Spec => {
                    let record = self.fetch(kind, &name, &latest.version)?;
                    std::str::from_utf8(&record.payload)
                        .ok()
                        .and_then(|t| BarrierSpec::from_json(t).ok())
                        .map(|s| s.tags)
                        .unwrap_or_default()
                }
                Kind::Tree => Vec::new(),
            };
            if tag.is_some_and(|t| !tags.iter().any(|x| x == t)) {
                continue;
            }
            out.push(QueryEntry {
                digest: latest.digest.clone(),
                versions: versions.iter().map(|m| m.version.clone()).collect(),
                name,
                tags,
            });
        }
        Ok(out)
    }

    /// Re-verify and re-validate every stored record.
    pub fn audit(&self) -> Result<AuditReport, StoreError> {
        let mut report = AuditReport::default();
        for kind in Kind::ALL {
            let base = self.root.join(kind.plural());
            let mut dirs: Vec<_> = fs::read_dir(&base)?.collect::<Result<_, _>>()?;
            dirs.sort_by_key(|e| e.file_name());
            for d in dirs {
                let name = d.file_name().to_string_lossy().into_owned();
                let mut finding = |path: &Path, problem: String| {
                    report.findings.push(AuditFinding { path: path.display().to_string(), problem });
                };
                if !d.file_type()?.is_dir() {
                    finding(&d.path(), "unexpected file".into());
                    continue;
                }
                if check_name(&name).is_err() {
                    finding(&d.path(), "invalid record name".into());
                    continue;
                }
                let mut files: Vec<String> = fs::read_dir(d.path())?
                    .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                    .collect::<Result<_, _>>()?;
                files.sort();
                for file in &files {
                    let path = d.path().join(file);
                    if file.starts_with(".tmp-") {
                        continue;
                    }
                    if let Some(version) = file.strip_suffix(PAYLOAD_EXT) {
                        if !files.contains(&format!("{version}{META_EXT}")) {
                            finding(&path, "payload without metadata".into());
                        }
                        continue;
                    }
                    let Some(version) = file.strip_suffix(META_EXT) else {
                        finding(&path, "unexpected file".into());
                        continue;
                    };
                    report.records += 1;
                    if let Err(problem) = self.audit_record(kind, &name, version, &path) {
                        finding(&path, problem);
                    }
                }
            }
        }
        Ok(report)
    }

    fn audit_record(&self, kind: Kind, name: &str, version: &str, meta_path: &Path) -> Result<(), String> {
        check_version(version).map_err(|e| e.to_string())?;
        let meta = read_meta(meta_path).map_err(|e| format!("unreadable metadata: {e}"))?;
        if meta.kind != kind || meta.name != name || meta.version != version {
            return Err(format!("metadata names {} {}@{}", meta.kind, meta.name, meta.version));
        }
        let record = match self.fetch(kind, name, version) {
            Err(StoreError::NotFound { .. }) => return Err("metadata without payload".into()),
            other => other.map_err(|e| e.to_string())?,
        };
        if record.meta.size != record.payload.len() as u64 {
            return Err(format!("recorded size {} but payload has {} bytes", record.meta.size, record.payload.len()));
        }
        validate_payload(kind, name, version, &record.payload).map_err(|e| e.to_string())
    }
}

fn read_meta(path: &Path) -> Result<RecordMeta, StoreError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| StoreError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))))
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}
