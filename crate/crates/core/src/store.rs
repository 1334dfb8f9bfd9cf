//! File-per-entity JSON workspace.
//!
//! Layout under the workspace root:
//!
//! ```text
//! index.json                 format stamp and the ids of every collection
//! documents/<id>.json
//! snippets/<id>.json
//! versions/<id>.json
//! runsets/<id>.json          one ResultSet per executed version
//! rules/<id>.json
//! layouts/<id>.json
//! cache/<id>.json
//! .lock                      present while a writer holds the workspace
//! ```
//!
//! Ids are percent-escaped into file names. Every write goes to a temporary
//! file in the target directory and is renamed into place, entity first and
//! index second. Archives are gzipped tarballs with a `manifest.json` first
//! and every other file in path order, all with zeroed metadata, so equal
//! workspaces export to equal bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Snippet};
use crate::pipeline::ResultSet;
use crate::taxonomy::{Rule, TaxonomyVersion};

/// Bumped whenever the on-disk shape changes.
pub const FORMAT_VERSION: u32 = 1;
pub const FORMAT_NAME: &str = "dpsir-workspace";
const INDEX_FILE: &str = "index.json";
const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";
const TMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collection {
    Documents,
    Snippets,
    Versions,
    Runsets,
    Rules,
    Layouts,
    Cache,
}

impl Collection {
    pub const ALL: [Collection; 7] = [
        Collection::Documents,
        Collection::Snippets,
        Collection::Versions,
        Collection::Runsets,
        Collection::Rules,
        Collection::Layouts,
        Collection::Cache,
    ];

    pub fn dir(self) -> &'static str {
        match self {
            Collection::Documents => "documents",
            Collection::Snippets => "snippets",
            Collection::Versions => "versions",
            Collection::Runsets => "runsets",
            Collection::Rules => "rules",
            Collection::Layouts => "layouts",
            Collection::Cache => "cache",
        }
    }

    fn from_dir(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.dir() == s)
    }
}

impl std::fmt::Display for Collection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir())
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{collection}/{id} not found")]
    NotFound { collection: Collection, id: String },
    #[error("refused write of {collection}/{id}: {reason}")]
    Integrity {
        collection: Collection,
        id: String,
        reason: String,
    },
    #[error("workspace {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("workspace format {found} needs migration to {expected}")]
    Migration { found: u32, expected: u32 },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("{0} is not a workspace")]
    NotAWorkspace(PathBuf),
    #[error("injected crash before rename")]
    InjectedCrash,
}

/// Something the workspace can persist.
pub trait Entity: Serialize + DeserializeOwned {
    const COLLECTION: Collection;
    fn entity_id(&self) -> String;
}

impl Entity for Document {
    const COLLECTION: Collection = Collection::Documents;
    fn entity_id(&self) -> String {
        self.id.clone()
    }
}

impl Entity for Snippet {
    const COLLECTION: Collection = Collection::Snippets;
    fn entity_id(&self) -> String {
        self.id.clone()
    }
}

impl Entity for TaxonomyVersion {
    const COLLECTION: Collection = Collection::Versions;
    fn entity_id(&self) -> String {
        self.id.clone()
    }
}

impl Entity for ResultSet {
    const COLLECTION: Collection = Collection::Runsets;
    fn entity_id(&self) -> String {
        self.id.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRule {
    pub id: String,
    pub rule: Rule,
}

impl Entity for StoredRule {
    const COLLECTION: Collection = Collection::Rules;
    fn entity_id(&self) -> String {
        self.id.clone()
    }
}

/// A computed layout document as served to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredLayout {
    pub id: String,
    pub kind: String,
    pub version_id: Option<String>,
    pub params: BTreeMap<String, String>,
    pub body: serde_json::Value,
}

impl Entity for StoredLayout {
    const COLLECTION: Collection = Collection::Layouts;
    fn entity_id(&self) -> String {
        self.id.clone()
    }
}

/// Opaque cached state such as model responses or embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    pub body: serde_json::Value,
}

impl Entity for CacheEntry {
    const COLLECTION: Collection = Collection::Cache;
    fn entity_id(&self) -> String {
        self.id.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Index {
    format: String,
    format_version: u32,
    collections: BTreeMap<Collection, BTreeSet<String>>,
}

impl Index {
    fn new() -> Self {
        Self {
            format: FORMAT_NAME.to_owned(),
            format_version: FORMAT_VERSION,
            collections: Collection::ALL.into_iter().map(|c| (c, BTreeSet::new())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    files: usize,
}

/// Where an injected crash interrupts the next write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// The temporary file is complete but never renamed.
    BeforeRename,
}

/// Percent-escapes an id into a file stem. Alphanumerics, `-` and `_` pass
/// through; so does `.` except in first position.
pub fn escape_id(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for (i, b) in id.bytes().enumerate() {
        let keep = b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || (b == b'.' && i > 0);
        if keep {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn unescape_id(stem: &str) -> Option<String> {
    let bytes = stem.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = stem.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn to_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, StoreError> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
fn atomic_write(path: &Path, bytes: &[u8], crash: Option<CrashPoint>) -> Result<(), StoreError> {
    let dir = path.parent().expect("entity paths have a parent");
    let mut tmp = tempfile::Builder::new().prefix(TMP_PREFIX).tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    if crash == Some(CrashPoint::BeforeRename) {
        tmp.keep().map_err(|e| e.error)?;
        return Err(StoreError::InjectedCrash);
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug)]
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// An open workspace. A writable handle holds the lock file until dropped.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    index: Index,
    lock: Option<LockGuard>,
    crash: Option<CrashPoint>,
}

impl Workspace {
    /// Opens or initializes a workspace for writing.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let lock_path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(StoreError::Locked(root)),
            Err(e) => return Err(e.into()),
        }
        let lock = LockGuard(lock_path);
        let mut ws = Self::read(root, Some(lock))?;
        ws.init_dirs()?;
        ws.remove_stray_temp_files()?;
        Ok(ws)
    }

    /// Opens an existing workspace without taking the writer lock.
    pub fn open_read_only(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        if !root.join(INDEX_FILE).is_file() {
            return Err(StoreError::NotAWorkspace(root));
        }
        Self::read(root, None)
    }

    fn read(root: PathBuf, lock: Option<LockGuard>) -> Result<Self, StoreError> {
        let index_path = root.join(INDEX_FILE);
        let index = if index_path.is_file() {
            let index: Index = serde_json::from_slice(&fs::read(&index_path)?)?;
            if index.format_version != FORMAT_VERSION {
                return Err(StoreError::Migration {
                    found: index.format_version,
                    expected: FORMAT_VERSION,
                });
            }
            index
        } else {
            Index::new()
        };
        Ok(Self {
            root,
            index,
            lock,
            crash: None,
        })
    }

    fn init_dirs(&mut self) -> Result<(), StoreError> {
        for c in Collection::ALL {
            fs::create_dir_all(self.root.join(c.dir()))?;
            self.index.collections.entry(c).or_default();
        }
        if !self.root.join(INDEX_FILE).is_file() {
            self.write_index()?;
        }
        Ok(())
    }

    fn remove_stray_temp_files(&self) -> Result<(), StoreError> {
        for dir in std::iter::once(self.root.clone()).chain(Collection::ALL.iter().map(|c| self.root.join(c.dir()))) {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                if entry.file_name().to_string_lossy().starts_with(TMP_PREFIX) {
                    fs::remove_file(entry.path())?;
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    /// Makes the next write stop at `point`; testing hook.
    pub fn inject_crash(&mut self, point: CrashPoint) {
        self.crash = Some(point);
    }

    fn path_of(&self, collection: Collection, id: &str) -> PathBuf {
        self.root.join(collection.dir()).join(format!("{}.json", escape_id(id)))
    }

    pub fn contains(&self, collection: Collection, id: &str) -> bool {
        self.index.collections.get(&collection).is_some_and(|s| s.contains(id))
    }

    fn write_index(&mut self) -> Result<(), StoreError> {
        let bytes = to_bytes(&self.index)?;
        let crash = self.crash.take();
        atomic_write(&self.root.join(INDEX_FILE), &bytes, crash)
    }

    fn check_writable(&self) -> Result<(), StoreError> {
        if self.lock.is_none() {
            return Err(StoreError::Locked(self.root.clone()));
        }
        Ok(())
    }

    fn check_integrity<T: Entity + 'static>(&self, entity: &T, id: &str) -> Result<(), StoreError> {
        let any = entity as &dyn std::any::Any;
        let refuse = |reason: String| StoreError::Integrity {
            collection: T::COLLECTION,
            id: id.to_owned(),
            reason,
        };
        let need = |c: Collection, rid: &str| {
            if self.contains(c, rid) {
                Ok(())
            } else {
                Err(refuse(format!("unknown {c} id {rid}")))
            }
        };
        if let Some(s) = any.downcast_ref::<Snippet>() {
            need(Collection::Documents, &s.document_id)?;
        } else if let Some(v) = any.downcast_ref::<TaxonomyVersion>() {
            for r in v.parent_id.iter().chain(&v.upstream_version_id) {
                need(Collection::Versions, r)?;
            }
        } else if let Some(r) = any.downcast_ref::<ResultSet>() {
            need(Collection::Versions, &r.version_id)?;
            let snippets: BTreeSet<&str> = r
                .runsets
                .iter()
                .map(|x| x.snippet_id.as_str())
                .chain(r.links.iter().map(|l| l.snippet_id.as_str()))
                .collect();
            for s in snippets {
                need(Collection::Snippets, s)?;
            }
        } else if let Some(r) = any.downcast_ref::<StoredRule>() {
            need(Collection::Snippets, &r.rule.snippet_id)?;
        } else if let Some(l) = any.downcast_ref::<StoredLayout>() {
            if let Some(v) = &l.version_id {
                need(Collection::Versions, v)?;
            }
        }
        Ok(())
    }

    /// Persists `entity`, replacing any previous value with the same id.
    pub fn save<T: Entity + 'static>(&mut self, entity: &T) -> Result<String, StoreError> {
        self.check_writable()?;
        let id = entity.entity_id();
        if id.is_empty() {
            return Err(StoreError::Integrity {
                collection: T::COLLECTION,
                id,
                reason: "empty id".to_owned(),
            });
        }
        self.check_integrity(entity, &id)?;
        let bytes = to_bytes(entity)?;
        let crash = self.crash.take();
        atomic_write(&self.path_of(T::COLLECTION, &id), &bytes, crash)?;
        if self
            .index
            .collections
            .entry(T::COLLECTION)
            .or_default()
            .insert(id.clone())
        {
            self.write_index()?;
        }
        Ok(id)
    }

    pub fn load<T: Entity>(&self, id: &str) -> Result<T, StoreError> {
        if !self.contains(T::COLLECTION, id) {
            return Err(StoreError::NotFound {
                collection: T::COLLECTION,
                id: id.to_owned(),
            });
        }
        Ok(serde_json::from_slice(&fs::read(self.path_of(T::COLLECTION, id))?)?)
    }

    /// Ids of one collection in sorted order.
    pub fn list(&self, collection: Collection) -> Vec<String> {
        self.index
            .collections
            .get(&collection)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Loads every entity of a kind that passes `filter`, in id order.
    pub fn load_where<T: Entity>(&self, filter: impl Fn(&T) -> bool) -> Result<Vec<T>, StoreError> {
        let mut out = Vec::new();
        for id in self.list(T::COLLECTION) {
            let e: T = self.load(&id)?;
            if filter(&e) {
                out.push(e);
            }
        }
        Ok(out)
    }

    pub fn load_all<T: Entity>(&self) -> Result<Vec<T>, StoreError> {
        self.load_where(|_| true)
    }

    pub fn delete(&mut self, collection: Collection, id: &str) -> Result<(), StoreError> {
        self.check_writable()?;
        if !self.contains(collection, id) {
            return Err(StoreError::NotFound {
                collection,
                id: id.to_owned(),
            });
        }
        self.index.collections.entry(collection).or_default().remove(id);
        self.write_index()?;
        fs::remove_file(self.path_of(collection, id))?;
        Ok(())
    }

    /// Relative paths of every persisted file, sorted.
    fn files(&self) -> Vec<String> {
        let mut out = vec![INDEX_FILE.to_owned()];
        for (c, ids) in &self.index.collections {
            for id in ids {
                out.push(format!("{}/{}.json", c.dir(), escape_id(id)));
            }
        }
        out.sort();
        out
    }

    /// Writes the workspace as a gzipped tarball.
    pub fn export(&self, archive: impl AsRef<Path>) -> Result<(), StoreError> {
        let bytes = self.export_bytes()?;
        let archive = archive.as_ref();
        if let Some(parent) = archive.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        atomic_write(&absolute(archive)?, &bytes, None)
    }

    pub fn export_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let files = self.files();
        let manifest = Manifest {
            format: FORMAT_NAME.to_owned(),
            format_version: FORMAT_VERSION,
            files: files.len(),
        };
        let gz = flate2::GzBuilder::new()
            .mtime(0)
            .write(Vec::new(), flate2::Compression::default());
        let mut tar = tar::Builder::new(gz);
        tar.mode(tar::HeaderMode::Deterministic);
        let mut append = |name: &str, data: &[u8]| -> io::Result<()> {
            let mut h = tar::Header::new_ustar();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_mtime(0);
            h.set_uid(0);
            h.set_gid(0);
            h.set_entry_type(tar::EntryType::Regular);
            h.set_cksum();
            tar.append_data(&mut h, name, data)
        };
        append(MANIFEST_FILE, &to_bytes(&manifest)?)?;
        for f in &files {
            let data = if f == INDEX_FILE {
                to_bytes(&self.index)?
            } else {
                fs::read(self.root.join(f))?
            };
            append(f, &data)?;
        }
        Ok(tar.into_inner()?.finish()?)
    }
}

fn absolute(p: &Path) -> io::Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

fn corrupt(msg: impl Into<String>) -> StoreError {
    StoreError::CorruptArchive(msg.into())
}

fn check_entity<T: Entity>(bytes: &[u8], id: &str) -> Result<(), StoreError> {
    let e: T = serde_json::from_slice(bytes).map_err(|e| corrupt(format!("{}/{id}: {e}", T::COLLECTION)))?;
    if e.entity_id() != id {
        return Err(corrupt(format!("{}/{id} holds id {}", T::COLLECTION, e.entity_id())));
    }
    Ok(())
}

fn check_file(collection: Collection, id: &str, bytes: &[u8]) -> Result<(), StoreError> {
    match collection {
        Collection::Documents => check_entity::<Document>(bytes, id),
        Collection::Snippets => check_entity::<Snippet>(bytes, id),
        Collection::Versions => check_entity::<TaxonomyVersion>(bytes, id),
        Collection::Runsets => check_entity::<ResultSet>(bytes, id),
        Collection::Rules => check_entity::<StoredRule>(bytes, id),
        Collection::Layouts => check_entity::<StoredLayout>(bytes, id),
        Collection::Cache => check_entity::<CacheEntry>(bytes, id),
    }
}

/// Reads and validates an archive fully in memory.
fn read_archive(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, StoreError> {
    let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(bytes));
    let mut files = BTreeMap::new();
    let entries = tar.entries().map_err(|e| corrupt(e.to_string()))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| corrupt(e.to_string()))?;
        if !entry.header().entry_type().is_file() {
            return Err(corrupt("non-file entry"));
        }
        let path = entry.path().map_err(|e| corrupt(e.to_string()))?.into_owned();
        if !path.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(corrupt(format!("unsafe path {}", path.display())));
        }
        let name = path.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(|e| corrupt(e.to_string()))?;
        if files.insert(name.clone(), data).is_some() {
            return Err(corrupt(format!("duplicate entry {name}")));
        }
    }
    let manifest: Manifest =
        serde_json::from_slice(files.get(MANIFEST_FILE).ok_or_else(|| corrupt("missing manifest"))?)
            .map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format != FORMAT_NAME {
        return Err(corrupt(format!("unknown format {}", manifest.format)));
    }
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::Migration {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    files.remove(MANIFEST_FILE);
    if manifest.files != files.len() {
        return Err(corrupt(format!(
            "manifest lists {} files, archive has {}",
            manifest.files,
            files.len()
        )));
    }
    let index: Index = serde_json::from_slice(files.get(INDEX_FILE).ok_or_else(|| corrupt("missing index"))?)
        .map_err(|e| corrupt(format!("index: {e}")))?;
    if index.format_version != FORMAT_VERSION {
        return Err(StoreError::Migration {
            found: index.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut expected: BTreeSet<String> = BTreeSet::from([INDEX_FILE.to_owned()]);
    for (c, ids) in &index.collections {
        for id in ids {
            let name = format!("{}/{}.json", c.dir(), escape_id(id));
            let data = files.get(&name).ok_or_else(|| corrupt(format!("missing {name}")))?;
            check_file(*c, id, data)?;
            expected.insert(name);
        }
    }
    if let Some(extra) = files.keys().find(|k| !expected.contains(*k)) {
        let known = extra
            .split_once('/')
            .and_then(|(d, _)| Collection::from_dir(d))
            .is_some();
        return Err(corrupt(format!(
            "{} {extra}",
            if known { "unindexed entry" } else { "unexpected entry" }
        )));
    }
    Ok(files)
}

/// Restores an archive into `dest`, replacing whatever workspace is there.
/// The archive is validated completely before `dest` is touched.
pub fn import_workspace(archive: impl AsRef<Path>, dest: impl AsRef<Path>) -> Result<Workspace, StoreError> {
    let bytes = fs::read(archive.as_ref())?;
    import_bytes(&bytes, dest)
}

pub fn import_bytes(bytes: &[u8], dest: impl AsRef<Path>) -> Result<Workspace, StoreError> {
    let files = read_archive(bytes)?;
    let dest = absolute(dest.as_ref())?;
    if dest.join(LOCK_FILE).exists() {
        return Err(StoreError::Locked(dest));
    }
    let parent = dest.parent().ok_or_else(|| StoreError::NotAWorkspace(dest.clone()))?;
    fs::create_dir_all(parent)?;
    let staging = tempfile::Builder::new().prefix(TMP_PREFIX).tempdir_in(parent)?;
    for c in Collection::ALL {
        fs::create_dir_all(staging.path().join(c.dir()))?;
    }
    for (name, data) in &files {
        fs::write(staging.path().join(name), data)?;
    }
    let staged = staging.keep();
    if dest.exists() {
        let backup = tempfile::Builder::new().prefix(TMP_PREFIX).tempdir_in(parent)?.keep();
        fs::remove_dir(&backup)?;
        fs::rename(&dest, &backup)?;
        if let Err(e) = fs::rename(&staged, &dest) {
            fs::rename(&backup, &dest)?;
            return Err(e.into());
        }
        fs::remove_dir_all(&backup)?;
    } else {
        fs::rename(&staged, &dest)?;
    }
    Workspace::open(&dest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use crate::corpus::parse_transcript;
    use crate::taxonomy::{RuleValue, Step, VersionStore};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn doc(id: &str) -> Document {
        parse_transcript(id, "A\thello\nB\tworld\n", None).unwrap()
    }

    fn snippet(doc: &str, n: usize) -> Snippet {
        Snippet {
            id: crate::corpus::snippet_id(doc, n),
            document_id: doc.to_owned(),
            conversation_range: [0, 1],
            topic_hint: None,
            fallback: false,
        }
    }

    fn version(step: Step) -> TaxonomyVersion {
        let mut s = VersionStore::new(Arc::new(LogicalClock::default()));
        s.create_version(step, None, &[]).unwrap()
    }

    #[test]
    fn round_trip_and_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::open(dir.path()).unwrap();
        let v = version(Step::IndicatorId);
        assert_eq!(ws.save(&v).unwrap(), "v1");
        assert_eq!(ws.load::<TaxonomyVersion>("v1").unwrap(), v);
        assert!(matches!(
            ws.load::<TaxonomyVersion>("v9"),
            Err(StoreError::NotFound {
                collection: Collection::Versions,
                ..
            })
        ));
        ws.save(&doc("d#1")).unwrap();
        assert!(dir.path().join("documents/d%231.json").is_file());
        assert_eq!(ws.list(Collection::Documents), vec!["d#1"]);
        drop(ws);
        let ro = Workspace::open_read_only(dir.path()).unwrap();
        assert_eq!(ro.load::<Document>("d#1").unwrap(), doc("d#1"));
        assert!(!ro.is_writable());
    }

    #[test]
    fn integrity_violations_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::open(dir.path()).unwrap();
        let rs = ResultSet {
            id: "result-v1".into(),
            version_id: "v1".into(),
            step: Step::IndicatorId,
            k: 1,
            runsets: vec![],
            links: vec![],
            snippet_uncertainty: BTreeMap::new(),
            prompt_counts: BTreeMap::new(),
            warnings: vec![],
            applied_rules: vec![],
        };
        assert!(matches!(ws.save(&rs), Err(StoreError::Integrity { .. })));
        assert!(matches!(ws.save(&snippet("d", 0)), Err(StoreError::Integrity { .. })));
        let rule = StoredRule {
            id: "rule-1".into(),
            rule: Rule::must_have(
                "d#0",
                RuleValue::Indicator {
                    indicator: crate::taxonomy::IndicatorKind::Driver,
                },
            ),
        };
        assert!(matches!(ws.save(&rule), Err(StoreError::Integrity { .. })));
        ws.save(&doc("d")).unwrap();
        ws.save(&snippet("d", 0)).unwrap();
        ws.save(&rule).unwrap();
        ws.save(&version(Step::IndicatorId)).unwrap();
        ws.save(&rs).unwrap();
        assert_eq!(ws.list(Collection::Runsets), vec!["result-v1"]);
    }

    #[test]
    fn lock_excludes_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        assert!(matches!(Workspace::open(dir.path()), Err(StoreError::Locked(_))));
        let mut ro = Workspace::open_read_only(dir.path()).unwrap();
        assert!(matches!(ro.save(&doc("x")), Err(StoreError::Locked(_))));
        drop(ws);
        Workspace::open(dir.path()).unwrap();
    }

    #[test]
    fn crash_before_rename_keeps_old_value() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::open(dir.path()).unwrap();
        ws.save(&doc("d")).unwrap();
        let mut changed = doc("d");
        changed.title = "changed".into();
        ws.inject_crash(CrashPoint::BeforeRename);
        assert!(matches!(ws.save(&changed), Err(StoreError::InjectedCrash)));
        assert_eq!(ws.load::<Document>("d").unwrap().title, "d");
        // a crashed first write leaves no entity behind either
        ws.inject_crash(CrashPoint::BeforeRename);
        assert!(ws.save(&doc("e")).is_err());
        drop(ws);
        let ws = Workspace::open(dir.path()).unwrap();
        assert_eq!(ws.load::<Document>("d").unwrap().title, "d");
        assert!(matches!(ws.load::<Document>("e"), Err(StoreError::NotFound { .. })));
        let stray = fs::read_dir(dir.path().join("documents"))
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with(TMP_PREFIX)
            })
            .count();
        assert_eq!(stray, 0);
    }

    #[test]
    fn export_import_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::open(dir.path().join("a")).unwrap();
        ws.save(&doc("d")).unwrap();
        ws.save(&snippet("d", 0)).unwrap();
        ws.save(&version(Step::IndicatorId)).unwrap();
        let first = ws.export_bytes().unwrap();
        ws.export(dir.path().join("a.tar.gz")).unwrap();
        assert_eq!(fs::read(dir.path().join("a.tar.gz")).unwrap(), first);
        let b = import_workspace(dir.path().join("a.tar.gz"), dir.path().join("b")).unwrap();
        assert_eq!(b.load::<Document>("d").unwrap(), doc("d"));
        assert_eq!(b.export_bytes().unwrap(), first);
    }

    #[test]
    fn empty_workspace_exports_minimal_archive() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path().join("w")).unwrap();
        let bytes = ws.export_bytes().unwrap();
        let files = read_archive(&bytes).unwrap();
        assert_eq!(files.keys().collect::<Vec<_>>(), vec![INDEX_FILE]);
        let back = import_bytes(&bytes, dir.path().join("x")).unwrap();
        assert!(Collection::ALL.iter().all(|c| back.list(*c).is_empty()));
    }

    #[test]
    fn corrupt_archive_leaves_original_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("w");
        {
            let mut ws = Workspace::open(&target).unwrap();
            ws.save(&doc("d")).unwrap();
        }
        let before = fs::read(target.join("documents/d.json")).unwrap();
        let good = {
            let ws = Workspace::open_read_only(&target).unwrap();
            ws.export_bytes().unwrap()
        };
        let mut truncated = good.clone();
        truncated.truncate(good.len() / 2);
        for bad in [truncated, b"not an archive".to_vec()] {
            assert!(import_bytes(&bad, &target).is_err());
            assert_eq!(fs::read(target.join("documents/d.json")).unwrap(), before);
        }
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(leftovers, vec!["w"]);
    }

    fn archive_with(manifest: serde_json::Value, index: &Index) -> Vec<u8> {
        let gz = flate2::GzBuilder::new().write(Vec::new(), flate2::Compression::default());
        let mut tar = tar::Builder::new(gz);
        for (name, data) in [
            (MANIFEST_FILE, serde_json::to_vec(&manifest).unwrap()),
            (INDEX_FILE, serde_json::to_vec(index).unwrap()),
        ] {
            let mut h = tar::Header::new_ustar();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_cksum();
            tar.append_data(&mut h, name, &data[..]).unwrap();
        }
        tar.into_inner().unwrap().finish().unwrap()
    }

    #[test]
    fn version_stamp_mismatch_is_a_migration_error() {
        let dir = tempfile::tempdir().unwrap();
        let old = archive_with(
            serde_json::json!({"format": FORMAT_NAME, "format_version": 0, "files": 1}),
            &Index::new(),
        );
        assert!(matches!(
            import_bytes(&old, dir.path().join("w")),
            Err(StoreError::Migration {
                found: 0,
                expected: FORMAT_VERSION
            })
        ));
        let ok = archive_with(
            serde_json::json!({"format": FORMAT_NAME, "format_version": FORMAT_VERSION, "files": 1}),
            &Index::new(),
        );
        import_bytes(&ok, dir.path().join("w")).unwrap();
    }

    #[test]
    fn archive_missing_an_indexed_file_is_corrupt() {
        let mut index = Index::new();
        index
            .collections
            .get_mut(&Collection::Documents)
            .unwrap()
            .insert("d".into());
        let bytes = archive_with(
            serde_json::json!({"format": FORMAT_NAME, "format_version": FORMAT_VERSION, "files": 1}),
            &index,
        );
        assert!(matches!(read_archive(&bytes), Err(StoreError::CorruptArchive(_))));
    }

    proptest! {
        #[test]
        fn escape_round_trips(id in "\\PC{1,24}") {
            let e = escape_id(&id);
            prop_assert!(!e.starts_with('.'));
            prop_assert!(e.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.%".contains(&b)));
            prop_assert_eq!(unescape_id(&e), Some(id));
        }
    }
}
