//! Blob storage behind the registry.
//!
//! Keys are `/`-separated UTF-8 paths. Empty, `.` and `..` segments are
//! rejected, as are segments starting with `.tmp-` (reserved for staged
//! writes).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid key {key:?}: {reason}")]
    Key { key: String, reason: &'static str },
    #[error("no blob at {0:?}")]
    NotFound(String),
    #[error("storage failure at {key:?}: {source}")]
    Io {
        key: String,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    fn io(key: impl Into<String>, source: io::Error) -> Self {
        StoreError::Io {
            key: key.into(),
            source,
        }
    }
}

pub type StoreResult<T> = std::result::Result<T, StoreError>;

/// Byte storage addressed by path-like keys. Implementations must be safe
/// for concurrent use on distinct keys.
pub trait BlobStore: Send + Sync {
    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()>;
    fn get(&self, key: &str) -> StoreResult<Vec<u8>>;
    fn exists(&self, key: &str) -> StoreResult<bool>;
    fn delete(&self, key: &str) -> StoreResult<()>;
    /// Keys under `prefix` (a directory-style prefix, may be empty), sorted.
    fn list(&self, prefix: &str) -> StoreResult<Vec<String>>;
}

const TEMP_PREFIX: &str = ".tmp-";

pub fn validate_key(key: &str) -> StoreResult<()> {
    let bad = |reason| {
        Err(StoreError::Key {
            key: key.to_owned(),
            reason,
        })
    };
    if key.is_empty() {
        return bad("empty key");
    }
    if key.contains('\\') || key.contains('\0') {
        return bad("backslash or NUL");
    }
    for seg in key.split('/') {
        match seg {
            "" => return bad("empty segment"),
            "." | ".." => return bad("relative segment"),
            s if s.starts_with(TEMP_PREFIX) => return bad("reserved segment prefix"),
            _ => {}
        }
    }
    Ok(())
}

fn validate_prefix(prefix: &str) -> StoreResult<()> {
    let trimmed = prefix.trim_end_matches('/');
    if trimmed.is_empty() {
        Ok(())
    } else {
        validate_key(trimmed)
    }
}

/// Filesystem-backed store rooted at a directory. Writes go to a temporary
/// sibling file which is fsynced and renamed over the destination.
#[derive(Debug, Clone)]
pub struct FsStore {
    root: PathBuf,
}

/// A write that has reached disk under a temporary name but is not yet
/// visible under its key.
pub struct StagedWrite {
    key: String,
    temp: tempfile::NamedTempFile,
    dest: PathBuf,
}

impl StagedWrite {
    pub fn commit(self) -> StoreResult<()> {
        let StagedWrite { key, temp, dest } = self;
        temp.persist(&dest)
            .map_err(|e| StoreError::io(key.clone(), e.error))?;
        if let Some(parent) = dest.parent() {
            sync_dir(parent).map_err(|e| StoreError::io(key, e))?;
        }
        Ok(())
    }

    /// Leaves the temporary file on disk without publishing it, as a process
    /// dying between the write and the rename would.
    pub fn abandon(self) -> PathBuf {
        match self.temp.keep() {
            Ok((_, path)) => path,
            Err(e) => e.file.path().to_path_buf(),
        }
    }
}

#[cfg(unix)]
fn sync_dir(dir: &Path) -> io::Result<()> {
    fs::File::open(dir)?.sync_all()
}

#[cfg(not(unix))]
fn sync_dir(_dir: &Path) -> io::Result<()> {
    Ok(())
}

impl FsStore {
    /// Opens (creating if needed) a store under `root`, verifying that it is
    /// writable.
    pub fn open(root: impl Into<PathBuf>) -> StoreResult<Self> {
        let root = root.into();
        let label = root.display().to_string();
        fs::create_dir_all(&root).map_err(|e| StoreError::io(label.clone(), e))?;
        tempfile::Builder::new()
            .prefix(TEMP_PREFIX)
            .tempfile_in(&root)
            .map_err(|e| StoreError::io(label, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, key: &str) -> StoreResult<PathBuf> {
        validate_key(key)?;
        Ok(key.split('/').fold(self.root.clone(), |p, s| p.join(s)))
    }

    pub fn stage(&self, key: &str, bytes: &[u8]) -> StoreResult<StagedWrite> {
        let dest = self.path_of(key)?;
        let parent = dest.parent().expect("key has at least one segment");
        fs::create_dir_all(parent).map_err(|e| StoreError::io(key, e))?;
        let mut temp = tempfile::Builder::new()
            .prefix(TEMP_PREFIX)
            .tempfile_in(parent)
            .map_err(|e| StoreError::io(key, e))?;
        temp.write_all(bytes)
            .and_then(|_| temp.as_file().sync_all())
            .map_err(|e| StoreError::io(key, e))?;
        Ok(StagedWrite {
            key: key.to_owned(),
            temp,
            dest,
        })
    }

    fn walk(&self, dir: &Path, rel: &str, out: &mut Vec<String>) -> io::Result<()> {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let Ok(name) = entry.file_name().into_string() else {
                continue;
            };
            if name.starts_with(TEMP_PREFIX) {
                continue;
            }
            let key = if rel.is_empty() {
                name.clone()
            } else {
                format!("{rel}/{name}")
            };
            if entry.file_type()?.is_dir() {
                self.walk(&entry.path(), &key, out)?;
            } else {
                out.push(key);
            }
        }
        Ok(())
    }
}

impl BlobStore for FsStore {
    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()> {
        self.stage(key, bytes)?.commit()
    }

    fn get(&self, key: &str) -> StoreResult<Vec<u8>> {
        let path = self.path_of(key)?;
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(key.into())),
            Err(e) => Err(StoreError::io(key, e)),
        }
    }

    fn exists(&self, key: &str) -> StoreResult<bool> {
        Ok(self.path_of(key)?.is_file())
    }

    fn delete(&self, key: &str) -> StoreResult<()> {
        match fs::remove_file(self.path_of(key)?) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(key.into())),
            Err(e) => Err(StoreError::io(key, e)),
        }
    }

    fn list(&self, prefix: &str) -> StoreResult<Vec<String>> {
        validate_prefix(prefix)?;
        let rel = prefix.trim_end_matches('/');
        let dir = if rel.is_empty() {
            self.root.clone()
        } else {
            self.path_of(rel)?
        };
        let mut out = Vec::new();
        self.walk(&dir, rel, &mut out)
            .map_err(|e| StoreError::io(prefix, e))?;
        out.sort();
        Ok(out)
    }
}

/// In-memory store, mainly for tests and embedded runs.
#[derive(Debug, Default)]
pub struct MemStore {
    blobs: RwLock<BTreeMap<String, Vec<u8>>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BlobStore for MemStore {
    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()> {
        validate_key(key)?;
        self.blobs
            .write()
            .unwrap()
            .insert(key.to_owned(), bytes.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> StoreResult<Vec<u8>> {
        validate_key(key)?;
        self.blobs
            .read()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.into()))
    }

    fn exists(&self, key: &str) -> StoreResult<bool> {
        validate_key(key)?;
        Ok(self.blobs.read().unwrap().contains_key(key))
    }

    fn delete(&self, key: &str) -> StoreResult<()> {
        validate_key(key)?;
        self.blobs
            .write()
            .unwrap()
            .remove(key)
            .map(|_| ())
            .ok_or_else(|| StoreError::NotFound(key.into()))
    }

    fn list(&self, prefix: &str) -> StoreResult<Vec<String>> {
        validate_prefix(prefix)?;
        let rel = prefix.trim_end_matches('/');
        let dir = format!("{rel}/");
        Ok(self
            .blobs
            .read()
            .unwrap()
            .keys()
            .filter(|k| rel.is_empty() || k.starts_with(&dir))
            .cloned()
            .collect())
    }
}
