use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::RendezvousError;

/// Shared key/value location used to bootstrap a cluster.
///
/// Keys are `/`-separated relative names such as `c1/head.json`.
/// Implementations must be safe to use from concurrently running processes.
pub trait RendezvousStore: Send + Sync {
    /// Atomically creates `key` if it does not exist yet. Returns true when
    /// `claimant` owns the key afterwards, which includes a repeated call by
    /// the claimant that created it.
    fn try_claim(&self, key: &str, claimant: &str) -> Result<bool, RendezvousError>;

    /// True when `key` exists and was created by `claimant`.
    fn holds_claim(&self, key: &str, claimant: &str) -> Result<bool, RendezvousError>;

    /// Replaces `key` so that readers see either the old or the new value.
    fn put_atomic(&self, key: &str, bytes: &[u8]) -> Result<(), RendezvousError>;

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, RendezvousError>;

    /// Removes `key` and any claim bookkeeping. Missing keys are not an error.
    fn remove(&self, key: &str) -> Result<(), RendezvousError>;

    /// Human readable description of the backing location.
    fn describe(&self) -> String;
}

/// Store backed by a directory on a filesystem visible to every node.
///
/// Claims use the link-then-compare technique: each claimant owns an empty
/// candidate file and tries to hard-link it to the key. `link(2)` fails if
/// the target exists, and is atomic on NFS as well as local filesystems, so
/// the key ends up pointing at exactly one candidate inode.
#[derive(Debug, Clone)]
pub struct FileStore {
    root: PathBuf,
}

const CLAIMS_DIR: &str = ".claims";

impl FileStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FileStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, key: &str) -> Result<PathBuf, RendezvousError> {
        validate_key(key)?;
        Ok(self.root.join(key))
    }

    fn unreachable(&self, path: &Path, source: io::Error) -> RendezvousError {
        RendezvousError::StoreUnreachable {
            location: path.display().to_string(),
            source,
        }
    }

    fn ensure_parent(&self, path: &Path) -> Result<PathBuf, RendezvousError> {
        let parent = path.parent().expect("key paths have a parent").to_path_buf();
        fs::create_dir_all(&parent).map_err(|e| self.unreachable(&parent, e))?;
        Ok(parent)
    }

    fn candidate_path(&self, path: &Path, claimant: &str) -> Result<PathBuf, RendezvousError> {
        validate_component(claimant)?;
        let parent = path.parent().expect("key paths have a parent");
        let name = path.file_name().expect("validated key").to_string_lossy();
        Ok(parent.join(CLAIMS_DIR).join(format!("{name}.{claimant}")))
    }
}

fn same_inode(a: &fs::Metadata, b: &fs::Metadata) -> bool {
    a.dev() == b.dev() && a.ino() == b.ino()
}

impl RendezvousStore for FileStore {
    fn try_claim(&self, key: &str, claimant: &str) -> Result<bool, RendezvousError> {
        let path = self.path_of(key)?;
        let parent = self.ensure_parent(&path)?;
        let candidate = self.candidate_path(&path, claimant)?;
        let claims = parent.join(CLAIMS_DIR);
        fs::create_dir_all(&claims).map_err(|e| self.unreachable(&claims, e))?;
        OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(false)
            .open(&candidate)
            .map_err(|e| self.unreachable(&candidate, e))?;

        match fs::hard_link(&candidate, &path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => self.holds_claim(key, claimant),
            Err(e) => Err(self.unreachable(&path, e)),
        }
    }

    fn holds_claim(&self, key: &str, claimant: &str) -> Result<bool, RendezvousError> {
        let path = self.path_of(key)?;
        let candidate = self.candidate_path(&path, claimant)?;
        let held = match fs::metadata(&path) {
            Ok(m) => m,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(false),
            Err(e) => return Err(self.unreachable(&path, e)),
        };
        match fs::metadata(&candidate) {
            Ok(mine) => Ok(same_inode(&held, &mine)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(self.unreachable(&candidate, e)),
        }
    }

    fn put_atomic(&self, key: &str, bytes: &[u8]) -> Result<(), RendezvousError> {
        let path = self.path_of(key)?;
        let parent = self.ensure_parent(&path)?;
        let name = path.file_name().expect("validated key").to_string_lossy();
        let tmp = parent.join(format!(
            ".{name}.tmp.{}.{:016x}",
            std::process::id(),
            rand::rng().random::<u64>()
        ));
        let write = || -> io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            self.unreachable(&path, e)
        })
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, RendezvousError> {
        let path = self.path_of(key)?;
        match fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(self.unreachable(&path, e)),
        }
    }

    fn remove(&self, key: &str) -> Result<(), RendezvousError> {
        let path = self.path_of(key)?;
        match fs::remove_file(&path) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(self.unreachable(&path, e)),
        }
        let name = path.file_name().expect("validated key").to_string_lossy();
        let claims = path.parent().expect("key paths have a parent").join(CLAIMS_DIR);
        if let Ok(entries) = fs::read_dir(&claims) {
            let prefix = format!("{name}.");
            for entry in entries.flatten() {
                if entry.file_name().to_string_lossy().starts_with(&prefix) {
                    let _ = fs::remove_file(entry.path());
                }
            }
            let _ = fs::remove_dir(&claims);
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!("file://{}", self.root.display())
    }
}

pub fn validate_component(part: &str) -> Result<(), RendezvousError> {
    let ok = !part.is_empty()
        && part.len() <= 128
        && !part.starts_with('.')
        && part
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(RendezvousError::InvalidArgument(format!(
            "invalid store name component {part:?}"
        )))
    }
}

fn validate_key(key: &str) -> Result<(), RendezvousError> {
    if key.is_empty() {
        return Err(RendezvousError::InvalidArgument("empty key".into()));
    }
    key.split('/').try_for_each(validate_component)
}
