//! Workload bundles: a tar archive whose first member is `manifest.json`, a
//! map from entry name to SHA-256 hex digest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::FabricError;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const STAGE_DIR: &str = "bundle";

pub type Manifest = BTreeMap<String, String>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_entry_name(name: &str) -> Result<(), FabricError> {
    let path = Path::new(name);
    let ok = !name.is_empty()
        && name != MANIFEST_NAME
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(FabricError::InvalidBundle(format!("bad entry name {name:?}")))
    }
}

/// Immutable set of named payloads plus their digests.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bundle {
    manifest: Manifest,
    entries: BTreeMap<String, Vec<u8>>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_entry(mut self, name: &str, bytes: impl Into<Vec<u8>>) -> Result<Self, FabricError> {
        check_entry_name(name)?;
        let bytes = bytes.into();
        self.manifest.insert(name.to_string(), sha256_hex(&bytes));
        self.entries.insert(name.to_string(), bytes);
        Ok(self)
    }

    /// Assembles a bundle from an explicit manifest without recomputing
    /// digests. [`Bundle::verify`] reports any disagreement.
    pub fn from_parts(manifest: Manifest, entries: BTreeMap<String, Vec<u8>>) -> Self {
        Bundle { manifest, entries }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn verify(&self) -> Result<(), FabricError> {
        if self.manifest.len() != self.entries.len()
            || self.manifest.keys().ne(self.entries.keys())
        {
            return Err(FabricError::InvalidBundle(
                "manifest and entries name different files".into(),
            ));
        }
        for (name, bytes) in &self.entries {
            check_entry_name(name)?;
            if sha256_hex(bytes) != self.manifest[name] {
                return Err(FabricError::InvalidBundle(format!("digest mismatch for {name}")));
            }
        }
        Ok(())
    }

    /// Packs every regular file under `dir`, using `/`-joined relative paths.
    pub fn from_dir(dir: &Path) -> Result<Self, FabricError> {
        let mut bundle = Bundle::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).map_err(|e| FabricError::io(&d, e))? {
                let entry = entry.map_err(|e| FabricError::io(&d, e))?;
                let path = entry.path();
                let ty = entry.file_type().map_err(|e| FabricError::io(&path, e))?;
                if ty.is_dir() {
                    stack.push(path);
                } else if ty.is_file() {
                    let rel = path
                        .strip_prefix(dir)
                        .expect("walked below dir")
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/");
                    let bytes = fs::read(&path).map_err(|e| FabricError::io(&path, e))?;
                    bundle = bundle.with_entry(&rel, bytes)?;
                }
            }
        }
        Ok(bundle)
    }

    /// Loads a bundle from a tar archive or, for a directory, packs it.
    pub fn load(path: &Path) -> Result<Self, FabricError> {
        if path.is_dir() {
            Self::from_dir(path)
        } else {
            let bytes = fs::read(path).map_err(|e| FabricError::io(path, e))?;
            Self::from_archive(&bytes)
        }
    }

    pub fn to_archive(&self) -> Result<Vec<u8>, FabricError> {
        let mut builder = tar::Builder::new(Vec::new());
        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        let mut append = |name: &str, data: &[u8]| -> io::Result<()> {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_entry_type(tar::EntryType::Regular);
            builder.append_data(&mut header, name, data)
        };
        let wrap = |e: io::Error| FabricError::InvalidBundle(e.to_string());
        append(MANIFEST_NAME, &manifest).map_err(wrap)?;
        for (name, bytes) in &self.entries {
            append(name, bytes).map_err(wrap)?;
        }
        builder.into_inner().map_err(wrap)
    }

    pub fn from_archive(bytes: &[u8]) -> Result<Self, FabricError> {
        let bad = |m: String| FabricError::InvalidBundle(m);
        let mut archive = tar::Archive::new(bytes);
        let mut manifest: Option<Manifest> = None;
        let mut entries = BTreeMap::new();
        for entry in archive.entries().map_err(|e| bad(e.to_string()))? {
            let mut entry = entry.map_err(|e| bad(e.to_string()))?;
            if !entry.header().entry_type().is_file() {
                continue;
            }
            let name = entry
                .path()
                .map_err(|e| bad(e.to_string()))?
                .to_string_lossy()
                .into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(|e| bad(e.to_string()))?;
            if name == MANIFEST_NAME {
                manifest = Some(serde_json::from_slice(&data).map_err(|e| bad(e.to_string()))?);
            } else {
                check_entry_name(&name)?;
                entries.insert(name, data);
            }
        }
        let bundle = Bundle {
            manifest: manifest.ok_or_else(|| bad("archive has no manifest.json".into()))?,
            entries,
        };
        bundle.verify()?;
        Ok(bundle)
    }
}

pub fn stage_dir(sandbox: &Path) -> PathBuf {
    sandbox.join(STAGE_DIR)
}

/// Writes `bundle` into `sandbox/bundle`, skipping files that already have
/// the right digest, and verifies every file by reading it back. The
/// manifest is written last and marks the stage as complete.
pub(crate) fn stage_into(sandbox: &Path, node_index: u32, bundle: &Bundle) -> Result<usize, FabricError> {
    let dir = stage_dir(sandbox);
    fs::create_dir_all(&dir).map_err(|e| FabricError::StagingFailed(node_index, e.to_string()))?;
    let fail = |e: io::Error| FabricError::StagingFailed(node_index, e.to_string());
    for (name, bytes) in bundle.entries() {
        let target = dir.join(name);
        let current = fs::read(&target).ok().map(|b| sha256_hex(&b));
        if current.as_deref() != Some(bundle.manifest()[name].as_str()) {
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(fail)?;
            }
            let tmp = target.with_extension("staging");
            fs::write(&tmp, bytes).map_err(fail)?;
            fs::rename(&tmp, &target).map_err(fail)?;
        }
    }
    let count = verify_files(&dir, bundle.manifest()).map_err(|e| match e {
        FabricError::DigestMismatch { entry, .. } => FabricError::DigestMismatch { node_index, entry },
        other => other,
    })?;
    let tmp = dir.join(".manifest.staging");
    let manifest = serde_json::to_vec_pretty(bundle.manifest()).expect("manifest serializes");
    fs::write(&tmp, manifest).map_err(fail)?;
    fs::rename(&tmp, dir.join(MANIFEST_NAME)).map_err(fail)?;
    Ok(count)
}

fn verify_files(dir: &Path, manifest: &Manifest) -> Result<usize, FabricError> {
    for (name, digest) in manifest {
        let path = dir.join(name);
        let ok = fs::read(&path).map(|b| sha256_hex(&b) == *digest).unwrap_or(false);
        if !ok {
            return Err(FabricError::DigestMismatch {
                node_index: u32::MAX,
                entry: name.clone(),
            });
        }
    }
    Ok(manifest.len())
}

/// Checks a staged copy against its own manifest.
pub fn verify_staged(sandbox: &Path, node_index: u32) -> Result<Manifest, FabricError> {
    let dir = stage_dir(sandbox);
    let raw = fs::read(dir.join(MANIFEST_NAME)).map_err(|e| FabricError::io(&dir, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| FabricError::InvalidBundle(e.to_string()))?;
    verify_files(&dir, &manifest).map_err(|e| match e {
        FabricError::DigestMismatch { entry, .. } => FabricError::DigestMismatch { node_index, entry },
        other => other,
    })?;
    Ok(manifest)
}

/// Blocks until the sandbox holds a completely staged bundle, then verifies it.
pub fn wait_for_staged(sandbox: &Path, timeout: Duration) -> Result<Manifest, FabricError> {
    let marker = stage_dir(sandbox).join(MANIFEST_NAME);
    let start = Instant::now();
    while !marker.exists() {
        if start.elapsed() >= timeout {
            return Err(FabricError::StagingFailed(
                u32::MAX,
                format!("no staged bundle in {} after {timeout:?}", sandbox.display()),
            ));
        }
        thread::sleep(Duration::from_millis(25));
    }
    verify_staged(sandbox, u32::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bundle {
        Bundle::new()
            .with_entry("workload.json", br#"{"jobs":[]}"#.to_vec())
            .unwrap()
            .with_entry("config/env.toml", b"x = 1".to_vec())
            .unwrap()
            .with_entry("bin/run.sh", b"#!/bin/sh\n".to_vec())
            .unwrap()
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn archive_starts_with_manifest_and_round_trips() {
        let b = sample();
        let tar_bytes = b.to_archive().unwrap();
        let mut ar = tar::Archive::new(tar_bytes.as_slice());
        let first = ar.entries().unwrap().next().unwrap().unwrap();
        assert_eq!(first.path().unwrap().to_str().unwrap(), MANIFEST_NAME);
        assert_eq!(Bundle::from_archive(&tar_bytes).unwrap(), b);
    }

    #[test]
    fn tampered_archive_is_rejected() {
        let mut entries: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        entries.insert("a".into(), b"evil".to_vec());
        let mut manifest = Manifest::new();
        manifest.insert("a".into(), sha256_hex(b"good"));
        let bytes = Bundle::from_parts(manifest, entries).to_archive().unwrap();
        assert!(matches!(Bundle::from_archive(&bytes), Err(FabricError::InvalidBundle(_))));
    }

    #[test]
    fn entry_names_cannot_escape() {
        for bad in ["../x", "/etc/passwd", "", "manifest.json", "a/../../b"] {
            assert!(Bundle::new().with_entry(bad, vec![]).is_err(), "{bad}");
        }
    }

    #[test]
    fn dir_packing_uses_relative_names() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("top.txt"), b"t").unwrap();
        fs::write(dir.path().join("sub/inner.txt"), b"i").unwrap();
        let b = Bundle::from_dir(dir.path()).unwrap();
        let names: Vec<_> = b.manifest().keys().cloned().collect();
        assert_eq!(names, ["sub/inner.txt", "top.txt"]);
    }

    #[test]
    fn stage_is_idempotent_and_detects_corruption() {
        let sb = tempfile::tempdir().unwrap();
        let b = sample();
        assert_eq!(stage_into(sb.path(), 0, &b).unwrap(), 3);
        let digests = |p: &Path| {
            b.manifest()
                .keys()
                .map(|k| sha256_hex(&fs::read(stage_dir(p).join(k)).unwrap()))
                .collect::<Vec<_>>()
        };
        let first = digests(sb.path());
        assert_eq!(stage_into(sb.path(), 0, &b).unwrap(), 3);
        assert_eq!(digests(sb.path()), first);
        assert_eq!(verify_staged(sb.path(), 0).unwrap(), *b.manifest());

        fs::write(stage_dir(sb.path()).join("config/env.toml"), b"x = 2").unwrap();
        assert_eq!(
            verify_staged(sb.path(), 7).unwrap_err(),
            FabricError::DigestMismatch { node_index: 7, entry: "config/env.toml".into() }
        );
        // restaging repairs it
        stage_into(sb.path(), 7, &b).unwrap();
        verify_staged(sb.path(), 7).unwrap();
    }

    #[test]
    fn staging_a_lying_bundle_fails_with_digest_mismatch() {
        let sb = tempfile::tempdir().unwrap();
        let mut entries = BTreeMap::new();
        entries.insert("a".to_string(), b"payload".to_vec());
        let mut manifest = Manifest::new();
        manifest.insert("a".into(), sha256_hex(b"other"));
        let err = stage_into(sb.path(), 2, &Bundle::from_parts(manifest, entries)).unwrap_err();
        assert_eq!(err, FabricError::DigestMismatch { node_index: 2, entry: "a".into() });
        assert!(!stage_dir(sb.path()).join(MANIFEST_NAME).exists());
    }

    #[test]
    fn waiting_for_an_unstaged_sandbox_times_out() {
        let sb = tempfile::tempdir().unwrap();
        assert!(wait_for_staged(sb.path(), Duration::from_millis(100)).is_err());
    }
}
