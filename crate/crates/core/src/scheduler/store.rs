use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::SchedulerError;

pub const EXTERNAL_PRODUCER: &str = "external";

/// Immutable blob held by the head's object store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub artifact_id: String,
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub size: usize,
    pub producer: String,
    pub created_at: f64,
}

impl Artifact {
    pub fn new(artifact_id: impl Into<String>, bytes: Vec<u8>, producer: impl Into<String>) -> Self {
        Artifact {
            artifact_id: artifact_id.into(),
            size: bytes.len(),
            bytes,
            producer: producer.into(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        }
    }
}

/// Write-once artifact map. Cheap to clone; clones share storage, and reads
/// may run concurrently with writes of other ids.
#[derive(Debug, Clone, Default)]
pub struct ObjectStore {
    inner: Arc<RwLock<HashMap<String, Arc<Artifact>>>>,
}

impl ObjectStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, artifact: Artifact) -> Result<(), SchedulerError> {
        let mut map = self.inner.write().expect("object store lock poisoned");
        if map.contains_key(&artifact.artifact_id) {
            return Err(SchedulerError::DuplicateArtifact(artifact.artifact_id));
        }
        map.insert(artifact.artifact_id.clone(), Arc::new(artifact));
        Ok(())
    }

    pub fn get(&self, artifact_id: &str) -> Result<Arc<Artifact>, SchedulerError> {
        self.inner
            .read()
            .expect("object store lock poisoned")
            .get(artifact_id)
            .cloned()
            .ok_or_else(|| SchedulerError::NotFound(artifact_id.to_string()))
    }

    pub fn contains(&self, artifact_id: &str) -> bool {
        self.inner
            .read()
            .expect("object store lock poisoned")
            .contains_key(artifact_id)
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self
            .inner
            .read()
            .expect("object store lock poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("object store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn put_artifact(store: &ObjectStore, artifact: Artifact) -> Result<(), SchedulerError> {
    store.put(artifact)
}

pub fn get_artifact(store: &ObjectStore, artifact_id: &str) -> Result<Arc<Artifact>, SchedulerError> {
    store.get(artifact_id)
}
