//! Replicated namespace of rnodes with per-rnode access control.
//!
//! An ensemble of `r` replicas (odd) holds identical path -> rnode stores.
//! Every mutation goes through the primary as one log entry and commits only
//! while a majority (`r/2 + 1`, i.e. `ceil(r/2)` for odd `r`) of replicas is
//! alive; the entry is applied on every live replica before the call returns.
//! A replica that missed entries is brought up to date with a full snapshot
//! of the primary's store. When the primary dies, the live replica with the
//! highest applied index takes over and the epoch advances.

use crate::types::{
    deserialize_rnode, parent_path, path_name, serialize_rnode, validate_path, AccessControlList,
    Guid, MalformedMetadata, ObjectId, PathError, Rnode, Timestamp,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use thiserror::Error;

/// Largest serialized rnode the service accepts.
pub const MAX_RNODE_BYTES: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetaError {
    #[error("parent directory of {0} does not exist")]
    ParentNotFound(String),
    #[error("{0} already exists")]
    AlreadyExists(String),
    #[error("permission denied on {0}")]
    PermissionDenied(String),
    #[error("quorum unavailable: {alive} replicas alive, {needed} needed")]
    QuorumUnavailable { alive: usize, needed: usize },
    #[error("{0} not found")]
    NotFound(String),
    #[error("directory {0} is not empty")]
    DirectoryNotEmpty(String),
    #[error("{0} is not a directory")]
    NotADirectory(String),
    #[error("rnode of {0} bytes exceeds the {MAX_RNODE_BYTES}-byte limit")]
    MetadataTooLarge(usize),
    #[error(transparent)]
    Malformed(#[from] MalformedMetadata),
    #[error(transparent)]
    InvalidPath(#[from] PathError),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("snapshot i/o: {0}")]
    Io(String),
}

type Store = BTreeMap<String, Arc<[u8]>>;

/// One member of the ensemble.
#[derive(Debug, Clone)]
pub struct ReplicaState {
    pub guid: Guid,
    pub alive: bool,
    pub store: Store,
    pub applied_index: u64,
}

#[derive(Debug, Clone)]
enum StoreOp {
    Put(String, Arc<[u8]>),
    Delete(String),
}

#[derive(Debug)]
struct Ensemble {
    replica_count: usize,
    replicas: Vec<ReplicaState>,
    primary: usize,
    epoch: u64,
}

impl Ensemble {
    fn quorum(&self) -> usize {
        self.replica_count / 2 + 1
    }

    fn alive(&self) -> usize {
        self.replicas.iter().filter(|r| r.alive).count()
    }

    fn check_quorum(&self) -> Result<(), MetaError> {
        let alive = self.alive();
        if alive < self.quorum() {
            return Err(MetaError::QuorumUnavailable { alive, needed: self.quorum() });
        }
        Ok(())
    }

    /// Make sure a live primary exists, handing over leadership if needed.
    fn ensure_primary(&mut self) -> Result<usize, MetaError> {
        self.check_quorum()?;
        if !self.replicas[self.primary].alive {
            let (next, _) = self
                .replicas
                .iter()
                .enumerate()
                .filter(|(_, r)| r.alive)
                // Highest applied index; lowest position breaks ties.
                .max_by(|(ia, a), (ib, b)| a.applied_index.cmp(&b.applied_index).then(ib.cmp(ia)))
                .expect("quorum implies a live replica");
            self.primary = next;
            self.epoch += 1;
            self.sync_followers();
        }
        Ok(self.primary)
    }

    fn sync_followers(&mut self) {
        let primary = self.replicas[self.primary].clone();
        for r in self.replicas.iter_mut().filter(|r| r.alive) {
            if r.applied_index != primary.applied_index || r.store.len() != primary.store.len() {
                r.store = primary.store.clone();
                r.applied_index = primary.applied_index;
            }
        }
    }

    fn commit(&mut self, ops: Vec<StoreOp>) -> Result<u64, MetaError> {
        let primary = self.ensure_primary()?;
        let base = self.replicas[primary].applied_index;
        let index = base + 1;
        for r in self.replicas.iter_mut().filter(|r| r.alive) {
            if r.applied_index == base {
                apply(&mut r.store, &ops);
                r.applied_index = index;
            }
        }
        // Stragglers that were behind receive the primary's full store.
        self.sync_followers();
        Ok(index)
    }

    fn read(&mut self, path: &str) -> Result<Option<Rnode>, MetaError> {
        let primary = self.ensure_primary()?;
        self.replicas[primary]
            .store
            .get(path)
            .map(|bytes| deserialize_rnode(bytes).map_err(MetaError::from))
            .transpose()
    }
}

fn apply(store: &mut Store, ops: &[StoreOp]) {
    for op in ops {
        match op {
            StoreOp::Put(path, bytes) => {
                store.insert(path.clone(), bytes.clone());
            }
            StoreOp::Delete(path) => {
                store.remove(path);
            }
        }
    }
}

fn encode(rnode: &Rnode) -> Result<StoreOp, MetaError> {
    rnode.validate()?;
    let bytes = serialize_rnode(rnode);
    if bytes.len() > MAX_RNODE_BYTES {
        return Err(MetaError::MetadataTooLarge(bytes.len()));
    }
    Ok(StoreOp::Put(rnode.file_path.clone(), bytes.into()))
}

/// Handle to the replicated namespace. Cheap to share behind an `Arc`.
#[derive(Debug)]
pub struct MetadataCluster {
    inner: Mutex<Ensemble>,
}

impl MetadataCluster {
    /// A fresh ensemble whose root directory carries `root_acl`.
    pub fn new(replicas: Vec<Guid>, root_acl: AccessControlList, now: Timestamp) -> Result<Self, MetaError> {
        let r = replicas.len();
        if r == 0 || r % 2 == 0 {
            return Err(MetaError::InvalidParameters(format!("replica count must be odd, got {r}")));
        }
        if replicas.iter().collect::<BTreeSet<_>>().len() != r {
            return Err(MetaError::InvalidParameters("duplicate replica GUID".into()));
        }
        let root = Rnode::directory(ObjectId::from_bytes([0; 16]), "/", root_acl, now);
        let mut store = Store::new();
        if let StoreOp::Put(path, bytes) = encode(&root)? {
            store.insert(path, bytes);
        }
        let replicas = replicas
            .into_iter()
            .map(|guid| ReplicaState { guid, alive: true, store: store.clone(), applied_index: 0 })
            .collect();
        Ok(MetadataCluster {
            inner: Mutex::new(Ensemble { replica_count: r, replicas, primary: 0, epoch: 0 }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Ensemble> {
        self.inner.lock().expect("metadata ensemble poisoned")
    }

    pub fn replica_count(&self) -> usize {
        self.lock().replica_count
    }

    pub fn epoch(&self) -> u64 {
        self.lock().epoch
    }

    pub fn primary(&self) -> Guid {
        let e = self.lock();
        e.replicas[e.primary].guid.clone()
    }

    /// Insert a new rnode under its existing parent directory.
    pub fn create_rnode(&self, path: &str, rnode: &Rnode, caller: &Guid) -> Result<u64, MetaError> {
        validate_path(path)?;
        if rnode.file_path != path {
            return Err(MetaError::InvalidParameters(format!(
                "rnode path {} does not match {path}",
                rnode.file_path
            )));
        }
        let parent_path = parent_path(path).ok_or_else(|| MetaError::AlreadyExists("/".into()))?;
        let mut e = self.lock();
        let mut parent = match e.read(parent_path)? {
            Some(p) if p.is_dir() => p,
            Some(_) => return Err(MetaError::NotADirectory(parent_path.into())),
            None => return Err(MetaError::ParentNotFound(path.into())),
        };
        if !parent.permission.allows(caller) {
            return Err(MetaError::PermissionDenied(parent_path.into()));
        }
        if e.read(path)?.is_some() {
            return Err(MetaError::AlreadyExists(path.into()));
        }
        let name = path_name(path).to_string();
        if rnode.is_dir() {
            parent.folder_list.push(name);
        } else {
            parent.file_list.push(name);
        }
        let ops = vec![encode(rnode)?, encode(&parent)?];
        e.commit(ops)
    }

    /// Replace an existing file rnode (a newer version of the same file).
    pub fn update_rnode(&self, path: &str, rnode: &Rnode, caller: &Guid) -> Result<u64, MetaError> {
        validate_path(path)?;
        let mut e = self.lock();
        let current = e.read(path)?.ok_or_else(|| MetaError::NotFound(path.into()))?;
        if current.is_dir() || rnode.is_dir() || rnode.file_path != path {
            return Err(MetaError::InvalidParameters(format!("{path}: only file rnodes are updated in place")));
        }
        if !current.permission.allows(caller) {
            return Err(MetaError::PermissionDenied(path.into()));
        }
        let op = encode(rnode)?;
        e.commit(vec![op])
    }

    pub fn get_rnode(&self, path: &str, caller: &Guid) -> Result<Rnode, MetaError> {
        validate_path(path)?;
        let rnode = self.lock().read(path)?.ok_or_else(|| MetaError::NotFound(path.into()))?;
        if !rnode.permission.allows(caller) {
            return Err(MetaError::PermissionDenied(path.into()));
        }
        Ok(rnode)
    }

    pub fn exists(&self, path: &str) -> Result<bool, MetaError> {
        validate_path(path)?;
        Ok(self.lock().read(path)?.is_some())
    }

    /// Remove an rnode and its entry in the parent. Directories must be empty.
    pub fn delete_rnode(&self, path: &str, caller: &Guid) -> Result<u64, MetaError> {
        validate_path(path)?;
        let parent_path =
            parent_path(path).ok_or_else(|| MetaError::InvalidParameters("the root cannot be removed".into()))?;
        let mut e = self.lock();
        let target = e.read(path)?.ok_or_else(|| MetaError::NotFound(path.into()))?;
        if !target.permission.allows(caller) {
            return Err(MetaError::PermissionDenied(path.into()));
        }
        if target.is_dir() && !(target.file_list.is_empty() && target.folder_list.is_empty()) {
            return Err(MetaError::DirectoryNotEmpty(path.into()));
        }
        let mut parent = e.read(parent_path)?.ok_or_else(|| MetaError::ParentNotFound(path.into()))?;
        let name = path_name(path);
        parent.file_list.retain(|n| n != name);
        parent.folder_list.retain(|n| n != name);
        let ops = vec![StoreOp::Delete(path.into()), encode(&parent)?];
        e.commit(ops)
    }

    /// Replace the ACL of one rnode. Only its owner may do this; children keep theirs.
    pub fn set_acl(&self, path: &str, acl: AccessControlList, caller: &Guid) -> Result<u64, MetaError> {
        validate_path(path)?;
        acl.validate()?;
        let mut e = self.lock();
        let mut rnode = e.read(path)?.ok_or_else(|| MetaError::NotFound(path.into()))?;
        if rnode.permission.owner != *caller {
            return Err(MetaError::PermissionDenied(path.into()));
        }
        rnode.permission = acl;
        let op = encode(&rnode)?;
        e.commit(vec![op])
    }

    pub fn get_acl(&self, path: &str, caller: &Guid) -> Result<AccessControlList, MetaError> {
        Ok(self.get_rnode(path, caller)?.permission)
    }

    /// `(folders, files)` of a directory.
    pub fn list(&self, path: &str, caller: &Guid) -> Result<(Vec<String>, Vec<String>), MetaError> {
        let rnode = self.get_rnode(path, caller)?;
        if !rnode.is_dir() {
            return Err(MetaError::NotADirectory(path.into()));
        }
        Ok((rnode.folder_list, rnode.file_list))
    }

    /// File ids of every file rnode, read from the primary.
    pub fn file_ids(&self) -> Result<BTreeSet<ObjectId>, MetaError> {
        let mut e = self.lock();
        let primary = e.ensure_primary()?;
        let mut ids = BTreeSet::new();
        for bytes in e.replicas[primary].store.values() {
            let rnode = deserialize_rnode(bytes)?;
            if !rnode.is_dir() {
                ids.insert(rnode.file_id);
            }
        }
        Ok(ids)
    }

    /// Mark a replica as crashed or partitioned away.
    pub fn fail_replica(&self, guid: &Guid) -> Result<(), MetaError> {
        let mut e = self.lock();
        let r = e
            .replicas
            .iter_mut()
            .find(|r| r.guid == *guid)
            .ok_or_else(|| MetaError::NotFound(guid.to_string()))?;
        r.alive = false;
        Ok(())
    }

    /// Bring a replica back; it catches up from the primary when a quorum exists.
    pub fn revive_replica(&self, guid: &Guid) -> Result<(), MetaError> {
        let mut e = self.lock();
        let r = e
            .replicas
            .iter_mut()
            .find(|r| r.guid == *guid)
            .ok_or_else(|| MetaError::NotFound(guid.to_string()))?;
        r.alive = true;
        if e.ensure_primary().is_ok() {
            e.sync_followers();
        }
        Ok(())
    }

    /// Replace failed replicas with new candidates, restoring `r` members.
    ///
    /// Refuses with `QuorumUnavailable` unless a majority of the current
    /// ensemble survives the failures, since the surviving members are the
    /// only source of committed data. Returns the new epoch.
    pub fn reform_ensemble(&self, failed: &BTreeSet<Guid>, candidates: &[Guid]) -> Result<u64, MetaError> {
        let mut e = self.lock();
        let survivors: Vec<usize> = (0..e.replicas.len())
            .filter(|&i| e.replicas[i].alive && !failed.contains(&e.replicas[i].guid))
            .collect();
        if survivors.len() < e.quorum() {
            return Err(MetaError::QuorumUnavailable { alive: survivors.len(), needed: e.quorum() });
        }
        let members: BTreeSet<&Guid> = e.replicas.iter().map(|r| &r.guid).collect();
        let fresh: Vec<Guid> = candidates
            .iter()
            .filter(|c| !members.contains(c) && !failed.contains(c))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let missing = e.replica_count - survivors.len();
        if fresh.len() < missing {
            return Err(MetaError::InvalidParameters(format!(
                "{missing} replacement replicas needed, {} candidates offered",
                fresh.len()
            )));
        }
        for r in e.replicas.iter_mut().filter(|r| failed.contains(&r.guid)) {
            r.alive = false;
        }
        e.ensure_primary()?;
        let leader = e.replicas[e.primary].clone();
        e.replicas.retain(|r| r.alive);
        e.primary = e.replicas.iter().position(|r| r.guid == leader.guid).expect("leader survives");
        // Keep the candidate order the caller gave for deterministic replays.
        let chosen: Vec<Guid> = candidates.iter().filter(|c| fresh.contains(c)).take(missing).cloned().collect();
        for guid in chosen {
            e.replicas.push(ReplicaState {
                guid,
                alive: true,
                store: leader.store.clone(),
                applied_index: leader.applied_index,
            });
        }
        e.sync_followers();
        e.epoch += 1;
        Ok(e.epoch)
    }

    /// Copies of every replica, for inspection and convergence checks.
    pub fn replicas(&self) -> Vec<ReplicaState> {
        self.lock().replicas.clone()
    }

    /// True when every live replica holds a byte-identical store.
    pub fn live_stores_converged(&self) -> bool {
        let e = self.lock();
        let mut live = e.replicas.iter().filter(|r| r.alive);
        match live.next() {
            None => true,
            Some(first) => live.all(|r| r.store == first.store && r.applied_index == first.applied_index),
        }
    }

    /// Write one `<guid>.json` file per replica into `dir`.
    pub fn snapshot_to_dir(&self, dir: &Path) -> Result<(), MetaError> {
        let e = self.lock();
        std::fs::create_dir_all(dir).map_err(|err| MetaError::Io(err.to_string()))?;
        for (i, r) in e.replicas.iter().enumerate() {
            let store = r
                .store
                .iter()
                .map(|(path, bytes)| {
                    let value: serde_json::Value =
                        serde_json::from_slice(bytes).map_err(|err| MetaError::Io(err.to_string()))?;
                    Ok((path.clone(), value))
                })
                .collect::<Result<BTreeMap<_, _>, MetaError>>()?;
            let snap = ReplicaSnapshot {
                guid: r.guid.clone(),
                alive: r.alive,
                primary: i == e.primary,
                epoch: e.epoch,
                applied_index: r.applied_index,
                store,
            };
            let text = serde_json::to_vec_pretty(&snap).map_err(|err| MetaError::Io(err.to_string()))?;
            std::fs::write(dir.join(format!("{}.json", r.guid)), text)
                .map_err(|err| MetaError::Io(err.to_string()))?;
        }
        Ok(())
    }

    /// Rebuild an ensemble from [`snapshot_to_dir`](Self::snapshot_to_dir) output.
    pub fn from_snapshot_dir(dir: &Path) -> Result<Self, MetaError> {
        let mut snaps = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|err| MetaError::Io(err.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|err| MetaError::Io(err.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|err| MetaError::Io(err.to_string()))?;
            let snap: ReplicaSnapshot =
                serde_json::from_slice(&bytes).map_err(|err| MetaError::Io(format!("{}: {err}", path.display())))?;
            snaps.push(snap);
        }
        snaps.sort_by(|a, b| a.guid.cmp(&b.guid));
        let r = snaps.len();
        if r == 0 || r % 2 == 0 {
            return Err(MetaError::InvalidParameters(format!("snapshot holds {r} replicas, need an odd count")));
        }
        let epoch = snaps.iter().map(|s| s.epoch).max().unwrap_or(0);
        let primary = snaps.iter().position(|s| s.primary).unwrap_or(0);
        let mut replicas = Vec::with_capacity(r);
        for s in snaps {
            let mut store = Store::new();
            for (path, value) in s.store {
                let rnode: Rnode = serde_json::from_value(value).map_err(|err| MetaError::Io(err.to_string()))?;
                rnode.validate()?;
                store.insert(path, serialize_rnode(&rnode).into());
            }
            replicas.push(ReplicaState { guid: s.guid, alive: s.alive, store, applied_index: s.applied_index });
        }
        Ok(MetadataCluster { inner: Mutex::new(Ensemble { replica_count: r, replicas, primary, epoch }) })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ReplicaSnapshot {
    guid: Guid,
    alive: bool,
    primary: bool,
    epoch: u64,
    applied_index: u64,
    store: BTreeMap<String, serde_json::Value>,
}
