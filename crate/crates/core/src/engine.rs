//! End-to-end put/get/rm over the metadata service and the simulated network.
//!
//! `put` splits a file into blocks, encrypts each block under a fresh file
//! key, splits that key into one shard per block, erasure-codes every
//! encrypted block into `n` fragments (fragment headers carry the block's key
//! shard), commits the rnode and only then ships fragment `j` of every block
//! to the `j`-th planned device. `get` asks the most energetic holders of each
//! block for fragments, keeping `k` requests outstanding per block and moving
//! to the next holder only when a request's TTL runs out.
//!
//! The network is stepped only by engine calls (`get`, `flush`, `advance`);
//! nothing runs in the background.

use crate::crypto::{self, CryptoError, FileKey, KeyShard};
use crate::erasure::{self, ShardSet};
use crate::metadata::{MetaError, MetadataCluster};
use crate::network::{
    Delivery, DeliveryStatus, LinkModel, MessageId, NetError, Network, NetworkConfig, Outbox, Tick, TraceEvent,
};
use crate::planner::{self, PlanError, PlannerInputs};
use crate::types::{
    AccessControlList, CodingPlan, DeviceProfile, Fragment, FragmentSlot, Guid, ObjectId, Rnode, RnodeType,
    Timestamp, FRAGMENT_HEADER_LEN,
};
use rand::SeedableRng;
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use thiserror::Error;

pub const MIB: u64 = 1 << 20;
pub const DEFAULT_BLOCK_SIZE: usize = 4 << 20;
pub const DEFAULT_REQUEST_TTL: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Metadata(#[from] MetaError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Network(#[from] NetError),
    #[error("block {block} is irrecoverable: {received} of {needed} fragments reachable")]
    IrrecoverableBlock { block: u32, received: usize, needed: usize },
    #[error("fragment or block failed its integrity check")]
    AuthenticationFailure,
    #[error("device {device} has {free} bytes free, fragment needs {needed}")]
    StorageExhausted { device: Guid, needed: u64, free: u64 },
    #[error("unknown device {0}")]
    UnknownDevice(Guid),
    #[error("{0} is a directory")]
    IsADirectory(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("state i/o: {0}")]
    Io(String),
}

impl From<CryptoError> for EngineError {
    fn from(_: CryptoError) -> Self {
        EngineError::AuthenticationFailure
    }
}

fn io_err(e: impl std::fmt::Display) -> EngineError {
    EngineError::Io(e.to_string())
}

/// What happened to an arriving fragment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalOutcome {
    Stored,
    Replaced,
    /// Older than the stored copy; discarded.
    Stale,
}

/// Fragments held by one device, bounded by its storage capacity.
#[derive(Debug, Default)]
pub struct DeviceStore {
    guid: Option<Guid>,
    capacity: u64,
    used: u64,
    fragments: BTreeMap<FragmentSlot, Fragment>,
    unicast: Vec<(MessageId, Guid, Arc<[u8]>)>,
    rejected: u64,
    /// Requests for fragments still in flight to this device.
    waiting: Vec<Waiting>,
}

#[derive(Debug)]
struct Waiting {
    id: u64,
    slot: FragmentSlot,
    requester: Guid,
    /// Last tick the request is alive, fractional.
    until: f64,
}

fn footprint(frag: &Fragment) -> u64 {
    (FRAGMENT_HEADER_LEN + frag.key_shard.len() + frag.payload.len()) as u64
}

impl DeviceStore {
    pub fn new(guid: Guid, capacity_bytes: u64) -> Self {
        DeviceStore { guid: Some(guid), capacity: capacity_bytes, ..Self::default() }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used
    }

    /// Keep `frag` unless the slot already holds a newer version.
    pub fn handle_fragment_arrival(&mut self, frag: Fragment) -> Result<ArrivalOutcome, EngineError> {
        let slot = frag.slot();
        let size = footprint(&frag);
        let old = self.fragments.get(&slot);
        if let Some(old) = old {
            if frag.time_stamp < old.time_stamp {
                return Ok(ArrivalOutcome::Stale);
            }
        }
        let released = old.map(footprint).unwrap_or(0);
        if self.used - released + size > self.capacity {
            self.rejected += 1;
            return Err(EngineError::StorageExhausted {
                device: self.guid.clone().expect("store has an owner"),
                needed: size,
                free: self.capacity - self.used + released,
            });
        }
        self.used = self.used - released + size;
        let replaced = self.fragments.insert(slot, frag).is_some();
        Ok(if replaced { ArrivalOutcome::Replaced } else { ArrivalOutcome::Stored })
    }

    pub fn fragment(&self, slot: &FragmentSlot) -> Option<&Fragment> {
        self.fragments.get(slot)
    }

    /// Direct access for fault injection.
    pub fn fragment_mut(&mut self, slot: &FragmentSlot) -> Option<&mut Fragment> {
        self.fragments.get_mut(slot)
    }

    pub fn fragments(&self) -> impl Iterator<Item = &Fragment> {
        self.fragments.values()
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    /// Drop fragments of `file_id` no newer than `up_to`.
    pub fn remove_file(&mut self, file_id: &ObjectId, up_to: Timestamp) -> usize {
        let doomed: Vec<FragmentSlot> = self
            .fragments
            .iter()
            .filter(|(s, f)| s.file_id == *file_id && f.time_stamp <= up_to)
            .map(|(s, _)| *s)
            .collect();
        for slot in &doomed {
            let f = self.fragments.remove(slot).expect("slot listed above");
            self.used -= footprint(&f);
        }
        doomed.len()
    }

    /// Arrivals refused for lack of space.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn take_unicast(&mut self) -> Vec<(MessageId, Guid, Arc<[u8]>)> {
        std::mem::take(&mut self.unicast)
    }
}

mod wire {
    use super::*;

    pub const FRAGMENT: u8 = 1;
    pub const REQUEST: u8 = 2;
    pub const REPLY: u8 = 3;
    pub const DELETE: u8 = 5;
    pub const UNICAST: u8 = 6;

    pub struct Request {
        pub id: u64,
        pub slot: FragmentSlot,
        pub ttl: f64,
    }

    pub fn fragment(frag: &Fragment) -> Vec<u8> {
        let mut out = vec![FRAGMENT];
        out.extend_from_slice(&frag.to_bytes());
        out
    }

    pub fn request(r: &Request) -> Vec<u8> {
        let mut out = vec![REQUEST];
        out.extend_from_slice(&r.id.to_be_bytes());
        out.extend_from_slice(r.slot.file_id.as_bytes());
        out.extend_from_slice(&r.slot.block_index.to_be_bytes());
        out.extend_from_slice(&r.slot.fragment_index.to_be_bytes());
        out.extend_from_slice(&r.ttl.to_bits().to_be_bytes());
        out
    }

    pub fn parse_request(b: &[u8]) -> Option<Request> {
        if b.len() != 38 {
            return None;
        }
        Some(Request {
            id: u64::from_be_bytes(b[0..8].try_into().ok()?),
            slot: FragmentSlot {
                file_id: ObjectId::from_bytes(b[8..24].try_into().ok()?),
                block_index: u32::from_be_bytes(b[24..28].try_into().ok()?),
                fragment_index: u16::from_be_bytes(b[28..30].try_into().ok()?),
            },
            ttl: f64::from_bits(u64::from_be_bytes(b[30..38].try_into().ok()?)),
        })
    }

    pub fn reply(id: u64, frag: &Fragment) -> Vec<u8> {
        let mut out = vec![REPLY];
        out.extend_from_slice(&id.to_be_bytes());
        out.extend_from_slice(&frag.to_bytes());
        out
    }

    pub fn delete(file_id: &ObjectId, up_to: Timestamp) -> Vec<u8> {
        let mut out = vec![DELETE];
        out.extend_from_slice(file_id.as_bytes());
        out.extend_from_slice(&up_to.to_be_bytes());
        out
    }
}

#[derive(Default)]
struct ReplyBox {
    wanted: HashSet<u64>,
    got: HashMap<u64, Vec<u8>>,
}

fn device_handler(store: Arc<Mutex<DeviceStore>>, replies: Arc<Mutex<ReplyBox>>, tick_length: f64) -> crate::network::Handler {
    Box::new(move |d: &Delivery, out: &mut Outbox| {
        let Some((&tag, body)) = d.payload.split_first() else { return };
        match tag {
            wire::FRAGMENT => {
                if let Ok(frag) = Fragment::from_bytes(body) {
                    let slot = frag.slot();
                    let mut store = store.lock().expect("device store poisoned");
                    // Refusals are counted by the store.
                    if store.handle_fragment_arrival(frag).is_ok() {
                        let now = d.tick as f64;
                        let held = store.fragments[&slot].clone();
                        let (ready, rest) = std::mem::take(&mut store.waiting)
                            .into_iter()
                            .filter(|w| w.until >= now)
                            .partition(|w| w.slot == slot);
                        store.waiting = rest;
                        for w in ready {
                            let ttl = (w.until - now) * tick_length;
                            out.send(d.dest.clone(), w.requester, wire::reply(w.id, &held), ttl);
                        }
                    }
                }
            }
            wire::REQUEST => {
                let Some(req) = wire::parse_request(body) else { return };
                let mut store = store.lock().expect("device store poisoned");
                match store.fragment(&req.slot).cloned() {
                    Some(frag) => out.send(d.dest.clone(), d.source.clone(), wire::reply(req.id, &frag), req.ttl),
                    // The fragment may still be on its way here; answer when it lands.
                    None => {
                        let now = d.tick as f64;
                        store.waiting.retain(|w| w.until >= now);
                        store.waiting.push(Waiting {
                            id: req.id,
                            slot: req.slot,
                            requester: d.source.clone(),
                            until: now + req.ttl / tick_length,
                        });
                    }
                }
            }
            wire::REPLY => {
                if body.len() < 8 {
                    return;
                }
                let id = u64::from_be_bytes(body[..8].try_into().expect("eight bytes"));
                let mut r = replies.lock().expect("reply box poisoned");
                if r.wanted.contains(&id) {
                    r.got.insert(id, body[8..].to_vec());
                }
            }
            wire::DELETE => {
                if body.len() == 24 {
                    let id = ObjectId::from_bytes(body[..16].try_into().expect("sixteen bytes"));
                    let up_to = u64::from_be_bytes(body[16..].try_into().expect("eight bytes"));
                    store.lock().expect("device store poisoned").remove_file(&id, up_to);
                }
            }
            wire::UNICAST => {
                let payload: Arc<[u8]> = body.into();
                store.lock().expect("device store poisoned").unicast.push((d.message, d.source.clone(), payload));
            }
            _ => {}
        }
    })
}

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}
fn default_request_ttl() -> f64 {
    DEFAULT_REQUEST_TTL
}
fn default_weight() -> f64 {
    0.8
}
fn default_lifetime() -> f64 {
    60.0
}
fn default_settle() -> Tick {
    100_000
}
fn default_epoch_ms() -> Timestamp {
    1_600_000_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EngineConfig {
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    /// Seconds a fragment request (and its reply) may live.
    #[serde(default = "default_request_ttl")]
    pub request_ttl: f64,
    /// Seconds a dispatched fragment may live; unset means forever.
    #[serde(default)]
    pub dispatch_ttl: Option<f64>,
    #[serde(default = "default_weight")]
    pub availability_weight: f64,
    /// Minutes.
    #[serde(default = "default_lifetime")]
    pub required_lifetime: f64,
    #[serde(default)]
    pub seed: u64,
    /// Upper bound on ticks `flush` will run.
    #[serde(default = "default_settle")]
    pub settle_ticks: Tick,
    /// Wall-clock origin of simulated tick 0, in milliseconds.
    #[serde(default = "default_epoch_ms")]
    pub epoch_ms: Timestamp,
}

impl Default for EngineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Everything needed to bring up an engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EngineSetup {
    pub devices: Vec<DeviceProfile>,
    pub network: NetworkConfig,
    pub metadata_replicas: Vec<Guid>,
    /// Owner of the root directory, which is world-writable.
    pub root_owner: Guid,
    #[serde(default)]
    pub config: EngineConfig,
}

impl EngineSetup {
    /// Every device linked to every other by an always-up link.
    pub fn fully_connected(devices: Vec<DeviceProfile>, config: EngineConfig) -> Self {
        let guids: Vec<Guid> = devices.iter().map(|d| d.guid.clone()).collect();
        let network = NetworkConfig::new(guids.clone(), config.seed).full_mesh(&guids, LinkModel::always_up(1, 64 << 20));
        let r = match guids.len() {
            0 => 0,
            n if n >= 3 => 3,
            _ => 1,
        };
        EngineSetup {
            metadata_replicas: guids[..r].to_vec(),
            root_owner: guids.first().cloned().unwrap_or_else(|| Guid::synthetic("root")),
            devices,
            network,
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coding {
    Adaptive,
    Fixed { k: usize, n: usize },
}

/// A file to store. Unset fields fall back to the engine configuration.
#[derive(Debug, Clone)]
pub struct PutRequest {
    pub data: Vec<u8>,
    pub rdrive_path: String,
    /// Defaults to owner-only for the caller.
    pub acl: Option<AccessControlList>,
    pub availability_weight: Option<f64>,
    pub required_lifetime: Option<f64>,
    pub block_size: Option<usize>,
    /// Seconds each fragment may spend in transit; unset uses the engine default.
    pub dispatch_ttl: Option<f64>,
    pub coding: Coding,
}

impl PutRequest {
    pub fn new(rdrive_path: impl Into<String>, data: Vec<u8>) -> Self {
        PutRequest {
            data,
            rdrive_path: rdrive_path.into(),
            acl: None,
            availability_weight: None,
            required_lifetime: None,
            block_size: None,
            dispatch_ttl: None,
            coding: Coding::Adaptive,
        }
    }

    pub fn with_acl(mut self, acl: AccessControlList) -> Self {
        self.acl = Some(acl);
        self
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.availability_weight = Some(w);
        self
    }

    pub fn with_lifetime(mut self, minutes: f64) -> Self {
        self.required_lifetime = Some(minutes);
        self
    }

    pub fn with_block_size(mut self, bytes: usize) -> Self {
        self.block_size = Some(bytes);
        self
    }

    pub fn with_coding(mut self, k: usize, n: usize) -> Self {
        self.coding = Coding::Fixed { k, n };
        self
    }
}

/// One fragment shipped by `put`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dispatch {
    pub slot: FragmentSlot,
    pub holder: Guid,
    /// `None` when the holder is the caller and the fragment was stored in place.
    pub message: Option<MessageId>,
}

#[derive(Debug, Clone)]
pub struct PutReceipt {
    pub rnode: Rnode,
    pub plan: CodingPlan,
    pub dispatches: Vec<Dispatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestOutcome {
    Replied(Tick),
    TimedOut(Tick),
    /// Still unanswered when the block completed.
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub block: u32,
    pub fragment: u16,
    pub holder: Guid,
    pub sent: Tick,
    /// Last tick at which the request is still alive.
    pub deadline: Tick,
    pub outcome: RequestOutcome,
}

#[derive(Debug, Clone, Default)]
pub struct GetStats {
    pub requests: Vec<RequestRecord>,
    /// Fragments read from the caller's own store.
    pub local_fragments: usize,
    pub started: Tick,
    pub finished: Tick,
}

/// Sorted directory contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Listing {
    pub folders: Vec<String>,
    pub files: Vec<String>,
}

impl Listing {
    /// All names, sorted.
    pub fn names(&self) -> Vec<String> {
        let mut all: Vec<String> = self.folders.iter().chain(&self.files).cloned().collect();
        all.sort();
        all
    }
}

struct Core {
    net: Network,
    rng: ChaCha20Rng,
    profiles: BTreeMap<Guid, DeviceProfile>,
    last_ts: Timestamp,
    next_request: u64,
}

pub struct StorageEngine {
    config: EngineConfig,
    network_config: NetworkConfig,
    meta: Arc<MetadataCluster>,
    stores: BTreeMap<Guid, Arc<Mutex<DeviceStore>>>,
    replies: Arc<Mutex<ReplyBox>>,
    core: Mutex<Core>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SavedEngine {
    config: EngineConfig,
    network: NetworkConfig,
    devices: Vec<SavedDevice>,
    last_time_stamp: Timestamp,
    next_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SavedDevice {
    profile: DeviceProfile,
    capacity: u64,
    alive: bool,
}

struct BlockFetch {
    have: BTreeMap<u16, Fragment>,
    untried: VecDeque<(u16, Guid)>,
    outstanding: Vec<(u64, usize)>,
}

impl StorageEngine {
    pub fn new(setup: EngineSetup) -> Result<Self, EngineError> {
        let meta = MetadataCluster::new(
            setup.metadata_replicas.clone(),
            AccessControlList::world(setup.root_owner.clone()),
            setup.config.epoch_ms,
        )?;
        let capacities = setup
            .devices
            .iter()
            .map(|d| (d.guid.clone(), (d.storage_available * MIB as f64) as u64))
            .collect();
        let seed = setup.config.seed;
        Self::assemble(setup.config, setup.network, Arc::new(meta), setup.devices, capacities, seed)
    }

    fn assemble(
        config: EngineConfig,
        network_config: NetworkConfig,
        meta: Arc<MetadataCluster>,
        devices: Vec<DeviceProfile>,
        capacities: BTreeMap<Guid, u64>,
        seed: u64,
    ) -> Result<Self, EngineError> {
        if config.block_size == 0 {
            return Err(EngineError::InvalidParameters("block size must be positive".into()));
        }
        if !(config.request_ttl > 0.0 && config.request_ttl.is_finite()) {
            return Err(EngineError::InvalidParameters("request ttl must be positive and finite".into()));
        }
        let mut net = Network::new(network_config.clone())?;
        let replies = Arc::new(Mutex::new(ReplyBox::default()));
        let mut stores = BTreeMap::new();
        let mut profiles = BTreeMap::new();
        for d in devices {
            if !net.contains(&d.guid) {
                return Err(EngineError::UnknownDevice(d.guid.clone()));
            }
            let store = Arc::new(Mutex::new(DeviceStore::new(d.guid.clone(), capacities[&d.guid])));
            net.register_handler(&d.guid, device_handler(store.clone(), replies.clone(), net.tick_length()))?;
            if stores.insert(d.guid.clone(), store).is_some() {
                return Err(EngineError::InvalidParameters(format!("device {} listed twice", d.guid)));
            }
            profiles.insert(d.guid.clone(), d);
        }
        let core = Core {
            net,
            rng: ChaCha20Rng::seed_from_u64(seed),
            profiles,
            last_ts: config.epoch_ms,
            next_request: 0,
        };
        Ok(StorageEngine { config, network_config, meta, stores, replies, core: Mutex::new(core) })
    }

    fn lock(&self) -> MutexGuard<'_, Core> {
        self.core.lock().expect("engine core poisoned")
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn metadata(&self) -> &Arc<MetadataCluster> {
        &self.meta
    }

    pub fn device_store(&self, guid: &Guid) -> Option<Arc<Mutex<DeviceStore>>> {
        self.stores.get(guid).cloned()
    }

    pub fn devices(&self) -> Vec<Guid> {
        self.stores.keys().cloned().collect()
    }

    /// Current profiles; `storage_available` reflects free space.
    pub fn device_profiles(&self) -> Vec<DeviceProfile> {
        let core = self.lock();
        self.current_profiles(&core, false)
    }

    fn current_profiles(&self, core: &Core, alive_only: bool) -> Vec<DeviceProfile> {
        core.profiles
            .values()
            .filter(|p| !alive_only || core.net.is_alive(&p.guid))
            .map(|p| {
                let free = self.stores[&p.guid].lock().expect("device store poisoned").free();
                DeviceProfile { storage_available: free as f64 / MIB as f64, ..p.clone() }
            })
            .collect()
    }

    pub fn set_remaining_time(&self, guid: &Guid, minutes: f64) -> Result<(), EngineError> {
        if !(minutes >= 0.0) {
            return Err(EngineError::InvalidParameters(format!("remaining time {minutes}")));
        }
        let mut core = self.lock();
        let p = core.profiles.get_mut(guid).ok_or_else(|| EngineError::UnknownDevice(guid.clone()))?;
        p.remaining_time = minutes;
        Ok(())
    }

    /// Take a device off the network (crash or power loss). Its store is kept.
    pub fn kill_device(&self, guid: &Guid) -> Result<(), EngineError> {
        Ok(self.lock().net.set_alive(guid, false)?)
    }

    pub fn revive_device(&self, guid: &Guid) -> Result<(), EngineError> {
        Ok(self.lock().net.set_alive(guid, true)?)
    }

    pub fn is_alive(&self, guid: &Guid) -> bool {
        self.lock().net.is_alive(guid)
    }

    pub fn now(&self) -> Tick {
        self.lock().net.now()
    }

    /// Step the network and return the events.
    pub fn advance(&self, ticks: Tick) -> Vec<TraceEvent> {
        self.lock().net.advance(ticks)
    }

    /// Run the network until nothing is in flight (bounded by `settle_ticks`).
    pub fn flush(&self) -> bool {
        self.lock().net.run_until_idle(self.config.settle_ticks)
    }

    pub fn message_status(&self, id: MessageId) -> Option<DeliveryStatus> {
        self.lock().net.status(id)
    }

    /// Run `f` with exclusive access to the simulated network.
    pub fn with_network<T>(&self, f: impl FnOnce(&mut Network) -> T) -> T {
        f(&mut self.lock().net)
    }

    fn next_timestamp(&self, core: &mut Core) -> Timestamp {
        let sim = self.config.epoch_ms + (core.net.now() as f64 * core.net.tick_length() * 1000.0) as u64;
        core.last_ts = sim.max(core.last_ts + 1);
        core.last_ts
    }

    fn require_node(&self, core: &Core, guid: &Guid) -> Result<(), EngineError> {
        if self.stores.contains_key(guid) && core.net.contains(guid) {
            Ok(())
        } else {
            Err(EngineError::UnknownDevice(guid.clone()))
        }
    }

    pub fn put(&self, req: &PutRequest, caller: &Guid) -> Result<Rnode, EngineError> {
        self.put_with_receipt(req, caller).map(|r| r.rnode)
    }

    pub fn put_with_receipt(&self, req: &PutRequest, caller: &Guid) -> Result<PutReceipt, EngineError> {
        let block_size = req.block_size.unwrap_or(self.config.block_size);
        if req.data.is_empty() {
            return Err(EngineError::InvalidParameters("empty files cannot be stored".into()));
        }
        if block_size == 0 {
            return Err(EngineError::InvalidParameters("block size must be positive".into()));
        }
        crate::types::validate_path(&req.rdrive_path).map_err(MetaError::from)?;
        if req.rdrive_path == "/" {
            return Err(EngineError::IsADirectory("/".into()));
        }
        let acl = req.acl.clone().unwrap_or_else(|| AccessControlList::owner_only(caller.clone()));
        acl.validate().map_err(MetaError::from)?;

        let mut core = self.lock();
        self.require_node(&core, caller)?;
        let existing = if self.meta.exists(&req.rdrive_path)? {
            let current = self.meta.get_rnode(&req.rdrive_path, caller)?;
            if current.is_dir() {
                return Err(EngineError::IsADirectory(req.rdrive_path.clone()));
            }
            Some(current)
        } else {
            None
        };

        let inputs = PlannerInputs {
            file_size: req.data.len() as f64 / MIB as f64,
            required_lifetime: req.required_lifetime.unwrap_or(self.config.required_lifetime),
            availability_weight: req.availability_weight.unwrap_or(self.config.availability_weight),
            devices: self.current_profiles(&core, true),
        };
        if inputs.devices.is_empty() {
            return Err(EngineError::InvalidParameters("no live devices".into()));
        }
        let plan = match req.coding {
            Coding::Adaptive => planner::plan(&inputs)?,
            Coding::Fixed { k, n } => planner::plan_fixed(&inputs, k, n)?,
        };

        let (file_id, rnode_id) = match &existing {
            Some(r) => (r.file_id, r.rnode_id),
            None => (ObjectId::random(&mut core.rng), ObjectId::random(&mut core.rng)),
        };
        let time_stamp = self.next_timestamp(&mut core);
        let blocks: Vec<&[u8]> = req.data.chunks(block_size).collect();
        let block_count = u32::try_from(blocks.len())
            .ok()
            .filter(|&b| b <= 255)
            .ok_or_else(|| EngineError::InvalidParameters(format!("{} blocks exceed the 255-shard key split", blocks.len())))?;
        let key = FileKey::generate(&mut core.rng);
        let shards = crypto::split_key(&key, blocks.len(), &mut core.rng)?;

        let (k, n) = (plan.k, plan.n);
        let mut fragments: Vec<Vec<Fragment>> = Vec::with_capacity(blocks.len());
        for (b, block) in blocks.iter().enumerate() {
            let sealed = crypto::encrypt_block(block, &key, &file_id, b as u32);
            let coded = erasure::encode(&sealed, k, n).map_err(|e| EngineError::InvalidParameters(e.to_string()))?;
            let key_shard = shards[b].to_bytes();
            fragments.push(
                coded
                    .shards
                    .into_iter()
                    .enumerate()
                    .map(|(j, payload)| Fragment {
                        file_id,
                        block_index: b as u32,
                        fragment_index: j as u16,
                        n: n as u16,
                        k: k as u16,
                        time_stamp,
                        key_shard: key_shard.clone(),
                        payload: payload.expect("encode fills every shard"),
                    })
                    .collect(),
            );
        }

        let mut frag_location = BTreeMap::new();
        for b in 0..block_count {
            for (j, g) in plan.devices.iter().enumerate() {
                frag_location.insert((b, j as u16), g.clone());
            }
        }
        let rnode = Rnode {
            rnode_type: RnodeType::File,
            rnode_id,
            file_name: crate::types::path_name(&req.rdrive_path).to_string(),
            file_size: req.data.len() as u64,
            file_id,
            file_path: req.rdrive_path.clone(),
            n: n as u16,
            k: k as u16,
            block_count,
            frag_location,
            file_list: Vec::new(),
            folder_list: Vec::new(),
            permission: acl,
            time_stamp,
        };
        if existing.is_some() {
            self.meta.update_rnode(&req.rdrive_path, &rnode, caller)?;
        } else {
            self.meta.create_rnode(&req.rdrive_path, &rnode, caller)?;
        }

        // Fragment-major order: all of fragment 0, then all of fragment 1, ...
        let ttl = req.dispatch_ttl.or(self.config.dispatch_ttl).unwrap_or(f64::INFINITY);
        let mut dispatches = Vec::with_capacity(fragments.len() * n);
        for j in 0..n {
            let holder = &plan.devices[j];
            for block in &mut fragments {
                let frag = std::mem::replace(&mut block[j], empty_fragment());
                let slot = frag.slot();
                let message = if holder == caller {
                    // A full local store loses this fragment the same way a remote one would.
                    let _ = self.stores[caller].lock().expect("device store poisoned").handle_fragment_arrival(frag);
                    None
                } else {
                    Some(core.net.send(caller, holder, wire::fragment(&frag), ttl)?)
                };
                dispatches.push(Dispatch { slot, holder: holder.clone(), message });
            }
        }
        Ok(PutReceipt { rnode, plan, dispatches })
    }

    pub fn get(&self, path: &str, caller: &Guid) -> Result<Vec<u8>, EngineError> {
        self.get_with_stats(path, caller).map(|(data, _)| data)
    }

    pub fn get_with_stats(&self, path: &str, caller: &Guid) -> Result<(Vec<u8>, GetStats), EngineError> {
        self.get_inner(path, caller, self.config.request_ttl)
    }

    /// `get` with a per-call request TTL in seconds.
    pub fn get_with_ttl(&self, path: &str, caller: &Guid, ttl: Option<f64>) -> Result<Vec<u8>, EngineError> {
        let ttl = ttl.unwrap_or(self.config.request_ttl);
        if !(ttl > 0.0 && ttl.is_finite()) {
            return Err(EngineError::InvalidParameters(format!("request ttl {ttl}")));
        }
        self.get_inner(path, caller, ttl).map(|(data, _)| data)
    }

    fn get_inner(&self, path: &str, caller: &Guid, ttl: f64) -> Result<(Vec<u8>, GetStats), EngineError> {
        let rnode = self.meta.get_rnode(path, caller)?;
        if rnode.is_dir() {
            return Err(EngineError::IsADirectory(path.into()));
        }
        let mut core = self.lock();
        self.require_node(&core, caller)?;
        let mut stats = GetStats { started: core.net.now(), ..GetStats::default() };
        let result = self.fetch(&mut core, &rnode, caller, ttl, &mut stats);
        stats.finished = core.net.now();
        let mut replies = self.replies.lock().expect("reply box poisoned");
        replies.wanted.clear();
        replies.got.clear();
        drop(replies);
        let blocks = result?;
        Ok((self.reassemble(&rnode, blocks)?, stats))
    }

    fn fetch(
        &self,
        core: &mut Core,
        rnode: &Rnode,
        caller: &Guid,
        ttl: f64,
        stats: &mut GetStats,
    ) -> Result<Vec<BTreeMap<u16, Fragment>>, EngineError> {
        let k = rnode.k as usize;
        let ttl_ticks = ttl / core.net.tick_length();
        let caller_alive = core.net.is_alive(caller);
        let energy = |g: &Guid| core.profiles.get(g).map(DeviceProfile::energy_rank).unwrap_or(f64::NEG_INFINITY);

        let mut fetches = Vec::with_capacity(rnode.block_count as usize);
        for b in 0..rnode.block_count {
            let mut have = BTreeMap::new();
            let mut own = Vec::new();
            let mut remote = Vec::new();
            for j in 0..rnode.n {
                let holder = rnode.holder(b, j).expect("validated rnode maps every fragment");
                if holder == caller {
                    if caller_alive {
                        let slot = FragmentSlot { file_id: rnode.file_id, block_index: b, fragment_index: j };
                        let store = self.stores[caller].lock().expect("device store poisoned");
                        match store.fragment(&slot).filter(|f| matches_rnode(f, rnode, &slot)) {
                            Some(f) => {
                                have.insert(j, f.clone());
                                stats.local_fragments += 1;
                            }
                            // Not here yet; ask ourselves first so it is picked up on arrival.
                            None => own.push((j, holder.clone())),
                        }
                    }
                } else {
                    remote.push((j, holder.clone()));
                }
            }
            remote.sort_by(|a, b| energy(&b.1).total_cmp(&energy(&a.1)).then(a.0.cmp(&b.0)));
            own.extend(remote);
            fetches.push(BlockFetch { have, untried: own.into(), outstanding: Vec::new() });
        }

        // Request id -> (block, record index).
        let mut live: HashMap<u64, (usize, usize)> = HashMap::new();
        loop {
            let now = core.net.now();
            for (b, f) in fetches.iter_mut().enumerate() {
                while f.have.len() + f.outstanding.len() < k {
                    let Some((j, holder)) = f.untried.pop_front() else { break };
                    let id = core.next_request;
                    core.next_request += 1;
                    let slot = FragmentSlot { file_id: rnode.file_id, block_index: b as u32, fragment_index: j };
                    self.replies.lock().expect("reply box poisoned").wanted.insert(id);
                    core.net.send(caller, &holder, wire::request(&wire::Request { id, slot, ttl }), ttl)?;
                    let rec = stats.requests.len();
                    stats.requests.push(RequestRecord {
                        block: b as u32,
                        fragment: j,
                        holder,
                        sent: now,
                        deadline: now + ttl_ticks.floor() as Tick,
                        outcome: RequestOutcome::Abandoned,
                    });
                    f.outstanding.push((id, rec));
                    live.insert(id, (b, rec));
                }
                if f.have.len() < k && f.outstanding.is_empty() {
                    return Err(EngineError::IrrecoverableBlock { block: b as u32, received: f.have.len(), needed: k });
                }
            }
            if fetches.iter().all(|f| f.have.len() >= k) {
                break;
            }

            core.net.step();
            let now = core.net.now();
            let arrived: Vec<(u64, Vec<u8>)> = {
                let mut r = self.replies.lock().expect("reply box poisoned");
                r.got.drain().collect()
            };
            let mut arrived = arrived;
            arrived.sort_by_key(|(id, _)| *id);
            for (id, bytes) in arrived {
                let Some(&(b, rec)) = live.get(&id) else { continue };
                let r = &stats.requests[rec];
                let slot = FragmentSlot { file_id: rnode.file_id, block_index: r.block, fragment_index: r.fragment };
                let Ok(frag) = Fragment::from_bytes(&bytes) else { continue };
                if !matches_rnode(&frag, rnode, &slot) {
                    continue;
                }
                live.remove(&id);
                self.replies.lock().expect("reply box poisoned").wanted.remove(&id);
                stats.requests[rec].outcome = RequestOutcome::Replied(now);
                let f = &mut fetches[b];
                f.outstanding.retain(|&(o, _)| o != id);
                if f.have.len() < k {
                    f.have.insert(frag.fragment_index, frag);
                }
            }
            for f in &mut fetches {
                f.outstanding.retain(|&(_, rec)| {
                    let r = &mut stats.requests[rec];
                    if now > r.deadline {
                        r.outcome = RequestOutcome::TimedOut(now);
                        false
                    } else {
                        true
                    }
                });
                if f.have.len() >= k {
                    f.outstanding.clear();
                }
            }
        }
        Ok(fetches.into_iter().map(|f| f.have).collect())
    }

    fn reassemble(&self, rnode: &Rnode, blocks: Vec<BTreeMap<u16, Fragment>>) -> Result<Vec<u8>, EngineError> {
        let (k, n) = (rnode.k as usize, rnode.n as usize);
        let mut shards = Vec::with_capacity(blocks.len());
        let mut sealed = Vec::with_capacity(blocks.len());
        for have in &blocks {
            let first = have.values().next().ok_or(EngineError::AuthenticationFailure)?;
            shards.push(KeyShard::from_bytes(&first.key_shard)?);
            let mut set = ShardSet::empty(k, n, first.payload.len());
            for (&j, f) in have {
                set.shards[j as usize] = Some(f.payload.clone());
            }
            sealed.push(erasure::decode(&set).map_err(|_| EngineError::AuthenticationFailure)?);
        }
        let key = crypto::join_key(&shards, blocks.len())?;
        let mut out = Vec::with_capacity(rnode.file_size as usize);
        for (b, s) in sealed.iter().enumerate() {
            out.extend_from_slice(&crypto::decrypt_block(s, &key, &rnode.file_id, b as u32)?);
        }
        if out.len() as u64 != rnode.file_size {
            return Err(EngineError::AuthenticationFailure);
        }
        Ok(out)
    }

    pub fn mkdir(&self, path: &str, acl: Option<AccessControlList>, caller: &Guid) -> Result<Rnode, EngineError> {
        let acl = acl.unwrap_or_else(|| AccessControlList::owner_only(caller.clone()));
        let mut core = self.lock();
        let id = ObjectId::random(&mut core.rng);
        let ts = self.next_timestamp(&mut core);
        drop(core);
        let rnode = Rnode::directory(id, path, acl, ts);
        self.meta.create_rnode(path, &rnode, caller)?;
        Ok(rnode)
    }

    pub fn ls(&self, path: &str, caller: &Guid) -> Result<Listing, EngineError> {
        let (mut folders, mut files) = self.meta.list(path, caller)?;
        folders.sort();
        files.sort();
        Ok(Listing { folders, files })
    }

    /// Remove a file or empty directory. Holders of a removed file's
    /// fragments are told to drop them; unreachable ones keep orphans.
    pub fn rm(&self, path: &str, caller: &Guid) -> Result<(), EngineError> {
        let rnode = self.meta.get_rnode(path, caller)?;
        self.meta.delete_rnode(path, caller)?;
        if rnode.is_dir() {
            return Ok(());
        }
        let mut core = self.lock();
        let holders: BTreeSet<&Guid> = rnode.frag_location.values().collect();
        let notice = wire::delete(&rnode.file_id, rnode.time_stamp);
        let sender_ok = core.net.contains(caller);
        for holder in holders {
            if holder == caller {
                if let Some(store) = self.stores.get(caller) {
                    store.lock().expect("device store poisoned").remove_file(&rnode.file_id, rnode.time_stamp);
                }
            } else if sender_ok {
                core.net.send(caller, holder, notice.clone(), self.config.request_ttl)?;
            }
        }
        Ok(())
    }

    pub fn get_acl(&self, path: &str, caller: &Guid) -> Result<AccessControlList, EngineError> {
        Ok(self.meta.get_acl(path, caller)?)
    }

    pub fn set_acl(&self, path: &str, acl: AccessControlList, caller: &Guid) -> Result<(), EngineError> {
        self.meta.set_acl(path, acl, caller)?;
        Ok(())
    }

    /// Drop fragments, on live devices, of files the namespace no longer has.
    pub fn collect_orphans(&self) -> Result<usize, EngineError> {
        let known = self.meta.file_ids()?;
        let core = self.lock();
        let mut removed = 0;
        for (guid, store) in &self.stores {
            if !core.net.is_alive(guid) {
                continue;
            }
            let mut store = store.lock().expect("device store poisoned");
            let orphans: BTreeSet<ObjectId> =
                store.fragments().map(|f| f.file_id).filter(|id| !known.contains(id)).collect();
            for id in orphans {
                removed += store.remove_file(&id, Timestamp::MAX);
            }
        }
        Ok(removed)
    }

    /// Send a whole file to one device without coding or encryption.
    pub fn share_unicast(&self, data: Vec<u8>, caller: &Guid, dest: &Guid, ttl_secs: f64) -> Result<MessageId, EngineError> {
        let mut payload = Vec::with_capacity(data.len() + 1);
        payload.push(wire::UNICAST);
        payload.extend_from_slice(&data);
        Ok(self.lock().net.send(caller, dest, payload, ttl_secs)?)
    }

    /// Unicast payloads that have reached `guid`.
    pub fn take_unicast(&self, guid: &Guid) -> Vec<(MessageId, Guid, Arc<[u8]>)> {
        self.stores
            .get(guid)
            .map(|s| s.lock().expect("device store poisoned").take_unicast())
            .unwrap_or_default()
    }

    /// Write metadata, device stores and engine state under `dir`.
    /// Messages still in flight are not saved.
    pub fn save(&self, dir: &Path) -> Result<(), EngineError> {
        let mut core = self.lock();
        fs::create_dir_all(dir).map_err(io_err)?;
        let meta_dir = dir.join("metadata");
        if meta_dir.exists() {
            fs::remove_dir_all(&meta_dir).map_err(io_err)?;
        }
        self.meta.snapshot_to_dir(&meta_dir)?;
        let dev_root = dir.join("devices");
        if dev_root.exists() {
            fs::remove_dir_all(&dev_root).map_err(io_err)?;
        }
        let mut devices = Vec::new();
        for (guid, store) in &self.stores {
            let store = store.lock().expect("device store poisoned");
            let ddir = dev_root.join(guid.as_str());
            fs::create_dir_all(&ddir).map_err(io_err)?;
            for f in store.fragments() {
                fs::write(ddir.join(f.file_name()), f.to_bytes()).map_err(io_err)?;
            }
            devices.push(SavedDevice {
                profile: core.profiles[guid].clone(),
                capacity: store.capacity(),
                alive: core.net.is_alive(guid),
            });
        }
        let saved = SavedEngine {
            config: self.config.clone(),
            network: self.network_config.clone(),
            devices,
            last_time_stamp: core.last_ts,
            next_seed: core.rng.next_u64(),
        };
        let text = serde_json::to_string_pretty(&saved).map_err(io_err)?;
        fs::write(dir.join("engine.json"), text).map_err(io_err)
    }

    pub fn load(dir: &Path) -> Result<Self, EngineError> {
        let text = fs::read_to_string(dir.join("engine.json")).map_err(io_err)?;
        let saved: SavedEngine = serde_json::from_str(&text).map_err(io_err)?;
        let meta = MetadataCluster::from_snapshot_dir(&dir.join("metadata"))?;
        let capacities = saved.devices.iter().map(|d| (d.profile.guid.clone(), d.capacity)).collect();
        let profiles: Vec<DeviceProfile> = saved.devices.iter().map(|d| d.profile.clone()).collect();
        let engine =
            Self::assemble(saved.config, saved.network, Arc::new(meta), profiles, capacities, saved.next_seed)?;
        {
            let mut core = engine.lock();
            core.last_ts = saved.last_time_stamp;
            for d in &saved.devices {
                core.net.set_alive(&d.profile.guid, d.alive)?;
            }
        }
        for (guid, store) in &engine.stores {
            let ddir = dir.join("devices").join(guid.as_str());
            let Ok(entries) = fs::read_dir(&ddir) else { continue };
            let mut names: Vec<_> = entries.filter_map(Result::ok).map(|e| e.path()).collect();
            names.sort();
            let mut store = store.lock().expect("device store poisoned");
            for p in names.into_iter().filter(|p| p.extension().is_some_and(|e| e == "frag")) {
                let bytes = fs::read(&p).map_err(io_err)?;
                let frag = Fragment::from_bytes(&bytes).map_err(|e| EngineError::Io(format!("{}: {e}", p.display())))?;
                store.handle_fragment_arrival(frag)?;
            }
        }
        Ok(engine)
    }
}

fn empty_fragment() -> Fragment {
    Fragment {
        file_id: ObjectId::from_bytes([0; 16]),
        block_index: 0,
        fragment_index: 0,
        n: 1,
        k: 1,
        time_stamp: 0,
        key_shard: Vec::new(),
        payload: Vec::new(),
    }
}

/// Same file, slot, coding and version as the rnode describes.
fn matches_rnode(f: &Fragment, rnode: &Rnode, slot: &FragmentSlot) -> bool {
    f.slot() == *slot && f.n == rnode.n && f.k == rnode.k && f.time_stamp == rnode.time_stamp
}
