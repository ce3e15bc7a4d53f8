//! Tick-driven simulator of GUID-addressed, disruption-tolerant transport.
//!
//! Messages are cut into packets and carried store-and-forward: every node
//! buffers the packets it receives and passes them on over whatever links are
//! up. Routing is epidemic with a copy budget: each node hands a given packet
//! to at most `copy_budget` relays, and packets for a link's far end always go
//! first. Once a message is fully reassembled at its destination all relay
//! copies are purged. A message whose age exceeds its TTL is discarded
//! everywhere.
//!
//! Time is an integer tick. `advance` processes ticks `now + 1 ..= now + n`;
//! within one tick the order is: expiries, arrivals, link sampling,
//! transmissions, delivery callbacks. A packet sent during tick `t` over a
//! link with latency `l` arrives at tick `t + l`. All randomness comes from a
//! seeded generator, so a run is a pure function of (seed, config, script).

use crate::types::Guid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

pub type Tick = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownDestination(Guid),
    #[error("payload of {size} bytes exceeds the {max}-byte limit")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("edges overlap or contain the mule: {0}")]
    OverlappingEdges(Guid),
    #[error("invalid network parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId(pub u64);

impl std::fmt::Display for MessageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// When a link is up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum LinkMode {
    /// Up independently each tick with this probability.
    Probabilistic { availability: f64 },
    /// Up only inside contact windows.
    Scheduled { schedule: ContactSchedule },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum ContactSchedule {
    /// Half-open `[start, end)` windows.
    Windows { windows: Vec<(Tick, Tick)> },
    /// Up for `dwell` ticks starting at `offset + m * period`, `m >= 0`.
    Periodic { offset: Tick, period: Tick, dwell: Tick },
}

impl ContactSchedule {
    pub fn is_up(&self, tick: Tick) -> bool {
        match self {
            ContactSchedule::Windows { windows } => windows.iter().any(|&(s, e)| s <= tick && tick < e),
            ContactSchedule::Periodic { offset, period, dwell } => {
                tick >= *offset && *period > 0 && (tick - offset) % period < *dwell
            }
        }
    }

    /// First tick `>= from` at which the schedule is up, if any.
    pub fn next_up(&self, from: Tick) -> Option<Tick> {
        match self {
            ContactSchedule::Windows { windows } => windows
                .iter()
                .filter(|&&(s, e)| e > from && s < e)
                .map(|&(s, _)| s.max(from))
                .min(),
            ContactSchedule::Periodic { offset, period, dwell } => {
                if *dwell == 0 || *period == 0 {
                    return None;
                }
                if from < *offset {
                    return Some(*offset);
                }
                let phase = (from - offset) % period;
                if phase < *dwell {
                    Some(from)
                } else {
                    Some(from + (period - phase))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LinkModel {
    pub mode: LinkMode,
    pub latency_ticks: Tick,
    /// Bytes per tick.
    pub bandwidth: usize,
}

impl LinkModel {
    pub fn always_up(latency_ticks: Tick, bandwidth: usize) -> Self {
        Self::probabilistic(1.0, latency_ticks, bandwidth)
    }

    pub fn probabilistic(availability: f64, latency_ticks: Tick, bandwidth: usize) -> Self {
        LinkModel { mode: LinkMode::Probabilistic { availability }, latency_ticks, bandwidth }
    }

    pub fn scheduled(schedule: ContactSchedule, latency_ticks: Tick, bandwidth: usize) -> Self {
        LinkModel { mode: LinkMode::Scheduled { schedule }, latency_ticks, bandwidth }
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.latency_ticks < 1 {
            return Err(NetError::InvalidParameters("link latency must be at least one tick".into()));
        }
        if self.bandwidth == 0 {
            return Err(NetError::InvalidParameters("link bandwidth must be positive".into()));
        }
        if let LinkMode::Probabilistic { availability } = self.mode {
            if !(0.0..=1.0).contains(&availability) {
                return Err(NetError::InvalidParameters(format!("availability {availability} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LinkSpec {
    pub a: Guid,
    pub b: Guid,
    /// Only `a -> b` when set.
    #[serde(default)]
    pub directed: bool,
    pub model: LinkModel,
}

fn default_tick_length() -> f64 {
    1.0
}
fn default_copy_budget() -> u32 {
    4
}
fn default_bandwidth() -> usize {
    1 << 20
}
fn default_latency() -> Tick {
    1
}
fn default_max_payload() -> usize {
    1 << 30
}

/// Static description of a simulated network. Serializes to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NetworkConfig {
    pub nodes: Vec<Guid>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    pub seed: u64,
    /// Simulated seconds per tick.
    #[serde(default = "default_tick_length")]
    pub tick_length: f64,
    #[serde(default = "default_copy_budget")]
    pub copy_budget: u32,
    /// Packet size; defaults to the smallest link bandwidth.
    #[serde(default)]
    pub packet_size: Option<usize>,
    #[serde(default = "default_max_payload")]
    pub max_payload: usize,
    /// Used for links installed later, such as mule contacts.
    #[serde(default = "default_bandwidth")]
    pub default_bandwidth: usize,
    #[serde(default = "default_latency")]
    pub default_latency: Tick,
}

impl NetworkConfig {
    pub fn new(nodes: Vec<Guid>, seed: u64) -> Self {
        NetworkConfig {
            nodes,
            links: Vec::new(),
            seed,
            tick_length: default_tick_length(),
            copy_budget: default_copy_budget(),
            packet_size: None,
            max_payload: default_max_payload(),
            default_bandwidth: default_bandwidth(),
            default_latency: default_latency(),
        }
    }

    pub fn link(mut self, a: &Guid, b: &Guid, model: LinkModel) -> Self {
        self.links.push(LinkSpec { a: a.clone(), b: b.clone(), directed: false, model });
        self
    }

    /// Symmetric links between every pair in `group`.
    pub fn full_mesh(mut self, group: &[Guid], model: LinkModel) -> Self {
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                self.links.push(LinkSpec { a: a.clone(), b: b.clone(), directed: false, model: model.clone() });
            }
        }
        self
    }
}

/// What happened, one row per event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TraceKind {
    /// Message submitted at its source.
    Send,
    /// A packet copy left `from` for `to`.
    Hop,
    /// A hop arrived at a relay and was buffered.
    Store,
    /// A hop arrived at the destination with a new sequence number.
    Deliver,
    /// A hop arrived somewhere that already had that packet.
    Duplicate,
    /// A hop arrived at a dead node or for a finished message.
    Drop,
    /// All packets reassembled at the destination.
    Delivered,
    /// TTL lapsed before delivery.
    Expire,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Send => "send",
            TraceKind::Hop => "hop",
            TraceKind::Store => "store",
            TraceKind::Deliver => "deliver",
            TraceKind::Duplicate => "duplicate",
            TraceKind::Drop => "drop",
            TraceKind::Delivered => "delivered",
            TraceKind::Expire => "expire",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub tick: Tick,
    pub kind: TraceKind,
    pub message: MessageId,
    pub packet_seq: Option<u32>,
    pub from: Option<Guid>,
    pub to: Option<Guid>,
    pub bytes: usize,
}

/// CSV with columns `tick,event,messageId,packetSeq,fromGuid,toGuid,bytes`.
pub fn trace_to_csv(events: &[TraceEvent]) -> String {
    let mut out = String::from("tick,event,messageId,packetSeq,fromGuid,toGuid,bytes\n");
    for e in events {
        let seq = e.packet_seq.map(|s| s.to_string()).unwrap_or_default();
        let from = e.from.as_ref().map(Guid::as_str).unwrap_or("");
        let to = e.to.as_ref().map(Guid::as_str).unwrap_or("");
        let _ = writeln!(out, "{},{},{},{},{},{},{}", e.tick, e.kind.as_str(), e.message, seq, from, to, e.bytes);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryStatus {
    Pending,
    Delivered(Tick),
    Expired(Tick),
}

/// A reassembled message handed to its destination.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub message: MessageId,
    pub source: Guid,
    pub dest: Guid,
    pub payload: Arc<[u8]>,
    pub tick: Tick,
}

/// A message waiting to be submitted, produced by a handler.
#[derive(Debug, Clone)]
pub struct Outgoing {
    pub source: Guid,
    pub dest: Guid,
    pub payload: Vec<u8>,
    pub ttl_secs: f64,
}

/// Sends queued by a delivery handler; submitted after the handler returns.
#[derive(Debug, Default)]
pub struct Outbox {
    queued: Vec<Outgoing>,
}

impl Outbox {
    pub fn send(&mut self, source: Guid, dest: Guid, payload: Vec<u8>, ttl_secs: f64) {
        self.queued.push(Outgoing { source, dest, payload, ttl_secs });
    }
}

pub type Handler = Box<dyn FnMut(&Delivery, &mut Outbox) + Send>;

struct Message {
    source: usize,
    dest: usize,
    payload: Arc<[u8]>,
    packet_size: usize,
    packet_count: u32,
    born: Tick,
    ttl_ticks: f64,
    received: Vec<bool>,
    received_count: u32,
    status: DeliveryStatus,
}

impl Message {
    fn packet_len(&self, seq: u32) -> usize {
        let start = seq as usize * self.packet_size;
        (self.payload.len() - start).min(self.packet_size).max(usize::from(self.payload.is_empty()))
    }
}

type PacketKey = (MessageId, u32);

#[derive(Default)]
struct Node {
    guid: Option<Guid>,
    alive: bool,
    /// Packet -> relay copies this node may still hand out.
    buffer: BTreeMap<PacketKey, u32>,
    seen: HashSet<PacketKey>,
    incoming: HashSet<PacketKey>,
}

struct Link {
    a: usize,
    b: usize,
    directed: bool,
    model: LinkModel,
    up: bool,
}

struct InFlight {
    from: usize,
    to: usize,
    key: PacketKey,
}

/// The simulator. Single-threaded; drive it from one thread at a time.
pub struct Network {
    tick_length: f64,
    copy_budget: u32,
    packet_size: usize,
    max_payload: usize,
    default_bandwidth: usize,
    default_latency: Tick,
    index: HashMap<Guid, usize>,
    nodes: Vec<Node>,
    links: Vec<Link>,
    link_index: HashMap<(usize, usize), usize>,
    rng: ChaCha8Rng,
    now: Tick,
    next_id: u64,
    messages: BTreeMap<MessageId, Message>,
    pending: BTreeSet<MessageId>,
    in_flight: BTreeMap<Tick, Vec<InFlight>>,
    local: Vec<MessageId>,
    trace: Vec<TraceEvent>,
    handlers: HashMap<usize, Handler>,
    inbox: HashMap<usize, Vec<Delivery>>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self, NetError> {
        if !(config.tick_length > 0.0) {
            return Err(NetError::InvalidParameters("tick length must be positive".into()));
        }
        let mut index = HashMap::new();
        let mut nodes = Vec::new();
        for g in &config.nodes {
            if index.insert(g.clone(), nodes.len()).is_some() {
                return Err(NetError::InvalidParameters(format!("node {g} listed twice")));
            }
            nodes.push(Node { guid: Some(g.clone()), alive: true, ..Node::default() });
        }
        let min_bandwidth = config.links.iter().map(|l| l.model.bandwidth).min();
        let packet_size = config.packet_size.or(min_bandwidth).unwrap_or(config.default_bandwidth);
        if packet_size == 0 {
            return Err(NetError::InvalidParameters("packet size must be positive".into()));
        }
        let mut net = Network {
            tick_length: config.tick_length,
            copy_budget: config.copy_budget,
            packet_size,
            max_payload: config.max_payload,
            default_bandwidth: config.default_bandwidth,
            default_latency: config.default_latency,
            index,
            nodes,
            links: Vec::new(),
            link_index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            now: 0,
            next_id: 0,
            messages: BTreeMap::new(),
            pending: BTreeSet::new(),
            in_flight: BTreeMap::new(),
            local: Vec::new(),
            trace: Vec::new(),
            handlers: HashMap::new(),
            inbox: HashMap::new(),
        };
        for spec in config.links {
            net.set_link(&spec.a, &spec.b, spec.directed, spec.model)?;
        }
        Ok(net)
    }

    fn idx(&self, guid: &Guid) -> Result<usize, NetError> {
        self.index.get(guid).copied().ok_or_else(|| NetError::UnknownDestination(guid.clone()))
    }

    fn guid(&self, idx: usize) -> Guid {
        self.nodes[idx].guid.clone().expect("registered node")
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn tick_length(&self) -> f64 {
        self.tick_length
    }

    pub fn packet_size(&self) -> usize {
        self.packet_size
    }

    pub fn contains(&self, guid: &Guid) -> bool {
        self.index.contains_key(guid)
    }

    /// Install or replace the link between `a` and `b`.
    pub fn set_link(&mut self, a: &Guid, b: &Guid, directed: bool, model: LinkModel) -> Result<(), NetError> {
        model.validate()?;
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if ia == ib {
            return Err(NetError::InvalidParameters(format!("self link on {a}")));
        }
        let key = if directed { (ia, ib) } else { (ia.min(ib), ia.max(ib)) };
        let link = Link { a: key.0, b: key.1, directed, model, up: false };
        match self.link_index.get(&key) {
            Some(&i) => self.links[i] = link,
            None => {
                self.link_index.insert(key, self.links.len());
                self.links.push(link);
            }
        }
        Ok(())
    }

    /// Power a node on or off. A dead node neither sends nor receives.
    pub fn set_alive(&mut self, guid: &Guid, alive: bool) -> Result<(), NetError> {
        let i = self.idx(guid)?;
        self.nodes[i].alive = alive;
        Ok(())
    }

    pub fn is_alive(&self, guid: &Guid) -> bool {
        self.idx(guid).map(|i| self.nodes[i].alive).unwrap_or(false)
    }

    /// Alternate a mule between two edges: linked to every node of `edge_a`
    /// for `dwell` ticks starting at each multiple of `period`, and to every
    /// node of `edge_b` for `dwell` ticks starting half a period later.
    pub fn set_mule_schedule(
        &mut self,
        mule: &Guid,
        edge_a: &BTreeSet<Guid>,
        edge_b: &BTreeSet<Guid>,
        period: Tick,
        dwell: Tick,
    ) -> Result<(), NetError> {
        self.idx(mule)?;
        if let Some(g) = edge_a.intersection(edge_b).next() {
            return Err(NetError::OverlappingEdges(g.clone()));
        }
        if edge_a.contains(mule) || edge_b.contains(mule) {
            return Err(NetError::OverlappingEdges(mule.clone()));
        }
        if period == 0 || dwell > period / 2 {
            return Err(NetError::InvalidParameters(format!(
                "dwell {dwell} must fit in half of period {period}"
            )));
        }
        for g in edge_a.iter().chain(edge_b) {
            self.idx(g)?;
        }
        let half = period / 2;
        for (edge, offset) in [(edge_a, 0), (edge_b, half)] {
            for g in edge {
                let schedule = ContactSchedule::Periodic { offset, period, dwell };
                let model = LinkModel::scheduled(schedule, self.default_latency, self.default_bandwidth);
                self.set_link(mule, g, false, model)?;
            }
        }
        Ok(())
    }

    /// Hand reassembled messages for `node` to `handler` instead of its inbox.
    pub fn register_handler(&mut self, node: &Guid, handler: Handler) -> Result<(), NetError> {
        let i = self.idx(node)?;
        self.handlers.insert(i, handler);
        Ok(())
    }

    /// Deliveries for `node` that no handler consumed.
    pub fn drain_inbox(&mut self, node: &Guid) -> Vec<Delivery> {
        match self.idx(node) {
            Ok(i) => self.inbox.remove(&i).unwrap_or_default(),
            Err(_) => Vec::new(),
        }
    }

    /// Submit a message. `ttl_secs` may be `f64::INFINITY`.
    pub fn send(&mut self, source: &Guid, dest: &Guid, payload: Vec<u8>, ttl_secs: f64) -> Result<MessageId, NetError> {
        let s = self.idx(source)?;
        let d = self.idx(dest)?;
        if payload.len() > self.max_payload {
            return Err(NetError::PayloadTooLarge { size: payload.len(), max: self.max_payload });
        }
        if !(ttl_secs >= 0.0) {
            return Err(NetError::InvalidParameters(format!("ttl {ttl_secs} must be non-negative")));
        }
        let id = MessageId(self.next_id);
        self.next_id += 1;
        let packet_count = payload.len().div_ceil(self.packet_size).max(1) as u32;
        let bytes = payload.len();
        let msg = Message {
            source: s,
            dest: d,
            payload: payload.into(),
            packet_size: self.packet_size,
            packet_count,
            born: self.now,
            ttl_ticks: ttl_secs / self.tick_length,
            received: vec![false; packet_count as usize],
            received_count: 0,
            status: DeliveryStatus::Pending,
        };
        self.messages.insert(id, msg);
        self.pending.insert(id);
        self.record(TraceKind::Send, id, None, Some(s), Some(d), bytes);
        if s == d {
            self.local.push(id);
        } else {
            let node = &mut self.nodes[s];
            for seq in 0..packet_count {
                node.buffer.insert((id, seq), self.copy_budget);
                node.seen.insert((id, seq));
            }
        }
        Ok(id)
    }

    pub fn status(&self, id: MessageId) -> Option<DeliveryStatus> {
        self.messages.get(&id).map(|m| m.status)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty()
    }

    /// Step until nothing is pending or `max_ticks` elapse. True if idle.
    pub fn run_until_idle(&mut self, max_ticks: Tick) -> bool {
        for _ in 0..max_ticks {
            if self.is_idle() {
                return true;
            }
            self.step();
        }
        self.is_idle()
    }

    /// Run `ticks` ticks and return the events they produced (plus any
    /// recorded by sends since the last call).
    pub fn advance(&mut self, ticks: Tick) -> Vec<TraceEvent> {
        for _ in 0..ticks {
            self.step();
        }
        self.take_trace()
    }

    /// Events recorded since the last `advance`/`take_trace`.
    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    fn record(&mut self, kind: TraceKind, id: MessageId, seq: Option<u32>, from: Option<usize>, to: Option<usize>, bytes: usize) {
        let from = from.map(|i| self.guid(i));
        let to = to.map(|i| self.guid(i));
        self.trace.push(TraceEvent { tick: self.now, kind, message: id, packet_seq: seq, from, to, bytes });
    }

    /// Process one tick.
    pub fn step(&mut self) {
        self.now += 1;
        let t = self.now;
        self.expire(t);
        let mut delivered = Vec::new();
        self.arrivals(t, &mut delivered);
        for id in std::mem::take(&mut self.local) {
            if self.pending.contains(&id) {
                self.finish_delivery(id, t, &mut delivered);
            }
        }
        self.sample_links(t);
        self.transmit(t);
        self.dispatch(delivered);
    }

    fn expire(&mut self, t: Tick) {
        let expired: Vec<MessageId> = self
            .pending
            .iter()
            .copied()
            .filter(|id| {
                let m = &self.messages[id];
                (t - m.born) as f64 > m.ttl_ticks
            })
            .collect();
        for id in expired {
            self.pending.remove(&id);
            let m = self.messages.get_mut(&id).expect("pending message exists");
            m.status = DeliveryStatus::Expired(t);
            let bytes = m.payload.len();
            self.purge(id);
            self.record(TraceKind::Expire, id, None, None, None, bytes);
        }
    }

    fn purge(&mut self, id: MessageId) {
        for node in &mut self.nodes {
            let doomed: Vec<PacketKey> = node.buffer.range((id, 0)..=(id, u32::MAX)).map(|(k, _)| *k).collect();
            for k in doomed {
                node.buffer.remove(&k);
            }
        }
    }

    fn arrivals(&mut self, t: Tick, delivered: &mut Vec<MessageId>) {
        let Some(batch) = self.in_flight.remove(&t) else { return };
        for hop in batch {
            let (id, seq) = hop.key;
            self.nodes[hop.to].incoming.remove(&hop.key);
            let len = self.messages[&id].packet_len(seq);
            let finished = !self.pending.contains(&id);
            if finished || !self.nodes[hop.to].alive {
                self.record(TraceKind::Drop, id, Some(seq), Some(hop.from), Some(hop.to), len);
                continue;
            }
            if !self.nodes[hop.to].seen.insert(hop.key) {
                self.record(TraceKind::Duplicate, id, Some(seq), Some(hop.from), Some(hop.to), len);
                continue;
            }
            let m = self.messages.get_mut(&id).expect("pending message exists");
            if hop.to == m.dest {
                if !m.received[seq as usize] {
                    m.received[seq as usize] = true;
                    m.received_count += 1;
                }
                let complete = m.received_count == m.packet_count;
                self.record(TraceKind::Deliver, id, Some(seq), Some(hop.from), Some(hop.to), len);
                if complete {
                    self.finish_delivery(id, t, delivered);
                }
            } else {
                self.nodes[hop.to].buffer.insert(hop.key, self.copy_budget);
                self.record(TraceKind::Store, id, Some(seq), Some(hop.from), Some(hop.to), len);
            }
        }
    }

    fn finish_delivery(&mut self, id: MessageId, t: Tick, delivered: &mut Vec<MessageId>) {
        self.pending.remove(&id);
        let m = self.messages.get_mut(&id).expect("message exists");
        m.status = DeliveryStatus::Delivered(t);
        let (s, d, bytes) = (m.source, m.dest, m.payload.len());
        self.purge(id);
        self.record(TraceKind::Delivered, id, None, Some(s), Some(d), bytes);
        delivered.push(id);
    }

    fn sample_links(&mut self, t: Tick) {
        for link in &mut self.links {
            link.up = match &link.model.mode {
                LinkMode::Probabilistic { availability } => self.rng.gen::<f64>() < *availability,
                LinkMode::Scheduled { schedule } => schedule.is_up(t),
            };
        }
    }

    fn transmit(&mut self, t: Tick) {
        for li in 0..self.links.len() {
            let (a, b, directed, up) = {
                let l = &self.links[li];
                (l.a, l.b, l.directed, l.up)
            };
            if !up || !self.nodes[a].alive || !self.nodes[b].alive {
                continue;
            }
            self.transmit_one_way(li, a, b, t);
            if !directed {
                self.transmit_one_way(li, b, a, t);
            }
        }
    }

    fn transmit_one_way(&mut self, li: usize, from: usize, to: usize, t: Tick) {
        if self.nodes[from].buffer.is_empty() {
            return;
        }
        let bandwidth = self.links[li].model.bandwidth;
        let arrive = t + self.links[li].model.latency_ticks;
        let mut budget = bandwidth;
        let mut sent_any = false;
        let mut chosen: Vec<(PacketKey, bool)> = Vec::new();

        // Packets addressed to `to` first, then relay copies, each in id order.
        for direct in [true, false] {
            for (&key, &relays) in &self.nodes[from].buffer {
                let m = &self.messages[&key.0];
                if (m.dest == to) != direct || (!direct && relays == 0) {
                    continue;
                }
                let receiver = &self.nodes[to];
                if receiver.seen.contains(&key) || receiver.incoming.contains(&key) {
                    continue;
                }
                let len = m.packet_len(key.1);
                if len > budget && sent_any {
                    continue;
                }
                budget = budget.saturating_sub(len);
                sent_any = true;
                chosen.push((key, direct));
                if budget == 0 {
                    break;
                }
            }
            if budget == 0 {
                break;
            }
        }

        for (key, direct) in chosen {
            if !direct {
                if let Some(r) = self.nodes[from].buffer.get_mut(&key) {
                    *r -= 1;
                }
            }
            self.nodes[to].incoming.insert(key);
            let len = self.messages[&key.0].packet_len(key.1);
            self.in_flight.entry(arrive).or_default().push(InFlight { from, to, key });
            self.record(TraceKind::Hop, key.0, Some(key.1), Some(from), Some(to), len);
        }
    }

    fn dispatch(&mut self, mut delivered: Vec<MessageId>) {
        delivered.sort();
        for id in delivered {
            let m = &self.messages[&id];
            let delivery = Delivery {
                message: id,
                source: self.guid(m.source),
                dest: self.guid(m.dest),
                payload: m.payload.clone(),
                tick: self.now,
            };
            let dest = m.dest;
            match self.handlers.get_mut(&dest) {
                Some(handler) => {
                    let mut outbox = Outbox::default();
                    handler(&delivery, &mut outbox);
                    for out in outbox.queued {
                        // Handlers only address registered nodes; anything else is dropped.
                        let _ = self.send(&out.source, &out.dest, out.payload, out.ttl_secs);
                    }
                }
                None => self.inbox.entry(dest).or_default().push(delivery),
            }
        }
    }

    /// First tick `>= from` at which the `a`-`b` link could be up.
    pub fn next_contact(&self, a: &Guid, b: &Guid, from: Tick) -> Option<Tick> {
        let (ia, ib) = (self.idx(a).ok()?, self.idx(b).ok()?);
        let li = self
            .link_index
            .get(&(ia.min(ib), ia.max(ib)))
            .or_else(|| self.link_index.get(&(ia, ib)))?;
        match &self.links[*li].model.mode {
            LinkMode::Probabilistic { availability } => (*availability > 0.0).then_some(from),
            LinkMode::Scheduled { schedule } => schedule.next_up(from),
        }
    }
}
