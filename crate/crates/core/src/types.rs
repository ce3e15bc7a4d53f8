//! Identifiers, metadata records and fragments shared by every subsystem.

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

pub const GUID_LEN: usize = 40;

/// Milliseconds since the epoch; doubles as a fragment version number.
pub type Timestamp = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed metadata: {0}")]
pub struct MalformedMetadata(pub String);

fn malformed(msg: impl Into<String>) -> MalformedMetadata {
    MalformedMetadata(msg.into())
}

/// 40-character printable-ASCII identifier of a device or user.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Guid(String);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid GUID {0:?}: must be exactly 40 printable ASCII characters")]
pub struct InvalidGuid(pub String);

impl Guid {
    pub fn new(value: impl Into<String>) -> Result<Self, InvalidGuid> {
        let value = value.into();
        if is_guid_text(&value) {
            Ok(Guid(value))
        } else {
            Err(InvalidGuid(value))
        }
    }

    /// Deterministic GUID for simulations and tests, e.g. `P1` padded with `0`s.
    pub fn synthetic(label: &str) -> Self {
        assert!(label.len() <= GUID_LEN && label.bytes().all(|b| b.is_ascii_graphic()));
        Guid(format!("{label:0<GUID_LEN$}"))
    }

    /// Random 40-hex-digit GUID.
    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut bytes = [0u8; GUID_LEN / 2];
        rng.fill_bytes(&mut bytes);
        Guid(hex::encode(bytes))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// True for strings that satisfy the GUID rule: 40 bytes, each printable ASCII.
pub fn is_guid_text(s: &str) -> bool {
    s.len() == GUID_LEN && s.bytes().all(|b| (0x20..0x7f).contains(&b))
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Guid({})", self.0.trim_end_matches('0'))
    }
}

impl Serialize for Guid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Guid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Guid::new(s).map_err(serde::de::Error::custom)
    }
}

/// 16-byte random identifier for rnodes and files.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId([u8; 16]);

impl ObjectId {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        ObjectId(bytes)
    }

    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        ObjectId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(ObjectId(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({})", self.to_hex())
    }
}

impl Serialize for ObjectId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ObjectId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ObjectId::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 32 hex digits"))
    }
}

/// What the placement planner knows about a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceProfile {
    pub guid: Guid,
    /// Megabytes (MiB) of free storage.
    pub storage_available: f64,
    /// Expected minutes of battery left.
    pub remaining_time: f64,
}

impl DeviceProfile {
    pub fn new(guid: Guid, storage_available: f64, remaining_time: f64) -> Self {
        assert!(storage_available >= 0.0 && remaining_time >= 0.0, "negative device resources");
        DeviceProfile { guid, storage_available, remaining_time }
    }

    /// Ordering key for energy-ranked replica choice; larger is better.
    pub fn energy_rank(&self) -> f64 {
        self.remaining_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AclMode {
    Owner,
    World,
    Users,
}

/// Who may touch one rnode. Applies to that rnode only, never its children.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccessControlList {
    pub owner: Guid,
    pub mode: AclMode,
    #[serde(default)]
    pub user_list: BTreeSet<Guid>,
}

impl AccessControlList {
    pub fn owner_only(owner: Guid) -> Self {
        AccessControlList { owner, mode: AclMode::Owner, user_list: BTreeSet::new() }
    }

    pub fn world(owner: Guid) -> Self {
        AccessControlList { owner, mode: AclMode::World, user_list: BTreeSet::new() }
    }

    pub fn users(owner: Guid, users: impl IntoIterator<Item = Guid>) -> Self {
        AccessControlList { owner, mode: AclMode::Users, user_list: users.into_iter().collect() }
    }

    pub fn allows(&self, caller: &Guid) -> bool {
        if *caller == self.owner {
            return true;
        }
        match self.mode {
            AclMode::Owner => false,
            AclMode::World => true,
            AclMode::Users => self.user_list.contains(caller),
        }
    }

    pub fn validate(&self) -> Result<(), MalformedMetadata> {
        match (self.mode, self.user_list.is_empty()) {
            (AclMode::Users, true) => Err(malformed("USERS mode needs a non-empty user list")),
            (AclMode::Owner | AclMode::World, false) => {
                Err(malformed("user list is only allowed in USERS mode"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RnodeType {
    File,
    Directory,
}

/// Metadata record of one file or directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Rnode {
    pub rnode_type: RnodeType,
    pub rnode_id: ObjectId,
    pub file_name: String,
    pub file_size: u64,
    pub file_id: ObjectId,
    pub file_path: String,
    pub n: u16,
    pub k: u16,
    pub block_count: u32,
    #[serde(with = "frag_location_serde")]
    pub frag_location: BTreeMap<(u32, u16), Guid>,
    pub file_list: Vec<String>,
    pub folder_list: Vec<String>,
    pub permission: AccessControlList,
    pub time_stamp: Timestamp,
}

mod frag_location_serde {
    use super::Guid;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(map: &BTreeMap<(u32, u16), Guid>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<(u32, u16, &Guid)> = map.iter().map(|(&(b, f), g)| (b, f, g)).collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(u32, u16), Guid>, D::Error> {
        let entries = Vec::<(u32, u16, Guid)>::deserialize(d)?;
        let len = entries.len();
        let map: BTreeMap<_, _> = entries.into_iter().map(|(b, f, g)| ((b, f), g)).collect();
        if map.len() != len {
            return Err(serde::de::Error::custom("duplicate fragment location"));
        }
        Ok(map)
    }
}

impl Rnode {
    pub fn directory(id: ObjectId, path: &str, permission: AccessControlList, time_stamp: Timestamp) -> Self {
        Rnode {
            rnode_type: RnodeType::Directory,
            rnode_id: id,
            file_name: path_name(path).to_string(),
            file_size: 0,
            file_id: id,
            file_path: path.to_string(),
            n: 0,
            k: 0,
            block_count: 0,
            frag_location: BTreeMap::new(),
            file_list: Vec::new(),
            folder_list: Vec::new(),
            permission,
            time_stamp,
        }
    }

    pub fn is_dir(&self) -> bool {
        self.rnode_type == RnodeType::Directory
    }

    /// Holder of fragment `fragment` of block `block`.
    pub fn holder(&self, block: u32, fragment: u16) -> Option<&Guid> {
        self.frag_location.get(&(block, fragment))
    }

    pub fn validate(&self) -> Result<(), MalformedMetadata> {
        validate_path(&self.file_path).map_err(|e| malformed(e.to_string()))?;
        self.permission.validate()?;
        match self.rnode_type {
            RnodeType::File => {
                if !self.file_list.is_empty() || !self.folder_list.is_empty() {
                    return Err(malformed("file rnode with children"));
                }
                if self.k == 0 || self.k > self.n {
                    return Err(malformed(format!("need 1 <= k <= n, got k={} n={}", self.k, self.n)));
                }
                if self.block_count == 0 {
                    return Err(malformed("file rnode with zero blocks"));
                }
                let expected = self.block_count as usize * self.n as usize;
                if self.frag_location.len() != expected {
                    return Err(malformed(format!(
                        "{} fragment locations, expected {expected}",
                        self.frag_location.len()
                    )));
                }
                if self.frag_location.keys().any(|&(b, f)| b >= self.block_count || f >= self.n) {
                    return Err(malformed("fragment location outside block/fragment range"));
                }
            }
            RnodeType::Directory => {
                if self.n != 0 || self.k != 0 || self.block_count != 0 || !self.frag_location.is_empty() {
                    return Err(malformed("directory rnode with coding parameters"));
                }
            }
        }
        Ok(())
    }
}

/// JSON encoding of an rnode. Field order and map order are fixed.
pub fn serialize_rnode(rnode: &Rnode) -> Vec<u8> {
    serde_json::to_vec(rnode).expect("rnode fields always serialize")
}

pub fn deserialize_rnode(bytes: &[u8]) -> Result<Rnode, MalformedMetadata> {
    let rnode: Rnode = serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
    rnode.validate()?;
    Ok(rnode)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("path {0:?} is not absolute")]
    NotAbsolute(String),
    #[error("path {0:?} has an empty segment")]
    EmptySegment(String),
}

/// Namespace paths are rooted at `/`, have no empty segments and no trailing `/`.
pub fn validate_path(path: &str) -> Result<(), PathError> {
    if !path.starts_with('/') {
        return Err(PathError::NotAbsolute(path.to_string()));
    }
    if path == "/" {
        return Ok(());
    }
    if path[1..].split('/').any(str::is_empty) {
        return Err(PathError::EmptySegment(path.to_string()));
    }
    Ok(())
}

/// Parent directory of a validated path; `None` for the root.
pub fn parent_path(path: &str) -> Option<&str> {
    if path == "/" {
        return None;
    }
    match path.rfind('/') {
        Some(0) => Some("/"),
        Some(i) => Some(&path[..i]),
        None => None,
    }
}

/// Last segment of a validated path; empty for the root.
pub fn path_name(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or("")
}

/// One erasure-coded share of one encrypted block, with its header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub file_id: ObjectId,
    pub block_index: u32,
    pub fragment_index: u16,
    pub n: u16,
    pub k: u16,
    pub time_stamp: Timestamp,
    pub key_shard: Vec<u8>,
    pub payload: Vec<u8>,
}

/// Fixed part of the binary fragment header, before the key shard bytes.
pub const FRAGMENT_HEADER_LEN: usize = 16 + 4 + 2 + 2 + 2 + 8 + 2;

impl Fragment {
    /// Storage slot this fragment occupies on a device.
    pub fn slot(&self) -> FragmentSlot {
        FragmentSlot { file_id: self.file_id, block_index: self.block_index, fragment_index: self.fragment_index }
    }

    /// Binary layout: fileId(16) blockIndex(u32) fragmentIndex(u16) n(u16) k(u16)
    /// timeStamp(u64) keyShardLen(u16) keyShard payload, integers big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAGMENT_HEADER_LEN + self.key_shard.len() + self.payload.len());
        out.extend_from_slice(self.file_id.as_bytes());
        out.extend_from_slice(&self.block_index.to_be_bytes());
        out.extend_from_slice(&self.fragment_index.to_be_bytes());
        out.extend_from_slice(&self.n.to_be_bytes());
        out.extend_from_slice(&self.k.to_be_bytes());
        out.extend_from_slice(&self.time_stamp.to_be_bytes());
        let shard_len = u16::try_from(self.key_shard.len()).expect("key shard fits u16 length");
        out.extend_from_slice(&shard_len.to_be_bytes());
        out.extend_from_slice(&self.key_shard);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MalformedMetadata> {
        if bytes.len() < FRAGMENT_HEADER_LEN {
            return Err(malformed("fragment shorter than its header"));
        }
        let mut r = Reader(bytes);
        let file_id = ObjectId::from_bytes(r.take::<16>());
        let block_index = u32::from_be_bytes(r.take());
        let fragment_index = u16::from_be_bytes(r.take());
        let n = u16::from_be_bytes(r.take());
        let k = u16::from_be_bytes(r.take());
        let time_stamp = u64::from_be_bytes(r.take());
        let shard_len = u16::from_be_bytes(r.take()) as usize;
        if r.0.len() < shard_len {
            return Err(malformed("fragment key shard truncated"));
        }
        let (key_shard, payload) = r.0.split_at(shard_len);
        if k == 0 || k > n || fragment_index >= n {
            return Err(malformed(format!("fragment header k={k} n={n} index={fragment_index}")));
        }
        Ok(Fragment {
            file_id,
            block_index,
            fragment_index,
            n,
            k,
            time_stamp,
            key_shard: key_shard.to_vec(),
            payload: payload.to_vec(),
        })
    }

    /// `<fileIdHex>.<blockIndex>.<fragmentIndex>.frag`
    pub fn file_name(&self) -> String {
        self.slot().file_name()
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        head.try_into().expect("split_at yields N bytes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FragmentSlot {
    pub file_id: ObjectId,
    pub block_index: u32,
    pub fragment_index: u16,
}

impl FragmentSlot {
    pub fn file_name(&self) -> String {
        format!("{}.{}.{}.frag", self.file_id.to_hex(), self.block_index, self.fragment_index)
    }
}

/// Output of the placement planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CodingPlan {
    pub k: usize,
    pub n: usize,
    /// Chosen holders; fragment `j` of every block goes to `devices[j]`.
    pub devices: Vec<Guid>,
    pub cost: f64,
    pub code_rate: f64,
    /// File size after coding, `F * n / k`, in the unit of the planner's file size.
    pub encoded_size: f64,
}
