//! Systematic Reed-Solomon `(n, k)` erasure coding over GF(2^8).
//!
//! A block is prefixed with its length (4 bytes, big-endian), zero-filled to a
//! multiple of `k` and split into `k` data shards. The generator matrix is the
//! `n x k` Vandermonde matrix multiplied by the inverse of its top `k x k`
//! square, so its first `k` rows are the identity and shards `0..k` are the
//! raw data. Any `k` of the `n` shards reconstruct the block.

use crate::gf256::{self, Matrix};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

/// Bytes of the big-endian length prefix written before the block.
pub const LENGTH_PREFIX: usize = 4;
/// Upper bound on `n` imposed by the field size.
pub const MAX_SHARDS: usize = 255;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid coding parameters: {0}")]
    InvalidParameters(String),
    #[error("need {needed} shards to decode, only {present} present")]
    InsufficientShards { needed: usize, present: usize },
    #[error("inconsistent shards: {0}")]
    InconsistentShards(String),
    #[error("decoded block carries an invalid length prefix or padding")]
    CorruptPadding,
}

/// Up to `n` shards of one encoded block, indexed by shard number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSet {
    pub k: usize,
    pub n: usize,
    pub shard_len: usize,
    pub shards: Vec<Option<Vec<u8>>>,
}

impl ShardSet {
    /// An empty set ready to receive shards.
    pub fn empty(k: usize, n: usize, shard_len: usize) -> Self {
        ShardSet { k, n, shard_len, shards: vec![None; n] }
    }

    pub fn present(&self) -> usize {
        self.shards.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_decodable(&self) -> bool {
        self.present() >= self.k
    }

    /// Drop every shard whose index is not in `keep`.
    pub fn retain(&mut self, keep: &[usize]) {
        for (i, slot) in self.shards.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *slot = None;
            }
        }
    }

    pub fn total_bytes(&self) -> usize {
        self.shards.iter().flatten().map(Vec::len).sum()
    }
}

/// Shard length for a block of `block_len` bytes split `k` ways.
pub fn shard_len_for(block_len: usize, k: usize) -> usize {
    (block_len + LENGTH_PREFIX).div_ceil(k)
}

type GeneratorCache = Mutex<HashMap<(usize, usize), Arc<Matrix>>>;

fn generator(k: usize, n: usize) -> Arc<Matrix> {
    static CACHE: OnceLock<GeneratorCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("generator cache poisoned");
    guard
        .entry((k, n))
        .or_insert_with(|| Arc::new(build_generator(k, n)))
        .clone()
}

fn build_generator(k: usize, n: usize) -> Matrix {
    let vandermonde = Matrix::vandermonde(n, k);
    let top: Vec<usize> = (0..k).collect();
    let top_inv = vandermonde
        .select_rows(&top)
        .invert()
        .expect("square Vandermonde over distinct points is invertible");
    vandermonde.mul(&top_inv)
}

fn check_params(k: usize, n: usize) -> Result<(), CodecError> {
    if k == 0 {
        return Err(CodecError::InvalidParameters("k must be at least 1".into()));
    }
    if k > n {
        return Err(CodecError::InvalidParameters(format!("k = {k} exceeds n = {n}")));
    }
    if n > MAX_SHARDS {
        return Err(CodecError::InvalidParameters(format!("n = {n} exceeds {MAX_SHARDS}")));
    }
    Ok(())
}

/// Encode `block` into `n` shards, any `k` of which reconstruct it.
pub fn encode(block: &[u8], k: usize, n: usize) -> Result<ShardSet, CodecError> {
    check_params(k, n)?;
    if block.is_empty() {
        return Err(CodecError::InvalidParameters("block is empty".into()));
    }
    let len = u32::try_from(block.len())
        .map_err(|_| CodecError::InvalidParameters("block longer than 4 GiB".into()))?;
    let shard_len = shard_len_for(block.len(), k);

    let mut padded = Vec::with_capacity(shard_len * k);
    padded.extend_from_slice(&len.to_be_bytes());
    padded.extend_from_slice(block);
    padded.resize(shard_len * k, 0);

    let gen = generator(k, n);
    let mut shards: Vec<Option<Vec<u8>>> = padded.chunks(shard_len).map(|c| Some(c.to_vec())).collect();
    for row in k..n {
        let mut parity = vec![0u8; shard_len];
        for (col, data) in padded.chunks(shard_len).enumerate() {
            gf256::mul_add_slice(&mut parity, data, gen.get(row, col));
        }
        shards.push(Some(parity));
    }
    Ok(ShardSet { k, n, shard_len, shards })
}

/// Reconstruct the original block from any `k` shards.
pub fn decode(set: &ShardSet) -> Result<Vec<u8>, CodecError> {
    check_params(set.k, set.n)?;
    if set.shards.len() != set.n {
        return Err(CodecError::InconsistentShards(format!(
            "{} shard slots for n = {}",
            set.shards.len(),
            set.n
        )));
    }
    if let Some((i, s)) = set
        .shards
        .iter()
        .enumerate()
        .find_map(|(i, s)| s.as_ref().filter(|s| s.len() != set.shard_len).map(|s| (i, s)))
    {
        return Err(CodecError::InconsistentShards(format!(
            "shard {i} has {} bytes, expected {}",
            s.len(),
            set.shard_len
        )));
    }
    let present = set.present();
    if present < set.k {
        return Err(CodecError::InsufficientShards { needed: set.k, present });
    }

    let k = set.k;
    let mut padded = vec![0u8; set.shard_len * k];
    if set.shards[..k].iter().all(Option::is_some) {
        for (dst, src) in padded.chunks_mut(set.shard_len).zip(set.shards.iter().flatten()) {
            dst.copy_from_slice(src);
        }
    } else {
        let rows: Vec<usize> = (0..set.n).filter(|&i| set.shards[i].is_some()).take(k).collect();
        let decoder = generator(k, set.n)
            .select_rows(&rows)
            .invert()
            .expect("any k rows of a systematic MDS generator are independent");
        for (out_row, dst) in padded.chunks_mut(set.shard_len).enumerate() {
            for (col, &src_idx) in rows.iter().enumerate() {
                let src = set.shards[src_idx].as_deref().expect("row selected as present");
                gf256::mul_add_slice(dst, src, decoder.get(out_row, col));
            }
        }
    }

    let mut prefix = [0u8; LENGTH_PREFIX];
    prefix.copy_from_slice(&padded[..LENGTH_PREFIX]);
    let len = u32::from_be_bytes(prefix) as usize;
    if len == 0 || len > padded.len() - LENGTH_PREFIX {
        return Err(CodecError::CorruptPadding);
    }
    // Encoding zero-fills the tail; anything else there is damage.
    if padded[LENGTH_PREFIX + len..].iter().any(|&b| b != 0) {
        return Err(CodecError::CorruptPadding);
    }
    padded.truncate(LENGTH_PREFIX + len);
    padded.drain(..LENGTH_PREFIX);
    Ok(padded)
}
