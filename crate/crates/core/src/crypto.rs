//! Per-file block encryption and all-of-B splitting of the file key.
//!
//! Blocks are sealed with AES-256-GCM. The nonce is derived from the block
//! index and the file id, and the pair is also bound as associated data, so a
//! ciphertext only opens at the position it was written for.
//!
//! The file key is split with Shamir's scheme over GF(2^8): every key byte is
//! the constant term of its own random polynomial of degree `B - 1`, and shard
//! `j` holds the 32 evaluations at `x = j`. All `B` shards are needed.

use crate::gf256;
use crate::types::ObjectId;
use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::{CryptoRng, RngCore};
use std::collections::BTreeSet;
use thiserror::Error;

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// Bytes added to every block by [`encrypt_block`].
pub const CIPHERTEXT_OVERHEAD: usize = NONCE_LEN + TAG_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failed: wrong key, wrong position or tampered data")]
    AuthenticationFailure,
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("need all {needed} key shards, got {got}")]
    InsufficientShards { needed: usize, got: usize },
    #[error("key shard index {0} supplied twice")]
    DuplicateShardIndex(u8),
}

/// A 256-bit file encryption key.
#[derive(Clone, PartialEq, Eq)]
pub struct FileKey([u8; KEY_LEN]);

impl FileKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        FileKey(bytes)
    }

    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        FileKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for FileKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FileKey(..)")
    }
}

/// Share `index` (1-based) of a split key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyShard {
    pub index: u8,
    pub value: [u8; KEY_LEN],
}

impl KeyShard {
    pub const ENCODED_LEN: usize = 1 + KEY_LEN;

    /// Index byte followed by the 32 evaluations.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.push(self.index);
        out.extend_from_slice(&self.value);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(CryptoError::InvalidParameters(format!(
                "key shard must be {} bytes, got {}",
                Self::ENCODED_LEN,
                bytes.len()
            )));
        }
        if bytes[0] == 0 {
            return Err(CryptoError::InvalidParameters("key shard index 0 is the secret".into()));
        }
        let mut value = [0u8; KEY_LEN];
        value.copy_from_slice(&bytes[1..]);
        Ok(KeyShard { index: bytes[0], value })
    }
}

fn nonce_for(file_id: &ObjectId, block_index: u32) -> [u8; NONCE_LEN] {
    let mut nonce = [0u8; NONCE_LEN];
    nonce[..4].copy_from_slice(&block_index.to_be_bytes());
    nonce[4..].copy_from_slice(&file_id.as_bytes()[..8]);
    nonce
}

fn associated_data(file_id: &ObjectId, block_index: u32) -> [u8; 20] {
    let mut aad = [0u8; 20];
    aad[..16].copy_from_slice(file_id.as_bytes());
    aad[16..].copy_from_slice(&block_index.to_be_bytes());
    aad
}

/// Seal one block. Output is `nonce || ciphertext || tag`.
pub fn encrypt_block(plaintext: &[u8], key: &FileKey, file_id: &ObjectId, block_index: u32) -> Vec<u8> {
    let cipher = Aes256Gcm::new_from_slice(key.as_bytes()).expect("32-byte key");
    let nonce = nonce_for(file_id, block_index);
    let aad = associated_data(file_id, block_index);
    let sealed = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: &aad })
        .expect("AES-GCM encryption of an in-memory buffer cannot fail");
    let mut out = Vec::with_capacity(NONCE_LEN + sealed.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&sealed);
    out
}

pub fn decrypt_block(
    ciphertext: &[u8],
    key: &FileKey,
    file_id: &ObjectId,
    block_index: u32,
) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < CIPHERTEXT_OVERHEAD {
        return Err(CryptoError::AuthenticationFailure);
    }
    let (nonce, sealed) = ciphertext.split_at(NONCE_LEN);
    if nonce != nonce_for(file_id, block_index) {
        return Err(CryptoError::AuthenticationFailure);
    }
    let cipher = Aes256Gcm::new_from_slice(key.as_bytes()).expect("32-byte key");
    let aad = associated_data(file_id, block_index);
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: sealed, aad: &aad })
        .map_err(|_| CryptoError::AuthenticationFailure)
}

/// Split `key` into `shares` shards, all of which are needed to rebuild it.
pub fn split_key<R: RngCore + CryptoRng>(
    key: &FileKey,
    shares: usize,
    rng: &mut R,
) -> Result<Vec<KeyShard>, CryptoError> {
    if shares == 0 || shares > 255 {
        return Err(CryptoError::InvalidParameters(format!(
            "shard count must be in 1..=255, got {shares}"
        )));
    }
    let degree = shares - 1;
    // coefficients[byte][power], power 0 is the secret byte.
    let mut coefficients = vec![[0u8; KEY_LEN]; degree + 1];
    coefficients[0] = *key.as_bytes();
    for c in coefficients.iter_mut().skip(1) {
        rng.fill_bytes(c);
    }
    let shards = (1..=shares as u8)
        .map(|x| {
            let mut value = [0u8; KEY_LEN];
            for (byte, slot) in value.iter_mut().enumerate() {
                // Horner's rule from the highest power down.
                *slot = coefficients
                    .iter()
                    .rev()
                    .fold(0u8, |acc, c| gf256::add(gf256::mul(acc, x), c[byte]));
            }
            KeyShard { index: x, value }
        })
        .collect();
    Ok(shards)
}

/// Rebuild the key from all `shares` shards by Lagrange interpolation at zero.
pub fn join_key(shards: &[KeyShard], shares: usize) -> Result<FileKey, CryptoError> {
    if shares == 0 || shares > 255 {
        return Err(CryptoError::InvalidParameters(format!(
            "shard count must be in 1..=255, got {shares}"
        )));
    }
    let mut seen = BTreeSet::new();
    for s in shards {
        if s.index == 0 || s.index as usize > shares {
            return Err(CryptoError::InvalidParameters(format!(
                "shard index {} outside 1..={shares}",
                s.index
            )));
        }
        if !seen.insert(s.index) {
            return Err(CryptoError::DuplicateShardIndex(s.index));
        }
    }
    if seen.len() < shares {
        return Err(CryptoError::InsufficientShards { needed: shares, got: seen.len() });
    }

    let weights: Vec<u8> = shards
        .iter()
        .map(|si| {
            shards
                .iter()
                .filter(|sj| sj.index != si.index)
                // l_i(0) = prod x_j / (x_j - x_i); subtraction is xor.
                .fold(1u8, |acc, sj| gf256::mul(acc, gf256::div(sj.index, sj.index ^ si.index)))
        })
        .collect();
    let mut key = [0u8; KEY_LEN];
    for (byte, slot) in key.iter_mut().enumerate() {
        *slot = shards
            .iter()
            .zip(&weights)
            .fold(0u8, |acc, (s, &w)| acc ^ gf256::mul(w, s.value[byte]));
    }
    Ok(FileKey(key))
}
