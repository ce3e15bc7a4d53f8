mod common;

use common::shamir;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rdrive::crypto::{self, CryptoError, FileKey, KeyShard, CIPHERTEXT_OVERHEAD, NONCE_LEN};
use rdrive::types::ObjectId;

proptest! {
    #[test]
    fn shards_interpolate_to_the_key(seed in any::<u64>(), shares in 1usize..40) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = FileKey::generate(&mut rng);
        let shards = crypto::split_key(&key, shares, &mut rng).unwrap();
        prop_assert_eq!(shards.len(), shares);
        for byte in 0..crypto::KEY_LEN {
            let points: Vec<(u8, u8)> = shards.iter().map(|s| (s.index, s.value[byte])).collect();
            prop_assert_eq!(shamir::interpolate_at_zero(&points), key.as_bytes()[byte]);
        }
    }

    #[test]
    fn join_ignores_order_and_needs_all(seed in any::<u64>(), shares in 1usize..40) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = FileKey::generate(&mut rng);
        let mut shards = crypto::split_key(&key, shares, &mut rng).unwrap();
        shards.shuffle(&mut rng);
        let joined = crypto::join_key(&shards, shares).unwrap();
        prop_assert_eq!(joined.as_bytes(), key.as_bytes());
        let dropped = shards.pop().unwrap();
        let is_insufficient = matches!(crypto::join_key(&shards, shares), Err(CryptoError::InsufficientShards { .. }));
        prop_assert!(is_insufficient);
        shards.push(shards.first().cloned().unwrap_or(dropped));
        if shares > 1 {
            prop_assert_eq!(crypto::join_key(&shards, shares).unwrap_err(), CryptoError::DuplicateShardIndex(shards[0].index));
        }
    }

    #[test]
    fn shard_bytes_round_trip(index in 1u8.., value in any::<[u8; 32]>()) {
        let s = KeyShard { index, value };
        prop_assert_eq!(KeyShard::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn sealed_block_layout(data in proptest::collection::vec(any::<u8>(), 0..300), block in any::<u32>(), id in any::<[u8; 16]>(), seed in any::<u64>()) {
        let key = FileKey::generate(&mut ChaCha20Rng::seed_from_u64(seed));
        let file = ObjectId::from_bytes(id);
        let sealed = crypto::encrypt_block(&data, &key, &file, block);
        prop_assert_eq!(sealed.len(), data.len() + CIPHERTEXT_OVERHEAD);
        prop_assert_eq!(&sealed[..4], &block.to_be_bytes()[..]);
        prop_assert_eq!(&sealed[4..NONCE_LEN], &id[..8]);
        prop_assert_eq!(crypto::decrypt_block(&sealed, &key, &file, block).unwrap(), data);
        prop_assert_eq!(crypto::decrypt_block(&sealed, &key, &file, block.wrapping_add(1)), Err(CryptoError::AuthenticationFailure));
    }

    #[test]
    fn any_flip_fails_authentication(data in proptest::collection::vec(any::<u8>(), 1..100), pos in any::<usize>(), bit in 0u8..8) {
        let key = FileKey::from_bytes([9; 32]);
        let file = ObjectId::from_bytes([3; 16]);
        let mut sealed = crypto::encrypt_block(&data, &key, &file, 0);
        let i = pos % sealed.len();
        sealed[i] ^= 1 << bit;
        prop_assert_eq!(crypto::decrypt_block(&sealed, &key, &file, 0), Err(CryptoError::AuthenticationFailure));
    }
}

/// Two of three shards fixed, the third value random: the secret interpolated
/// from them is uniform, so two shards say nothing about the key.
#[test]
fn two_of_three_shards_reveal_nothing() {
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let key = FileKey::generate(&mut rng);
    let shards = crypto::split_key(&key, 3, &mut rng).unwrap();
    let trials = 1000;
    let mut counts = [0u32; 256];
    for _ in 0..trials {
        let mut third = shards[2].clone();
        rand::RngCore::fill_bytes(&mut rng, &mut third.value);
        let guess = crypto::join_key(&[shards[0].clone(), shards[1].clone(), third], 3).unwrap();
        counts[guess.as_bytes()[0] as usize] += 1;
    }
    let expected = trials as f64 / 256.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 255 degrees of freedom; the 0.1% critical value is about 330.
    assert!(chi2 < 330.0, "chi-squared {chi2}");
}

#[test]
fn every_single_bit_flip_of_short_blocks_is_caught() {
    let key = FileKey::from_bytes([5; 32]);
    let file = ObjectId::from_bytes([6; 16]);
    for len in 0..=16usize {
        let data: Vec<u8> = (0..len as u8).collect();
        let sealed = crypto::encrypt_block(&data, &key, &file, 2);
        for bit in 0..sealed.len() * 8 {
            let mut bad = sealed.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(crypto::decrypt_block(&bad, &key, &file, 2), Err(CryptoError::AuthenticationFailure), "len {len} bit {bit}");
        }
    }
}

#[test]
fn block_index_changes_ciphertext() {
    let key = FileKey::from_bytes([5; 32]);
    let file = ObjectId::from_bytes([6; 16]);
    assert_ne!(crypto::encrypt_block(b"same", &key, &file, 0), crypto::encrypt_block(b"same", &key, &file, 1));
}
