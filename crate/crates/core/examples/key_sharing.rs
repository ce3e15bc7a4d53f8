//! Seal blocks under one file key and split the key so every block holds
//! one share.
//!
//! ```text
//! cargo run --example key_sharing
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rdrive::crypto::{self, FileKey};
use rdrive::types::ObjectId;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let key = FileKey::generate(&mut rng);
    let file = ObjectId::random(&mut rng);
    let blocks: [&[u8]; 3] = [b"first block", b"second block", b"third block"];

    let sealed: Vec<Vec<u8>> = blocks.iter().enumerate().map(|(i, b)| crypto::encrypt_block(b, &key, &file, i as u32)).collect();
    let shards = crypto::split_key(&key, blocks.len(), &mut rng).expect("1..=255 shares");
    for (s, c) in shards.iter().zip(&sealed) {
        println!("block with share {}: {} sealed bytes", s.index, c.len());
    }

    // Every share is needed.
    println!("two shares: {}", crypto::join_key(&shards[..2], 3).unwrap_err());
    let back = crypto::join_key(&shards, 3).expect("all shares present");
    for (i, c) in sealed.iter().enumerate() {
        let plain = crypto::decrypt_block(c, &back, &file, i as u32).expect("authentic");
        println!("block {i}: {}", String::from_utf8_lossy(&plain));
    }

    let mut tampered = sealed[0].clone();
    tampered[20] ^= 1;
    println!("tampered: {}", crypto::decrypt_block(&tampered, &back, &file, 0).unwrap_err());
}
