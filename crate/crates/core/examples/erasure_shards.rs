//! Encode a block into n shards, lose some, rebuild from what is left.
//!
//! ```text
//! cargo run --example erasure_shards
//! ```

use rdrive::erasure;

fn main() {
    let block = b"fragments of a block survive the loss of any n-k holders".to_vec();
    let (k, n) = (3, 5);
    let set = erasure::encode(&block, k, n).expect("valid parameters");
    println!("{} bytes -> {n} shards of {} bytes (rate {:.2})", block.len(), set.shard_len, k as f64 / n as f64);

    let mut survivors = set.clone();
    survivors.retain(&[1, 3, 4]);
    let rebuilt = erasure::decode(&survivors).expect("k shards remain");
    println!("from shards 1,3,4: {}", String::from_utf8_lossy(&rebuilt));

    survivors.retain(&[3, 4]);
    println!("from shards 3,4: {}", erasure::decode(&survivors).unwrap_err());
}
