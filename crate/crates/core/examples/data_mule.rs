//! Two disconnected edges bridged by a device that walks between them.
//! Prints the packet trace as CSV.
//!
//! ```text
//! cargo run --example data_mule
//! ```

use rdrive::network::{trace_to_csv, DeliveryStatus, LinkModel, Network, NetworkConfig};
use rdrive::types::Guid;
use std::collections::BTreeSet;

fn main() {
    let g = |s: &str| Guid::synthetic(s);
    let (a1, a2, b1, b2, mule) = (g("a1-"), g("a2-"), g("b1-"), g("b2-"), g("mule-"));
    let nodes = vec![a1.clone(), a2.clone(), b1.clone(), b2.clone(), mule.clone()];
    let cfg = NetworkConfig::new(nodes, 42)
        .full_mesh(&[a1.clone(), a2.clone()], LinkModel::always_up(1, 4096))
        .full_mesh(&[b1.clone(), b2.clone()], LinkModel::always_up(1, 4096));
    let mut net = Network::new(cfg).unwrap();
    let edge_a: BTreeSet<Guid> = [a1.clone(), a2].into();
    let edge_b: BTreeSet<Guid> = [b1, b2.clone()].into();
    // Near edge A for 5 ticks every 20, near edge B for 5 ticks from tick 10.
    net.set_mule_schedule(&mule, &edge_a, &edge_b, 20, 5).unwrap();

    let id = net.send(&a1, &b2, vec![0xAB; 3000], 120.0).unwrap();
    let trace = net.advance(60);
    match net.status(id) {
        Some(DeliveryStatus::Delivered(t)) => eprintln!("delivered at tick {t}"),
        other => eprintln!("status {other:?}"),
    }
    print!("{}", trace_to_csv(&trace));
}
