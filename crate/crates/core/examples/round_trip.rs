//! Store a file across six devices, lose two, read it back.
//!
//! ```text
//! cargo run --example round_trip
//! ```

use rdrive::engine::{EngineConfig, EngineSetup, PutRequest, StorageEngine};
use rdrive::types::{AccessControlList, DeviceProfile, Guid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let devices: Vec<DeviceProfile> = (0..6)
        .map(|i| DeviceProfile::new(Guid::synthetic(&format!("node{i}-")), 64.0, 500.0 - 40.0 * i as f64))
        .collect();
    let config = EngineConfig { block_size: 256 << 10, required_lifetime: 120.0, ..EngineConfig::default() };
    let engine = StorageEngine::new(EngineSetup::fully_connected(devices, config))?;
    let d = engine.devices();

    let data: Vec<u8> = (0..1_000_000u32).map(|i| (i % 251) as u8).collect();
    engine.mkdir("/field", Some(AccessControlList::world(d[0].clone())), &d[0])?;
    let req = PutRequest::new("/field/survey.bin", data.clone()).with_acl(AccessControlList::world(d[0].clone()));
    let receipt = engine.put_with_receipt(&req, &d[0])?;
    let plan = &receipt.plan;
    println!("{} blocks as ({}, {}), {} fragments sent", receipt.rnode.block_count, plan.k, plan.n, receipt.dispatches.len());

    engine.flush();
    let lost = plan.n - plan.k;
    for g in plan.devices.iter().take(lost) {
        engine.kill_device(g)?;
    }
    let reader = &d[5];
    let (back, stats) = engine.get_with_stats("/field/survey.bin", reader)?;
    println!(
        "{lost} holders down: read {} bytes, identical={}, {} requests, {} ticks",
        back.len(),
        back == data,
        stats.requests.len(),
        stats.finished - stats.started
    );
    Ok(())
}
