//! A five-member metadata ensemble losing members, refusing writes without a
//! majority, and being rebuilt from the survivors.
//!
//! ```text
//! cargo run --example metadata_quorum
//! ```

use rdrive::metadata::MetadataCluster;
use rdrive::types::{AccessControlList, Guid, ObjectId, Rnode};
use std::collections::BTreeSet;

fn dir(path: &str, owner: &Guid) -> Rnode {
    Rnode::directory(ObjectId::from_bytes([7; 16]), path, AccessControlList::world(owner.clone()), 0)
}

fn main() {
    let owner = Guid::synthetic("owner-");
    let members: Vec<Guid> = (1..=5).map(|i| Guid::synthetic(&format!("keeper{i}-"))).collect();
    let c = MetadataCluster::new(members.clone(), AccessControlList::world(owner.clone()), 0).unwrap();

    c.create_rnode("/shared", &dir("/shared", &owner), &owner).unwrap();
    c.fail_replica(&members[0]).unwrap();
    c.fail_replica(&members[1]).unwrap();
    c.create_rnode("/shared/maps", &dir("/shared/maps", &owner), &owner).unwrap();
    println!("2 of 5 down: write ok, primary {}", &c.primary().as_str()[..7]);

    c.fail_replica(&members[2]).unwrap();
    println!("3 of 5 down: {}", c.create_rnode("/late", &dir("/late", &owner), &owner).unwrap_err());

    c.revive_replica(&members[2]).unwrap();
    let failed: BTreeSet<Guid> = members[..2].iter().cloned().collect();
    let spares = [Guid::synthetic("spare1-"), Guid::synthetic("spare2-")];
    let epoch = c.reform_ensemble(&failed, &spares).unwrap();
    let (folders, _) = c.list("/shared", &owner).unwrap();
    println!("reformed at epoch {epoch}: {} members, converged={}, /shared holds {folders:?}", c.replicas().len(), c.live_stores_converged());
}
