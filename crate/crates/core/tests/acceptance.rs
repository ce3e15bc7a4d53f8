//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! fails. Run one criterion with `cargo test --test acceptance -- 7`.

mod common;

use common::{bytes, guid, rs};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdrive::command;
use rdrive::crypto::{self, CryptoError, FileKey};
use rdrive::engine::{DeviceStore, EngineConfig, EngineError, PutRequest};
use rdrive::erasure;
use rdrive::harness::{self, InterEdgeReport, InterEdgeSpec, ResilienceSpec, ScenarioSpec};
use rdrive::metadata::{MetaError, MetadataCluster};
use rdrive::planner::{self, PlannerInputs};
use rdrive::types::{AccessControlList, Fragment, FragmentSlot, Guid, ObjectId, Rnode, RnodeType};
use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol + 1e-12
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// 1
fn lower_bounds() -> Outcome {
    let start = Instant::now();
    let expected = [(0.9, 0.6, 0.35), (0.8, 0.8, 0.5), (0.7, 0.91, 0.65), (0.6, 0.98, 0.8), (0.5, 1.0, 1.0)];
    let weights: Vec<f64> = expected.iter().map(|e| e.0).collect();
    let rows = harness::run_lower_bounds(&weights, 30);
    let took = start.elapsed();
    for (row, &(w, cost, rate)) in rows.iter().zip(&expected) {
        check(
            within(row.cost, cost, 0.01) && within(row.code_rate, rate, 0.02),
            format!("w_a={w}: cost {:.4} rate {:.4}, want {cost} / {rate}", row.cost, row.code_rate),
        )?;
    }
    check(took < Duration::from_secs(1), format!("took {}", secs(took)))?;
    Ok(format!("5 rows within tolerance in {}", secs(took)))
}

// 2
fn achieved_cost() -> Outcome {
    let start = Instant::now();
    let rows = harness::run_achieved_cost(&ScenarioSpec::default()).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let cost = |w: f64, ns: usize| {
        rows.iter().find(|r| r.weight == w && r.network_size == ns).map(|r| r.mean_cost).unwrap_or(f64::NAN)
    };
    for (w, want) in [(0.9, 0.6), (0.8, 0.8), (0.7, 0.9165), (0.6, 0.9797), (0.5, 1.0)] {
        let got = cost(w, 30);
        check(within(got, want, 0.02), format!("NS=30 w_a={w}: {got:.4}, want {want} +-0.02"))?;
    }
    let trend: Vec<f64> = [10, 20, 30].iter().map(|&ns| cost(1.0, ns)).collect();
    check(trend[0] > trend[1] && trend[1] > trend[2], format!("w_a=1.0 not decreasing: {trend:?}"))?;
    for (got, want, ns) in [(trend[0], 0.66, 10), (trend[1], 0.3613, 20), (trend[2], 0.2402, 30)] {
        check(within(got, want, 0.1), format!("w_a=1.0 NS={ns}: {got:.4}, want {want} +-0.1"))?;
    }
    check(took < Duration::from_secs(60), format!("took {}", secs(took)))?;
    Ok(format!(
        "NS=30 rows match; w_a=1.0 {:.4} > {:.4} > {:.4}; {}",
        trend[0],
        trend[1],
        trend[2],
        secs(took)
    ))
}

// 3
fn planner_runtime() -> Outcome {
    let spec = ScenarioSpec::default();
    let mut worst = BTreeMap::new();
    for (ns, budget) in [(10usize, Duration::from_millis(50)), (30, Duration::from_secs(1))] {
        let mut max = Duration::ZERO;
        for run in 0..10 {
            let inputs = PlannerInputs {
                file_size: spec.file_size,
                required_lifetime: spec.required_lifetime,
                availability_weight: 0.8,
                devices: spec.sample_devices(ns, run),
            };
            let start = Instant::now();
            let _ = planner::plan(&inputs);
            max = max.max(start.elapsed());
        }
        check(max < budget, format!("N={ns}: {max:?} over {budget:?}"))?;
        worst.insert(ns, max);
    }
    Ok(format!("worst N=10 {:?}, N=30 {:?}", worst[&10], worst[&30]))
}

// 4
fn round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut total = 0usize;
    for cycle in 0..200 {
        // Log-uniform over 1 B ..= 32 MiB.
        let len = (2f64.powf(rng.gen_range(0.0..=25.0)) as usize).clamp(1, 32 << 20);
        let mut block = *[64usize << 10, 1 << 20, 4 << 20].choose(&mut rng).unwrap();
        // Key splitting caps a file at 255 blocks.
        while len.div_ceil(block) > 255 {
            block *= 4;
        }
        let devices = rng.gen_range(3..=10);
        let e = common::engine(devices, EngineConfig { seed: cycle, ..EngineConfig::default() });
        let d = e.devices();
        let data = bytes(len, cycle);
        let req = PutRequest::new("/f", data.clone())
            .with_acl(AccessControlList::world(d[0].clone()))
            .with_block_size(block)
            .with_weight(rng.gen_range(0.5..=1.0));
        let writer = d.choose(&mut rng).unwrap();
        let reader = d.choose(&mut rng).unwrap();
        e.put(&req, writer).map_err(|err| format!("cycle {cycle} put {len} B: {err}"))?;
        let got = e.get("/f", reader).map_err(|err| format!("cycle {cycle} get {len} B: {err}"))?;
        check(got == data, format!("cycle {cycle}: {len} B differ"))?;
        total += len;
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(120), format!("took {}", secs(took)))?;
    Ok(format!("200/200 identical, {:.1} MiB total, {}", total as f64 / (1 << 20) as f64, secs(took)))
}

// 5
fn fault_tolerance() -> Outcome {
    let start = Instant::now();
    let mut sets = 0;
    for (k, n) in [(1, 2), (2, 3), (2, 4), (3, 5), (4, 6)] {
        let spec = ResilienceSpec { k, n, file_bytes: 20_000, block_size: 8192, seed: 5 };
        let rows = harness::run_resilience_sweep(&spec).map_err(|e| e.to_string())?;
        for r in &rows {
            sets += r.kill_sets;
            check(r.other_failures == 0, format!("({k},{n}) kill {}: {} unexpected failures", r.killed, r.other_failures))?;
            if r.killed <= n - k {
                check(r.successes == r.kill_sets, format!("({k},{n}) kill {}: {}/{} read", r.killed, r.successes, r.kill_sets))?;
            }
        }
        let edge = &rows[n - k + 1];
        check(edge.irrecoverable > 0, format!("({k},{n}) kill {}: no IrrecoverableBlock", n - k + 1))?;
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(300), format!("took {}", secs(took)))?;
    Ok(format!("{sets} kill sets over 5 codes, boundary at n-k, {}", secs(took)))
}

// 6
fn any_k() -> Outcome {
    let mut subsets = 0;
    for n in 1..=8usize {
        for k in 1..=n {
            let block = bytes(1000 + 17 * n + k, (n * 100 + k) as u64);
            let set = erasure::encode(&block, k, n).map_err(|e| e.to_string())?;
            let reference = rs::encode(&block, k, n);
            for mask in 0u32..1 << n {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let keep: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                let mut partial = set.clone();
                partial.retain(&keep);
                let ours = erasure::decode(&partial).map_err(|e| format!("k={k} n={n} {keep:?}: {e}"))?;
                let picked: Vec<(usize, Vec<u8>)> = keep.iter().map(|&i| (i, reference[i].clone())).collect();
                check(ours == rs::decode(&picked, k, n) && ours == block, format!("k={k} n={n} {keep:?} differs"))?;
                subsets += 1;
            }
        }
    }
    Ok(format!("{subsets} subsets agree with the reference decoder"))
}

// 7
fn key_threshold() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for b in 1..=32usize {
        for _ in 0..100 {
            let key = FileKey::generate(&mut rand_chacha::ChaCha20Rng::seed_from_u64(rng.gen()));
            let mut shards = crypto::split_key(&key, b, &mut rand_chacha::ChaCha20Rng::seed_from_u64(rng.gen()))
                .map_err(|e| e.to_string())?;
            shards.shuffle(&mut rng);
            let joined = crypto::join_key(&shards, b).map_err(|e| format!("B={b}: {e}"))?;
            check(joined.as_bytes() == key.as_bytes(), format!("B={b}: wrong key"))?;
            shards.pop();
            let short = crypto::join_key(&shards, b);
            check(
                matches!(short, Err(CryptoError::InsufficientShards { .. })),
                format!("B={b}: B-1 shards gave {short:?}"),
            )?;
        }
    }
    Ok("3200 keys: B shards join, B-1 refused".into())
}

// 8
fn tamper_detection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..500u64 {
        let n = rng.gen_range(2..=6usize);
        let k = rng.gen_range(1..=n);
        let e = common::engine(n + 1, EngineConfig { seed: trial, block_size: 4096, ..EngineConfig::default() });
        let d = e.devices();
        let data = bytes(rng.gen_range(1..20_000), trial);
        let rnode = e
            .put(&PutRequest::new("/f", data).with_acl(AccessControlList::world(d[0].clone())).with_coding(k, n), &d[0])
            .map_err(|err| err.to_string())?;
        e.flush();
        let block = rng.gen_range(0..rnode.block_count);
        let frag = rng.gen_range(0..n as u16);
        let holders: Vec<Guid> = (0..n as u16).map(|j| rnode.holder(block, j).unwrap().clone()).collect();
        let slot = FragmentSlot { file_id: rnode.file_id, block_index: block, fragment_index: frag };
        {
            let store = e.device_store(&holders[frag as usize]).unwrap();
            let mut store = store.lock().unwrap();
            let payload = &mut store.fragment_mut(&slot).unwrap().payload;
            let at = rng.gen_range(0..payload.len());
            payload[at] ^= 1 << rng.gen_range(0..8);
        }
        // Keep exactly k holders alive, the damaged one among them.
        let mut others: Vec<usize> = (0..n).filter(|&j| j != frag as usize).collect();
        others.shuffle(&mut rng);
        for &j in &others[..n - k] {
            e.kill_device(&holders[j]).map_err(|err| err.to_string())?;
        }
        let reader = d.iter().find(|g| !holders.contains(g)).unwrap();
        let got = e.get("/f", reader);
        check(
            got == Err(EngineError::AuthenticationFailure),
            format!("trial {trial} ({k},{n}) block {block} frag {frag}: {:?}", got.map(|v| v.len())),
        )?;
    }
    Ok("500/500 corruptions rejected".into())
}

fn file_rnode(path: &str, owner: &Guid, ts: u64) -> Rnode {
    Rnode {
        rnode_type: RnodeType::File,
        rnode_id: ObjectId::from_bytes([1; 16]),
        file_name: path.rsplit('/').next().unwrap().into(),
        file_size: 10,
        file_id: ObjectId::from_bytes([2; 16]),
        file_path: path.into(),
        n: 1,
        k: 1,
        block_count: 1,
        frag_location: [((0, 0), owner.clone())].into_iter().collect(),
        file_list: vec![],
        folder_list: vec![],
        permission: AccessControlList::world(owner.clone()),
        time_stamp: ts,
    }
}

fn dir_rnode(path: &str, owner: &Guid) -> Rnode {
    Rnode::directory(ObjectId::from_bytes([3; 16]), path, AccessControlList::world(owner.clone()), 1)
}

/// Every write kind, applied to both clusters.
fn metadata_writes(c: &MetadataCluster, oracle: &MetadataCluster, owner: &Guid, tag: &str) -> Result<(), MetaError> {
    for m in [c, oracle] {
        m.create_rnode(&format!("/{tag}"), &dir_rnode(&format!("/{tag}"), owner), owner)?;
        m.create_rnode(&format!("/{tag}/f"), &file_rnode(&format!("/{tag}/f"), owner, 1), owner)?;
        m.update_rnode(&format!("/{tag}/f"), &file_rnode(&format!("/{tag}/f"), owner, 2), owner)?;
        m.create_rnode(&format!("/{tag}/g"), &file_rnode(&format!("/{tag}/g"), owner, 1), owner)?;
        m.delete_rnode(&format!("/{tag}/g"), owner)?;
        m.set_acl(&format!("/{tag}"), AccessControlList::owner_only(owner.clone()), owner)?;
    }
    Ok(())
}

// 9
fn quorum() -> Outcome {
    let owner = guid("owner");
    for r in [3usize, 5] {
        let members: Vec<Guid> = (0..r).map(|i| guid(&format!("meta{i}-"))).collect();
        let c = MetadataCluster::new(members.clone(), AccessControlList::world(owner.clone()), 0).map_err(|e| e.to_string())?;
        let oracle = MetadataCluster::new(vec![guid("oracle")], AccessControlList::world(owner.clone()), 0).unwrap();
        metadata_writes(&c, &oracle, &owner, "before").map_err(|e| format!("r={r} healthy: {e}"))?;

        let minority = r / 2;
        for g in &members[..minority] {
            c.fail_replica(g).unwrap();
        }
        metadata_writes(&c, &oracle, &owner, "during").map_err(|e| format!("r={r} with {minority} down: {e}"))?;
        c.get_rnode("/during/f", &owner).map_err(|e| e.to_string())?;
        c.list("/", &owner).map_err(|e| e.to_string())?;
        c.get_acl("/during", &owner).map_err(|e| e.to_string())?;

        c.fail_replica(&members[minority]).unwrap();
        let refused = c.create_rnode("/after", &dir_rnode("/after", &owner), &owner);
        check(
            matches!(refused, Err(MetaError::QuorumUnavailable { .. })),
            format!("r={r} with {} down: write gave {refused:?}", minority + 1),
        )?;
        c.revive_replica(&members[minority]).unwrap();

        let failed: BTreeSet<Guid> = members[..minority].iter().cloned().collect();
        let fresh: Vec<Guid> = (0..minority).map(|i| guid(&format!("fresh{i}-"))).collect();
        c.reform_ensemble(&failed, &fresh).map_err(|e| format!("r={r} reform: {e}"))?;
        let replicas = c.replicas();
        check(replicas.len() == r && replicas.iter().all(|x| x.alive), format!("r={r}: {} live after reform", replicas.len()))?;
        let reference = &oracle.replicas()[0].store;
        for x in &replicas {
            check(&x.store == reference, format!("r={r}: replica {} differs from the oracle store", x.guid))?;
        }
    }
    Ok("r=3,5: minority loss tolerated, majority loss refused, reform matches oracle".into())
}

static INTER_EDGE: OnceLock<Result<(InterEdgeReport, InterEdgeReport, Duration), String>> = OnceLock::new();

fn inter_edge_runs() -> &'static Result<(InterEdgeReport, InterEdgeReport, Duration), String> {
    INTER_EDGE.get_or_init(|| {
        let start = Instant::now();
        let a = harness::run_inter_edge(&InterEdgeSpec::default()).map_err(|e| e.to_string())?;
        let took = start.elapsed();
        let b = harness::run_inter_edge(&InterEdgeSpec::default()).map_err(|e| e.to_string())?;
        Ok((a, b, took))
    })
}

// 10
fn data_mule() -> Outcome {
    let (a, b, took) = inter_edge_runs().as_ref().map_err(Clone::clone)?;
    check((a.k, a.n) == (4, 8), format!("planned ({}, {})", a.k, a.n))?;
    check(a.intra_edge_immediate(), "f1-f4 not delivered before the first mule contact")?;
    check(a.cross_edge_only_via_mule(), "f5-f8 arrived outside mule windows")?;
    check(a.cross_edge_delivered(), "some of f5-f8 never arrived")?;
    check(a.cross_edge_ordered(), "f5-f8 arrival ticks decrease")?;
    check(matches!(a.get_result, Ok(_)) && a.round_trip_identical, format!("edge-2 get: {:?}", a.get_result))?;
    check(a.csv() == b.csv(), "second run differs")?;
    check(*took < Duration::from_secs(30), format!("took {}", secs(*took)))?;
    let last = a.deliveries.iter().filter_map(|d| d.last_tick).max().unwrap_or(0);
    Ok(format!("(4,8) via mule, last fragment tick {last}, 100 MiB identical, {}", secs(*took)))
}

// 11
fn version_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = DeviceStore::new(guid("d"), u64::MAX);
    let mut highest: BTreeMap<FragmentSlot, u64> = BTreeMap::new();
    let mut arrivals: Vec<Fragment> = (0..20_000u64)
        .map(|i| Fragment {
            file_id: ObjectId::from_bytes([rng.gen_range(0..4); 16]),
            block_index: rng.gen_range(0..4),
            fragment_index: rng.gen_range(0..4),
            n: 4,
            k: 2,
            time_stamp: i / 8,
            key_shard: vec![1; 33],
            payload: vec![0; 8],
        })
        .collect();
    arrivals.shuffle(&mut rng);
    for f in arrivals {
        let slot = f.slot();
        let ts = f.time_stamp;
        let before = store.fragment(&slot).map(|x| x.time_stamp);
        store.handle_fragment_arrival(f).map_err(|e| e.to_string())?;
        let after = store.fragment(&slot).unwrap().time_stamp;
        check(before.is_none_or(|b| after >= b), format!("{slot:?} went from {before:?} to {after}"))?;
        let h = highest.entry(slot).or_insert(ts);
        *h = (*h).max(ts);
        check(after == *h, format!("{slot:?} holds {after}, newest seen {h}"))?;
    }
    Ok(format!("20000 shuffled arrivals over {} slots, never regressed", highest.len()))
}

// 12
fn grammar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..10_000 {
        let ast = common::grammar::derivation(&mut rng);
        let canonical = command::render(&ast);
        let text = common::grammar::spaced(&mut rng, &canonical);
        let parsed = command::parse_line(&text).map_err(|e| format!("derivation {i} {text:?}: {e}"))?;
        check(parsed == ast, format!("derivation {i} {text:?} parsed differently"))?;
        check(command::render(&parsed) == canonical, format!("derivation {i}: render round trip"))?;
        let (bad, at) = common::grammar::violation(&mut rng, &ast);
        match command::parse_line(&bad) {
            Ok(_) => return Err(format!("violation {bad:?} parsed")),
            Err(e) => check(e.position() == at, format!("violation {bad:?}: error at {}, want {at}", e.position()))?,
        }
    }
    Ok("10000 derivations parse and round-trip; 10000 violations rejected at the right byte".into())
}

// 13
fn determinism() -> Outcome {
    let spec = ScenarioSpec::default();
    let sweep = ScenarioSpec { weights: (0..=10).map(|i| i as f64 / 10.0).collect(), ..spec.clone() };
    let res = ResilienceSpec { k: 2, n: 4, file_bytes: 20_000, block_size: 8192, seed: 13 };
    let csvs = || -> Result<Vec<String>, String> {
        Ok(vec![
            harness::lower_bounds_csv(&harness::run_lower_bounds(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 30)),
            harness::achieved_cost_csv(&harness::run_achieved_cost(&spec).map_err(|e| e.to_string())?),
            harness::code_rate_csv(&harness::run_code_rate_sweep(&sweep).map_err(|e| e.to_string())?.rows),
            harness::resilience_csv(&res, &harness::run_resilience_sweep(&res).map_err(|e| e.to_string())?),
        ])
    };
    let (first, second) = (csvs()?, csvs()?);
    let names = ["lower-bounds", "achieved-cost", "code-rate", "resilience"];
    for (i, name) in names.iter().enumerate() {
        check(first[i] == second[i], format!("{name} CSV differs between runs"))?;
    }
    let (a, b, _) = inter_edge_runs().as_ref().map_err(Clone::clone)?;
    check(a.csv() == b.csv(), "inter-edge CSV differs between runs")?;
    Ok("5 scenarios byte-identical across two runs".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("cost lower bounds", lower_bounds),
        ("achieved cost", achieved_cost),
        ("planner runtime", planner_runtime),
        ("round-trip integrity", round_trip),
        ("fault-tolerance boundary", fault_tolerance),
        ("any-k decodability", any_k),
        ("key-shard threshold", key_threshold),
        ("tamper detection", tamper_detection),
        ("quorum survivability", quorum),
        ("inter-edge data mule", data_mule),
        ("version monotonicity", version_monotonicity),
        ("grammar suite", grammar),
        ("determinism", determinism),
    ];
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !only.is_empty() && !only.contains(&number) {
            continue;
        }
        match std::panic::catch_unwind(run) {
            Ok(Ok(detail)) => println!("criterion {number:2} {name:<26} PASS  {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("criterion {number:2} {name:<26} FAIL  {why}");
            }
            Err(_) => {
                failed += 1;
                println!("criterion {number:2} {name:<26} FAIL  panicked");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

