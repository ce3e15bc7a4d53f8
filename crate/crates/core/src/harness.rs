//! Reproducible experiment scenarios with CSV output.
//!
//! Every scenario is a pure function of its spec (including the seed), so
//! two runs produce byte-identical CSV.

use crate::engine::{EngineConfig, EngineError, EngineSetup, PutRequest, StorageEngine, MIB};
use crate::network::{DeliveryStatus, LinkModel, NetworkConfig, Tick};
use crate::planner::{self, PlanError, PlannerInputs};
use crate::types::{AccessControlList, DeviceProfile, Guid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// How the second number of a `(mean, x)` pair is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SpreadReading {
    StdDev,
    Variance,
}

/// Normal distribution truncated at zero by resampling.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedNormal {
    normal: Normal<f64>,
}

impl TruncatedNormal {
    pub fn new(mean: f64, spread: f64, reading: SpreadReading) -> Self {
        let sd = match reading {
            SpreadReading::StdDev => spread,
            SpreadReading::Variance => spread.sqrt(),
        };
        TruncatedNormal { normal: Normal::new(mean, sd).expect("finite, non-negative spread") }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        loop {
            let x = self.normal.sample(rng);
            if x >= 0.0 {
                return x;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioSpec {
    pub network_sizes: Vec<usize>,
    /// `F`, megabytes.
    pub file_size: f64,
    /// `T`, minutes.
    pub required_lifetime: f64,
    pub weights: Vec<f64>,
    /// `(mean, spread)` of device storage, megabytes.
    pub storage: (f64, f64),
    /// `(mean, spread)` of device remaining time, minutes.
    pub time: (f64, f64),
    pub spread: SpreadReading,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            network_sizes: vec![10, 20, 30],
            file_size: 500.0,
            required_lifetime: 300.0,
            weights: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
            storage: (100.0, 20.0),
            time: (300.0, 80.0),
            spread: SpreadReading::Variance,
            runs: 30,
            seed: 2021,
        }
    }
}

impl ScenarioSpec {
    /// Devices of run `run` at size `n`. The same for every weight.
    pub fn sample_devices(&self, n: usize, run: usize) -> Vec<DeviceProfile> {
        let mix = self.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (run as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        let mut rng = ChaCha20Rng::seed_from_u64(mix);
        let storage = TruncatedNormal::new(self.storage.0, self.storage.1, self.spread);
        let time = TruncatedNormal::new(self.time.0, self.time.1, self.spread);
        (0..n)
            .map(|i| {
                let s = storage.sample(&mut rng);
                let t = time.sample(&mut rng);
                DeviceProfile::new(Guid::synthetic(&format!("dev{i}-")), s, t)
            })
            .collect()
    }

    fn inputs(&self, devices: Vec<DeviceProfile>, w: f64) -> PlannerInputs {
        PlannerInputs { file_size: self.file_size, required_lifetime: self.required_lifetime, availability_weight: w, devices }
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerBoundRow {
    pub weight: f64,
    pub cost: f64,
    pub code_rate: f64,
}

pub fn run_lower_bounds(weights: &[f64], network_size: usize) -> Vec<LowerBoundRow> {
    weights
        .iter()
        .map(|&w| {
            let (cost, code_rate) = planner::cost_lower_bound(w, network_size);
            LowerBoundRow { weight: w, cost, code_rate }
        })
        .collect()
}

pub fn lower_bounds_csv(rows: &[LowerBoundRow]) -> String {
    let mut out = String::from("wa,cost,codeRate\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.weight, fmt_f(r.cost), fmt_f(r.code_rate));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AchievedCostRow {
    pub weight: f64,
    pub network_size: usize,
    /// Means over feasible runs; NaN when none were feasible.
    pub mean_cost: f64,
    pub mean_k: f64,
    pub mean_n: f64,
    pub feasible: usize,
    pub infeasible: usize,
}

pub fn run_achieved_cost(spec: &ScenarioSpec) -> Result<Vec<AchievedCostRow>, PlanError> {
    let mut rows = Vec::new();
    for &w in &spec.weights {
        for &n in &spec.network_sizes {
            let (mut cost, mut ks, mut ns, mut ok, mut bad) = (0.0, 0.0, 0.0, 0, 0);
            for run in 0..spec.runs {
                match planner::plan(&spec.inputs(spec.sample_devices(n, run), w)) {
                    Ok(p) => {
                        cost += p.cost;
                        ks += p.k as f64;
                        ns += p.n as f64;
                        ok += 1;
                    }
                    Err(PlanError::NoFeasiblePlan(_)) => bad += 1,
                    Err(e) => return Err(e),
                }
            }
            let mean = |x: f64| if ok == 0 { f64::NAN } else { x / ok as f64 };
            rows.push(AchievedCostRow {
                weight: w,
                network_size: n,
                mean_cost: mean(cost),
                mean_k: mean(ks),
                mean_n: mean(ns),
                feasible: ok,
                infeasible: bad,
            });
        }
    }
    Ok(rows)
}

pub fn achieved_cost_csv(rows: &[AchievedCostRow]) -> String {
    let mut out = String::from("wa,networkSize,meanCost,meanK,meanN,feasibleRuns,infeasibleRuns\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.weight,
            r.network_size,
            fmt_f(r.mean_cost),
            fmt_f(r.mean_k),
            fmt_f(r.mean_n),
            r.feasible,
            r.infeasible
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeRateRow {
    pub run: usize,
    pub network_size: usize,
    pub weight: f64,
    pub k: usize,
    pub n: usize,
    pub code_rate: f64,
    /// `F * n / k`, megabytes.
    pub encoded_size: f64,
    /// Bytes the codec actually emits for the file at the given block size.
    pub coded_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct CodeRateSweep {
    pub rows: Vec<CodeRateRow>,
    /// Runs (at some size) where the code rate rose with `w_a`.
    pub monotonicity_violations: Vec<(usize, usize)>,
}

/// Exact bytes of all fragment payloads for a file of `file_bytes`.
pub fn coded_bytes(file_bytes: u64, block_size: u64, k: usize, n: usize) -> u64 {
    let mut total = 0;
    let mut left = file_bytes;
    while left > 0 {
        let b = left.min(block_size);
        let sealed = b as usize + crate::crypto::CIPHERTEXT_OVERHEAD;
        total += (n * crate::erasure::shard_len_for(sealed, k)) as u64;
        left -= b;
    }
    total
}

/// Sweep `w_a` (in the order given, which should be ascending) per run.
pub fn run_code_rate_sweep(spec: &ScenarioSpec) -> Result<CodeRateSweep, PlanError> {
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    let file_bytes = (spec.file_size * MIB as f64) as u64;
    for &size in &spec.network_sizes {
        for run in 0..spec.runs {
            let devices = spec.sample_devices(size, run);
            let mut last_rate = f64::INFINITY;
            let mut flagged = false;
            for &w in &spec.weights {
                let p = match planner::plan(&spec.inputs(devices.clone(), w)) {
                    Ok(p) => p,
                    Err(PlanError::NoFeasiblePlan(_)) => continue,
                    Err(e) => return Err(e),
                };
                if p.code_rate > last_rate + 1e-12 && !flagged {
                    violations.push((size, run));
                    flagged = true;
                }
                last_rate = p.code_rate;
                rows.push(CodeRateRow {
                    run,
                    network_size: size,
                    weight: w,
                    k: p.k,
                    n: p.n,
                    code_rate: p.code_rate,
                    encoded_size: p.encoded_size,
                    coded_bytes: coded_bytes(file_bytes, crate::engine::DEFAULT_BLOCK_SIZE as u64, p.k, p.n),
                });
            }
        }
    }
    Ok(CodeRateSweep { rows, monotonicity_violations: violations })
}

pub fn code_rate_csv(rows: &[CodeRateRow]) -> String {
    let mut out = String::from("run,networkSize,wa,k,n,codeRate,encodedSizeMB,codedBytes\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.run,
            r.network_size,
            r.weight,
            r.k,
            r.n,
            fmt_f(r.code_rate),
            fmt_f(r.encoded_size),
            r.coded_bytes
        );
    }
    out
}

/// Two edges of four storage devices each plus one mule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InterEdgeSpec {
    pub file_bytes: usize,
    pub block_size: usize,
    /// Free storage per device, megabytes.
    pub device_storage: f64,
    pub availability_weight: f64,
    pub required_lifetime: f64,
    pub period: Tick,
    pub dwell: Tick,
    /// Bytes per tick on links inside an edge.
    pub intra_bandwidth: usize,
    /// Bytes per tick on each mule link.
    pub mule_bandwidth: usize,
    pub request_ttl: f64,
    /// Ticks to wait for the fragments before reading.
    pub max_ticks: Tick,
    pub seed: u64,
}

impl Default for InterEdgeSpec {
    fn default() -> Self {
        InterEdgeSpec {
            file_bytes: 100 << 20,
            block_size: 4 << 20,
            device_storage: 30.0,
            availability_weight: 0.8,
            required_lifetime: 300.0,
            period: 240,
            dwell: 60,
            intra_bandwidth: 8 << 20,
            mule_bandwidth: 256 << 10,
            request_ttl: 60.0,
            max_ticks: 5_000,
            seed: 7,
        }
    }
}

pub fn inter_edge_devices() -> (Vec<Guid>, Vec<Guid>, Guid) {
    let p = |i: usize| Guid::synthetic(&format!("P{i}-"));
    ((1..=4).map(p).collect(), (5..=8).map(p).collect(), p(9))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentDelivery {
    /// 0-based fragment index; `f1` is index 0.
    pub fragment: usize,
    pub holder: Guid,
    /// 1 or 2.
    pub edge: u8,
    /// Tick at which the first block of this fragment arrived.
    pub first_tick: Option<Tick>,
    /// Tick at which the last block arrived; `None` if some never did.
    pub last_tick: Option<Tick>,
}

#[derive(Debug, Clone)]
pub struct InterEdgeReport {
    pub k: usize,
    pub n: usize,
    pub deliveries: Vec<FragmentDelivery>,
    /// First tick the mule is in contact with edge 2.
    pub first_edge2_contact: Option<Tick>,
    pub reader: Guid,
    pub get_result: Result<usize, EngineError>,
    pub round_trip_identical: bool,
    pub get_requests: usize,
    pub finished_tick: Tick,
}

impl InterEdgeReport {
    fn edge(&self, edge: u8) -> impl Iterator<Item = &FragmentDelivery> {
        self.deliveries.iter().filter(move |d| d.edge == edge)
    }

    /// Edge-1 fragments all arrived before the mule first reached edge 2.
    pub fn intra_edge_immediate(&self) -> bool {
        let bound = self.first_edge2_contact.unwrap_or(Tick::MAX);
        self.edge(1).all(|d| d.last_tick.is_some_and(|t| t < bound))
    }

    /// No edge-2 fragment arrived before the mule's first edge-2 contact.
    pub fn cross_edge_only_via_mule(&self) -> bool {
        match self.first_edge2_contact {
            Some(c) => self.edge(2).all(|d| d.first_tick.map_or(true, |t| t >= c)),
            None => self.edge(2).all(|d| d.first_tick.is_none()),
        }
    }

    pub fn cross_edge_delivered(&self) -> bool {
        self.edge(2).all(|d| d.last_tick.is_some())
    }

    /// Completion ticks of the edge-2 fragments never decrease with index.
    pub fn cross_edge_ordered(&self) -> bool {
        let ticks: Vec<Option<Tick>> = self.edge(2).map(|d| d.last_tick).collect();
        ticks.windows(2).all(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => a <= b,
            (_, None) => true,
            (None, Some(_)) => false,
        })
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("fragment,holderGuid,edge,firstTick,lastTick\n");
        let t = |x: Option<Tick>| x.map(|v| v.to_string()).unwrap_or_default();
        for d in &self.deliveries {
            let _ = writeln!(out, "f{},{},{},{},{}", d.fragment + 1, d.holder, d.edge, t(d.first_tick), t(d.last_tick));
        }
        let _ = writeln!(
            out,
            "# reader={} get={} identical={} requests={} finished={}",
            self.reader,
            match &self.get_result {
                Ok(n) => format!("ok:{n}"),
                Err(e) => format!("error:{e}"),
            },
            self.round_trip_identical,
            self.get_requests,
            self.finished_tick
        );
        out
    }
}

fn payload(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = vec![0u8; len];
    rng.fill(&mut data[..]);
    data
}

/// Store a file from edge 1 and read it back from edge 2 through the mule.
pub fn run_inter_edge(spec: &InterEdgeSpec) -> Result<InterEdgeReport, EngineError> {
    let (edge1, edge2, mule) = inter_edge_devices();
    // Remaining time descends P1..P8 so the planner orders holders the same way.
    let devices: Vec<DeviceProfile> = edge1
        .iter()
        .chain(&edge2)
        .enumerate()
        .map(|(i, g)| DeviceProfile::new(g.clone(), spec.device_storage, 400.0 - 10.0 * i as f64))
        .collect();
    let mut nodes: Vec<Guid> = edge1.iter().chain(&edge2).cloned().collect();
    nodes.push(mule.clone());
    let intra = LinkModel::always_up(1, spec.intra_bandwidth);
    let mut net = NetworkConfig::new(nodes, spec.seed).full_mesh(&edge1, intra.clone()).full_mesh(&edge2, intra);
    net.packet_size = Some(spec.mule_bandwidth.min(spec.intra_bandwidth));
    net.default_bandwidth = spec.mule_bandwidth;
    let config = EngineConfig {
        block_size: spec.block_size,
        request_ttl: spec.request_ttl,
        availability_weight: spec.availability_weight,
        required_lifetime: spec.required_lifetime,
        seed: spec.seed,
        ..EngineConfig::default()
    };
    let setup = EngineSetup {
        devices,
        network: net,
        metadata_replicas: edge1[..3].to_vec(),
        root_owner: edge1[0].clone(),
        config,
    };
    let engine = StorageEngine::new(setup)?;
    let a: BTreeSet<Guid> = edge1.iter().cloned().collect();
    let b: BTreeSet<Guid> = edge2.iter().cloned().collect();
    engine.with_network(|n| n.set_mule_schedule(&mule, &a, &b, spec.period, spec.dwell))?;

    let data = payload(spec.file_bytes, spec.seed);
    let writer = &edge1[0];
    let req = PutRequest::new("/mission.dat", data.clone()).with_acl(AccessControlList::world(writer.clone()));
    let start = engine.now();
    let receipt = engine.put_with_receipt(&req, writer)?;
    let (k, n) = (receipt.plan.k, receipt.plan.n);

    let mut waited = 0;
    while waited < spec.max_ticks && !engine.with_network(|net| net.is_idle()) {
        engine.advance(1);
        waited += 1;
    }

    let mut deliveries = Vec::with_capacity(n);
    for (j, holder) in receipt.plan.devices.iter().enumerate() {
        let mut first = None;
        let mut last = Some(start);
        for d in receipt.dispatches.iter().filter(|d| d.slot.fragment_index as usize == j) {
            let at = match d.message {
                None => Some(start),
                Some(id) => match engine.message_status(id) {
                    Some(DeliveryStatus::Delivered(t)) => Some(t),
                    _ => None,
                },
            };
            match at {
                Some(t) => {
                    first = Some(first.map_or(t, |f: Tick| f.min(t)));
                    last = last.map(|l| l.max(t));
                }
                None => last = None,
            }
        }
        deliveries.push(FragmentDelivery {
            fragment: j,
            holder: holder.clone(),
            edge: if a.contains(holder) { 1 } else { 2 },
            first_tick: first,
            last_tick: last,
        });
    }

    let first_edge2_contact = engine.with_network(|net| net.next_contact(&mule, &edge2[0], 0));
    let reader = edge2[0].clone();
    let (get_result, identical, requests) = match engine.get_with_stats("/mission.dat", &reader) {
        Ok((got, stats)) => (Ok(got.len()), got == data, stats.requests.len()),
        Err(e) => (Err(e), false, 0),
    };
    Ok(InterEdgeReport {
        k,
        n,
        deliveries,
        first_edge2_contact,
        reader,
        get_result,
        round_trip_identical: identical,
        get_requests: requests,
        finished_tick: engine.now(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResilienceSpec {
    pub k: usize,
    pub n: usize,
    pub file_bytes: usize,
    pub block_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResilienceRow {
    pub killed: usize,
    pub kill_sets: usize,
    pub successes: usize,
    pub irrecoverable: usize,
    pub other_failures: usize,
}

/// Kill every subset of the holders of size `0..=n` and try to read.
pub fn run_resilience_sweep(spec: &ResilienceSpec) -> Result<Vec<ResilienceRow>, EngineError> {
    let (k, n) = (spec.k, spec.n);
    // n holders plus one reader that ranks last and never holds anything.
    let devices: Vec<DeviceProfile> = (0..=n)
        .map(|i| DeviceProfile::new(Guid::synthetic(&format!("R{i}-")), 1024.0, 1000.0 - i as f64))
        .collect();
    let reader = devices[n].guid.clone();
    let config = EngineConfig { seed: spec.seed, block_size: spec.block_size, ..EngineConfig::default() };
    let engine = StorageEngine::new(EngineSetup::fully_connected(devices, config))?;
    let data = payload(spec.file_bytes, spec.seed);
    let req = PutRequest::new("/r", data.clone())
        .with_acl(AccessControlList::world(engine.devices()[0].clone()))
        .with_coding(k, n);
    let writer = engine.devices()[0].clone();
    let receipt = engine.put_with_receipt(&req, &writer)?;
    engine.flush();
    let holders = receipt.plan.devices.clone();
    if holders.contains(&reader) {
        return Err(EngineError::InvalidParameters("reader was chosen as a holder".into()));
    }

    let mut rows: Vec<ResilienceRow> = (0..=n)
        .map(|m| ResilienceRow { killed: m, kill_sets: 0, successes: 0, irrecoverable: 0, other_failures: 0 })
        .collect();
    for mask in 0u32..(1 << n) {
        let killed: Vec<&Guid> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &holders[i]).collect();
        for g in &killed {
            engine.kill_device(g)?;
        }
        let row = &mut rows[killed.len()];
        row.kill_sets += 1;
        match engine.get("/r", &reader) {
            Ok(got) if got == data => row.successes += 1,
            Err(EngineError::IrrecoverableBlock { .. }) => row.irrecoverable += 1,
            _ => row.other_failures += 1,
        }
        for g in &killed {
            engine.revive_device(g)?;
        }
    }
    Ok(rows)
}

pub fn resilience_csv(spec: &ResilienceSpec, rows: &[ResilienceRow]) -> String {
    let mut out = String::from("k,n,killedHolders,killSets,successes,irrecoverable,otherFailures\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            spec.k, spec.n, r.killed, r.kill_sets, r.successes, r.irrecoverable, r.other_failures
        );
    }
    out
}
