//! Adaptive choice of the erasure code `(k, n)` and of the `n` holder devices.
//!
//! The cost of storing a file with code rate `r = k/n` is
//! `w_a * r + (1 - w_a) / r`: the first term penalises low redundancy, the
//! second the storage blow-up. A pair is feasible when every holder can fit a
//! fragment (`F/k <= S_n`, the n-th largest free storage) and at least `k`
//! devices are expected to outlive the requested lifetime (`T <= T_k`, the
//! k-th longest remaining time). All pairs with `1 <= k <= n <= N` are
//! scanned; among pairs with the same code rate the one with the higher
//! system availability wins.
//!
//! Recommended `w_a` values are multiples of 0.1; finer steps rarely change
//! the integer outcome.

use crate::types::{CodingPlan, DeviceProfile};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid planner parameters: {0}")]
    InvalidParameters(String),
    #[error("no feasible (k, n): {0}")]
    NoFeasiblePlan(BindingConstraint),
}

/// Which feasibility constraint rules out every `(k, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingConstraint {
    /// Even splitting `k = n` ways, no `n` devices can hold a fragment each.
    Storage,
    /// No device outlives the requested lifetime (`T > T_1`).
    Lifetime,
    /// Each constraint is satisfiable alone but never together.
    Joint,
}

impl std::fmt::Display for BindingConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BindingConstraint::Storage => "storage: no device can hold a fragment of size F/k",
            BindingConstraint::Lifetime => "lifetime: fewer than k devices outlive the required lifetime",
            BindingConstraint::Joint => "storage and lifetime cannot be met by the same (k, n)",
        })
    }
}

/// Everything the planner needs for one file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerInputs {
    /// `F`, megabytes.
    pub file_size: f64,
    /// `T`, minutes.
    pub required_lifetime: f64,
    /// `w_a` in `[0, 1]`.
    pub availability_weight: f64,
    pub devices: Vec<DeviceProfile>,
}

impl PlannerInputs {
    fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::InvalidParameters(m));
        if !(0.0..=1.0).contains(&self.availability_weight) {
            return bad(format!("w_a = {} outside [0, 1]", self.availability_weight));
        }
        if !(self.file_size > 0.0) || !self.file_size.is_finite() {
            return bad(format!("file size {} must be positive", self.file_size));
        }
        if !(self.required_lifetime >= 0.0) {
            return bad(format!("lifetime {} must be non-negative", self.required_lifetime));
        }
        if self.devices.is_empty() {
            return bad("no candidate devices".into());
        }
        Ok(())
    }
}

fn check_pair(k: usize, n: usize) -> Result<(), PlanError> {
    if k == 0 || k > n {
        return Err(PlanError::InvalidParameters(format!("need 1 <= k <= n, got k={k} n={n}")));
    }
    Ok(())
}

/// Weighted availability/storage cost of a `(k, n)` code.
pub fn cost(k: usize, n: usize, availability_weight: f64) -> Result<f64, PlanError> {
    check_pair(k, n)?;
    if !(0.0..=1.0).contains(&availability_weight) {
        return Err(PlanError::InvalidParameters(format!("w_a = {availability_weight} outside [0, 1]")));
    }
    let rate = k as f64 / n as f64;
    Ok(availability_weight * rate + (1.0 - availability_weight) * (n as f64 / k as f64))
}

/// Probability that at least `k` of `n` independent devices, each up with
/// probability `p`, are up.
pub fn system_availability(k: usize, n: usize, p: f64) -> Result<f64, PlanError> {
    check_pair(k, n)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(PlanError::InvalidParameters(format!("p = {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let total: f64 = (k..=n).map(|i| binomial_pmf(n, i, p)).sum();
    Ok(total.clamp(0.0, 1.0))
}

// Exact in f64 up to n = 40 (C(40, 20) < 2^53); log space beyond.
fn binomial_pmf(n: usize, i: usize, p: f64) -> f64 {
    if n <= 40 {
        let mut c = 1.0f64;
        for j in 0..i.min(n - i) {
            c = c * (n - j) as f64 / (j + 1) as f64;
        }
        c.round() * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32)
    } else {
        let ln_c: f64 = (0..i).map(|j| ((n - j) as f64).ln() - ((j + 1) as f64).ln()).sum();
        (ln_c + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp()
    }
}

/// Chance that a device with `remaining_time` minutes of battery survives a
/// lifetime of `required_lifetime` minutes. A flat battery gives 0.
pub fn device_availability(remaining_time: f64, required_lifetime: f64) -> Result<f64, PlanError> {
    if !(required_lifetime > 0.0) {
        return Err(PlanError::InvalidParameters(format!(
            "required lifetime {required_lifetime} must be positive"
        )));
    }
    if !(remaining_time >= 0.0) {
        return Err(PlanError::InvalidParameters(format!("remaining time {remaining_time} is negative")));
    }
    Ok(if remaining_time >= required_lifetime {
        1.0
    } else {
        remaining_time / required_lifetime
    })
}

/// Mean of [`device_availability`] over every supplied device.
pub fn mean_device_availability(devices: &[DeviceProfile], required_lifetime: f64) -> Result<f64, PlanError> {
    if devices.is_empty() {
        return Err(PlanError::InvalidParameters("no devices".into()));
    }
    let mut sum = 0.0;
    for d in devices {
        sum += device_availability(d.remaining_time, required_lifetime)?;
    }
    Ok(sum / devices.len() as f64)
}

/// Minimum of the cost over a continuous code rate in `[1/N, 1]`.
/// Returns `(cost, code_rate)`.
pub fn cost_lower_bound(availability_weight: f64, network_size: usize) -> (f64, f64) {
    let w = availability_weight.clamp(0.0, 1.0);
    let floor = 1.0 / network_size.max(1) as f64;
    let unconstrained = if w == 0.0 { f64::INFINITY } else { ((1.0 - w) / w).sqrt() };
    let rate = unconstrained.clamp(floor, 1.0);
    (w * rate + (1.0 - w) / rate, rate)
}

/// Resources sorted the way the constraints index them.
struct Ranked {
    storage_desc: Vec<f64>,
    time_desc: Vec<f64>,
}

impl Ranked {
    fn new(devices: &[DeviceProfile]) -> Self {
        let mut storage_desc: Vec<f64> = devices.iter().map(|d| d.storage_available).collect();
        let mut time_desc: Vec<f64> = devices.iter().map(|d| d.remaining_time).collect();
        storage_desc.sort_by(|a, b| b.total_cmp(a));
        time_desc.sort_by(|a, b| b.total_cmp(a));
        Ranked { storage_desc, time_desc }
    }

    fn storage_ok(&self, file_size: f64, k: usize, n: usize) -> bool {
        file_size / k as f64 <= self.storage_desc[n - 1]
    }

    fn lifetime_ok(&self, lifetime: f64, k: usize) -> bool {
        lifetime <= self.time_desc[k - 1]
    }
}

/// Choose `(k, n)` and the `n` holders for one file.
///
/// Scan order is `n` ascending then `k` ascending. A pair replaces the
/// incumbent on strictly lower cost, or on equal code rate with strictly
/// higher system availability at the mean device availability. Ties keep
/// the pair seen first, so the result is deterministic.
pub fn plan(inputs: &PlannerInputs) -> Result<CodingPlan, PlanError> {
    inputs.validate()?;
    let ranked = Ranked::new(&inputs.devices);
    let w = inputs.availability_weight;
    let p_mean = if inputs.required_lifetime == 0.0 {
        1.0
    } else {
        mean_device_availability(&inputs.devices, inputs.required_lifetime)?
    };

    let mut best: Option<(usize, usize, f64)> = None;
    let total = inputs.devices.len();
    for n in 1..=total {
        for k in 1..=n {
            if !ranked.storage_ok(inputs.file_size, k, n) || !ranked.lifetime_ok(inputs.required_lifetime, k) {
                continue;
            }
            let c = cost(k, n, w)?;
            let replace = match best {
                None => true,
                Some((bk, bn, bc)) => {
                    c < bc
                        || (k * bn == bk * n
                            && system_availability(k, n, p_mean)? > system_availability(bk, bn, p_mean)?)
                }
            };
            if replace {
                best = Some((k, n, c));
            }
        }
    }

    let (k, n, c) = best.ok_or_else(|| PlanError::NoFeasiblePlan(binding_constraint(inputs, &ranked)))?;
    Ok(finish(inputs, k, n, c))
}

/// Place a caller-chosen `(k, n)`, checking the same feasibility constraints.
pub fn plan_fixed(inputs: &PlannerInputs, k: usize, n: usize) -> Result<CodingPlan, PlanError> {
    inputs.validate()?;
    check_pair(k, n)?;
    if n > inputs.devices.len() {
        return Err(PlanError::InvalidParameters(format!(
            "n = {n} exceeds the {} candidate devices",
            inputs.devices.len()
        )));
    }
    let ranked = Ranked::new(&inputs.devices);
    let storage = ranked.storage_ok(inputs.file_size, k, n);
    let lifetime = ranked.lifetime_ok(inputs.required_lifetime, k);
    match (storage, lifetime) {
        (true, true) => {
            let c = cost(k, n, inputs.availability_weight)?;
            Ok(finish(inputs, k, n, c))
        }
        (false, true) => Err(PlanError::NoFeasiblePlan(BindingConstraint::Storage)),
        (true, false) => Err(PlanError::NoFeasiblePlan(BindingConstraint::Lifetime)),
        (false, false) => Err(PlanError::NoFeasiblePlan(BindingConstraint::Joint)),
    }
}

fn binding_constraint(inputs: &PlannerInputs, ranked: &Ranked) -> BindingConstraint {
    let total = inputs.devices.len();
    let any_storage = (1..=total).any(|n| ranked.storage_ok(inputs.file_size, n, n));
    let any_lifetime = ranked.lifetime_ok(inputs.required_lifetime, 1);
    match (any_storage, any_lifetime) {
        (false, _) => BindingConstraint::Storage,
        (true, false) => BindingConstraint::Lifetime,
        (true, true) => BindingConstraint::Joint,
    }
}

fn finish(inputs: &PlannerInputs, k: usize, n: usize, cost: f64) -> CodingPlan {
    let devices = select_devices(&inputs.devices, inputs.file_size / k as f64, n);
    CodingPlan {
        k,
        n,
        devices,
        cost,
        code_rate: k as f64 / n as f64,
        encoded_size: inputs.file_size * n as f64 / k as f64,
    }
}

/// Devices with more than `fragment_size` free, longest remaining time first.
///
/// Feasibility only guarantees `n` devices with *at least* `fragment_size`,
/// so devices sitting exactly on the boundary fill any remaining places.
fn select_devices(devices: &[DeviceProfile], fragment_size: f64, n: usize) -> Vec<crate::types::Guid> {
    let by_time = |a: &&DeviceProfile, b: &&DeviceProfile| b.remaining_time.total_cmp(&a.remaining_time);
    let mut roomy: Vec<&DeviceProfile> = devices.iter().filter(|d| d.storage_available > fragment_size).collect();
    roomy.sort_by(by_time);
    let mut boundary: Vec<&DeviceProfile> =
        devices.iter().filter(|d| d.storage_available == fragment_size).collect();
    boundary.sort_by(by_time);
    roomy.into_iter().chain(boundary).take(n).map(|d| d.guid.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Guid;

    fn devices(specs: &[(f64, f64)]) -> Vec<DeviceProfile> {
        specs
            .iter()
            .enumerate()
            .map(|(i, &(s, t))| DeviceProfile::new(Guid::synthetic(&format!("d{i}")), s, t))
            .collect()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cost_examples() {
        assert!(close(cost(1, 3, 0.9).unwrap(), 0.6, 1e-12));
        assert!(close(cost(1, 2, 0.8).unwrap(), 0.8, 1e-12));
        for k in 1..10 {
            assert_eq!(cost(k, k, 0.5).unwrap(), 1.0);
        }
        assert!(cost(3, 2, 0.5).is_err());
        assert!(cost(0, 2, 0.5).is_err());
        assert!(cost(1, 2, 1.5).is_err());
    }

    #[test]
    fn availability_examples() {
        for p in [0.0, 0.3, 0.99, 1.0] {
            assert!(close(system_availability(1, 1, p).unwrap(), p, 1e-12));
        }
        assert!(close(system_availability(1, 2, 0.5).unwrap(), 0.75, 1e-12));
        assert!(close(system_availability(2, 3, 0.9).unwrap(), 0.972, 1e-12));
        assert!(system_availability(2, 1, 0.5).is_err());
        assert!(system_availability(1, 1, 1.2).is_err());
    }

    #[test]
    fn large_n_uses_log_space_and_stays_bounded() {
        let a = system_availability(30, 60, 0.5).unwrap();
        // Symmetric binomial: P(X >= 30) = 0.5 + P(X = 30) / 2.
        let pmf30 = binomial_pmf(60, 30, 0.5);
        assert!(close(a, 0.5 + pmf30 / 2.0, 1e-9), "{a}");
        assert!(system_availability(1, 200, 0.01).unwrap() <= 1.0);
    }

    #[test]
    fn device_availability_branches() {
        assert_eq!(device_availability(400.0, 300.0).unwrap(), 1.0);
        assert_eq!(device_availability(150.0, 300.0).unwrap(), 0.5);
        assert_eq!(device_availability(0.0, 300.0).unwrap(), 0.0);
        assert!(device_availability(10.0, 0.0).is_err());
    }

    #[test]
    fn mean_availability_examples() {
        assert_eq!(mean_device_availability(&devices(&[(1.0, 500.0), (1.0, 300.0)]), 300.0).unwrap(), 1.0);
        assert_eq!(mean_device_availability(&devices(&[(1.0, 300.0), (1.0, 150.0)]), 300.0).unwrap(), 0.75);
        assert_eq!(mean_device_availability(&devices(&[(1.0, 0.0)]), 300.0).unwrap(), 0.0);
        assert!(mean_device_availability(&[], 300.0).is_err());
    }

    #[test]
    fn lower_bound_rows() {
        let (c, r) = cost_lower_bound(0.8, 30);
        assert!(close(c, 0.8, 1e-12) && close(r, 0.5, 1e-12));
        let (c, r) = cost_lower_bound(0.7, 30);
        assert!(close(c, 0.9165, 1e-4) && close(r, 0.6547, 1e-4));
        let (c, r) = cost_lower_bound(1.0, 30);
        assert!(close(c, 1.0 / 30.0, 1e-12) && close(r, 1.0 / 30.0, 1e-12));
        assert_eq!(cost_lower_bound(0.0, 30), (1.0, 1.0));
        assert_eq!(cost_lower_bound(0.4, 30), (1.0, 1.0));
    }

    #[test]
    fn identical_devices_half_weight_keeps_first_pair() {
        let inputs = PlannerInputs {
            file_size: 30.0,
            required_lifetime: 300.0,
            availability_weight: 0.5,
            devices: devices(&[(100.0, 400.0); 3]),
        };
        let plan = plan(&inputs).unwrap();
        assert_eq!((plan.k, plan.n), (1, 1));
        assert_eq!(plan.cost, 1.0);
        assert_eq!(plan.devices.len(), 1);
    }

    #[test]
    fn ten_devices_high_weight_reach_one_third() {
        let inputs = PlannerInputs {
            file_size: 30.0,
            required_lifetime: 300.0,
            availability_weight: 0.9,
            devices: devices(&[(1000.0, 400.0); 10]),
        };
        let plan = plan(&inputs).unwrap();
        assert!(close(plan.code_rate, 1.0 / 3.0, 1e-12));
        assert!(close(plan.cost, 0.6, 1e-12));
        // p-bar = 1 makes every 1/3 pair equally available; the first stays.
        assert_eq!((plan.k, plan.n), (1, 3));
    }

    #[test]
    fn equal_rate_prefers_more_available_pair() {
        // p-bar = 0.95: A(2,6) > A(1,3), so the larger code wins the tie.
        let mut specs = vec![(1000.0, 400.0); 9];
        specs.push((1000.0, 150.0));
        let inputs = PlannerInputs {
            file_size: 30.0,
            required_lifetime: 300.0,
            availability_weight: 0.9,
            devices: devices(&specs),
        };
        let p = mean_device_availability(&inputs.devices, 300.0).unwrap();
        assert!(close(p, 0.95, 1e-12));
        let a13 = system_availability(1, 3, p).unwrap();
        let a26 = system_availability(2, 6, p).unwrap();
        let a39 = system_availability(3, 9, p).unwrap();
        assert!(a39 > a26 && a26 > a13);
        let plan = plan(&inputs).unwrap();
        assert_eq!((plan.k, plan.n), (3, 9));
    }

    #[test]
    fn small_storage_forces_large_k() {
        let inputs = PlannerInputs {
            file_size: 500.0,
            required_lifetime: 300.0,
            availability_weight: 1.0,
            devices: devices(&[(100.0, 400.0); 10]),
        };
        let plan = plan(&inputs).unwrap();
        assert!(plan.k >= 5);
        assert!(close(plan.code_rate, 0.5, 1e-12));
    }

    #[test]
    fn infeasible_names_binding_constraint() {
        let base = PlannerInputs {
            file_size: 500.0,
            required_lifetime: 300.0,
            availability_weight: 0.5,
            devices: devices(&[(100.0, 400.0); 3]),
        };
        assert_eq!(plan(&base), Err(PlanError::NoFeasiblePlan(BindingConstraint::Storage)));
        let mut specs = vec![(100.0, 100.0); 8];
        specs.extend([(100.0, 400.0); 2]);
        let joint = PlannerInputs { devices: devices(&specs), ..base.clone() };
        assert_eq!(plan(&joint), Err(PlanError::NoFeasiblePlan(BindingConstraint::Joint)));
        let tiny = PlannerInputs { devices: devices(&[(1.0, 400.0); 3]), file_size: 5.0, ..base.clone() };
        assert_eq!(plan(&tiny), Err(PlanError::NoFeasiblePlan(BindingConstraint::Storage)));
        let flat = PlannerInputs { devices: devices(&[(100.0, 10.0); 3]), file_size: 5.0, ..base.clone() };
        assert_eq!(plan(&flat), Err(PlanError::NoFeasiblePlan(BindingConstraint::Lifetime)));
    }

    #[test]
    fn selection_sorts_by_remaining_time_and_filters_storage() {
        let inputs = PlannerInputs {
            file_size: 10.0,
            required_lifetime: 100.0,
            availability_weight: 0.8,
            devices: devices(&[(100.0, 200.0), (1.0, 900.0), (100.0, 500.0), (100.0, 300.0), (100.0, 150.0)]),
        };
        let plan = plan_fixed(&inputs, 1, 2).unwrap();
        assert_eq!(plan.devices, vec![Guid::synthetic("d2"), Guid::synthetic("d3")]);
    }

    #[test]
    fn boundary_storage_devices_fill_the_plan() {
        let inputs = PlannerInputs {
            file_size: 20.0,
            required_lifetime: 100.0,
            availability_weight: 0.8,
            devices: devices(&[(10.0, 200.0), (10.0, 300.0)]),
        };
        let plan = plan_fixed(&inputs, 2, 2).unwrap();
        assert_eq!(plan.devices.len(), 2);
    }

    #[test]
    fn plan_fixed_checks_constraints() {
        let inputs = PlannerInputs {
            file_size: 100.0,
            required_lifetime: 300.0,
            availability_weight: 0.5,
            devices: devices(&[(30.0, 400.0); 8]),
        };
        assert_eq!(
            plan_fixed(&inputs, 2, 4),
            Err(PlanError::NoFeasiblePlan(BindingConstraint::Storage))
        );
        let plan = plan_fixed(&inputs, 4, 8).unwrap();
        assert_eq!(plan.devices.len(), 8);
        assert!(close(plan.encoded_size, 200.0, 1e-9));
    }
}
