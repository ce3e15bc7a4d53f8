//! Pick `(k, n)` for one file across a handful of devices, sweeping the
//! availability weight.
//!
//! ```text
//! cargo run --example plan_placement
//! ```

use rdrive::planner::{self, PlannerInputs};
use rdrive::types::{DeviceProfile, Guid};

fn main() {
    // (free MiB, minutes of battery)
    let fleet = [(120.0, 340.0), (95.0, 410.0), (110.0, 280.0), (80.0, 390.0), (130.0, 220.0), (100.0, 305.0)];
    let devices: Vec<DeviceProfile> = fleet
        .iter()
        .enumerate()
        .map(|(i, &(s, t))| DeviceProfile::new(Guid::synthetic(&format!("phone{i}-")), s, t))
        .collect();

    println!("w_a   k  n  rate   cost    holders");
    for w in [1.0, 0.9, 0.8, 0.7, 0.6, 0.5] {
        let inputs = PlannerInputs { file_size: 200.0, required_lifetime: 240.0, availability_weight: w, devices: devices.clone() };
        match planner::plan(&inputs) {
            Ok(p) => {
                let holders: Vec<&str> = p.devices.iter().map(|g| &g.as_str()[..6]).collect();
                println!("{w:.1}  {:2} {:2}  {:.3}  {:.4}  {}", p.k, p.n, p.code_rate, p.cost, holders.join(" "));
            }
            Err(e) => println!("{w:.1}  {e}"),
        }
    }

    // Asking for more lifetime than any phone has left is refused with the reason.
    let greedy = PlannerInputs { file_size: 200.0, required_lifetime: 600.0, availability_weight: 0.8, devices };
    println!("T=600: {}", planner::plan(&greedy).unwrap_err());
}
