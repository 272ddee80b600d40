//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use offload_core::sim::workload::generate;
use offload_core::sim::{
    presets, FaultEvent, FaultKind, InterArrival, ScenarioConfig, SimRun, UniformRange,
};
use offload_core::tasklib::{execute_locally, TaskRegistry, TaskStateBlob};
use offload_core::TaskInstanceId;

pub const ENERGY_REL_TOL: f64 = 1e-6;

/// Ten identical face-detection tasks, all present before the laptop
/// connects, stolen in one go.
pub fn ten_task_scenario() -> ScenarioConfig {
    let mut cfg = presets::preset("fd50").unwrap();
    cfg.name = "ten".into();
    let item = &mut cfg.workload[0];
    item.count = 10;
    item.payload_bytes = UniformRange::fixed(20_000);
    item.work_units = UniformRange::fixed(1500);
    item.inter_arrival = InterArrival::Fixed { interval_s: 0.0 };
    cfg.scheduler.steal_capacity = 10;
    cfg
}

/// A mixed-fleet run with a seed-dependent steal capacity.
pub fn audited_mixed_fleet(seed: u64) -> ScenarioConfig {
    let mut cfg = presets::preset("mixed_fleet").unwrap();
    cfg.seed = seed;
    cfg.scheduler.steal_capacity = 1 + (seed % 3) as u32;
    cfg
}

/// A smaller mixed fleet with random link cuts, reconnects and crashes.
pub fn faulty_mixed_fleet(seed: u64) -> ScenarioConfig {
    let mut cfg = presets::preset("mixed_fleet").unwrap();
    cfg.name = "faulty".into();
    cfg.seed = seed;
    for item in &mut cfg.workload {
        item.count = 8;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let servers: Vec<String> = cfg.servers.iter().map(|s| s.device_id.clone()).collect();
    let cuts = rng.random_range(1..=4);
    for _ in 0..cuts {
        let server = servers[rng.random_range(0..servers.len())].clone();
        let down = rng.random_range(0.0..8.0);
        let event = if rng.random_bool(0.25) {
            FaultKind::ServerCrash
        } else {
            FaultKind::LinkDown
        };
        cfg.faults.push(FaultEvent {
            time_s: down,
            server: server.clone(),
            event,
        });
        if rng.random_bool(0.7) {
            cfg.faults.push(FaultEvent {
                time_s: down + rng.random_range(0.0..3.0),
                server,
                event: FaultKind::LinkUp,
            });
        }
    }
    cfg
}

fn detail_tasks(detail: &Value) -> Vec<(String, String)> {
    detail["tasks"]
        .as_array()
        .map(|a| {
            a.iter()
                .map(|t| {
                    (
                        t["task"].as_str().unwrap_or_default().to_string(),
                        t["buffer"].as_str().unwrap_or_default().to_string(),
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Re-checks every steal decision in a trace. Returns one message per
/// violation.
///
/// H servers must drain H before L, C servers L before H, and only tasks
/// that were eligible may be granted. Every offload must follow a grant of
/// that task to that server.
pub fn audit_steals(run: &SimRun) -> Vec<String> {
    let mut bad = Vec::new();
    let mut granted: BTreeSet<(String, String)> = BTreeSet::new();
    for ev in &run.trace {
        match ev.event_kind.as_str() {
            "steal_grant" => {
                let d = &ev.detail;
                let server = d["server"].as_str().unwrap_or_default().to_string();
                let class = d["class"].as_str().unwrap_or_default();
                let cap = d["capacity"].as_u64().unwrap_or(0) as usize;
                let h_el = d["h_eligible"].as_u64().unwrap_or(0) as usize;
                let l_el = d["l_eligible"].as_u64().unwrap_or(0) as usize;
                let fleet = d["fleet"].as_str().unwrap_or_default();
                let ineligible: BTreeSet<&str> = d["ineligible"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|v| v.as_str()).collect())
                    .unwrap_or_default();
                let tasks = detail_tasks(d);
                let n_h = tasks.iter().filter(|(_, b)| b == "H").count();
                let n_l = tasks.len() - n_h;
                let at = ev.time_s;
                for (t, _) in &tasks {
                    if ineligible.contains(t.as_str()) {
                        bad.push(format!("{at}: {t} granted to {server} but ineligible"));
                    }
                    granted.insert((t.clone(), server.clone()));
                }
                if tasks.len() != cap.min(h_el + l_el) {
                    bad.push(format!("{at}: {server} got {} of {} eligible with capacity {cap}", tasks.len(), h_el + l_el));
                }
                let (first_n, first_el, second_n) = match (fleet, class) {
                    ("single_kind", _) => continue,
                    (_, "H") => (n_h, h_el, n_l),
                    (_, "C") => (n_l, l_el, n_h),
                    _ => {
                        bad.push(format!("{at}: unclassified server {server} was served"));
                        continue;
                    }
                };
                if first_n != cap.min(first_el) {
                    bad.push(format!("{at}: {class} server {server} skipped its own buffer"));
                }
                if second_n > 0 && first_n < first_el {
                    bad.push(format!("{at}: {class} server {server} took the other buffer first"));
                }
            }
            "offload" => {
                let t = ev.detail["task"].as_str().unwrap_or_default().to_string();
                let s = ev.detail["server"].as_str().unwrap_or_default().to_string();
                if !granted.contains(&(t.clone(), s.clone())) {
                    bad.push(format!("{}: {t} pushed to {s} without a grant", ev.time_s));
                }
            }
            _ => {}
        }
    }
    bad
}

/// Final blob of every task when the whole workload runs on the client.
pub fn local_oracle(cfg: &ScenarioConfig, registry: &TaskRegistry) -> BTreeMap<TaskInstanceId, TaskStateBlob> {
    let mut w = generate(&cfg.workload, cfg.seed).unwrap();
    let mut out = BTreeMap::new();
    for a in &w.arrivals {
        let task = registry.get(&a.instance.id.class_id).unwrap();
        let run = execute_locally(task.as_ref(), &a.instance.initial_state, &mut w.store);
        out.insert(a.instance.id.clone(), run.blob);
    }
    out
}

/// Every task completed once, with the oracle's blob.
pub fn audit_exactly_once(run: &SimRun, oracle: &BTreeMap<TaskInstanceId, TaskStateBlob>) -> Vec<String> {
    let mut bad = Vec::new();
    let mut seen: BTreeMap<&TaskInstanceId, usize> = BTreeMap::new();
    for (_, c) in &run.completions {
        *seen.entry(&c.id).or_default() += 1;
        match oracle.get(&c.id) {
            Some(b) if *b == c.blob => {}
            Some(_) => bad.push(format!("{} finished with a different blob (on {})", c.id, c.executed_on)),
            None => bad.push(format!("{} completed but was never generated", c.id)),
        }
    }
    for id in oracle.keys() {
        match seen.get(id) {
            Some(1) => {}
            Some(n) => bad.push(format!("{id} completed {n} times")),
            None => bad.push(format!("{id} never completed")),
        }
    }
    for ev in &run.trace {
        if ev.event_kind == "protocol_error" {
            bad.push(format!("{}: protocol error {}", ev.time_s, ev.detail));
        }
    }
    for row in &run.table {
        if !row.record.is_consistent() {
            bad.push(format!("inconsistent table row {}", row.record));
        }
    }
    bad
}

/// Energy conservation and event causality.
pub fn audit_invariants(run: &SimRun) -> Vec<String> {
    let mut bad = Vec::new();
    let e = &run.metrics.energy;
    let err = e.conservation_error();
    if err > ENERGY_REL_TOL {
        bad.push(format!("energy conservation off by {err:e} (relative)"));
    }
    if e.unattributed_j.abs() > ENERGY_REL_TOL * e.total_j.max(1.0) {
        bad.push(format!("{} J above baseline not tied to a task", e.unattributed_j));
    }
    if run.metrics.makespan_s > 0.0 {
        let p = e.total_j / run.metrics.makespan_s;
        if ((p - run.metrics.avg_client_power_w) / p).abs() > ENERGY_REL_TOL {
            bad.push("average power is not energy over makespan".into());
        }
    }
    if !(0.0..=1.0).contains(&run.metrics.offload_fraction) {
        bad.push(format!("offload fraction {}", run.metrics.offload_fraction));
    }
    if run.causality_violations != 0 {
        bad.push(format!("{} events scheduled in the past", run.causality_violations));
    }
    if let Some(w) = run.trace.windows(2).find(|w| w[1].time_s < w[0].time_s) {
        bad.push(format!("trace goes back in time at {} -> {}", w[0].time_s, w[1].time_s));
    }
    bad
}
