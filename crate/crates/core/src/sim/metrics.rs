//! Run metrics, energy accounting and the on-disk run outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DeviceModel, TaskInstanceId};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_s: f64,
    pub device: String,
    pub event_kind: String,
    pub detail: Value,
}

pub fn trace_to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

pub fn trace_from_jsonl(text: &str) -> Result<Vec<TraceEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::config(format!("trace line {}", i + 1), e.to_string()))
        })
        .collect()
}

/// A span during which a device was busy, optionally on behalf of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
    pub task: Option<TaskInstanceId>,
}

impl Interval {
    fn clipped(&self, horizon: f64) -> (f64, f64) {
        (self.start_s.min(horizon), self.end_s.min(horizon))
    }

    fn covers(&self, t: f64) -> bool {
        self.start_s <= t && t < self.end_s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// Power integrated over time.
    pub total_j: f64,
    /// Idle baseline over the whole window.
    pub idle_j: f64,
    /// Energy above baseline, charged to the tasks that caused it.
    pub per_task_j: BTreeMap<String, f64>,
    /// Above-baseline energy not tied to any task.
    pub unattributed_j: f64,
}

impl EnergyBreakdown {
    pub fn attributed_j(&self) -> f64 {
        self.per_task_j.values().sum::<f64>() + self.unattributed_j
    }

    /// Relative gap between the integrated total and idle plus attributed.
    pub fn conservation_error(&self) -> f64 {
        let parts = self.idle_j + self.attributed_j();
        if self.total_j == 0.0 {
            parts.abs()
        } else {
            ((self.total_j - parts) / self.total_j).abs()
        }
    }
}

/// Integrates a device's power over `[0, horizon]`. CPU intervals must not
/// overlap; radio intervals may, and share the radio power equally.
pub fn integrate_energy(device: &DeviceModel, cpu: &[Interval], radio: &[Interval], horizon: f64) -> EnergyBreakdown {
    let mut out = EnergyBreakdown {
        idle_j: device.power_idle_w * horizon,
        ..Default::default()
    };
    if horizon <= 0.0 {
        return out;
    }
    let extra = device.power_active_w - device.power_idle_w;
    let charge = |task: &Option<TaskInstanceId>, j: f64, out: &mut EnergyBreakdown| match task {
        Some(t) => *out.per_task_j.entry(t.to_string()).or_insert(0.0) += j,
        None => out.unattributed_j += j,
    };
    for iv in cpu {
        let (a, b) = iv.clipped(horizon);
        charge(&iv.task, extra * (b - a), &mut out);
    }

    let mut cuts: Vec<f64> = vec![0.0, horizon];
    for iv in cpu.iter().chain(radio) {
        let (a, b) = iv.clipped(horizon);
        cuts.push(a);
        cuts.push(b);
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let dt = b - a;
        if dt <= 0.0 {
            continue;
        }
        let busy = cpu.iter().any(|iv| iv.start_s <= a && iv.end_s >= b);
        let on_air: Vec<&Interval> = radio.iter().filter(|iv| iv.start_s <= a && iv.end_s >= b).collect();
        let power = device.power_w(if busy { 1.0 } else { 0.0 }, !on_air.is_empty());
        out.total_j += power * dt;
        if !on_air.is_empty() {
            let share = device.power_tx_w * dt / on_air.len() as f64;
            for iv in on_air {
                charge(&iv.task, share, &mut out);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_s: f64,
    pub device: String,
    pub power_w: f64,
    pub cpu_load: f64,
}

/// Samples power and load every `interval_s` from 0 through `horizon`.
pub fn sample_series(device: &DeviceModel, cpu: &[Interval], radio: &[Interval], horizon: f64, interval_s: f64) -> Vec<Sample> {
    // 0.3 / 0.1 is just under 3
    let n = (horizon / interval_s + 1e-9).floor() as u64;
    (0..=n)
        .map(|k| {
            let t = k as f64 * interval_s;
            let load = if cpu.iter().any(|iv| iv.covers(t)) { 1.0 } else { 0.0 };
            let tx = radio.iter().any(|iv| iv.covers(t));
            Sample {
                t_s: t,
                device: device.device_id.clone(),
                power_w: device.power_w(load, tx),
                cpu_load: load,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub class_id: String,
    pub executed_on: String,
    pub remote: bool,
    pub status: String,
    pub generated_s: f64,
    pub started_s: f64,
    pub completed_s: f64,
    pub queue_wait_s: f64,
    pub exec_time_s: f64,
    pub client_energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub offloading: bool,
    pub seed: u64,
    pub workload_hash: String,
    pub makespan_s: f64,
    pub energy: EnergyBreakdown,
    pub avg_client_power_w: f64,
    pub offload_fraction: f64,
    pub tasks: Vec<TaskMetrics>,
    pub series: Vec<Sample>,
}

impl RunMetrics {
    pub fn client_energy_j(&self) -> f64 {
        self.energy.total_j
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            scenario: self.scenario.clone(),
            offloading: self.offloading,
            seed: self.seed,
            workload_hash: self.workload_hash.clone(),
            tasks: self.tasks.len(),
            remote_tasks: self.tasks.iter().filter(|t| t.remote).count(),
            makespan_s: self.makespan_s,
            client_energy_j: self.energy.total_j,
            avg_client_power_w: self.avg_client_power_w,
            offload_fraction: self.offload_fraction,
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("t_s,device,power_w,cpu_load\n");
        for s in &self.series {
            let _ = writeln!(out, "{},{},{},{}", s.t_s, s.device, s.power_w, s.cpu_load);
        }
        out
    }

    /// Writes trace.jsonl, metrics.csv and summary.txt into `dir`.
    pub fn write_outputs(&self, dir: impl AsRef<Path>, trace: &[TraceEvent], extra_summary: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TRACE_FILE), trace_to_jsonl(trace))?;
        fs::write(dir.join(METRICS_FILE), self.metrics_csv())?;
        let mut summary = self.summary().to_text();
        summary.push_str(extra_summary);
        fs::write(dir.join(SUMMARY_FILE), summary)?;
        Ok(())
    }
}

/// The headline numbers of a run, as stored in summary.txt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub offloading: bool,
    pub seed: u64,
    pub workload_hash: String,
    pub tasks: usize,
    pub remote_tasks: usize,
    pub makespan_s: f64,
    pub client_energy_j: f64,
    pub avg_client_power_w: f64,
    pub offload_fraction: f64,
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        format!(
            "scenario: {}\noffloading: {}\nseed: {}\nworkload_hash: {}\ntasks: {}\nremote_tasks: {}\n\
             makespan_s: {}\nclient_energy_j: {}\navg_client_power_w: {}\noffload_fraction: {}\n",
            self.scenario,
            if self.offloading { "on" } else { "off" },
            self.seed,
            self.workload_hash,
            self.tasks,
            self.remote_tasks,
            self.makespan_s,
            self.client_energy_j,
            self.avg_client_power_w,
            self.offload_fraction,
        )
    }

    /// Parses the fields written by [`RunSummary::to_text`]; other lines are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let fields: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::config(k, "missing from summary"))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(k, format!("bad value `{v}`")))
        }
        Ok(RunSummary {
            scenario: get("scenario")?.to_string(),
            offloading: match get("offloading")? {
                "on" => true,
                "off" => false,
                v => return Err(Error::config("offloading", format!("bad value `{v}`"))),
            },
            seed: num("seed", get("seed")?)?,
            workload_hash: get("workload_hash")?.to_string(),
            tasks: num("tasks", get("tasks")?)?,
            remote_tasks: num("remote_tasks", get("remote_tasks")?)?,
            makespan_s: num("makespan_s", get("makespan_s")?)?,
            client_energy_j: num("client_energy_j", get("client_energy_j")?)?,
            avg_client_power_w: num("avg_client_power_w", get("avg_client_power_w")?)?,
            offload_fraction: num("offload_fraction", get("offload_fraction")?)?,
        })
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join(SUMMARY_FILE))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub power_reduction_pct: f64,
    pub makespan_reduction_pct: f64,
}

impl Comparison {
    pub fn to_text(&self) -> String {
        format!(
            "avg_power_reduction_pct: {:.2}\nmakespan_reduction_pct: {:.2}\n",
            self.power_reduction_pct, self.makespan_reduction_pct
        )
    }
}

fn reduction_pct(baseline: f64, other: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (baseline - other) / baseline * 100.0
    }
}

/// Reductions of `b` relative to the baseline `a`, in percent.
pub fn compare_runs(a: &RunSummary, b: &RunSummary) -> Result<Comparison> {
    if a.workload_hash != b.workload_hash {
        return Err(Error::IncomparableRuns(format!(
            "workload hashes differ: {} vs {}",
            a.workload_hash, b.workload_hash
        )));
    }
    Ok(Comparison {
        power_reduction_pct: reduction_pct(a.avg_client_power_w, b.avg_client_power_w),
        makespan_reduction_pct: reduction_pct(a.makespan_s, b.makespan_s),
    })
}
