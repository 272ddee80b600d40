//! Scenario description for the simulator.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client_sched::DEFAULT_STEAL_CAPACITY;
use crate::error::{Error, Result};
use crate::model::{DeviceKind, DeviceModel, LinkModel, TaskClassId};
use crate::optimizer::OptimizerConfig;
use crate::protocol::client::{DEFAULT_CLASSIFICATION_THRESHOLD, DEFAULT_WORK_UNIT_S};
use crate::server_sched::DEFAULT_LOW_WATERMARK;
use crate::tasklib::TaskRegistry;

pub const DEFAULT_SAMPLE_INTERVAL_S: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub client: DeviceModel,
    #[serde(default)]
    pub servers: Vec<DeviceModel>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub workload: Vec<WorkloadItem>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub scheduler: SchedulerKnobs,
    #[serde(default = "default_work_unit")]
    pub work_unit_s: f64,
    #[serde(default = "default_true")]
    pub offloading: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default = "default_sample")]
    pub sample_interval_s: f64,
}

fn default_work_unit() -> f64 {
    DEFAULT_WORK_UNIT_S
}

fn default_true() -> bool {
    true
}

fn default_sample() -> f64 {
    DEFAULT_SAMPLE_INTERVAL_S
}

/// The link between the client and one server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub server: String,
    #[serde(flatten)]
    pub link: LinkModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformRange {
    pub min: u64,
    pub max: u64,
}

impl UniformRange {
    pub fn fixed(v: u64) -> Self {
        UniformRange { min: v, max: v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterArrival {
    Fixed { interval_s: f64 },
    Exponential { mean_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadItem {
    pub class_id: TaskClassId,
    pub count: u32,
    pub payload_bytes: UniformRange,
    pub work_units: UniformRange,
    pub inter_arrival: InterArrival,
    #[serde(default)]
    pub start_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerKnobs {
    #[serde(default)]
    pub edp_threshold_js: Option<f64>,
    pub steal_capacity: u32,
    pub low_watermark: usize,
    pub classification_threshold: f64,
}

impl Default for SchedulerKnobs {
    fn default() -> Self {
        SchedulerKnobs {
            edp_threshold_js: None,
            steal_capacity: DEFAULT_STEAL_CAPACITY,
            low_watermark: DEFAULT_LOW_WATERMARK,
            classification_threshold: DEFAULT_CLASSIFICATION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    LinkDown,
    LinkUp,
    ServerCrash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub time_s: f64,
    pub server: String,
    pub event: FaultKind,
}

fn bad(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::config(path, message)
}

fn nested(path: String, e: Error) -> Error {
    match e {
        Error::InvalidParameter(m) => bad(path, m),
        other => bad(path, other.to_string()),
    }
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| bad(format!("line {} column {}", e.line(), e.column()), e.to_string()))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            bad(
                format!("{}:{}:{}", path.display(), e.line(), e.column()),
                e.to_string(),
            )
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn link_for(&self, server: &str) -> Option<&LinkModel> {
        self.links.iter().find(|l| l.server == server).map(|l| &l.link)
    }

    /// Hash of the workload description only, so runs that differ in seed,
    /// devices or offloading remain comparable.
    pub fn workload_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.workload).expect("workload serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self, registry: &TaskRegistry) -> Result<()> {
        if self.name.is_empty() {
            return Err(bad("name", "must be non-empty"));
        }
        self.client.validate().map_err(|e| nested("client".into(), e))?;
        if self.client.kind != DeviceKind::Client {
            return Err(bad("client.kind", "must be client"));
        }
        let mut ids = BTreeSet::from([self.client.device_id.as_str()]);
        for (i, s) in self.servers.iter().enumerate() {
            s.validate().map_err(|e| nested(format!("servers[{i}]"), e))?;
            if !s.kind.is_server() {
                return Err(bad(format!("servers[{i}].kind"), "must be a server kind"));
            }
            if !ids.insert(&s.device_id) {
                return Err(bad(format!("servers[{i}].device_id"), format!("duplicate id `{}`", s.device_id)));
            }
        }
        let mut linked = BTreeSet::new();
        for (i, l) in self.links.iter().enumerate() {
            if !self.servers.iter().any(|s| s.device_id == l.server) {
                return Err(bad(format!("links[{i}].server"), format!("unknown server `{}`", l.server)));
            }
            if !linked.insert(&l.server) {
                return Err(bad(format!("links[{i}].server"), format!("second link for `{}`", l.server)));
            }
            l.link.validate().map_err(|e| nested(format!("links[{i}]"), e))?;
        }
        for (i, s) in self.servers.iter().enumerate() {
            if !linked.contains(&s.device_id) {
                return Err(bad(format!("servers[{i}]"), format!("no link for `{}`", s.device_id)));
            }
        }
        for (i, w) in self.workload.iter().enumerate() {
            let p = format!("workload[{i}]");
            if !registry.contains(&w.class_id) {
                return Err(bad(format!("{p}.class_id"), format!("unknown task class `{}`", w.class_id)));
            }
            if w.payload_bytes.min > w.payload_bytes.max {
                return Err(bad(format!("{p}.payload_bytes"), "min > max"));
            }
            if w.work_units.min == 0 || w.work_units.min > w.work_units.max {
                return Err(bad(format!("{p}.work_units"), "need 1 <= min <= max"));
            }
            let ok = match w.inter_arrival {
                InterArrival::Fixed { interval_s } => interval_s.is_finite() && interval_s >= 0.0,
                InterArrival::Exponential { mean_s } => mean_s.is_finite() && mean_s > 0.0,
            };
            if !ok {
                return Err(bad(format!("{p}.inter_arrival"), "interval must be >= 0 and mean > 0"));
            }
            if !(w.start_s.is_finite() && w.start_s >= 0.0) {
                return Err(bad(format!("{p}.start_s"), "must be >= 0"));
            }
        }
        self.optimizer.validate().map_err(|e| nested("optimizer".into(), e))?;
        let k = &self.scheduler;
        if k.steal_capacity == 0 {
            return Err(bad("scheduler.steal_capacity", "must be >= 1"));
        }
        if let Some(t) = k.edp_threshold_js {
            if !(t.is_finite() && t > 0.0) {
                return Err(bad("scheduler.edp_threshold_js", "must be > 0"));
            }
        }
        if !(k.classification_threshold.is_finite() && k.classification_threshold > 0.0) {
            return Err(bad("scheduler.classification_threshold", "must be > 0"));
        }
        if !(self.work_unit_s.is_finite() && self.work_unit_s > 0.0) {
            return Err(bad("work_unit_s", "must be > 0"));
        }
        if !(self.sample_interval_s.is_finite() && self.sample_interval_s > 0.0) {
            return Err(bad("sample_interval_s", "must be > 0"));
        }
        for (i, f) in self.faults.iter().enumerate() {
            if !(f.time_s.is_finite() && f.time_s >= 0.0) {
                return Err(bad(format!("faults[{i}].time_s"), "must be >= 0"));
            }
            if !self.servers.iter().any(|s| s.device_id == f.server) {
                return Err(bad(format!("faults[{i}].server"), format!("unknown server `{}`", f.server)));
            }
        }
        Ok(())
    }
}
