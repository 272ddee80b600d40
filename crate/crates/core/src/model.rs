//! Shared domain types: task and device identities, profiles, the
//! parametric power and link models, and the simulated clock.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unique name of a remotable task class, rendered as `namespace/class_name`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskClassId {
    namespace: String,
    class_name: String,
}

impl TaskClassId {
    pub fn new(namespace: impl Into<String>, class_name: impl Into<String>) -> Result<Self> {
        let namespace = namespace.into();
        let class_name = class_name.into();
        for (what, part) in [("namespace", &namespace), ("class_name", &class_name)] {
            if part.is_empty() {
                return Err(Error::InvalidParameter(format!("{what} must be non-empty")));
            }
            if part.contains('/') || part.contains(char::is_whitespace) {
                return Err(Error::InvalidParameter(format!(
                    "{what} `{part}` may not contain '/' or whitespace"
                )));
            }
        }
        Ok(TaskClassId {
            namespace,
            class_name,
        })
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn class_name(&self) -> &str {
        &self.class_name
    }
}

impl fmt::Display for TaskClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.class_name)
    }
}

impl FromStr for TaskClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((ns, name)) => TaskClassId::new(ns, name),
            None => Err(Error::InvalidParameter(format!(
                "task class id `{s}` is not of the form namespace/class_name"
            ))),
        }
    }
}

impl Serialize for TaskClassId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskClassId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One generated instance of a task class. Ordered by class, then sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskInstanceId {
    pub class_id: TaskClassId,
    pub sequence: u64,
}

impl TaskInstanceId {
    pub fn new(class_id: TaskClassId, sequence: u64) -> Self {
        TaskInstanceId { class_id, sequence }
    }
}

impl fmt::Display for TaskInstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{:04}", self.class_id, self.sequence)
    }
}

/// Measured characteristics of a task class executed on the client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub exec_time_local_s: f64,
    pub energy_local_j: f64,
    pub payload_bytes: u64,
    pub avg_power_w: f64,
}

impl TaskProfile {
    /// Builds a profile from time and energy; average power is derived.
    pub fn new(exec_time_local_s: f64, energy_local_j: f64, payload_bytes: u64) -> Result<Self> {
        if !(exec_time_local_s.is_finite() && exec_time_local_s > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "exec_time_local_s must be finite and > 0, got {exec_time_local_s}"
            )));
        }
        if !(energy_local_j.is_finite() && energy_local_j >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "energy_local_j must be finite and >= 0, got {energy_local_j}"
            )));
        }
        Ok(TaskProfile {
            exec_time_local_s,
            energy_local_j,
            payload_bytes,
            avg_power_w: energy_local_j / exec_time_local_s,
        })
    }

    pub fn from_power(exec_time_local_s: f64, avg_power_w: f64, payload_bytes: u64) -> Result<Self> {
        if !(avg_power_w.is_finite() && avg_power_w >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "avg_power_w must be finite and >= 0, got {avg_power_w}"
            )));
        }
        let mut p = TaskProfile::new(exec_time_local_s, avg_power_w * exec_time_local_s, payload_bytes)?;
        p.avg_power_w = avg_power_w;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let checked = TaskProfile::new(self.exec_time_local_s, self.energy_local_j, self.payload_bytes)?;
        if !self.avg_power_w.is_finite() || self.avg_power_w < 0.0 {
            return Err(Error::InvalidParameter("avg_power_w must be finite and >= 0".into()));
        }
        let expected = checked.avg_power_w * self.exec_time_local_s;
        let actual = self.avg_power_w * self.exec_time_local_s;
        if (expected - actual).abs() > 1e-9 * expected.abs().max(1e-300) {
            return Err(Error::InvalidParameter(
                "energy_local_j must equal avg_power_w * exec_time_local_s".into(),
            ));
        }
        Ok(())
    }
}

/// Energy delay product `T * E` (equivalently `T^2 * P`) in joule-seconds.
pub fn compute_edp(profile: &TaskProfile) -> f64 {
    profile.exec_time_local_s * profile.energy_local_j
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Client,
    AndroidServer,
    GenericServer,
}

impl DeviceKind {
    pub fn is_server(self) -> bool {
        !matches!(self, DeviceKind::Client)
    }

    pub fn as_u8(self) -> u8 {
        match self {
            DeviceKind::Client => 0,
            DeviceKind::AndroidServer => 1,
            DeviceKind::GenericServer => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(DeviceKind::Client),
            1 => Some(DeviceKind::AndroidServer),
            2 => Some(DeviceKind::GenericServer),
            _ => None,
        }
    }
}

impl FromStr for DeviceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "client" => Ok(DeviceKind::Client),
            "android_server" => Ok(DeviceKind::AndroidServer),
            "generic_server" => Ok(DeviceKind::GenericServer),
            other => Err(Error::InvalidParameter(format!("unknown device kind `{other}`"))),
        }
    }
}

/// Server performance class: high performance (H) or performance constrained (C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PerfClass {
    H,
    C,
    #[serde(rename = "unclassified")]
    Unclassified,
}

impl fmt::Display for PerfClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PerfClass::H => "H",
            PerfClass::C => "C",
            PerfClass::Unclassified => "unclassified",
        };
        f.write_str(s)
    }
}

/// H iff `score >= threshold`.
pub fn classify_device(benchmark_score: f64, threshold: f64) -> Result<PerfClass> {
    if !(benchmark_score.is_finite() && benchmark_score > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "benchmark score must be > 0, got {benchmark_score}"
        )));
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "classification threshold must be > 0, got {threshold}"
        )));
    }
    Ok(if benchmark_score >= threshold {
        PerfClass::H
    } else {
        PerfClass::C
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Battery {
    Unlimited,
    Joules(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub device_id: String,
    pub kind: DeviceKind,
    pub cpu_score: f64,
    pub power_idle_w: f64,
    pub power_active_w: f64,
    pub power_tx_w: f64,
    pub battery: Battery,
    pub charging: bool,
    #[serde(default = "unclassified")]
    pub perf_class: PerfClass,
}

fn unclassified() -> PerfClass {
    PerfClass::Unclassified
}

impl DeviceModel {
    pub fn validate(&self) -> Result<()> {
        if self.device_id.is_empty() {
            return Err(Error::InvalidParameter("device_id must be non-empty".into()));
        }
        if !(self.cpu_score.is_finite() && self.cpu_score > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{}: cpu_score must be > 0",
                self.device_id
            )));
        }
        let finite = [self.power_idle_w, self.power_active_w, self.power_tx_w]
            .iter()
            .all(|p| p.is_finite() && *p >= 0.0);
        if !finite || self.power_active_w < self.power_idle_w {
            return Err(Error::InvalidParameter(format!(
                "{}: require power_active_w >= power_idle_w >= 0 and power_tx_w >= 0",
                self.device_id
            )));
        }
        match self.battery {
            Battery::Unlimited if !self.charging => Err(Error::InvalidParameter(format!(
                "{}: unlimited battery implies charging",
                self.device_id
            ))),
            Battery::Joules(j) if !(j.is_finite() && j >= 0.0) => Err(Error::InvalidParameter(
                format!("{}: battery_j must be >= 0", self.device_id),
            )),
            _ => Ok(()),
        }
    }

    /// Instantaneous power for a CPU activity fraction and radio state.
    pub fn power_w(&self, activity: f64, transmitting: bool) -> f64 {
        let tx = if transmitting { self.power_tx_w } else { 0.0 };
        self.power_idle_w + activity * (self.power_active_w - self.power_idle_w) + tx
    }

    /// Classifies the device by its cpu score when it is still unclassified.
    pub fn classified(mut self, threshold: f64) -> Result<Self> {
        if self.perf_class == PerfClass::Unclassified && self.kind.is_server() {
            self.perf_class = classify_device(self.cpu_score, threshold)?;
        }
        Ok(self)
    }
}

/// Wireless link between the client and one server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub throughput_bps: f64,
    pub latency_s: f64,
    pub tx_energy_intercept_j: f64,
    pub tx_energy_per_byte_j: f64,
    pub up: bool,
}

impl LinkModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.throughput_bps.is_finite() && self.throughput_bps > 0.0) {
            return Err(Error::InvalidParameter("throughput_bps must be > 0".into()));
        }
        let nonneg = [
            self.latency_s,
            self.tx_energy_intercept_j,
            self.tx_energy_per_byte_j,
        ];
        if !nonneg.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidParameter(
                "latency and transfer energy coefficients must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn transfer_time_s(&self, bytes: u64) -> f64 {
        self.latency_s + 8.0 * bytes as f64 / self.throughput_bps
    }

    /// Serialization time only, without propagation latency.
    pub fn serialization_time_s(&self, bytes: u64) -> f64 {
        8.0 * bytes as f64 / self.throughput_bps
    }

    pub fn transfer_energy_j(&self, bytes: u64) -> f64 {
        self.tx_energy_intercept_j + self.tx_energy_per_byte_j * bytes as f64
    }
}

/// `(time_s, energy_j)` to move `bytes` over `link`.
pub fn transfer_cost(link: &LinkModel, bytes: u64) -> Result<(f64, f64)> {
    if !link.up {
        return Err(Error::LinkDown);
    }
    Ok((link.transfer_time_s(bytes), link.transfer_energy_j(bytes)))
}

/// Monotone simulated clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Clock {
    now_s: f64,
}

impl Clock {
    pub fn new() -> Self {
        Clock::default()
    }

    pub fn now_s(&self) -> f64 {
        self.now_s
    }

    /// Moves the clock forward; earlier timestamps are rejected.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if !t.is_finite() || t < self.now_s {
            return Err(Error::InvalidParameter(format!(
                "clock cannot move from {} to {t}",
                self.now_s
            )));
        }
        self.now_s = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(a: f64, b: f64) -> LinkModel {
        LinkModel {
            throughput_bps: 8e6,
            latency_s: 0.0,
            tx_energy_intercept_j: a,
            tx_energy_per_byte_j: b,
            up: true,
        }
    }

    #[test]
    fn edp_examples() {
        let p = TaskProfile::new(2.0, 6.0, 0).unwrap();
        assert_eq!(compute_edp(&p), 12.0);
        assert!((p.avg_power_w - 3.0).abs() < 1e-12);
        let p = TaskProfile::new(1.5, 4.0, 0).unwrap();
        assert_eq!(compute_edp(&p), 6.0);
        let p = TaskProfile::new(1e-300, 0.0, 0).unwrap();
        assert_eq!(compute_edp(&p), 0.0);
    }

    #[test]
    fn edp_matches_power_form() {
        let p = TaskProfile::from_power(2.0, 3.0, 0).unwrap();
        let t2p = p.exec_time_local_s.powi(2) * p.avg_power_w;
        assert!((compute_edp(&p) - t2p).abs() <= 1e-9 * t2p);
        p.validate().unwrap();
    }

    #[test]
    fn profile_rejects_bad_values() {
        assert!(TaskProfile::new(0.0, 1.0, 0).is_err());
        assert!(TaskProfile::new(f64::NAN, 1.0, 0).is_err());
        assert!(TaskProfile::new(1.0, -1.0, 0).is_err());
        let mut p = TaskProfile::new(1.0, 1.0, 0).unwrap();
        p.avg_power_w = 5.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn transfer_cost_examples() {
        let (t, _) = transfer_cost(&link(0.0, 0.0), 1_048_576).unwrap();
        assert!((t - 1.048576).abs() < 1e-12);
        let (_, e) = transfer_cost(&link(0.1, 3.90625e-6), 0).unwrap();
        assert_eq!(e, 0.1);
        let (_, e) = transfer_cost(&link(0.1, 3.90625e-6), 204_800).unwrap();
        assert!((e - 0.9).abs() < 1e-12);
        let mut down = link(0.1, 0.0);
        down.up = false;
        assert_eq!(transfer_cost(&down, 1), Err(Error::LinkDown));
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_device(2.5, 1.5).unwrap(), PerfClass::H);
        assert_eq!(classify_device(0.8, 1.5).unwrap(), PerfClass::C);
        assert_eq!(classify_device(1.5, 1.5).unwrap(), PerfClass::H);
        assert!(classify_device(0.0, 1.5).is_err());
        assert!(classify_device(1.0, -1.0).is_err());
    }

    #[test]
    fn class_id_rendering() {
        let id: TaskClassId = "demo/FindRoute".parse().unwrap();
        assert_eq!(id.namespace(), "demo");
        assert_eq!(id.to_string(), "demo/FindRoute");
        assert!("noslash".parse::<TaskClassId>().is_err());
        assert!(TaskClassId::new("", "x").is_err());
        let inst = TaskInstanceId::new(id, 1);
        assert_eq!(inst.to_string(), "demo/FindRoute#0001");
    }

    #[test]
    fn device_validation() {
        let mut d = DeviceModel {
            device_id: "phone".into(),
            kind: DeviceKind::Client,
            cpu_score: 1.0,
            power_idle_w: 0.5,
            power_active_w: 2.5,
            power_tx_w: 1.0,
            battery: Battery::Joules(10_000.0),
            charging: false,
            perf_class: PerfClass::Unclassified,
        };
        d.validate().unwrap();
        assert_eq!(d.power_w(1.0, true), 3.5);
        d.power_active_w = 0.1;
        assert!(d.validate().is_err());
        d.power_active_w = 2.5;
        d.battery = Battery::Unlimited;
        assert!(d.validate().is_err());
    }

    #[test]
    fn clock_is_monotone() {
        let mut c = Clock::new();
        c.advance_to(1.0).unwrap();
        assert!(c.advance_to(0.5).is_err());
        assert_eq!(c.now_s(), 1.0);
    }

    proptest! {
        #[test]
        fn edp_strictly_increasing(t in 0.01f64..100.0, dt in 0.01f64..10.0, p in 0.01f64..10.0) {
            let a = TaskProfile::from_power(t, p, 0).unwrap();
            let b = TaskProfile::from_power(t + dt, p, 0).unwrap();
            prop_assert!(compute_edp(&b) > compute_edp(&a));
            let c = TaskProfile::new(t, a.energy_local_j + dt, 0).unwrap();
            prop_assert!(compute_edp(&c) > compute_edp(&a));
        }

        #[test]
        fn transfer_monotone(bytes in 0u64..10_000_000, extra in 0u64..1_000_000,
                             a in 0.0f64..1.0, b in 0.0f64..1e-5, bps in 1e3f64..1e9, lat in 0.0f64..1.0) {
            let l = LinkModel { throughput_bps: bps, latency_s: lat, tx_energy_intercept_j: a, tx_energy_per_byte_j: b, up: true };
            let (t0, e0) = transfer_cost(&l, bytes).unwrap();
            let (t1, e1) = transfer_cost(&l, bytes + extra).unwrap();
            prop_assert!(t1 >= t0 && e1 >= e0);
        }

        #[test]
        fn classify_total(score in 1e-6f64..100.0, th in 1e-6f64..100.0) {
            let c = classify_device(score, th).unwrap();
            prop_assert_eq!(c == PerfClass::H, score >= th);
            prop_assert_eq!(classify_device(score, th).unwrap(), c);
        }
    }
}
