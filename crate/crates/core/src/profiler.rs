//! Program and device profiling.
//!
//! Task characteristics are captured on a class's first execution and kept
//! in a [`ProfileStore`], optionally backed by an append-only text file.
//! Device status is tracked in a [`StatusBoard`] that always serves the most
//! recent write. Link estimates are refreshed from measured transfers and
//! the transfer-energy line is fitted from synthetic transfers.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{compute_edp, Clock, DeviceModel, LinkModel, TaskClassId, TaskProfile};

pub const DEFAULT_EWMA_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub class_id: TaskClassId,
    pub profile: TaskProfile,
    pub first_seen_s: f64,
    pub sample_count: u32,
}

impl TaskRecord {
    pub fn edp(&self) -> f64 {
        compute_edp(&self.profile)
    }

    /// `class_id TAB T TAB E TAB S TAB n TAB first_seen_s`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.class_id,
            self.profile.exec_time_local_s,
            self.profile.energy_local_j,
            self.profile.payload_bytes,
            self.sample_count,
            self.first_seen_s
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::InvalidParameter(format!("profile line `{line}`: bad {what}"));
        let cols: Vec<&str> = line.split('\t').collect();
        if !(5..=6).contains(&cols.len()) {
            return Err(bad("column count"));
        }
        let class_id: TaskClassId = cols[0].parse()?;
        let t: f64 = cols[1].parse().map_err(|_| bad("T"))?;
        let e: f64 = cols[2].parse().map_err(|_| bad("E"))?;
        let s: u64 = cols[3].parse().map_err(|_| bad("S"))?;
        let n: u32 = cols[4].parse().map_err(|_| bad("n"))?;
        let first_seen_s = match cols.get(5) {
            Some(c) => c.parse().map_err(|_| bad("first_seen_s"))?,
            None => 0.0,
        };
        if n == 0 {
            return Err(bad("n"));
        }
        Ok(TaskRecord {
            class_id,
            profile: TaskProfile::new(t, e, s)?,
            first_seen_s,
            sample_count: n,
        })
    }
}

/// One record per task class. Reads see the latest write.
#[derive(Debug, Default)]
pub struct ProfileStore {
    records: BTreeMap<TaskClassId, TaskRecord>,
    path: Option<PathBuf>,
}

impl ProfileStore {
    pub fn new() -> Self {
        ProfileStore::default()
    }

    /// Opens a file-backed store, loading every line; later lines for the
    /// same class replace earlier ones. A missing file is an empty store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut records = BTreeMap::new();
        if path.exists() {
            for line in fs::read_to_string(&path)?.lines() {
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                let rec = TaskRecord::parse_line(line)?;
                records.insert(rec.class_id.clone(), rec);
            }
        }
        Ok(ProfileStore {
            records,
            path: Some(path),
        })
    }

    fn persist(&self, rec: &TaskRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", rec.to_line())?;
        }
        Ok(())
    }

    pub fn lookup(&self, class_id: &TaskClassId) -> Result<&TaskRecord> {
        self.records
            .get(class_id)
            .ok_or_else(|| Error::NotProfiled(class_id.to_string()))
    }

    pub fn contains(&self, class_id: &TaskClassId) -> bool {
        self.records.contains_key(class_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &TaskRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn profile_first_execution(
        &mut self,
        class_id: &TaskClassId,
        observed: TaskProfile,
        clock: &Clock,
    ) -> Result<TaskRecord> {
        if self.records.contains_key(class_id) {
            return Err(Error::DuplicateRecord(class_id.to_string()));
        }
        observed.validate()?;
        let rec = TaskRecord {
            class_id: class_id.clone(),
            profile: observed,
            first_seen_s: clock.now_s(),
            sample_count: 1,
        };
        self.persist(&rec)?;
        self.records.insert(class_id.clone(), rec.clone());
        Ok(rec)
    }

    /// Folds another observation into the record as a running mean.
    pub fn update_profile(&mut self, class_id: &TaskClassId, observed: TaskProfile) -> Result<TaskRecord> {
        observed.validate()?;
        let rec = self
            .records
            .get(class_id)
            .ok_or_else(|| Error::NotProfiled(class_id.to_string()))?;
        let n = rec.sample_count as f64;
        let mean = |old: f64, new: f64| old + (new - old) / (n + 1.0);
        let p = &rec.profile;
        let profile = TaskProfile::new(
            mean(p.exec_time_local_s, observed.exec_time_local_s),
            mean(p.energy_local_j, observed.energy_local_j),
            mean(p.payload_bytes as f64, observed.payload_bytes as f64).round() as u64,
        )?;
        let updated = TaskRecord {
            profile,
            sample_count: rec.sample_count + 1,
            ..rec.clone()
        };
        self.persist(&updated)?;
        self.records.insert(class_id.clone(), updated.clone());
        Ok(updated)
    }

    /// Median EDP over all profiled classes.
    pub fn median_edp(&self) -> Option<f64> {
        let mut edps: Vec<f64> = self.records.values().map(TaskRecord::edp).collect();
        if edps.is_empty() {
            return None;
        }
        edps.sort_by(f64::total_cmp);
        let mid = edps.len() / 2;
        Some(if edps.len() % 2 == 1 {
            edps[mid]
        } else {
            (edps[mid - 1] + edps[mid]) / 2.0
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStatus {
    pub device_id: String,
    pub battery_level: f64,
    pub charging: bool,
    pub cpu_load: f64,
    pub link_up: bool,
    pub measured_throughput_bps: f64,
    pub timestamp_s: f64,
}

impl DeviceStatus {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("battery_level", self.battery_level), ("cpu_load", self.cpu_load)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{what} must be in [0, 1], got {v}")));
            }
        }
        if !(self.measured_throughput_bps.is_finite() && self.measured_throughput_bps >= 0.0) {
            return Err(Error::InvalidParameter("measured_throughput_bps must be >= 0".into()));
        }
        if !self.timestamp_s.is_finite() {
            return Err(Error::InvalidParameter("timestamp must be finite".into()));
        }
        Ok(())
    }
}

/// Latest status per device.
#[derive(Debug, Default)]
pub struct StatusBoard {
    latest: BTreeMap<String, DeviceStatus>,
}

impl StatusBoard {
    pub fn new() -> Self {
        StatusBoard::default()
    }

    pub fn record(&mut self, status: DeviceStatus) -> Result<()> {
        status.validate()?;
        self.latest.insert(status.device_id.clone(), status);
        Ok(())
    }

    pub fn latest(&self, device_id: &str) -> Option<&DeviceStatus> {
        self.latest.get(device_id)
    }
}

/// Folds one measured transfer into the link's throughput estimate with an
/// exponentially weighted moving average.
pub fn update_throughput(link: &LinkModel, observed_bytes: u64, observed_duration_s: f64, alpha: f64) -> Result<LinkModel> {
    if !(observed_duration_s.is_finite() && observed_duration_s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "transfer duration must be > 0, got {observed_duration_s}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("EWMA alpha must be in (0, 1], got {alpha}")));
    }
    let sample = 8.0 * observed_bytes as f64 / observed_duration_s;
    if sample <= 0.0 {
        // an empty transfer says nothing about bandwidth
        return Ok(*link);
    }
    Ok(LinkModel {
        throughput_bps: alpha * sample + (1.0 - alpha) * link.throughput_bps,
        ..*link
    })
}

/// Least-squares line `E = a + b * bytes`, with both coefficients clamped
/// to be non-negative.
pub fn fit_transfer_energy(samples: &[(u64, f64)]) -> Result<(f64, f64)> {
    if let Some((_, e)) = samples.iter().find(|(_, e)| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::InvalidParameter(format!("energy sample {e} must be finite and >= 0")));
    }
    let first = samples.first().map(|s| s.0);
    if !samples.iter().any(|s| Some(s.0) != first) {
        return Err(Error::InsufficientData(
            "need at least two samples with distinct sizes".into(),
        ));
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|s| s.0 as f64).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in samples {
        let dx = x as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let b = sxy / sxx;
    let a = mean_y - b * mean_x;
    if b < 0.0 {
        return Ok((mean_y, 0.0));
    }
    if a < 0.0 {
        // refit through the origin
        let num: f64 = samples.iter().map(|&(x, y)| x as f64 * y).sum();
        let den: f64 = samples.iter().map(|&(x, _)| (x as f64).powi(2)).sum();
        let origin = (0.0, (num / den).max(0.0));
        let flat = (mean_y, 0.0);
        let rss = |(a, b): (f64, f64)| -> f64 {
            samples.iter().map(|&(x, y)| (y - a - b * x as f64).powi(2)).sum()
        };
        return Ok(if rss(origin) <= rss(flat) { origin } else { flat });
    }
    Ok((a, b))
}

/// Payload sizes used when measuring a link with synthetic transfers.
pub const CALIBRATION_SIZES: [u64; 4] = [16 << 10, 64 << 10, 256 << 10, 1 << 20];

/// Energy the client spends on one synthetic transfer under the power model:
/// baseline plus radio power for the duration of the transfer.
pub fn synthetic_transfer_energy(client: &DeviceModel, link: &LinkModel, bytes: u64) -> f64 {
    client.power_w(0.0, true) * link.transfer_time_s(bytes)
}

/// Fits the link's transfer-energy coefficients from synthetic transfers of
/// [`CALIBRATION_SIZES`].
pub fn calibrate_link(client: &DeviceModel, link: &LinkModel) -> Result<LinkModel> {
    link.validate()?;
    let samples: Vec<(u64, f64)> = CALIBRATION_SIZES
        .iter()
        .map(|&b| (b, synthetic_transfer_energy(client, link, b)))
        .collect();
    let (a, b) = fit_transfer_energy(&samples)?;
    Ok(LinkModel {
        tx_energy_intercept_j: a,
        tx_energy_per_byte_j: b,
        ..*link
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn class(s: &str) -> TaskClassId {
        s.parse().unwrap()
    }

    #[test]
    fn first_execution_then_lookup() {
        let mut store = ProfileStore::new();
        let id = class("app/Heavy");
        let p = TaskProfile::new(2.0, 6.0, 10 * 1024).unwrap();
        let rec = store.profile_first_execution(&id, p, &Clock::new()).unwrap();
        assert_eq!(rec.edp(), 12.0);
        assert_eq!(store.lookup(&id).unwrap(), &rec);
        assert_eq!(
            store.profile_first_execution(&id, p, &Clock::new()),
            Err(Error::DuplicateRecord("app/Heavy".into()))
        );
        assert_eq!(
            store.lookup(&class("app/Other")),
            Err(Error::NotProfiled("app/Other".into()))
        );
    }

    #[test]
    fn running_mean() {
        let mut store = ProfileStore::new();
        let id = class("app/T");
        store
            .profile_first_execution(&id, TaskProfile::new(2.0, 6.0, 0).unwrap(), &Clock::new())
            .unwrap();
        let rec = store.update_profile(&id, TaskProfile::new(4.0, 6.0, 0).unwrap()).unwrap();
        assert_eq!(rec.profile.exec_time_local_s, 3.0);
        assert_eq!(rec.sample_count, 2);
        let rec = store.update_profile(&id, TaskProfile::new(3.0, 6.0, 0).unwrap()).unwrap();
        assert_eq!(rec.profile.energy_local_j, 6.0);
        assert_eq!(rec.sample_count, 3);
        rec.profile.validate().unwrap();

        let bad = TaskProfile {
            exec_time_local_s: f64::INFINITY,
            energy_local_j: 1.0,
            payload_bytes: 0,
            avg_power_w: 0.0,
        };
        assert!(matches!(store.update_profile(&id, bad), Err(Error::InvalidParameter(_))));
        assert_eq!(store.lookup(&id).unwrap(), &rec);
        assert!(matches!(
            store.update_profile(&class("app/None"), TaskProfile::new(1.0, 1.0, 0).unwrap()),
            Err(Error::NotProfiled(_))
        ));
    }

    #[test]
    fn file_store_is_append_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.tsv");
        let id = class("app/T");
        {
            let mut store = ProfileStore::open(&path).unwrap();
            let mut clock = Clock::new();
            clock.advance_to(1.25).unwrap();
            store
                .profile_first_execution(&id, TaskProfile::new(2.0, 6.0, 100).unwrap(), &clock)
                .unwrap();
            store.update_profile(&id, TaskProfile::new(4.0, 2.0, 300).unwrap()).unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), "app/T\t2\t6\t100\t1\t1.25");
        let store = ProfileStore::open(&path).unwrap();
        let rec = store.lookup(&id).unwrap();
        assert_eq!(rec.sample_count, 2);
        assert_eq!(rec.profile.exec_time_local_s, 3.0);
        assert_eq!(rec.profile.payload_bytes, 200);
        assert_eq!(rec.first_seen_s, 1.25);
    }

    #[test]
    fn five_column_lines_are_accepted() {
        let rec = TaskRecord::parse_line("demo/FindRoute\t2\t5\t20000\t1").unwrap();
        assert_eq!(rec.first_seen_s, 0.0);
        assert!(TaskRecord::parse_line("demo/FindRoute\t2\t5").is_err());
    }

    #[test]
    fn median_edp() {
        let mut store = ProfileStore::new();
        assert_eq!(store.median_edp(), None);
        for (name, t) in [("a/A", 1.0), ("a/B", 2.0), ("a/C", 3.0)] {
            store
                .profile_first_execution(&class(name), TaskProfile::from_power(t, 1.0, 0).unwrap(), &Clock::new())
                .unwrap();
        }
        assert_eq!(store.median_edp(), Some(4.0));
        store
            .profile_first_execution(&class("a/D"), TaskProfile::from_power(4.0, 1.0, 0).unwrap(), &Clock::new())
            .unwrap();
        assert_eq!(store.median_edp(), Some(6.5));
    }

    #[test]
    fn throughput_examples() {
        let link = LinkModel {
            throughput_bps: 8e6,
            latency_s: 0.01,
            tx_energy_intercept_j: 0.0,
            tx_energy_per_byte_j: 0.0,
            up: true,
        };
        let l = update_throughput(&link, 1_048_576, 2.0, 1.0).unwrap();
        assert!((l.throughput_bps - 4_194_304.0).abs() < 1e-6);
        assert_eq!(l.latency_s, 0.01);
        let l = update_throughput(&link, 500_000, 1.0, 0.5).unwrap();
        assert!((l.throughput_bps - 6e6).abs() < 1e-6);
        assert!(matches!(update_throughput(&link, 1, 0.0, 0.5), Err(Error::InvalidParameter(_))));
        assert!(matches!(update_throughput(&link, 1, -1.0, 0.5), Err(Error::InvalidParameter(_))));
    }

    /// Exact line through two points.
    fn two_point(p: (u64, f64), q: (u64, f64)) -> (f64, f64) {
        let b = (q.1 - p.1) / (q.0 as f64 - p.0 as f64);
        (p.1 - b * p.0 as f64, b)
    }

    #[test]
    fn fit_examples() {
        let pts = [(102_400, 0.5), (204_800, 0.9)];
        let (oa, ob) = two_point(pts[0], pts[1]);
        assert!((oa - 0.1).abs() < 1e-12 && (ob - 3.90625e-6).abs() < 1e-18);
        let (a, b) = fit_transfer_energy(&pts).unwrap();
        assert!((a - oa).abs() < 1e-12);
        assert!((b - ob).abs() < 1e-18);

        let (a, b) = fit_transfer_energy(&[(0, 0.2), (4096, 0.2)]).unwrap();
        assert_eq!((a, b), (0.2, 0.0));
        assert!(matches!(fit_transfer_energy(&[(5, 1.0)]), Err(Error::InsufficientData(_))));
        assert!(matches!(fit_transfer_energy(&[(5, 1.0), (5, 2.0)]), Err(Error::InsufficientData(_))));
        assert!(matches!(fit_transfer_energy(&[(5, -1.0), (6, 2.0)]), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn fit_clamps() {
        // decreasing energy gives a flat line at the mean
        let (a, b) = fit_transfer_energy(&[(0, 1.0), (10, 0.0)]).unwrap();
        assert_eq!((a, b), (0.5, 0.0));
        // negative intercept refits through the origin
        let (a, b) = fit_transfer_energy(&[(10, 0.0), (20, 1.0)]).unwrap();
        assert_eq!(a, 0.0);
        assert!(b > 0.0);
    }

    #[test]
    fn calibration_recovers_power_model() {
        let client = DeviceModel {
            device_id: "c".into(),
            kind: crate::model::DeviceKind::Client,
            cpu_score: 1.0,
            power_idle_w: 0.5,
            power_active_w: 2.5,
            power_tx_w: 1.0,
            battery: crate::model::Battery::Joules(1e4),
            charging: false,
            perf_class: crate::model::PerfClass::Unclassified,
        };
        let link = LinkModel {
            throughput_bps: 20e6,
            latency_s: 0.01,
            tx_energy_intercept_j: 0.0,
            tx_energy_per_byte_j: 0.0,
            up: true,
        };
        let l = calibrate_link(&client, &link).unwrap();
        assert!((l.tx_energy_intercept_j - 0.015).abs() < 1e-12);
        assert!((l.tx_energy_per_byte_j - 6e-7).abs() < 1e-18);
    }

    #[test]
    fn status_board_serves_latest_write() {
        let mut board = StatusBoard::new();
        let mut s = DeviceStatus {
            device_id: "laptop".into(),
            battery_level: 1.0,
            charging: true,
            cpu_load: 0.2,
            link_up: true,
            measured_throughput_bps: 1e6,
            timestamp_s: 5.0,
        };
        board.record(s.clone()).unwrap();
        s.cpu_load = 0.9;
        s.timestamp_s = 4.0;
        board.record(s.clone()).unwrap();
        assert_eq!(board.latest("laptop").unwrap().cpu_load, 0.9);
        s.battery_level = 1.5;
        assert!(board.record(s).is_err());
        assert_eq!(board.latest("laptop").unwrap().battery_level, 1.0);
    }

    proptest! {
        #[test]
        fn ewma_stays_within_bounds(prior in 1e3f64..1e9, samples in proptest::collection::vec((1u64..10_000_000, 1e-3f64..10.0), 1..20), alpha in 0.01f64..=1.0) {
            let mut link = LinkModel { throughput_bps: prior, latency_s: 0.0, tx_energy_intercept_j: 0.0, tx_energy_per_byte_j: 0.0, up: true };
            let mut lo = prior;
            let mut hi = prior;
            for (bytes, dur) in samples {
                let s = 8.0 * bytes as f64 / dur;
                lo = lo.min(s);
                hi = hi.max(s);
                link = update_throughput(&link, bytes, dur, alpha).unwrap();
                prop_assert!(link.throughput_bps >= lo * (1.0 - 1e-12) && link.throughput_bps <= hi * (1.0 + 1e-12));
            }
        }

        #[test]
        fn fit_beats_any_constant(pts in proptest::collection::vec((0u64..1000, 0.0f64..10.0), 2..8)) {
            prop_assume!(pts.iter().any(|p| p.0 != pts[0].0));
            let (a, b) = fit_transfer_energy(&pts).unwrap();
            let rss = |f: &dyn Fn(u64) -> f64| pts.iter().map(|&(x, y)| (y - f(x)).powi(2)).sum::<f64>();
            let fitted = rss(&|x| a + b * x as f64);
            for k in 0..=200 {
                let c = k as f64 * 0.05;
                prop_assert!(fitted <= rss(&|_| c) + 1e-9);
            }
        }

        #[test]
        fn store_round_trip(t in 1e-3f64..1e3, e in 0.0f64..1e3, s in 0u64..1_000_000) {
            let mut store = ProfileStore::new();
            let id = class("app/P");
            let rec = store.profile_first_execution(&id, TaskProfile::new(t, e, s).unwrap(), &Clock::new()).unwrap();
            prop_assert_eq!(store.lookup(&id).unwrap(), &rec);
            let parsed = TaskRecord::parse_line(&rec.to_line()).unwrap();
            prop_assert_eq!(parsed, rec);
        }
    }
}
