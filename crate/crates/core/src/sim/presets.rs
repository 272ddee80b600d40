//! Built-in scenarios.
//!
//! Device wattages and speeds are calibration values, picked so that heavy
//! tasks pass the offload inequations and tiny ones do not. They are not
//! measurements of any particular hardware.

use crate::error::{Error, Result};
use crate::model::{Battery, DeviceKind, DeviceModel, LinkModel, PerfClass};
use crate::optimizer::OptimizerConfig;
use crate::tasklib::demo;

use super::config::{InterArrival, LinkSpec, ScenarioConfig, SchedulerKnobs, UniformRange, WorkloadItem};

pub const PRESET_NAMES: [&str; 3] = ["fd50", "fr", "mixed_fleet"];

pub fn client_device() -> DeviceModel {
    DeviceModel {
        device_id: "client".into(),
        kind: DeviceKind::Client,
        cpu_score: 1.0,
        power_idle_w: 0.5,
        power_active_w: 2.5,
        power_tx_w: 1.0,
        battery: Battery::Joules(20_000.0),
        charging: false,
        perf_class: PerfClass::Unclassified,
    }
}

/// Laptop-like helper: fast, mains powered.
pub fn laptop_server() -> DeviceModel {
    DeviceModel {
        device_id: "laptop".into(),
        kind: DeviceKind::GenericServer,
        cpu_score: 3.0,
        power_idle_w: 8.0,
        power_active_w: 25.0,
        power_tx_w: 2.0,
        battery: Battery::Unlimited,
        charging: true,
        perf_class: PerfClass::Unclassified,
    }
}

/// Phone-like helper: a little slower than the client.
pub fn phone_server() -> DeviceModel {
    DeviceModel {
        device_id: "phone".into(),
        kind: DeviceKind::AndroidServer,
        cpu_score: 0.8,
        power_idle_w: 0.4,
        power_active_w: 2.0,
        power_tx_w: 1.0,
        battery: Battery::Joules(20_000.0),
        charging: false,
        perf_class: PerfClass::Unclassified,
    }
}

/// 20 Mbit/s, 10 ms one way. Transfer energy coefficients are fitted at
/// scenario start, so they start at zero here.
pub fn wifi_link() -> LinkModel {
    LinkModel {
        throughput_bps: 20e6,
        latency_s: 0.010,
        tx_energy_intercept_j: 0.0,
        tx_energy_per_byte_j: 0.0,
        up: true,
    }
}

fn link_to(server: &DeviceModel) -> LinkSpec {
    LinkSpec {
        server: server.device_id.clone(),
        link: wifi_link(),
    }
}

fn base(name: &str, servers: Vec<DeviceModel>, workload: Vec<WorkloadItem>) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        client: client_device(),
        links: servers.iter().map(link_to).collect(),
        servers,
        workload,
        optimizer: OptimizerConfig::default(),
        scheduler: SchedulerKnobs::default(),
        work_unit_s: 0.001,
        offloading: true,
        seed: 1,
        faults: Vec::new(),
        sample_interval_s: 0.1,
    }
}

pub fn face_detect_item(count: u32) -> WorkloadItem {
    WorkloadItem {
        class_id: demo::FACE_DETECT.parse().expect("valid id"),
        count,
        payload_bytes: UniformRange {
            min: 120_000,
            max: 200_000,
        },
        work_units: UniformRange { min: 1200, max: 1800 },
        inter_arrival: InterArrival::Exponential { mean_s: 0.5 },
        start_s: 0.0,
    }
}

pub fn find_route_item(count: u32) -> WorkloadItem {
    WorkloadItem {
        class_id: demo::FIND_ROUTE.parse().expect("valid id"),
        count,
        payload_bytes: UniformRange {
            min: 16_000,
            max: 24_000,
        },
        work_units: UniformRange { min: 1800, max: 2400 },
        inter_arrival: InterArrival::Exponential { mean_s: 0.5 },
        start_s: 0.0,
    }
}

pub fn update_info_item(count: u32) -> WorkloadItem {
    WorkloadItem {
        class_id: demo::UPDATE_INFO.parse().expect("valid id"),
        count,
        payload_bytes: UniformRange { min: 200, max: 400 },
        work_units: UniformRange { min: 40, max: 120 },
        inter_arrival: InterArrival::Exponential { mean_s: 0.5 },
        start_s: 0.0,
    }
}

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    match name {
        "fd50" => Ok(base("fd50", vec![laptop_server()], vec![face_detect_item(50)])),
        "fr" => Ok(base("fr", vec![laptop_server()], vec![find_route_item(50)])),
        "mixed_fleet" => {
            let mut fd = face_detect_item(20);
            fd.payload_bytes = UniformRange {
                min: 60_000,
                max: 120_000,
            };
            fd.work_units = UniformRange { min: 400, max: 800 };
            Ok(base(
                "mixed_fleet",
                vec![laptop_server(), phone_server()],
                vec![find_route_item(20), fd, update_info_item(20)],
            ))
        }
        other => Err(Error::NotFound(format!(
            "preset `{other}` (known: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}
