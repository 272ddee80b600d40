//! Discrete-event simulation of a client and its helper servers.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod presets;
pub mod workload;

pub use config::{FaultEvent, FaultKind, InterArrival, LinkSpec, ScenarioConfig, SchedulerKnobs, UniformRange, WorkloadItem};
pub use engine::{build_client, build_server, run_scenario, run_scenario_with, SimOptions, SimRun, WireRecord};
pub use metrics::{compare_runs, Comparison, EnergyBreakdown, RunMetrics, RunSummary, TaskMetrics, TraceEvent};
