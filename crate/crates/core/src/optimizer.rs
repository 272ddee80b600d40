//! Offload decision.
//!
//! A task is sent to a server when doing so saves client energy
//! (`E_exec_local - E_transfer > 0`) and the remote path is not slower than
//! the local one by more than the latency budget
//! (`T_remote + T_transfer - T_local <= l`). Because tasks are independent,
//! each decision is made on its own; [`global_optimize_oracle`] solves the
//! joint assignment by enumeration and exists to check that claim.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{transfer_cost, DeviceModel, LinkModel};
use crate::profiler::TaskRecord;

/// Bytes of framing and status added to every offloaded payload.
pub const DEFAULT_STATE_OVERHEAD_BYTES: u64 = 512;

/// Largest task list the oracle will enumerate.
pub const ORACLE_MAX_TASKS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadCosts {
    pub e_exec_local_j: f64,
    pub e_transfer_j: f64,
    pub t_local_s: f64,
    pub t_remote_s: f64,
    pub t_transfer_s: f64,
}

impl OffloadCosts {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.e_exec_local_j,
            self.e_transfer_j,
            self.t_local_s,
            self.t_remote_s,
            self.t_transfer_s,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("costs must be finite and >= 0: {self:?}")))
        }
    }

    pub fn saving_j(&self) -> f64 {
        self.e_exec_local_j - self.e_transfer_j
    }

    /// Extra time of the remote path over local execution.
    pub fn time_penalty_s(&self) -> f64 {
        self.t_remote_s + self.t_transfer_s - self.t_local_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub latency_budget_s: f64,
    #[serde(default = "default_overhead")]
    pub state_overhead_bytes: u64,
}

fn default_overhead() -> u64 {
    DEFAULT_STATE_OVERHEAD_BYTES
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            latency_budget_s: 1.0,
            state_overhead_bytes: DEFAULT_STATE_OVERHEAD_BYTES,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latency_budget_s.is_finite() && self.latency_budget_s >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "latency budget must be finite and >= 0, got {}",
                self.latency_budget_s
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadDecision {
    pub indicator: Placement,
    pub predicted_saving_j: f64,
}

impl OffloadDecision {
    pub fn is_remote(&self) -> bool {
        self.indicator == Placement::Remote
    }
}

pub fn decide(costs: &OffloadCosts, cfg: &OptimizerConfig) -> OffloadDecision {
    let saving = costs.saving_j();
    if saving > 0.0 && costs.time_penalty_s() <= cfg.latency_budget_s {
        OffloadDecision {
            indicator: Placement::Remote,
            predicted_saving_j: saving,
        }
    } else {
        OffloadDecision {
            indicator: Placement::Local,
            predicted_saving_j: 0.0,
        }
    }
}

/// Costs of running a profiled task on `server` over `link`, with remote
/// time scaled by the server's relative cpu score.
pub fn estimate_costs(
    record: &TaskRecord,
    server: &DeviceModel,
    link: &LinkModel,
    cfg: &OptimizerConfig,
) -> Result<OffloadCosts> {
    let p = &record.profile;
    let (t_transfer_s, e_transfer_j) = transfer_cost(link, p.payload_bytes + cfg.state_overhead_bytes)?;
    Ok(OffloadCosts {
        e_exec_local_j: p.energy_local_j,
        e_transfer_j,
        t_local_s: p.exec_time_local_s,
        t_remote_s: p.exec_time_local_s / server.cpu_score,
        t_transfer_s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAssignment {
    pub indicators: Vec<Placement>,
    pub objective_j: f64,
}

/// Exhaustive search over all `2^n` assignments for the one maximizing
/// total energy saving, where every remote task must meet the per-task time
/// bound. Among equal objectives the assignment with fewer remote tasks
/// (then the lower bitmask) wins.
pub fn global_optimize_oracle(tasks: &[OffloadCosts], cfg: &OptimizerConfig) -> Result<GlobalAssignment> {
    if tasks.len() > ORACLE_MAX_TASKS {
        return Err(Error::InstanceTooLarge {
            size: tasks.len(),
            limit: ORACLE_MAX_TASKS,
        });
    }
    for t in tasks {
        t.validate()?;
    }
    let n = tasks.len();
    let mut best: Option<(f64, u32, u32)> = None;
    'masks: for mask in 0u32..(1u32 << n) {
        let mut objective = 0.0;
        for (i, t) in tasks.iter().enumerate() {
            if mask & (1 << i) != 0 {
                if t.time_penalty_s() > cfg.latency_budget_s {
                    continue 'masks;
                }
                objective += t.saving_j();
            }
        }
        let remote = mask.count_ones();
        let better = match best {
            None => true,
            Some((obj, cnt, _)) => objective > obj || (objective == obj && remote < cnt),
        };
        if better {
            best = Some((objective, remote, mask));
        }
    }
    let (objective_j, _, mask) = best.expect("the all-local assignment is always feasible");
    Ok(GlobalAssignment {
        indicators: (0..n)
            .map(|i| {
                if mask & (1 << i) != 0 {
                    Placement::Remote
                } else {
                    Placement::Local
                }
            })
            .collect(),
        objective_j,
    })
}
