//! Server side of the offload protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::mem;
use std::sync::Arc;

use serde_json::json;

use super::wire::Message;
use super::Action;
use crate::client_sched::DEFAULT_STEAL_CAPACITY;
use crate::error::{Error, Result};
use crate::model::{Battery, DeviceModel, TaskInstanceId};
use crate::profiler::DeviceStatus;
use crate::server_sched::{
    HrrnEntry, ServerQueueState, StealBackoff, DEFAULT_LOW_WATERMARK, DEFAULT_STEAL_BACKOFF_S, MAX_STEAL_BACKOFF_S,
};
use crate::tasklib::{ExecJob, ExecOutcome, RemotableTask, ResultStatus, TaskRegistry, TaskStateBlob};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub device: DeviceModel,
    /// Peer name of the client this server steals from.
    pub client_peer: String,
    pub steal_capacity: u32,
    pub low_watermark: usize,
    pub backoff_initial_s: f64,
    pub backoff_cap_s: f64,
}

impl ServerConfig {
    pub fn new(device: DeviceModel, client_peer: impl Into<String>) -> Self {
        ServerConfig {
            device,
            client_peer: client_peer.into(),
            steal_capacity: DEFAULT_STEAL_CAPACITY,
            low_watermark: DEFAULT_LOW_WATERMARK,
            backoff_initial_s: DEFAULT_STEAL_BACKOFF_S,
            backoff_cap_s: MAX_STEAL_BACKOFF_S,
        }
    }
}

struct Held {
    task: Arc<dyn RemotableTask>,
    state: Vec<u8>,
    work_units: u64,
}

struct Running {
    id: TaskInstanceId,
    token: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Steal {
    Idle,
    AwaitResp,
    AwaitTransfers(BTreeSet<TaskInstanceId>),
}

pub struct ServerNode {
    cfg: ServerConfig,
    registry: Arc<TaskRegistry>,
    queue: ServerQueueState,
    backoff: StealBackoff,
    held: BTreeMap<TaskInstanceId, Held>,
    running: Option<Running>,
    steal: Steal,
    timer: Option<u64>,
    drained: bool,
    link_up: bool,
    next_token: u64,
    actions: Vec<Action>,
}

impl ServerNode {
    pub fn new(cfg: ServerConfig, registry: Arc<TaskRegistry>) -> Result<Self> {
        cfg.device.validate()?;
        if cfg.steal_capacity == 0 {
            return Err(Error::InvalidParameter("steal_capacity must be >= 1".into()));
        }
        Ok(ServerNode {
            queue: ServerQueueState::new(cfg.low_watermark),
            backoff: StealBackoff::new(cfg.backoff_initial_s, cfg.backoff_cap_s),
            cfg,
            registry,
            held: BTreeMap::new(),
            running: None,
            steal: Steal::Idle,
            timer: None,
            drained: false,
            link_up: false,
            next_token: 0,
            actions: Vec::new(),
        })
    }

    pub fn device(&self) -> &DeviceModel {
        &self.cfg.device
    }

    pub fn is_busy(&self) -> bool {
        self.running.as_ref().is_some_and(|r| r.token.is_some())
    }

    pub fn queue(&self) -> &ServerQueueState {
        &self.queue
    }

    pub fn take_actions(&mut self) -> Vec<Action> {
        mem::take(&mut self.actions)
    }

    fn trace(&mut self, kind: &'static str, detail: serde_json::Value) {
        self.actions.push(Action::Trace { kind, detail });
    }

    fn send(&mut self, msg: Message) {
        self.actions.push(Action::Send {
            peer: self.cfg.client_peer.clone(),
            msg,
        });
    }

    fn status(&self, now: f64) -> DeviceStatus {
        let d = &self.cfg.device;
        DeviceStatus {
            device_id: d.device_id.clone(),
            battery_level: match d.battery {
                Battery::Unlimited => 1.0,
                Battery::Joules(j) if j > 0.0 => 1.0,
                Battery::Joules(_) => 0.0,
            },
            charging: d.charging,
            cpu_load: if self.is_busy() { 1.0 } else { 0.0 },
            link_up: self.link_up,
            measured_throughput_bps: 0.0,
            timestamp_s: now,
        }
    }

    /// The link to the client came up: introduce ourselves and start
    /// stealing.
    pub fn on_link_up(&mut self, now: f64) {
        self.link_up = true;
        let d = &self.cfg.device;
        let hello = Message::Hello {
            device_id: d.device_id.clone(),
            kind: d.kind,
            cpu_score: d.cpu_score,
        };
        self.send(hello);
        self.try_steal(now);
    }

    /// The link is gone (or the server crashed): every held task is
    /// abandoned and nothing is sent back.
    pub fn on_link_down(&mut self, _now: f64) {
        let abandoned: Vec<String> = self.held.keys().map(|i| i.to_string()).collect();
        if !abandoned.is_empty() {
            self.trace("abandon", json!({ "tasks": abandoned }));
        }
        self.held.clear();
        self.queue.clear();
        self.running = None;
        self.steal = Steal::Idle;
        self.timer = None;
        self.drained = false;
        self.link_up = false;
        self.backoff.reset();
    }

    pub fn on_message(&mut self, now: f64, msg: Message) -> Result<()> {
        match msg {
            Message::StealResp { tasks, drained } => {
                self.drained |= drained;
                if tasks.is_empty() {
                    self.steal = Steal::Idle;
                    if !self.drained {
                        let token = self.next_token;
                        self.next_token += 1;
                        let delay = self.backoff.next_delay();
                        self.timer = Some(token);
                        self.actions.push(Action::Timer {
                            token,
                            at_s: now + delay,
                        });
                    }
                } else {
                    self.backoff.reset();
                    let waiting: BTreeSet<TaskInstanceId> =
                        tasks.into_iter().filter(|t| !self.held.contains_key(t)).collect();
                    self.steal = if waiting.is_empty() {
                        Steal::Idle
                    } else {
                        Steal::AwaitTransfers(waiting)
                    };
                }
                self.try_steal(now);
            }
            Message::TaskTransfer {
                instance,
                est_local_s,
                work_units,
                blob,
            } => self.accept(now, instance, est_local_s, work_units, blob),
            Message::DataPush { instance, data } => {
                let waiting = self
                    .running
                    .as_ref()
                    .is_some_and(|r| r.id == instance && r.token.is_none());
                if waiting {
                    self.start_exec(instance, data);
                } else {
                    self.trace("orphan_data", json!({ "task": instance.to_string() }));
                }
            }
            Message::Abandon { tasks } => {
                for id in tasks {
                    self.held.remove(&id);
                    self.queue.remove(&id);
                    if self.running.as_ref().is_some_and(|r| r.id == id) {
                        self.running = None;
                        self.queue.set_running(None);
                    }
                    self.trace("abandon", json!({ "tasks": [id.to_string()] }));
                }
                self.maybe_start(now);
                self.try_steal(now);
            }
            other => return Err(Error::Protocol(format!("server received {}", other.kind()))),
        }
        Ok(())
    }

    fn accept(&mut self, now: f64, id: TaskInstanceId, est_local_s: f64, work_units: u64, blob: TaskStateBlob) {
        if let Steal::AwaitTransfers(set) = &mut self.steal {
            set.remove(&id);
            if set.is_empty() {
                self.steal = Steal::Idle;
            }
        }
        let task = match self.registry.get(&id.class_id) {
            Ok(task) => task,
            Err(_) => {
                // nothing to run: hand it straight back as failed
                let blob = TaskStateBlob {
                    status: ResultStatus::Fail,
                    data: blob.data,
                };
                self.send(Message::ResultReturn { instance: id, blob });
                self.try_steal(now);
                return;
            }
        };
        let est_run_s = (est_local_s / self.cfg.device.cpu_score).max(1e-9);
        let entry = HrrnEntry {
            instance: id.clone(),
            arrival_s: now,
            est_run_s,
        };
        if self.queue.push(entry).is_err() {
            self.trace("duplicate_transfer", json!({ "task": id.to_string() }));
            return;
        }
        self.held.insert(
            id.clone(),
            Held {
                task,
                state: blob.data,
                work_units,
            },
        );
        self.trace("accept", json!({ "task": id.to_string(), "est_run_s": est_run_s }));
        self.maybe_start(now);
        self.try_steal(now);
    }

    fn maybe_start(&mut self, now: f64) {
        if self.running.is_some() {
            return;
        }
        let Some(entry) = self.queue.pick_next(now) else {
            return;
        };
        let id = entry.instance;
        self.queue.set_running(Some(id.clone()));
        self.running = Some(Running {
            id: id.clone(),
            token: None,
        });
        let loads = self.held[&id].task.loads_data();
        if loads {
            self.send(Message::DataPull { instance: id });
        } else {
            self.start_exec(id, Vec::new());
        }
    }

    fn start_exec(&mut self, id: TaskInstanceId, input: Vec<u8>) {
        let token = self.next_token;
        self.next_token += 1;
        let held = &self.held[&id];
        let job = ExecJob {
            instance: id.clone(),
            task: held.task.clone(),
            state: held.state.clone(),
            input,
            work_units: held.work_units,
        };
        if let Some(r) = self.running.as_mut() {
            r.token = Some(token);
        }
        self.trace("exec_start", json!({ "task": id.to_string() }));
        self.actions.push(Action::Exec { token, job });
    }

    /// The executor finished the job started with `token`. Stale tokens
    /// (work abandoned in the meantime) are ignored.
    pub fn on_exec_done(&mut self, now: f64, token: u64, outcome: ExecOutcome) {
        let current = self.running.as_ref().is_some_and(|r| r.token == Some(token));
        if !current {
            return;
        }
        let id = self.running.take().expect("checked").id;
        self.queue.set_running(None);
        let held = self.held.remove(&id).expect("running tasks are held");
        let status = match outcome.result {
            Ok(output) => {
                if held.task.updates_data() {
                    self.send(Message::DataPush {
                        instance: id.clone(),
                        data: output,
                    });
                }
                ResultStatus::Finish
            }
            Err(_) => ResultStatus::Fail,
        };
        self.trace("exec_done", json!({ "task": id.to_string(), "status": status }));
        self.send(Message::ResultReturn {
            instance: id,
            blob: TaskStateBlob {
                status,
                data: outcome.state,
            },
        });
        self.maybe_start(now);
        self.try_steal(now);
    }

    pub fn on_timer(&mut self, now: f64, token: u64) {
        if self.timer == Some(token) {
            self.timer = None;
            self.try_steal(now);
        }
    }

    fn try_steal(&mut self, now: f64) {
        if !self.link_up || self.drained || self.steal != Steal::Idle || self.timer.is_some() {
            return;
        }
        if !self.queue.should_steal() {
            return;
        }
        let status = self.status(now);
        self.send(Message::Status(status));
        self.send(Message::StealReq {
            capacity: self.cfg.steal_capacity,
        });
        self.steal = Steal::AwaitResp;
    }
}
