//! Client side of the offload protocol.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::mem;
use std::sync::Arc;

use serde_json::json;

use super::table::{ExecState, OffloadTable};
use super::wire::Message;
use super::{Action, Completion};
use crate::client_sched::{BufferKind, DualBuffer, FleetInfo, StealRequest};
use crate::error::{Error, Result};
use crate::model::{classify_device, Battery, Clock, DeviceKind, DeviceModel, LinkModel, TaskInstanceId, TaskProfile};
use crate::optimizer::{decide, estimate_costs, OptimizerConfig};
use crate::profiler::{calibrate_link, update_throughput, ProfileStore, StatusBoard, TaskRecord, DEFAULT_EWMA_ALPHA};
use crate::tasklib::{
    remote_epilogue, remote_load, remote_prologue, DataStore, ExecJob, ExecOutcome, RemotableTask, ResultListener,
    ResultStatus, TaskInstance, TaskRegistry, TaskStateBlob, Listeners,
};

pub const DEFAULT_WORK_UNIT_S: f64 = 0.001;
pub const DEFAULT_CLASSIFICATION_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub device: DeviceModel,
    pub optimizer: OptimizerConfig,
    pub offloading: bool,
    /// Seconds one work unit takes on a device with cpu score 1.
    pub work_unit_s: f64,
    /// Fixed H/L split; `None` uses the median EDP of the profiled classes.
    pub edp_threshold_js: Option<f64>,
    pub classification_threshold: f64,
    pub throughput_alpha: f64,
    /// Link assumed for servers that introduce themselves without one
    /// configured.
    pub default_link: LinkModel,
}

impl ClientConfig {
    pub fn new(device: DeviceModel, default_link: LinkModel) -> Self {
        ClientConfig {
            device,
            optimizer: OptimizerConfig::default(),
            offloading: true,
            work_unit_s: DEFAULT_WORK_UNIT_S,
            edp_threshold_js: None,
            classification_threshold: DEFAULT_CLASSIFICATION_THRESHOLD,
            throughput_alpha: DEFAULT_EWMA_ALPHA,
            default_link,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerEntry {
    pub model: DeviceModel,
    pub link: LinkModel,
    pub live: bool,
    /// The server was told no more work is coming.
    pub drained: bool,
}

struct Pending {
    instance: TaskInstance,
    generated_s: f64,
    started_s: f64,
}

struct RemoteCtx {
    server: String,
    state: Vec<u8>,
    output: Option<Vec<u8>>,
}

struct LocalRun {
    token: u64,
    id: TaskInstanceId,
    started_s: f64,
    payload_bytes: u64,
}

pub struct ClientNode {
    cfg: ClientConfig,
    registry: Arc<TaskRegistry>,
    profiles: ProfileStore,
    store: DataStore,
    listeners: Listeners,
    buffers: DualBuffer,
    table: OffloadTable,
    servers: BTreeMap<String, ServerEntry>,
    status: StatusBoard,
    tasks: BTreeMap<TaskInstanceId, Pending>,
    remote: BTreeMap<TaskInstanceId, RemoteCtx>,
    recovering: BTreeSet<TaskInstanceId>,
    local_queue: VecDeque<TaskInstanceId>,
    local_running: Option<LocalRun>,
    workload_done: bool,
    next_token: u64,
    actions: Vec<Action>,
}

impl ClientNode {
    pub fn new(cfg: ClientConfig, registry: Arc<TaskRegistry>, profiles: ProfileStore, store: DataStore) -> Result<Self> {
        cfg.device.validate()?;
        cfg.optimizer.validate()?;
        cfg.default_link.validate()?;
        if !(cfg.work_unit_s.is_finite() && cfg.work_unit_s > 0.0) {
            return Err(Error::InvalidParameter("work_unit_s must be > 0".into()));
        }
        let threshold = match cfg.edp_threshold_js {
            Some(t) => t,
            None => profiles.median_edp().filter(|m| *m > 0.0).unwrap_or(f64::MIN_POSITIVE),
        };
        Ok(ClientNode {
            buffers: DualBuffer::new(threshold)?,
            cfg,
            registry,
            profiles,
            store,
            listeners: Listeners::new(),
            table: OffloadTable::new(),
            servers: BTreeMap::new(),
            status: StatusBoard::new(),
            tasks: BTreeMap::new(),
            remote: BTreeMap::new(),
            recovering: BTreeSet::new(),
            local_queue: VecDeque::new(),
            local_running: None,
            workload_done: false,
            next_token: 0,
            actions: Vec::new(),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn device_id(&self) -> &str {
        &self.cfg.device.device_id
    }

    pub fn table(&self) -> &OffloadTable {
        &self.table
    }

    pub fn set_table(&mut self, table: OffloadTable) {
        self.table = table;
    }

    pub fn profiles(&self) -> &ProfileStore {
        &self.profiles
    }

    pub fn store(&self) -> &DataStore {
        &self.store
    }

    pub fn buffers(&self) -> &DualBuffer {
        &self.buffers
    }

    pub fn servers(&self) -> &BTreeMap<String, ServerEntry> {
        &self.servers
    }

    pub fn status_board(&self) -> &StatusBoard {
        &self.status
    }

    pub fn is_busy(&self) -> bool {
        self.local_running.is_some()
    }

    pub fn outstanding(&self) -> usize {
        self.tasks.len()
    }

    /// Every task of a finished workload has completed.
    pub fn is_done(&self) -> bool {
        self.workload_done && self.tasks.is_empty()
    }

    pub fn take_actions(&mut self) -> Vec<Action> {
        mem::take(&mut self.actions)
    }

    fn trace(&mut self, kind: &'static str, detail: serde_json::Value) {
        self.actions.push(Action::Trace { kind, detail });
    }

    fn send(&mut self, peer: &str, msg: Message) {
        self.actions.push(Action::Send {
            peer: peer.to_string(),
            msg,
        });
    }

    /// Adds a server with a known model and link. The link's transfer
    /// energy coefficients are re-fitted from synthetic transfers.
    pub fn register_server(&mut self, model: DeviceModel, link: LinkModel) -> Result<()> {
        model.validate()?;
        let model = model.classified(self.cfg.classification_threshold)?;
        let link = calibrate_link(&self.cfg.device, &link)?;
        self.servers.insert(
            model.device_id.clone(),
            ServerEntry {
                live: link.up,
                model,
                link,
                drained: false,
            },
        );
        Ok(())
    }

    fn on_hello(&mut self, now: f64, device_id: String, kind: DeviceKind, cpu_score: f64) -> Result<()> {
        if let Some(entry) = self.servers.get_mut(&device_id) {
            entry.live = true;
            entry.link.up = true;
            entry.drained = false;
        } else {
            let model = DeviceModel {
                device_id: device_id.clone(),
                kind,
                cpu_score,
                power_idle_w: 0.0,
                power_active_w: 0.0,
                power_tx_w: 0.0,
                battery: Battery::Unlimited,
                charging: true,
                perf_class: classify_device(cpu_score, self.cfg.classification_threshold)?,
            };
            let link = LinkModel {
                up: true,
                ..self.cfg.default_link
            };
            self.register_server(model, link)?;
        }
        let class = self.servers[&device_id].model.perf_class;
        self.trace("server_hello", json!({ "server": device_id, "class": class.to_string() }));
        self.pump_local(now);
        Ok(())
    }

    fn record_for(&self, id: &TaskInstanceId) -> Option<&TaskRecord> {
        self.profiles.lookup(&id.class_id).ok()
    }

    fn can_serve(&self, server: &ServerEntry, task: &dyn RemotableTask, record: &TaskRecord) -> bool {
        server.live
            && task.target().allows(server.model.kind)
            && estimate_costs(record, &server.model, &server.link, &self.cfg.optimizer)
                .map(|c| decide(&c, &self.cfg.optimizer).is_remote())
                .unwrap_or(false)
    }

    /// Some live server that still steals could take `id`.
    fn has_taker(&self, id: &TaskInstanceId) -> bool {
        let (Ok(task), Some(record)) = (self.registry.get(&id.class_id), self.record_for(id)) else {
            return false;
        };
        self.servers
            .values()
            .any(|s| !s.drained && self.can_serve(s, task.as_ref(), record))
    }

    /// Queues a newly generated task, either for servers to steal or for
    /// the client's own executor.
    pub fn submit(&mut self, now: f64, instance: TaskInstance, listener: Option<ResultListener>) -> Result<()> {
        let id = instance.id.clone();
        self.registry.get(&id.class_id)?;
        if self.tasks.contains_key(&id) || self.listeners.has_fired(&id) {
            return Err(Error::DuplicateTask(id.to_string()));
        }
        if let Some(l) = listener {
            self.listeners.bind(id.clone(), l);
        }
        self.tasks.insert(
            id.clone(),
            Pending {
                instance,
                generated_s: now,
                started_s: now,
            },
        );
        let remotable = self.cfg.offloading && self.has_taker(&id);
        if remotable {
            let record = self.record_for(&id).expect("has_taker implies a profile").clone();
            let buffer = self.buffers.enqueue_remotable(id.clone(), &record)?;
            self.trace("enqueue", json!({ "task": id.to_string(), "buffer": buffer, "edp": record.edp() }));
        } else {
            self.local_queue.push_back(id.clone());
            self.trace("enqueue_local", json!({ "task": id.to_string() }));
        }
        self.pump_local(now);
        Ok(())
    }

    /// No more tasks will be submitted.
    pub fn finish_workload(&mut self, now: f64) {
        self.workload_done = true;
        self.pump_local(now);
    }

    pub fn on_message(&mut self, now: f64, peer: &str, msg: Message) -> Result<()> {
        match msg {
            Message::Hello {
                device_id,
                kind,
                cpu_score,
            } => self.on_hello(now, device_id, kind, cpu_score),
            Message::Status(status) => {
                if let Err(e) = self.status.record(status) {
                    self.trace("bad_status", json!({ "server": peer, "error": e.to_string() }));
                }
                Ok(())
            }
            Message::StealReq { capacity } => self.serve_steal(now, peer, capacity),
            Message::DataPull { instance } => {
                self.serve_pull(peer, &instance);
                Ok(())
            }
            Message::DataPush { instance, data } => {
                if self.is_pending_on(&instance, peer) {
                    self.table.advance(&instance, ExecState::Returning)?;
                    if let Some(ctx) = self.remote.get_mut(&instance) {
                        ctx.output = Some(data);
                    }
                }
                Ok(())
            }
            Message::ResultReturn { instance, blob } => self.handle_return(now, peer, instance, blob),
            Message::Abandon { tasks } => {
                let lost: Vec<TaskInstanceId> =
                    tasks.into_iter().filter(|id| self.is_pending_on(id, peer)).collect();
                self.recover_locally(now, peer, lost)
            }
            other => Err(Error::Protocol(format!("client received {} from {peer}", other.kind()))),
        }
    }

    fn is_pending_on(&self, id: &TaskInstanceId, peer: &str) -> bool {
        self.table
            .get(id)
            .is_some_and(|r| r.record.server == peer && r.state.is_pending())
    }

    fn serve_steal(&mut self, now: f64, peer: &str, capacity: u32) -> Result<()> {
        let Some(server) = self.servers.get(peer).filter(|s| s.live).cloned() else {
            return Err(Error::Protocol(format!("steal request from unknown server {peer}")));
        };
        let request = StealRequest {
            server_id: peer.to_string(),
            server_class: server.model.perf_class,
            capacity,
        };
        let fleet = FleetInfo::from_classes(self.servers.values().filter(|s| s.live).map(|s| s.model.perf_class));

        let mut ineligible = BTreeSet::new();
        for kind in [BufferKind::H, BufferKind::L] {
            for id in self.buffers.snapshot(kind) {
                let ok = match (self.registry.get(&id.class_id), self.record_for(&id)) {
                    (Ok(task), Some(rec)) => self.can_serve(&server, task.as_ref(), rec),
                    _ => false,
                };
                if !ok {
                    ineligible.insert(id);
                }
            }
        }
        let grant = self
            .buffers
            .service_steal_filtered(&request, fleet, |id| !ineligible.contains(id))?;

        // run prologues before answering so the response only names tasks
        // that will actually be transferred
        let mut ready = Vec::with_capacity(grant.tasks.len());
        for (id, _) in &grant.tasks {
            let task = self.registry.get(&id.class_id)?;
            let initial = &self.tasks[id].instance.initial_state;
            match remote_prologue(task.as_ref(), initial) {
                Ok(state) => ready.push((id.clone(), state)),
                Err(_) => {
                    self.buffers.confirm_transferred(id)?;
                    self.local_queue.push_front(id.clone());
                }
            }
        }

        let drained = self.workload_done && self.buffers.is_empty();
        if drained {
            if let Some(s) = self.servers.get_mut(peer) {
                s.drained = true;
            }
        }
        self.trace(
            "steal_grant",
            json!({
                "server": peer,
                "class": server.model.perf_class.to_string(),
                "capacity": capacity,
                "fleet": grant.fleet,
                "h_eligible": grant.h_eligible_before,
                "l_eligible": grant.l_eligible_before,
                "ineligible": ineligible.iter().map(|i| i.to_string()).collect::<Vec<_>>(),
                "tasks": grant.tasks.iter().map(|(i, b)| json!({"task": i.to_string(), "buffer": b})).collect::<Vec<_>>(),
                "drained": drained,
            }),
        );
        self.send(
            peer,
            Message::StealResp {
                tasks: ready.iter().map(|(id, _)| id.clone()).collect(),
                drained,
            },
        );
        for (id, state) in ready {
            self.offload(now, peer, id, state)?;
        }
        self.pump_local(now);
        Ok(())
    }

    /// Records the task in the table, then sends it.
    fn offload(&mut self, now: f64, peer: &str, id: TaskInstanceId, state: Vec<u8>) -> Result<()> {
        let est_local_s = self.record_for(&id).map(|r| r.profile.exec_time_local_s).unwrap_or(0.0);
        let pending = self.tasks.get_mut(&id).expect("granted tasks are pending");
        pending.started_s = now;
        let work_units = pending.instance.work_units;
        self.table.insert(id.clone(), peer)?;
        self.trace("offload", json!({ "task": id.to_string(), "server": peer }));
        self.send(
            peer,
            Message::TaskTransfer {
                instance: id.clone(),
                est_local_s,
                work_units,
                blob: TaskStateBlob::pending(state.clone()),
            },
        );
        self.remote.insert(
            id,
            RemoteCtx {
                server: peer.to_string(),
                state,
                output: None,
            },
        );
        Ok(())
    }

    /// Runs `load_data` for a server that needs the task's input.
    fn serve_pull(&mut self, peer: &str, id: &TaskInstanceId) {
        if !self.is_pending_on(id, peer) {
            self.trace("orphan_pull", json!({ "task": id.to_string(), "server": peer }));
            return;
        }
        let _ = self.table.advance(id, ExecState::Executing);
        let data = match (self.registry.get(&id.class_id), self.remote.get(id)) {
            // a failed load ships no input; the remote execution then fails
            // the same way a local one would
            (Ok(task), Some(ctx)) => remote_load(task.as_ref(), &ctx.state, &self.store).unwrap_or_default(),
            _ => Vec::new(),
        };
        self.send(peer, Message::DataPush { instance: id.clone(), data });
    }

    fn handle_return(&mut self, now: f64, peer: &str, id: TaskInstanceId, blob: TaskStateBlob) -> Result<()> {
        if self.listeners.has_fired(&id) || !self.is_pending_on(&id, peer) {
            self.trace("orphan_result", json!({ "task": id.to_string(), "server": peer }));
            return Ok(());
        }
        let ctx = self.remote.remove(&id).expect("pending rows have a context");
        match blob.status {
            ResultStatus::Finish => {
                self.table.mark_returned(&id, ResultStatus::Finish)?;
                let task = self.registry.get(&id.class_id)?;
                let output = ctx.output.unwrap_or_default();
                let final_blob = remote_epilogue(task.as_ref(), blob.data, &output, &mut self.store);
                self.complete(&id, final_blob, &ctx.server, true);
            }
            _ => {
                self.table.mark_returned(&id, ResultStatus::Fail)?;
                self.trace("remote_failed", json!({ "task": id.to_string(), "server": peer }));
                self.local_queue.push_front(id);
            }
        }
        self.pump_local(now);
        Ok(())
    }

    /// The driver could not send `msg` to `peer`.
    pub fn on_send_failed(&mut self, now: f64, peer: &str, msg: &Message) -> Result<()> {
        if let Message::TaskTransfer { instance, .. } = msg {
            if self.table.get(instance).is_some_and(|r| r.state == ExecState::Transferring) {
                self.table.remove(instance);
                self.remote.remove(instance);
                let buffer = self.buffers.requeue_failed(instance)?;
                self.trace("requeue", json!({ "task": instance.to_string(), "server": peer, "buffer": buffer }));
            }
        }
        self.pump_local(now);
        Ok(())
    }

    /// A message to `peer` finished leaving the client after `duration_s`
    /// of serialization.
    pub fn on_transfer_complete(&mut self, _now: f64, peer: &str, msg: &Message, bytes: u64, duration_s: f64) {
        if !msg.kind().carries_task() {
            return;
        }
        if let Message::TaskTransfer { instance, .. } = msg {
            let _ = self.buffers.confirm_transferred(instance);
            if self.table.get(instance).is_some_and(|r| r.state == ExecState::Transferring) {
                let _ = self.table.advance(instance, ExecState::Executing);
            }
        }
        let alpha = self.cfg.throughput_alpha;
        if let Some(server) = self.servers.get_mut(peer) {
            if let Ok(link) = update_throughput(&server.link, bytes, duration_s, alpha) {
                server.link = link;
            }
        }
    }

    /// The link to `peer` is gone: everything pending there is re-executed
    /// locally.
    pub fn handle_link_loss(&mut self, now: f64, peer: &str) -> Result<()> {
        if let Some(s) = self.servers.get_mut(peer) {
            s.live = false;
            s.link.up = false;
        }
        let lost = self.table.pending_on(peer);
        self.recover_locally(now, peer, lost)
    }

    fn recover_locally(&mut self, now: f64, peer: &str, lost: Vec<TaskInstanceId>) -> Result<()> {
        if !lost.is_empty() {
            self.trace(
                "link_lost",
                json!({ "server": peer, "tasks": lost.iter().map(|i| i.to_string()).collect::<Vec<_>>() }),
            );
        }
        for id in lost.iter().rev() {
            self.table.mark_link_lost(id)?;
            self.remote.remove(id);
            let _ = self.buffers.confirm_transferred(id);
            self.recovering.insert(id.clone());
            self.local_queue.push_front(id.clone());
        }
        self.pump_local(now);
        Ok(())
    }

    fn pump_local(&mut self, now: f64) {
        while self.local_running.is_none() {
            let next = match self.local_queue.pop_front() {
                Some(id) => Some(id),
                None => {
                    // buffered tasks no server can take any more
                    let orphans: BTreeSet<TaskInstanceId> = [BufferKind::H, BufferKind::L]
                        .into_iter()
                        .flat_map(|k| self.buffers.snapshot(k))
                        .filter(|id| !self.has_taker(id))
                        .collect();
                    self.buffers.take_local(|id| orphans.contains(id)).map(|(id, _)| id)
                }
            };
            let Some(id) = next else { break };
            self.start_local(now, id);
        }
    }

    fn start_local(&mut self, now: f64, id: TaskInstanceId) {
        let Ok(task) = self.registry.get(&id.class_id) else {
            return;
        };
        let Some(pending) = self.tasks.get_mut(&id) else {
            return;
        };
        pending.started_s = now;
        let mut state = pending.instance.initial_state.clone();
        let work_units = pending.instance.work_units;
        let initial_len = state.len() as u64;
        if task.pre_execution(&mut state).is_err() {
            self.complete_local_fail(&id, state);
            return;
        }
        let input = match task.load_data(&state, &self.store) {
            Ok(input) => input,
            Err(_) => {
                self.complete_local_fail(&id, state);
                return;
            }
        };
        let token = self.next_token;
        self.next_token += 1;
        self.local_running = Some(LocalRun {
            token,
            id: id.clone(),
            started_s: now,
            payload_bytes: initial_len + input.len() as u64,
        });
        self.trace("local_start", json!({ "task": id.to_string() }));
        self.actions.push(Action::Exec {
            token,
            job: ExecJob {
                instance: id,
                task,
                state,
                input,
                work_units,
            },
        });
    }

    fn complete_local_fail(&mut self, id: &TaskInstanceId, state: Vec<u8>) {
        let blob = TaskStateBlob {
            status: ResultStatus::Fail,
            data: state,
        };
        let me = self.cfg.device.device_id.clone();
        self.complete(id, blob, &me, false);
    }

    /// The local executor finished the job started with `token`.
    pub fn on_exec_done(&mut self, now: f64, token: u64, outcome: ExecOutcome) -> Result<()> {
        let Some(run) = self.local_running.take_if(|r| r.token == token) else {
            return Err(Error::Protocol(format!("unknown local execution token {token}")));
        };
        let task = self.registry.get(&run.id.class_id)?;
        let mut state = outcome.state;
        let ok = match outcome.result {
            Ok(output) => {
                task.update_data(&state, &output, &mut self.store).is_ok() && task.post_execution(&mut state).is_ok()
            }
            Err(_) => false,
        };
        let blob = TaskStateBlob {
            status: if ok { ResultStatus::Finish } else { ResultStatus::Fail },
            data: state,
        };
        if ok {
            self.observe_local_run(now, &run);
        }
        let me = self.cfg.device.device_id.clone();
        self.complete(&run.id, blob, &me, false);
        self.pump_local(now);
        Ok(())
    }

    fn observe_local_run(&mut self, now: f64, run: &LocalRun) {
        let t = now - run.started_s;
        if t <= 0.0 {
            return;
        }
        let Ok(observed) = TaskProfile::new(t, self.cfg.device.power_active_w * t, run.payload_bytes) else {
            return;
        };
        let class = &run.id.class_id;
        let res = if self.profiles.contains(class) {
            self.profiles.update_profile(class, observed).map(|_| ())
        } else {
            let mut clock = Clock::new();
            let _ = clock.advance_to(now);
            self.profiles.profile_first_execution(class, observed, &clock).map(|_| ())
        };
        if let Err(e) = res {
            log::warn!("profile update for {class} failed: {e}");
        }
    }

    fn complete(&mut self, id: &TaskInstanceId, blob: TaskStateBlob, executed_on: &str, remote: bool) {
        if self.recovering.remove(id) {
            let _ = self.table.set_local_result(id, blob.status);
        }
        let Some(pending) = self.tasks.remove(id) else {
            self.trace("duplicate_completion", json!({ "task": id.to_string() }));
            return;
        };
        if !self.listeners.fire(id, &blob) {
            self.trace("duplicate_completion", json!({ "task": id.to_string() }));
            return;
        }
        self.trace(
            "complete",
            json!({
                "task": id.to_string(),
                "on": executed_on,
                "remote": remote,
                "status": blob.status,
            }),
        );
        self.actions.push(Action::Completed(Completion {
            id: id.clone(),
            blob,
            executed_on: executed_on.to_string(),
            remote,
            generated_s: pending.generated_s,
            started_s: pending.started_s,
        }));
    }
}
