//! Single-threaded discrete-event engine driving one client and its
//! servers over modeled links.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{FaultKind, ScenarioConfig};
use super::metrics::{integrate_energy, sample_series, Interval, RunMetrics, TaskMetrics, TraceEvent};
use super::workload::{exec_time_s, generate, warm_profiles, Arrival};
use crate::error::{Error, Result};
use crate::model::{LinkModel, TaskInstanceId};
use crate::profiler::ProfileStore;
use crate::protocol::{
    Action, ClientConfig, ClientNode, Completion, Message, MessageKind, RemoteExecution, ServerConfig, ServerNode,
};
use crate::tasklib::{ExecOutcome, TaskRegistry};

pub const DEFAULT_MAX_EVENTS: u64 = 5_000_000;

pub struct SimOptions {
    pub registry: Arc<TaskRegistry>,
    /// Profiles to start from; classes missing here are warmed up.
    pub profiles: Option<ProfileStore>,
    pub max_events: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            registry: Arc::new(TaskRegistry::with_demo_tasks()),
            profiles: None,
            max_events: DEFAULT_MAX_EVENTS,
        }
    }
}

/// One frame put on a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub sent_s: f64,
    pub delivered_s: Option<f64>,
    pub from: String,
    pub to: String,
    pub kind: MessageKind,
    pub bytes: u64,
}

pub struct SimRun {
    pub metrics: RunMetrics,
    pub trace: Vec<TraceEvent>,
    pub wire: Vec<WireRecord>,
    pub completions: Vec<(f64, Completion)>,
    pub table: Vec<RemoteExecution>,
    pub events_processed: u64,
    /// Events whose time was earlier than the event that scheduled them.
    pub causality_violations: u64,
}

impl SimRun {
    /// Message kinds sent from `from` to `to`, in order.
    pub fn transcript(&self, from: &str, to: &str) -> Vec<MessageKind> {
        self.wire
            .iter()
            .filter(|w| w.from == from && w.to == to)
            .map(|w| w.kind)
            .collect()
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimRun> {
    run_scenario_with(cfg, SimOptions::default())
}

enum Ev {
    Arrive(usize),
    WorkloadDone,
    Deliver {
        link: usize,
        to_server: bool,
        epoch: u64,
        frame: Vec<u8>,
        wire: usize,
    },
    SentDone {
        link: usize,
        epoch: u64,
        msg: Message,
        bytes: u64,
        duration_s: f64,
    },
    ClientExecDone {
        token: u64,
        outcome: ExecOutcome,
    },
    ServerExecDone {
        server: usize,
        epoch: u64,
        token: u64,
        outcome: ExecOutcome,
    },
    Timer {
        server: usize,
        epoch: u64,
        token: u64,
    },
    Fault(usize),
}

struct Queued {
    at: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap and we want the earliest first
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

struct LinkRt {
    model: LinkModel,
    up: bool,
    epoch: u64,
    up_busy: f64,
    down_busy: f64,
    /// Radio intervals of frames on this link in the current epoch.
    radio: Vec<usize>,
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Queued>,
    client: ClientNode,
    servers: Vec<ServerNode>,
    index: BTreeMap<String, usize>,
    links: Vec<LinkRt>,
    arrivals: Vec<Arrival>,
    trace: Vec<TraceEvent>,
    wire: Vec<WireRecord>,
    completions: Vec<(f64, Completion)>,
    client_cpu: Vec<Interval>,
    radio: Vec<Interval>,
    server_cpu: Vec<Vec<Interval>>,
    server_running: Vec<Option<usize>>,
    violations: u64,
}

/// Builds the client of a scenario with warmed profiles, plus its
/// workload. Servers are not registered.
pub fn build_client(cfg: &ScenarioConfig, registry: Arc<TaskRegistry>, profiles: Option<ProfileStore>) -> Result<(ClientNode, Vec<Arrival>)> {
    cfg.validate(&registry)?;
    let workload = generate(&cfg.workload, cfg.seed)?;
    let mut profiles = profiles.unwrap_or_default();
    warm_profiles(&mut profiles, &workload, &registry, &cfg.client, cfg.work_unit_s)?;
    let default_link = cfg.links.first().map(|l| l.link).unwrap_or(super::presets::wifi_link());
    let mut ccfg = ClientConfig::new(cfg.client.clone(), default_link);
    ccfg.optimizer = cfg.optimizer;
    ccfg.offloading = cfg.offloading;
    ccfg.work_unit_s = cfg.work_unit_s;
    ccfg.edp_threshold_js = cfg.scheduler.edp_threshold_js;
    ccfg.classification_threshold = cfg.scheduler.classification_threshold;
    let client = ClientNode::new(ccfg, registry, profiles, workload.store)?;
    Ok((client, workload.arrivals))
}

/// Builds server `i` of a scenario.
pub fn build_server(cfg: &ScenarioConfig, i: usize, registry: Arc<TaskRegistry>) -> Result<ServerNode> {
    let s = cfg
        .servers
        .get(i)
        .ok_or_else(|| Error::NotFound(format!("server #{i} in scenario {}", cfg.name)))?;
    let mut scfg = ServerConfig::new(s.clone(), cfg.client.device_id.clone());
    scfg.steal_capacity = cfg.scheduler.steal_capacity;
    scfg.low_watermark = cfg.scheduler.low_watermark;
    ServerNode::new(scfg, registry)
}

pub fn run_scenario_with(cfg: &ScenarioConfig, opts: SimOptions) -> Result<SimRun> {
    let (mut client, arrivals) = build_client(cfg, opts.registry.clone(), opts.profiles)?;
    let mut servers = Vec::new();
    let mut links = Vec::new();
    let mut index = BTreeMap::new();
    for (i, s) in cfg.servers.iter().enumerate() {
        let link = *cfg.link_for(&s.device_id).expect("validated");
        client.register_server(s.clone(), link)?;
        servers.push(build_server(cfg, i, opts.registry.clone())?);
        links.push(LinkRt {
            model: link,
            up: false,
            epoch: 0,
            up_busy: 0.0,
            down_busy: 0.0,
            radio: Vec::new(),
        });
        index.insert(s.device_id.clone(), i);
    }

    let n = servers.len();
    let eng = Engine {
        cfg,
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        client,
        servers,
        index,
        links,
        arrivals,
        trace: Vec::new(),
        wire: Vec::new(),
        completions: Vec::new(),
        client_cpu: Vec::new(),
        radio: Vec::new(),
        server_cpu: vec![Vec::new(); n],
        server_running: vec![None; n],
        violations: 0,
    };
    eng.run(opts.max_events)
}

impl Engine<'_> {
    fn schedule(&mut self, at: f64, ev: Ev) {
        if at < self.now {
            self.violations += 1;
        }
        self.seq += 1;
        self.heap.push(Queued { at, seq: self.seq, ev });
    }

    fn log(&mut self, device: &str, kind: &str, detail: serde_json::Value) {
        self.trace.push(TraceEvent {
            time_s: self.now,
            device: device.to_string(),
            event_kind: kind.to_string(),
            detail,
        });
    }

    fn client_id(&self) -> String {
        self.cfg.client.device_id.clone()
    }

    fn server_id(&self, i: usize) -> String {
        self.cfg.servers[i].device_id.clone()
    }

    fn run(mut self, max_events: u64) -> Result<SimRun> {
        for (i, a) in self.arrivals.iter().enumerate().map(|(i, a)| (i, a.at_s)).collect::<Vec<_>>() {
            self.schedule(a, Ev::Arrive(i));
        }
        let last = self.arrivals.last().map(|a| a.at_s).unwrap_or(0.0);
        self.schedule(last, Ev::WorkloadDone);
        if self.cfg.offloading {
            for (i, f) in self.cfg.faults.iter().enumerate() {
                self.schedule(f.time_s, Ev::Fault(i));
            }
            for i in 0..self.servers.len() {
                if self.links[i].model.up {
                    self.links[i].up = true;
                    self.servers[i].on_link_up(0.0);
                }
            }
        }
        self.pump()?;

        let mut processed = 0u64;
        let mut makespan = 0.0;
        while !self.client.is_done() {
            let Some(q) = self.heap.pop() else {
                return Err(Error::Protocol(format!(
                    "simulation stalled at {} s with {} tasks outstanding",
                    self.now,
                    self.client.outstanding()
                )));
            };
            processed += 1;
            if processed > max_events {
                return Err(Error::Protocol(format!("event limit {max_events} reached")));
            }
            if q.at < self.now {
                self.violations += 1;
            }
            self.now = q.at;
            self.dispatch(q.ev)?;
            self.pump()?;
            if let Some((t, _)) = self.completions.last() {
                makespan = *t;
            }
        }
        self.finish(makespan, processed)
    }

    fn dispatch(&mut self, ev: Ev) -> Result<()> {
        let now = self.now;
        match ev {
            Ev::Arrive(i) => {
                let inst = self.arrivals[i].instance.clone();
                let id = self.client_id();
                self.log(&id, "arrive", json!({ "task": inst.id.to_string(), "work_units": inst.work_units }));
                self.client.submit(now, inst, None)?;
            }
            Ev::WorkloadDone => self.client.finish_workload(now),
            Ev::Deliver {
                link,
                to_server,
                epoch,
                frame,
                wire,
            } => {
                let (from, to) = if to_server {
                    (self.client_id(), self.server_id(link))
                } else {
                    (self.server_id(link), self.client_id())
                };
                if epoch != self.links[link].epoch {
                    self.log(&to, "drop", json!({ "from": from, "kind": self.wire[wire].kind }));
                    return Ok(());
                }
                self.wire[wire].delivered_s = Some(now);
                let msg = Message::decode(&frame)?;
                self.log(&to, "recv", json!({ "from": from, "kind": msg.kind(), "bytes": frame.len() }));
                let res = if to_server {
                    self.servers[link].on_message(now, msg)
                } else {
                    self.client.on_message(now, &from, msg)
                };
                if let Err(e) = res {
                    self.log(&to, "protocol_error", json!({ "error": e.to_string() }));
                }
            }
            Ev::SentDone {
                link,
                epoch,
                msg,
                bytes,
                duration_s,
            } => {
                if epoch == self.links[link].epoch {
                    let peer = self.server_id(link);
                    self.client.on_transfer_complete(now, &peer, &msg, bytes, duration_s);
                }
            }
            Ev::ClientExecDone { token, outcome } => self.client.on_exec_done(now, token, outcome)?,
            Ev::ServerExecDone {
                server,
                epoch,
                token,
                outcome,
            } => {
                if epoch == self.links[server].epoch {
                    self.server_running[server] = None;
                    self.servers[server].on_exec_done(now, token, outcome);
                }
            }
            Ev::Timer { server, epoch, token } => {
                if epoch == self.links[server].epoch {
                    self.servers[server].on_timer(now, token);
                }
            }
            Ev::Fault(i) => self.fault(i)?,
        }
        Ok(())
    }

    fn fault(&mut self, i: usize) -> Result<()> {
        let f = &self.cfg.faults[i];
        let s = self.index[&f.server];
        let kind = f.event;
        let sid = self.server_id(s);
        let now = self.now;
        self.log(&sid, "fault", json!({ "event": kind }));
        match kind {
            FaultKind::LinkDown | FaultKind::ServerCrash => {
                if self.links[s].up || kind == FaultKind::ServerCrash {
                    let was_up = self.links[s].up;
                    let link = &mut self.links[s];
                    link.up = false;
                    link.epoch += 1;
                    link.up_busy = now;
                    link.down_busy = now;
                    for &r in &link.radio {
                        let iv = &mut self.radio[r];
                        iv.start_s = iv.start_s.min(now);
                        iv.end_s = iv.end_s.min(now);
                    }
                    link.radio.clear();
                    if let Some(r) = self.server_running[s].take() {
                        self.server_cpu[s][r].end_s = now;
                    }
                    self.servers[s].on_link_down(now);
                    if was_up {
                        self.client.handle_link_loss(now, &sid)?;
                    }
                }
            }
            FaultKind::LinkUp => {
                if !self.links[s].up {
                    let link = &mut self.links[s];
                    link.up = true;
                    link.up_busy = now;
                    link.down_busy = now;
                    self.servers[s].on_link_up(now);
                }
            }
        }
        Ok(())
    }

    /// Carries out node actions until none are left.
    fn pump(&mut self) -> Result<()> {
        loop {
            let mut any = false;
            let actions = self.client.take_actions();
            any |= !actions.is_empty();
            for a in actions {
                self.client_action(a)?;
            }
            for s in 0..self.servers.len() {
                let actions = self.servers[s].take_actions();
                any |= !actions.is_empty();
                for a in actions {
                    self.server_action(s, a)?;
                }
            }
            if !any {
                return Ok(());
            }
        }
    }

    fn client_action(&mut self, a: Action) -> Result<()> {
        let now = self.now;
        let me = self.client_id();
        match a {
            Action::Send { peer, msg } => {
                let s = *self
                    .index
                    .get(&peer)
                    .ok_or_else(|| Error::Protocol(format!("send to unknown peer {peer}")))?;
                self.transmit(s, true, msg)?;
            }
            Action::Exec { token, job } => {
                let dur = exec_time_s(job.work_units, self.cfg.work_unit_s, &self.cfg.client);
                self.client_cpu.push(Interval {
                    start_s: now,
                    end_s: now + dur,
                    task: Some(job.instance.clone()),
                });
                let outcome = job.run();
                self.schedule(now + dur, Ev::ClientExecDone { token, outcome });
            }
            Action::Timer { .. } => {}
            Action::Trace { kind, detail } => self.log(&me, kind, detail),
            Action::Completed(c) => self.completions.push((now, c)),
        }
        Ok(())
    }

    fn server_action(&mut self, s: usize, a: Action) -> Result<()> {
        let now = self.now;
        let me = self.server_id(s);
        let epoch = self.links[s].epoch;
        match a {
            Action::Send { msg, .. } => self.transmit(s, false, msg)?,
            Action::Exec { token, job } => {
                let dur = exec_time_s(job.work_units, self.cfg.work_unit_s, &self.cfg.servers[s]);
                self.server_cpu[s].push(Interval {
                    start_s: now,
                    end_s: now + dur,
                    task: Some(job.instance.clone()),
                });
                self.server_running[s] = Some(self.server_cpu[s].len() - 1);
                let outcome = job.run();
                self.schedule(
                    now + dur,
                    Ev::ServerExecDone {
                        server: s,
                        epoch,
                        token,
                        outcome,
                    },
                );
            }
            Action::Timer { token, at_s } => self.schedule(at_s, Ev::Timer { server: s, epoch, token }),
            Action::Trace { kind, detail } => self.log(&me, kind, detail),
            Action::Completed(_) => {}
        }
        Ok(())
    }

    /// Puts a frame on link `s` in one direction. Each direction is a FIFO
    /// pipe: a frame starts once the previous one has been serialized.
    fn transmit(&mut self, s: usize, to_server: bool, msg: Message) -> Result<()> {
        let now = self.now;
        let (from, to) = if to_server {
            (self.client_id(), self.server_id(s))
        } else {
            (self.server_id(s), self.client_id())
        };
        if !self.links[s].up {
            self.log(&from, "send_failed", json!({ "to": to, "kind": msg.kind() }));
            if to_server {
                self.client.on_send_failed(now, &to, &msg)?;
            }
            return Ok(());
        }
        let frame = msg.encode()?;
        let bytes = frame.len() as u64;
        let link = &mut self.links[s];
        let busy = if to_server { &mut link.up_busy } else { &mut link.down_busy };
        let start = busy.max(now);
        let end = start + link.model.serialization_time_s(bytes);
        *busy = end;
        let deliver = end + link.model.latency_s;
        let epoch = link.epoch;
        if msg.kind().carries_task() {
            self.radio.push(Interval {
                start_s: start,
                end_s: end,
                task: msg.instance().cloned(),
            });
            let r = self.radio.len() - 1;
            self.links[s].radio.push(r);
        }
        self.wire.push(WireRecord {
            sent_s: now,
            delivered_s: None,
            from: from.clone(),
            to: to.clone(),
            kind: msg.kind(),
            bytes,
        });
        let wire = self.wire.len() - 1;
        self.log(&from, "send", json!({ "to": to, "kind": msg.kind(), "bytes": bytes }));
        if to_server {
            self.schedule(
                end,
                Ev::SentDone {
                    link: s,
                    epoch,
                    msg,
                    bytes,
                    duration_s: end - start,
                },
            );
        }
        self.schedule(
            deliver,
            Ev::Deliver {
                link: s,
                to_server,
                epoch,
                frame,
                wire,
            },
        );
        Ok(())
    }

    fn finish(self, makespan: f64, processed: u64) -> Result<SimRun> {
        let cfg = self.cfg;
        let energy = integrate_energy(&cfg.client, &self.client_cpu, &self.radio, makespan);
        let mut series = sample_series(&cfg.client, &self.client_cpu, &self.radio, makespan, cfg.sample_interval_s);
        for (i, s) in cfg.servers.iter().enumerate() {
            series.extend(sample_series(s, &self.server_cpu[i], &[], makespan, cfg.sample_interval_s));
        }
        series.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));

        let last_exec = |ivs: &[Interval], id: &TaskInstanceId| {
            ivs.iter()
                .rev()
                .find(|iv| iv.task.as_ref() == Some(id))
                .map(|iv| iv.end_s - iv.start_s)
                .unwrap_or(0.0)
        };
        let tasks: Vec<TaskMetrics> = self
            .completions
            .iter()
            .map(|(t, c)| {
                let exec = if c.remote {
                    let s = self.index[&c.executed_on];
                    last_exec(&self.server_cpu[s], &c.id)
                } else {
                    last_exec(&self.client_cpu, &c.id)
                };
                TaskMetrics {
                    task: c.id.to_string(),
                    class_id: c.id.class_id.to_string(),
                    executed_on: c.executed_on.clone(),
                    remote: c.remote,
                    status: format!("{:?}", c.blob.status).to_lowercase(),
                    generated_s: c.generated_s,
                    started_s: c.started_s,
                    completed_s: *t,
                    queue_wait_s: c.started_s - c.generated_s,
                    exec_time_s: exec,
                    client_energy_j: energy.per_task_j.get(&c.id.to_string()).copied().unwrap_or(0.0),
                }
            })
            .collect();
        let remote = tasks.iter().filter(|t| t.remote).count();
        let metrics = RunMetrics {
            scenario: cfg.name.clone(),
            offloading: cfg.offloading,
            seed: cfg.seed,
            workload_hash: cfg.workload_hash(),
            makespan_s: makespan,
            avg_client_power_w: if makespan > 0.0 { energy.total_j / makespan } else { 0.0 },
            offload_fraction: if tasks.is_empty() { 0.0 } else { remote as f64 / tasks.len() as f64 },
            energy,
            tasks,
            series,
        };
        Ok(SimRun {
            metrics,
            trace: self.trace,
            wire: self.wire,
            completions: self.completions,
            table: self.client.table().rows().cloned().collect(),
            events_processed: processed,
            causality_violations: self.violations,
        })
    }
}
