//! Framed TCP transport for live runs.
//!
//! The client listens; servers connect and introduce themselves with HELLO.
//! Each node runs a single event loop fed by one reader thread per
//! connection and one thread per execution, so node state is only touched
//! from the loop.

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde_json::json;

use super::wire::{read_frame, Message, MessageKind};
use super::{Action, ClientNode, Completion, RemoteExecution, ServerNode};
use crate::error::{Error, Result};
use crate::sim::metrics::TraceEvent;
use crate::tasklib::{ExecJob, ExecOutcome, TaskInstance};

pub const DEFAULT_IDLE_TIMEOUT_S: f64 = 5.0;
pub const DEFAULT_CONNECT_WAIT_S: f64 = 30.0;

enum Input {
    Connected { peer: String, writer: TcpStream, hello: Message },
    Msg { peer: String, msg: Message },
    Closed { peer: String },
    ExecDone { token: u64, outcome: ExecOutcome },
}

/// One frame this node wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct SentFrame {
    pub at_s: f64,
    pub to: String,
    pub kind: MessageKind,
    pub bytes: u64,
}

fn spawn_exec(tx: &Sender<Input>, token: u64, job: ExecJob) {
    let tx = tx.clone();
    thread::spawn(move || {
        let outcome = job.run();
        let _ = tx.send(Input::ExecDone { token, outcome });
    });
}

/// Forwards every frame read from `stream` until EOF or an error.
fn spawn_reader(stream: TcpStream, peer: Option<String>, tx: Sender<Input>) -> Result<()> {
    let writer = stream.try_clone()?;
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        let mut peer = peer;
        let mut writer = Some(writer);
        loop {
            match read_frame(&mut reader) {
                Ok(Some(msg)) => {
                    let input = match (&peer, &msg) {
                        (Some(p), _) => Input::Msg { peer: p.clone(), msg },
                        (None, Message::Hello { device_id, .. }) => {
                            peer = Some(device_id.clone());
                            Input::Connected {
                                peer: device_id.clone(),
                                writer: writer.take().expect("first frame"),
                                hello: msg,
                            }
                        }
                        (None, other) => {
                            warn!("connection opened with {} instead of HELLO", other.kind());
                            return;
                        }
                    };
                    if tx.send(input).is_err() {
                        return;
                    }
                }
                Ok(None) | Err(_) => {
                    if let Some(p) = peer {
                        let _ = tx.send(Input::Closed { peer: p });
                    }
                    return;
                }
            }
        }
    });
    Ok(())
}

fn write_frame(stream: &mut TcpStream, msg: &Message) -> Result<(u64, f64)> {
    let frame = msg.encode()?;
    let start = Instant::now();
    stream.write_all(&frame)?;
    stream.flush()?;
    Ok((frame.len() as u64, start.elapsed().as_secs_f64()))
}

fn trace_event(trace: &mut Vec<TraceEvent>, now: f64, device: &str, kind: &str, detail: serde_json::Value) {
    trace.push(TraceEvent {
        time_s: now,
        device: device.to_string(),
        event_kind: kind.to_string(),
        detail,
    });
}

#[derive(Debug, Clone)]
pub struct LiveClientOptions {
    /// Hold the workload back until this many servers said HELLO.
    pub expect_servers: usize,
    /// Give up waiting for servers after this long and start anyway.
    pub connect_wait_s: f64,
    /// A server with work outstanding that stays silent this long is
    /// treated as lost.
    pub idle_timeout_s: f64,
}

impl Default for LiveClientOptions {
    fn default() -> Self {
        LiveClientOptions {
            expect_servers: 1,
            connect_wait_s: DEFAULT_CONNECT_WAIT_S,
            idle_timeout_s: DEFAULT_IDLE_TIMEOUT_S,
        }
    }
}

#[derive(Debug, Default)]
pub struct LiveClientReport {
    pub sent: Vec<SentFrame>,
    pub trace: Vec<TraceEvent>,
    pub completions: Vec<(f64, Completion)>,
    pub table: Vec<RemoteExecution>,
}

impl LiveClientReport {
    pub fn transcript_to(&self, peer: &str) -> Vec<MessageKind> {
        self.sent.iter().filter(|f| f.to == peer).map(|f| f.kind).collect()
    }
}

struct ClientLoop {
    node: ClientNode,
    start: Instant,
    tx: Sender<Input>,
    writers: BTreeMap<String, TcpStream>,
    last_heard: BTreeMap<String, f64>,
    report: LiveClientReport,
}

impl ClientLoop {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn drop_peer(&mut self, peer: &str) -> Result<()> {
        if let Some(w) = self.writers.remove(peer) {
            let _ = w.shutdown(Shutdown::Both);
        }
        self.last_heard.remove(peer);
        let now = self.now();
        self.node.handle_link_loss(now, peer)
    }

    fn apply(&mut self) -> Result<()> {
        loop {
            let actions = self.node.take_actions();
            if actions.is_empty() {
                return Ok(());
            }
            for a in actions {
                let now = self.now();
                match a {
                    Action::Send { peer, msg } => {
                        let res = match self.writers.get_mut(&peer) {
                            Some(w) => write_frame(w, &msg).map(Some),
                            None => Ok(None),
                        };
                        match res {
                            Ok(Some((bytes, dur))) => {
                                self.report.sent.push(SentFrame {
                                    at_s: now,
                                    to: peer.clone(),
                                    kind: msg.kind(),
                                    bytes,
                                });
                                self.node.on_transfer_complete(now, &peer, &msg, bytes, dur);
                            }
                            Ok(None) => self.node.on_send_failed(now, &peer, &msg)?,
                            Err(e) => {
                                debug!("send to {peer} failed: {e}");
                                self.node.on_send_failed(now, &peer, &msg)?;
                                self.drop_peer(&peer)?;
                            }
                        }
                    }
                    Action::Exec { token, job } => spawn_exec(&self.tx, token, job),
                    Action::Timer { .. } => {}
                    Action::Trace { kind, detail } => {
                        let me = self.node.device_id().to_string();
                        trace_event(&mut self.report.trace, now, &me, kind, detail);
                    }
                    Action::Completed(c) => self.report.completions.push((now, c)),
                }
            }
        }
    }

    fn handle(&mut self, input: Input) -> Result<()> {
        let now = self.now();
        match input {
            Input::Connected { peer, writer, hello } => {
                self.writers.insert(peer.clone(), writer);
                self.last_heard.insert(peer.clone(), now);
                self.node.on_message(now, &peer, hello)?;
            }
            Input::Msg { peer, msg } => {
                self.last_heard.insert(peer.clone(), now);
                if let Err(e) = self.node.on_message(now, &peer, msg) {
                    let me = self.node.device_id().to_string();
                    trace_event(&mut self.report.trace, now, &me, "protocol_error", json!({ "error": e.to_string() }));
                }
            }
            Input::Closed { peer } => {
                if self.writers.contains_key(&peer) {
                    self.drop_peer(&peer)?;
                }
            }
            Input::ExecDone { token, outcome } => self.node.on_exec_done(now, token, outcome)?,
        }
        self.apply()
    }

    /// Abandons servers that have work outstanding but went quiet.
    fn check_idle(&mut self, timeout_s: f64) -> Result<()> {
        let now = self.now();
        let quiet: Vec<String> = self
            .last_heard
            .iter()
            .filter(|(p, t)| now - **t > timeout_s && !self.node.table().pending_on(p).is_empty())
            .map(|(p, _)| p.clone())
            .collect();
        for peer in quiet {
            let tasks = self.node.table().pending_on(&peer);
            warn!("{peer} silent for {timeout_s} s with {} tasks outstanding", tasks.len());
            if let Some(w) = self.writers.get_mut(&peer) {
                let _ = write_frame(w, &Message::Abandon { tasks });
            }
            self.drop_peer(&peer)?;
        }
        self.apply()
    }
}

/// Runs the client side until every task of `workload` has completed.
/// Arrival times count from the moment the expected servers are connected.
pub fn run_client(
    listener: TcpListener,
    node: ClientNode,
    workload: Vec<(f64, TaskInstance)>,
    opts: &LiveClientOptions,
) -> Result<LiveClientReport> {
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    listener.set_nonblocking(true)?;
    {
        let tx = tx.clone();
        let stop = stop.clone();
        thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, addr)) => {
                        debug!("connection from {addr}");
                        let ok = stream.set_nonblocking(false).is_ok() && stream.set_nodelay(true).is_ok();
                        if !ok || spawn_reader(stream, None, tx.clone()).is_err() {
                            warn!("could not set up connection from {addr}");
                        }
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(5));
                    }
                    Err(e) => {
                        warn!("accept failed: {e}");
                        return;
                    }
                }
            }
        });
    }

    let mut lp = ClientLoop {
        node,
        start: Instant::now(),
        tx,
        writers: BTreeMap::new(),
        last_heard: BTreeMap::new(),
        report: LiveClientReport::default(),
    };
    let result = client_loop(&mut lp, &rx, workload, opts);
    stop.store(true, Ordering::Relaxed);
    for w in lp.writers.values() {
        let _ = w.shutdown(Shutdown::Both);
    }
    result?;
    lp.report.table = lp.node.table().rows().cloned().collect();
    Ok(lp.report)
}

fn client_loop(
    lp: &mut ClientLoop,
    rx: &Receiver<Input>,
    workload: Vec<(f64, TaskInstance)>,
    opts: &LiveClientOptions,
) -> Result<()> {
    let mut pending = workload.into_iter().peekable();
    let mut origin: Option<f64> = None;
    let mut finished = false;
    let tick = opts.idle_timeout_s.clamp(0.01, 0.5);
    loop {
        if origin.is_none() && (lp.writers.len() >= opts.expect_servers || lp.now() >= opts.connect_wait_s) {
            origin = Some(lp.now());
        }
        // submit everything that is due before looking at new input, so a
        // steal request queued behind a HELLO already sees the tasks
        if let Some(o) = origin {
            while let Some((at, _)) = pending.peek() {
                if o + at > lp.now() {
                    break;
                }
                let (_, inst) = pending.next().expect("peeked");
                let now = lp.now();
                lp.node.submit(now, inst, None)?;
            }
            if pending.peek().is_none() && !finished {
                let now = lp.now();
                lp.node.finish_workload(now);
                finished = true;
            }
            lp.apply()?;
            if lp.node.is_done() {
                return Ok(());
            }
        }
        let mut wait = tick;
        if let (Some(o), Some((at, _))) = (origin, pending.peek()) {
            wait = wait.min((o + at - lp.now()).max(0.0));
        }
        match rx.recv_timeout(Duration::from_secs_f64(wait)) {
            Ok(input) => {
                lp.handle(input)?;
                // stop before acting on later frames, like the simulator
                if finished && lp.node.is_done() {
                    return Ok(());
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return Err(Error::Protocol("client event channel closed".into())),
        }
        lp.check_idle(opts.idle_timeout_s)?;
    }
}

#[derive(Debug, Clone)]
pub struct LiveServerOptions {
    /// Give up on a client that stays silent this long while the server
    /// has nothing running.
    pub idle_timeout_s: f64,
}

impl Default for LiveServerOptions {
    fn default() -> Self {
        LiveServerOptions {
            idle_timeout_s: DEFAULT_IDLE_TIMEOUT_S,
        }
    }
}

#[derive(Debug, Default)]
pub struct LiveServerReport {
    pub sent: Vec<SentFrame>,
    pub trace: Vec<TraceEvent>,
}

impl LiveServerReport {
    pub fn transcript(&self) -> Vec<MessageKind> {
        self.sent.iter().map(|f| f.kind).collect()
    }
}

/// Connects to a client and serves it until the connection closes or the
/// client goes quiet.
pub fn run_server(addr: impl ToSocketAddrs, mut node: ServerNode, opts: &LiveServerOptions) -> Result<LiveServerReport> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let mut stream = TcpStream::connect(&addrs[..])?;
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::channel();
    let client = "client".to_string();
    spawn_reader(stream.try_clone()?, Some(client.clone()), tx.clone())?;

    let start = Instant::now();
    let now = || start.elapsed().as_secs_f64();
    let me = node.device().device_id.clone();
    let mut report = LiveServerReport::default();
    let mut timers: Vec<(f64, u64)> = Vec::new();
    let mut last_heard = now();
    let mut link_up = true;

    node.on_link_up(now());
    while link_up {
        for a in node.take_actions() {
            let t = now();
            match a {
                Action::Send { peer, msg } => match write_frame(&mut stream, &msg) {
                    Ok((bytes, _)) => report.sent.push(SentFrame {
                        at_s: t,
                        to: peer,
                        kind: msg.kind(),
                        bytes,
                    }),
                    Err(e) => {
                        debug!("send failed: {e}");
                        link_up = false;
                    }
                },
                Action::Exec { token, job } => spawn_exec(&tx, token, job),
                Action::Timer { token, at_s } => timers.push((at_s, token)),
                Action::Trace { kind, detail } => trace_event(&mut report.trace, t, &me, kind, detail),
                Action::Completed(_) => {}
            }
        }
        if !link_up {
            node.on_link_down(now());
            break;
        }
        let next_timer = timers.iter().map(|(at, _)| *at).fold(f64::INFINITY, f64::min);
        let wait = (next_timer - now()).clamp(0.0, opts.idle_timeout_s.max(0.01));
        match rx.recv_timeout(Duration::from_secs_f64(wait)) {
            Ok(Input::Msg { msg, .. }) => {
                last_heard = now();
                if let Err(e) = node.on_message(now(), msg) {
                    trace_event(&mut report.trace, now(), &me, "protocol_error", json!({ "error": e.to_string() }));
                }
            }
            Ok(Input::ExecDone { token, outcome }) => node.on_exec_done(now(), token, outcome),
            Ok(Input::Closed { .. }) => {
                node.on_link_down(now());
                link_up = false;
            }
            Ok(Input::Connected { .. }) => {}
            Err(RecvTimeoutError::Timeout) => {
                if !node.is_busy() && now() - last_heard > opts.idle_timeout_s {
                    warn!("client silent for {} s, leaving", opts.idle_timeout_s);
                    node.on_link_down(now());
                    link_up = false;
                }
            }
            Err(RecvTimeoutError::Disconnected) => link_up = false,
        }
        let t = now();
        let (due, rest): (Vec<_>, Vec<_>) = timers.into_iter().partition(|(at, _)| *at <= t);
        timers = rest;
        for (_, token) in due {
            node.on_timer(t, token);
        }
    }
    for a in node.take_actions() {
        if let Action::Trace { kind, detail } = a {
            trace_event(&mut report.trace, now(), &me, kind, detail);
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
    Ok(report)
}
