//! Programming model for remotable tasks.
//!
//! A task class implements [`RemotableTask`]. The runtime calls its five
//! hooks in a fixed order: `pre_execution`, `load_data`, `execution`,
//! `update_data`, `post_execution`. Executed locally, every hook runs on the
//! client. Executed remotely, the prologue (`pre_execution`) and epilogue
//! (`post_execution` plus the result listener) stay on the client while the
//! body runs on behalf of the server: `load_data` reads the client's store and
//! ships the bytes to the server, `execution` runs on the server, and the
//! bytes produced for `update_data` are shipped back and applied to the
//! client's store.
//!
//! Hooks must be pure functions of the state blob and the data they are
//! handed. Tasks are independent: a task may only read or write store keys
//! named by its own state.

pub mod demo;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::model::{DeviceKind, TaskClassId, TaskInstanceId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct HookError(pub String);

pub type HookResult<T> = std::result::Result<T, HookError>;

/// The client's file system as seen by `load_data` and `update_data`.
pub type DataStore = BTreeMap<String, Vec<u8>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTarget {
    /// Uses platform APIs and may only run on Android servers.
    AndroidOnly,
    /// Portable code that any server can run.
    Generic,
}

impl TaskTarget {
    pub fn allows(self, kind: DeviceKind) -> bool {
        match self {
            TaskTarget::AndroidOnly => matches!(kind, DeviceKind::AndroidServer),
            TaskTarget::Generic => kind.is_server(),
        }
    }
}

pub trait RemotableTask: Send + Sync {
    fn class_id(&self) -> &TaskClassId;

    fn target(&self) -> TaskTarget {
        TaskTarget::Generic
    }

    /// Whether `load_data` reads anything from the client's store.
    fn loads_data(&self) -> bool {
        false
    }

    /// Whether `execution` produces bytes for `update_data`.
    fn updates_data(&self) -> bool {
        false
    }

    fn pre_execution(&self, _state: &mut Vec<u8>) -> HookResult<()> {
        Ok(())
    }

    fn load_data(&self, _state: &[u8], _store: &DataStore) -> HookResult<Vec<u8>> {
        Ok(Vec::new())
    }

    /// The main computation. Returns the bytes handed to `update_data`.
    fn execution(&self, state: &mut Vec<u8>, input: &[u8]) -> HookResult<Vec<u8>>;

    fn update_data(&self, _state: &[u8], _output: &[u8], _store: &mut DataStore) -> HookResult<()> {
        Ok(())
    }

    fn post_execution(&self, _state: &mut Vec<u8>) -> HookResult<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Pending,
    Finish,
    Fail,
}

impl ResultStatus {
    pub fn as_u8(self) -> u8 {
        match self {
            ResultStatus::Pending => 0,
            ResultStatus::Finish => 1,
            ResultStatus::Fail => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ResultStatus::Pending),
            1 => Ok(ResultStatus::Finish),
            2 => Ok(ResultStatus::Fail),
            other => Err(Error::Protocol(format!("unknown result status byte {other}"))),
        }
    }
}

impl fmt::Display for ResultStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResultStatus::Pending => "",
            ResultStatus::Finish => "finish",
            ResultStatus::Fail => "fail",
        })
    }
}

/// Serialized task state plus its result status.
///
/// Wire form: 4-byte big-endian payload length, one status byte
/// (0 pending, 1 finish, 2 fail), then the payload bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskStateBlob {
    pub status: ResultStatus,
    pub data: Vec<u8>,
}

impl TaskStateBlob {
    pub fn pending(data: Vec<u8>) -> Self {
        TaskStateBlob {
            status: ResultStatus::Pending,
            data,
        }
    }

    pub fn encode_into(&self, buf: &mut Vec<u8>) -> Result<()> {
        let len = u32::try_from(self.data.len())
            .map_err(|_| Error::Protocol("state blob larger than 4 GiB".into()))?;
        codec::put_u32(buf, len);
        codec::put_u8(buf, self.status.as_u8());
        buf.extend_from_slice(&self.data);
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(self.data.len() + 5);
        self.encode_into(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        let len = r.u32()? as usize;
        let status = ResultStatus::from_u8(r.u8()?)?;
        let data = r.take(len)?.to_vec();
        Ok(TaskStateBlob { status, data })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let blob = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(blob)
    }
}

/// Task classes known to an endpoint. Both the client and its servers link
/// the same registry, so offloading ships a class id plus state rather than
/// code.
#[derive(Default, Clone)]
pub struct TaskRegistry {
    classes: BTreeMap<TaskClassId, Arc<dyn RemotableTask>>,
}

impl fmt::Debug for TaskRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.classes.keys()).finish()
    }
}

impl TaskRegistry {
    pub fn new() -> Self {
        TaskRegistry::default()
    }

    /// Registry holding the shipped demo tasks.
    pub fn with_demo_tasks() -> Self {
        let mut reg = TaskRegistry::new();
        for task in demo::all() {
            reg.register_task_class(task).expect("demo ids are distinct");
        }
        reg
    }

    pub fn register_task_class(&mut self, task: Arc<dyn RemotableTask>) -> Result<()> {
        let id = task.class_id().clone();
        if self.classes.contains_key(&id) {
            return Err(Error::DuplicateClass(id.to_string()));
        }
        self.classes.insert(id, task);
        Ok(())
    }

    pub fn get(&self, id: &TaskClassId) -> Result<Arc<dyn RemotableTask>> {
        self.classes
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownClass(id.to_string()))
    }

    pub fn contains(&self, id: &TaskClassId) -> bool {
        self.classes.contains_key(id)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &TaskClassId> {
        self.classes.keys()
    }
}

/// A generated task instance: its initial state and the amount of modeled
/// work it represents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: TaskInstanceId,
    pub initial_state: Vec<u8>,
    pub work_units: u64,
}

pub type ResultListener = Box<dyn FnOnce(&TaskInstanceId, &TaskStateBlob) + Send>;

/// Result listeners bound to instances. Each fires at most once; later
/// completions of the same instance are reported as duplicates.
#[derive(Default)]
pub struct Listeners {
    bound: BTreeMap<TaskInstanceId, ResultListener>,
    fired: BTreeSet<TaskInstanceId>,
}

impl Listeners {
    pub fn new() -> Self {
        Listeners::default()
    }

    pub fn bind(&mut self, id: TaskInstanceId, listener: ResultListener) {
        self.bound.insert(id, listener);
    }

    pub fn has_fired(&self, id: &TaskInstanceId) -> bool {
        self.fired.contains(id)
    }

    /// Returns `false` when the instance already completed.
    pub fn fire(&mut self, id: &TaskInstanceId, blob: &TaskStateBlob) -> bool {
        if !self.fired.insert(id.clone()) {
            return false;
        }
        if let Some(listener) = self.bound.remove(id) {
            listener(id, blob);
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hook {
    PreExecution,
    LoadData,
    Execution,
    UpdateData,
    PostExecution,
}

impl Hook {
    pub const ORDER: [Hook; 5] = [
        Hook::PreExecution,
        Hook::LoadData,
        Hook::Execution,
        Hook::UpdateData,
        Hook::PostExecution,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Client,
    Server,
}

/// One step of a lifecycle transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Hook { hook: Hook, side: Side },
    /// Data moved between the endpoints, with its byte count.
    Transfer { from: Side, to: Side, bytes: usize },
    ListenerFired,
}

/// Final blob of a run plus the steps taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LifecycleRun {
    pub blob: TaskStateBlob,
    pub transcript: Vec<Step>,
}

fn fail(state: Vec<u8>) -> TaskStateBlob {
    TaskStateBlob {
        status: ResultStatus::Fail,
        data: state,
    }
}

/// Runs all hooks on the client without touching listeners.
pub fn execute_locally(
    task: &dyn RemotableTask,
    initial_state: &[u8],
    store: &mut DataStore,
) -> LifecycleRun {
    let mut transcript = Vec::with_capacity(5);
    let mut state = initial_state.to_vec();
    let mut step = |hook| {
        transcript.push(Step::Hook {
            hook,
            side: Side::Client,
        })
    };

    step(Hook::PreExecution);
    if task.pre_execution(&mut state).is_err() {
        return LifecycleRun { blob: fail(state), transcript };
    }
    step(Hook::LoadData);
    let input = match task.load_data(&state, store) {
        Ok(input) => input,
        Err(_) => return LifecycleRun { blob: fail(state), transcript },
    };
    step(Hook::Execution);
    let output = match task.execution(&mut state, &input) {
        Ok(out) => out,
        Err(_) => return LifecycleRun { blob: fail(state), transcript },
    };
    step(Hook::UpdateData);
    if task.update_data(&state, &output, store).is_err() {
        return LifecycleRun { blob: fail(state), transcript };
    }
    step(Hook::PostExecution);
    if task.post_execution(&mut state).is_err() {
        return LifecycleRun { blob: fail(state), transcript };
    }
    LifecycleRun {
        blob: TaskStateBlob {
            status: ResultStatus::Finish,
            data: state,
        },
        transcript,
    }
}

/// Runs the whole lifecycle on the client and fires the instance's listener.
/// Hook failures surface as a `fail` status, not as an error.
pub fn run_lifecycle_local(
    registry: &TaskRegistry,
    instance: &TaskInstance,
    store: &mut DataStore,
    listeners: &mut Listeners,
) -> Result<LifecycleRun> {
    let task = registry.get(&instance.id.class_id)?;
    let mut run = execute_locally(task.as_ref(), &instance.initial_state, store);
    if listeners.fire(&instance.id, &run.blob) {
        run.transcript.push(Step::ListenerFired);
    }
    Ok(run)
}

/// Where each part of a remote lifecycle runs and which data crosses the link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteSplit {
    pub prologue: Vec<Hook>,
    pub pulls_input: bool,
    pub remote_body: Vec<Hook>,
    pub pushes_output: bool,
    pub epilogue: Vec<Hook>,
}

pub fn split_lifecycle_remote(task: &dyn RemotableTask) -> RemoteSplit {
    RemoteSplit {
        prologue: vec![Hook::PreExecution],
        pulls_input: task.loads_data(),
        remote_body: vec![Hook::LoadData, Hook::Execution, Hook::UpdateData],
        pushes_output: task.updates_data(),
        epilogue: vec![Hook::PostExecution],
    }
}

/// Client half of the prologue: runs `pre_execution` and returns the blob
/// that is shipped to the server.
pub fn remote_prologue(task: &dyn RemotableTask, initial_state: &[u8]) -> HookResult<Vec<u8>> {
    let mut state = initial_state.to_vec();
    task.pre_execution(&mut state)?;
    Ok(state)
}

/// Client side of `load_data` when the body runs remotely.
pub fn remote_load(task: &dyn RemotableTask, state: &[u8], store: &DataStore) -> HookResult<Vec<u8>> {
    if task.loads_data() {
        task.load_data(state, store)
    } else {
        Ok(Vec::new())
    }
}

/// Outcome of the `execution` hook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub state: Vec<u8>,
    pub result: HookResult<Vec<u8>>,
}

/// The part of a lifecycle that does the heavy computation. Self-contained
/// so a driver can run it on another thread or charge it simulated time.
#[derive(Clone)]
pub struct ExecJob {
    pub instance: TaskInstanceId,
    pub task: Arc<dyn RemotableTask>,
    pub state: Vec<u8>,
    pub input: Vec<u8>,
    pub work_units: u64,
}

impl fmt::Debug for ExecJob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecJob")
            .field("instance", &self.instance)
            .field("state_len", &self.state.len())
            .field("input_len", &self.input.len())
            .field("work_units", &self.work_units)
            .finish()
    }
}

impl ExecJob {
    pub fn run(self) -> ExecOutcome {
        let mut state = self.state;
        let result = self.task.execution(&mut state, &self.input);
        ExecOutcome { state, result }
    }
}

/// Client epilogue after a successful remote body: applies the returned
/// output through `update_data`, then runs `post_execution`.
pub fn remote_epilogue(
    task: &dyn RemotableTask,
    mut state: Vec<u8>,
    output: &[u8],
    store: &mut DataStore,
) -> TaskStateBlob {
    if task.update_data(&state, output, store).is_err() {
        return fail(state);
    }
    if task.post_execution(&mut state).is_err() {
        return fail(state);
    }
    TaskStateBlob {
        status: ResultStatus::Finish,
        data: state,
    }
}

/// Runs the remote split in-process, recording which side runs each hook and
/// every data transfer. A failed remote body returns `fail` without running
/// the epilogue; recovery is the caller's job.
pub fn execute_split(task: &dyn RemotableTask, initial_state: &[u8], store: &mut DataStore) -> LifecycleRun {
    let split = split_lifecycle_remote(task);
    let mut transcript = Vec::new();
    transcript.push(Step::Hook {
        hook: Hook::PreExecution,
        side: Side::Client,
    });
    let state = match remote_prologue(task, initial_state) {
        Ok(s) => s,
        Err(_) => return LifecycleRun { blob: fail(initial_state.to_vec()), transcript },
    };
    transcript.push(Step::Transfer {
        from: Side::Client,
        to: Side::Server,
        bytes: state.len(),
    });
    transcript.push(Step::Hook {
        hook: Hook::LoadData,
        side: Side::Server,
    });
    let input = if split.pulls_input {
        match task.load_data(&state, store) {
            Ok(input) => {
                transcript.push(Step::Transfer {
                    from: Side::Client,
                    to: Side::Server,
                    bytes: input.len(),
                });
                input
            }
            Err(_) => return LifecycleRun { blob: fail(state), transcript },
        }
    } else {
        Vec::new()
    };
    transcript.push(Step::Hook {
        hook: Hook::Execution,
        side: Side::Server,
    });
    let mut state = state;
    let output = match task.execution(&mut state, &input) {
        Ok(out) => out,
        Err(_) => return LifecycleRun { blob: fail(state), transcript },
    };
    transcript.push(Step::Hook {
        hook: Hook::UpdateData,
        side: Side::Server,
    });
    if split.pushes_output {
        transcript.push(Step::Transfer {
            from: Side::Server,
            to: Side::Client,
            bytes: output.len(),
        });
    }
    transcript.push(Step::Transfer {
        from: Side::Server,
        to: Side::Client,
        bytes: state.len(),
    });
    transcript.push(Step::Hook {
        hook: Hook::PostExecution,
        side: Side::Client,
    });
    let blob = remote_epilogue(task, state, &output, store);
    LifecycleRun { blob, transcript }
}
