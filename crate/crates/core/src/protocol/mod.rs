//! The offload protocol.
//!
//! [`ClientNode`] and [`ServerNode`] are state machines without I/O: a driver
//! feeds them events (messages, finished executions, timers, link changes)
//! and carries out the [`Action`]s they emit. The simulator in
//! [`crate::sim`] drives them over modeled links; [`tcp`] drives them over
//! real sockets.

pub mod client;
pub mod server;
pub mod table;
pub mod tcp;
pub mod wire;

use serde_json::Value;

use crate::model::TaskInstanceId;
use crate::tasklib::{ExecJob, TaskStateBlob};

pub use client::{ClientConfig, ClientNode, ServerEntry};
pub use server::{ServerConfig, ServerNode};
pub use table::{ExecState, OffloadRecord, OffloadTable, RemoteExecution};
pub use wire::{Message, MessageKind};

/// Something a node asks its driver to do.
#[derive(Debug)]
pub enum Action {
    Send { peer: String, msg: Message },
    /// Run `job` on this node's executor and report back with `token`.
    Exec { token: u64, job: ExecJob },
    /// Call back with `token` at `at_s`.
    Timer { token: u64, at_s: f64 },
    Trace { kind: &'static str, detail: Value },
    Completed(Completion),
}

/// A task whose listener has fired.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub id: TaskInstanceId,
    pub blob: TaskStateBlob,
    pub executed_on: String,
    pub remote: bool,
    pub generated_s: f64,
    pub started_s: f64,
}
