//! The client's offloaded code table: one row per task handed to a server.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskInstanceId;
use crate::tasklib::ResultStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecState {
    Transferring,
    Executing,
    Returning,
    Done,
    FailedRemote,
    LinkLost,
}

impl ExecState {
    pub fn can_move_to(self, next: ExecState) -> bool {
        use ExecState::*;
        matches!(
            (self, next),
            (Transferring, Executing)
                | (Transferring, LinkLost)
                | (Executing, Returning)
                | (Executing, FailedRemote)
                | (Executing, LinkLost)
                | (Returning, Done)
                | (Returning, LinkLost)
        )
    }

    pub fn is_pending(self) -> bool {
        matches!(self, ExecState::Transferring | ExecState::Executing | ExecState::Returning)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffloadRecord {
    pub id: TaskInstanceId,
    pub offloaded: bool,
    pub server: String,
    pub returned: bool,
    pub result: ResultStatus,
    /// Outcome of the local re-execution after the link to `server` was lost.
    pub local_result: Option<ResultStatus>,
}

impl OffloadRecord {
    pub fn is_consistent(&self) -> bool {
        (!self.returned || self.offloaded) && (self.result == ResultStatus::Pending || self.returned)
    }
}

impl fmt::Display for OffloadRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.id, self.offloaded, self.server, self.returned, self.result
        )?;
        if let Some(local) = self.local_result {
            write!(f, "\tlocal:{local}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteExecution {
    pub record: OffloadRecord,
    pub state: ExecState,
}

impl RemoteExecution {
    fn transition(&mut self, next: ExecState) -> Result<()> {
        if !self.state.can_move_to(next) {
            return Err(Error::Protocol(format!(
                "{}: illegal transition {:?} -> {next:?}",
                self.record.id, self.state
            )));
        }
        self.state = next;
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct OffloadTable {
    rows: BTreeMap<TaskInstanceId, RemoteExecution>,
    log: Option<File>,
}

impl OffloadTable {
    pub fn new() -> Self {
        OffloadTable::default()
    }

    /// Also appends every row change to `path`.
    pub fn with_log(path: impl AsRef<Path>) -> Result<Self> {
        let log = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(OffloadTable {
            rows: BTreeMap::new(),
            log: Some(log),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &TaskInstanceId) -> Option<&RemoteExecution> {
        self.rows.get(id)
    }

    pub fn rows(&self) -> impl Iterator<Item = &RemoteExecution> {
        self.rows.values()
    }

    fn log_row(&mut self, id: &TaskInstanceId) {
        if let (Some(log), Some(row)) = (self.log.as_mut(), self.rows.get(id)) {
            if let Err(e) = writeln!(log, "{}\t{:?}", row.record, row.state) {
                log::warn!("offload table log write failed: {e}");
            }
        }
    }

    /// Records a task about to be sent to `server`.
    pub fn insert(&mut self, id: TaskInstanceId, server: &str) -> Result<()> {
        if self.rows.contains_key(&id) {
            return Err(Error::DuplicateTask(id.to_string()));
        }
        let row = RemoteExecution {
            record: OffloadRecord {
                id: id.clone(),
                offloaded: true,
                server: server.to_string(),
                returned: false,
                result: ResultStatus::Pending,
                local_result: None,
            },
            state: ExecState::Transferring,
        };
        self.rows.insert(id.clone(), row);
        self.log_row(&id);
        Ok(())
    }

    /// Drops the row of a task whose transfer never left the client.
    pub fn remove(&mut self, id: &TaskInstanceId) -> Option<RemoteExecution> {
        self.rows.remove(id)
    }

    fn row_mut(&mut self, id: &TaskInstanceId) -> Result<&mut RemoteExecution> {
        self.rows.get_mut(id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// Moves a pending row forward to `next`, passing through the states in
    /// between (a server message about a task implies it was received).
    pub fn advance(&mut self, id: &TaskInstanceId, next: ExecState) -> Result<()> {
        let row = self.row_mut(id)?;
        if row.state == ExecState::Transferring && next != ExecState::Executing && next != ExecState::LinkLost {
            row.transition(ExecState::Executing)?;
        }
        if row.state == ExecState::Executing && next == ExecState::Done {
            row.transition(ExecState::Returning)?;
        }
        if row.state != next {
            row.transition(next)?;
        }
        self.log_row(id);
        Ok(())
    }

    /// Records the server's answer for a pending row.
    pub fn mark_returned(&mut self, id: &TaskInstanceId, result: ResultStatus) -> Result<()> {
        let next = match result {
            ResultStatus::Finish => ExecState::Done,
            ResultStatus::Fail => ExecState::FailedRemote,
            ResultStatus::Pending => {
                return Err(Error::Protocol(format!("{id}: returned result is still pending")))
            }
        };
        self.advance(id, next)?;
        let row = self.row_mut(id)?;
        row.record.returned = true;
        row.record.result = result;
        self.log_row(id);
        Ok(())
    }

    pub fn mark_link_lost(&mut self, id: &TaskInstanceId) -> Result<()> {
        self.advance(id, ExecState::LinkLost)
    }

    pub fn set_local_result(&mut self, id: &TaskInstanceId, result: ResultStatus) -> Result<()> {
        let row = self.row_mut(id)?;
        if row.state != ExecState::LinkLost {
            return Err(Error::Protocol(format!("{id}: local result on a row that was not lost")));
        }
        row.record.local_result = Some(result);
        self.log_row(id);
        Ok(())
    }

    /// Rows still waiting on `server`.
    pub fn pending_on(&self, server: &str) -> Vec<TaskInstanceId> {
        self.rows
            .values()
            .filter(|r| r.record.server == server && r.state.is_pending())
            .map(|r| r.record.id.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u64) -> TaskInstanceId {
        TaskInstanceId::new("app/T".parse().unwrap(), n)
    }

    #[test]
    fn round_trip_rows() {
        let mut t = OffloadTable::new();
        t.insert(id(1), "192.168.49.1").unwrap();
        t.insert(id(2), "192.168.49.1").unwrap();
        t.insert(id(3), "192.168.49.1").unwrap();
        assert!(t.insert(id(1), "x").is_err());

        let row = &t.get(&id(2)).unwrap().record;
        assert_eq!(row.to_string(), "app/T#0002\ttrue\t192.168.49.1\tfalse\t");

        t.mark_returned(&id(1), ResultStatus::Finish).unwrap();
        assert_eq!(t.get(&id(1)).unwrap().state, ExecState::Done);
        assert_eq!(t.get(&id(1)).unwrap().record.to_string(), "app/T#0001\ttrue\t192.168.49.1\ttrue\tfinish");

        t.advance(&id(3), ExecState::Executing).unwrap();
        t.mark_returned(&id(3), ResultStatus::Fail).unwrap();
        assert_eq!(t.get(&id(3)).unwrap().state, ExecState::FailedRemote);
        assert!(t.rows().all(|r| r.record.is_consistent()));
        assert_eq!(t.pending_on("192.168.49.1"), vec![id(2)]);
    }

    #[test]
    fn illegal_transitions() {
        let mut t = OffloadTable::new();
        t.insert(id(1), "s").unwrap();
        t.mark_link_lost(&id(1)).unwrap();
        assert!(t.mark_returned(&id(1), ResultStatus::Finish).is_err());
        assert!(t.mark_link_lost(&id(9)).is_err());
        t.set_local_result(&id(1), ResultStatus::Finish).unwrap();
        let r = &t.get(&id(1)).unwrap().record;
        assert!(!r.returned);
        assert_eq!(r.local_result, Some(ResultStatus::Finish));

        assert!(!ExecState::Done.can_move_to(ExecState::LinkLost));
        assert!(!ExecState::Transferring.can_move_to(ExecState::FailedRemote));
    }

    #[test]
    fn log_file_gets_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.log");
        let mut t = OffloadTable::with_log(&path).unwrap();
        t.insert(id(1), "s").unwrap();
        t.mark_returned(&id(1), ResultStatus::Finish).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().last().unwrap().ends_with("finish\tDone"));
    }
}
