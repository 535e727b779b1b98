//! Client endpoint: workflow handles and their terminal transitions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bundle::{NodeAddress, WorkflowId};
use crate::worker::WorkerError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum HandleStatus {
    Pending,
    /// Name of the result file that came back.
    Succeeded { result: String },
    Failed { error: WorkerError, log: Option<String> },
    TimedOut,
}

impl HandleStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, HandleStatus::Pending)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowHandle {
    pub workflow: WorkflowId,
    pub submitted_at: f64,
    pub ttl_seconds: f64,
    pub status: HandleStatus,
    pub finished_at: Option<f64>,
}

impl WorkflowHandle {
    pub fn deadline(&self) -> f64 {
        self.submitted_at + self.ttl_seconds
    }
}

/// All workflows one client has submitted.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub address: NodeAddress,
    next_seq: u32,
    handles: BTreeMap<WorkflowId, WorkflowHandle>,
}

impl ClientState {
    pub fn new(address: NodeAddress) -> Self {
        ClientState { address, next_seq: 0, handles: BTreeMap::new() }
    }

    pub fn open(&mut self, submitted_at: f64, ttl_seconds: f64) -> WorkflowId {
        let id = WorkflowId { client: self.address, seq: self.next_seq };
        self.next_seq += 1;
        self.handles.insert(id, WorkflowHandle { workflow: id, submitted_at, ttl_seconds, status: HandleStatus::Pending, finished_at: None });
        id
    }

    pub fn handle(&self, id: WorkflowId) -> Option<&WorkflowHandle> {
        self.handles.get(&id)
    }

    pub fn handles(&self) -> impl Iterator<Item = &WorkflowHandle> {
        self.handles.values()
    }

    /// Applies a terminal status. Returns `false` (and changes nothing) for
    /// unknown or already terminal handles, so duplicates and late arrivals
    /// are harmless.
    pub fn resolve(&mut self, id: WorkflowId, status: HandleStatus, now: f64) -> bool {
        debug_assert!(status.is_terminal());
        match self.handles.get_mut(&id) {
            Some(h) if !h.status.is_terminal() => {
                h.status = status;
                h.finished_at = Some(now);
                true
            }
            _ => false,
        }
    }

    /// Times the handle out if it is pending and its deadline has been reached.
    pub fn expire(&mut self, id: WorkflowId, now: f64) -> bool {
        let due = self.handles.get(&id).is_some_and(|h| now >= h.deadline());
        due && self.resolve(id, HandleStatus::TimedOut, now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worker::ErrorClass;

    fn ok() -> HandleStatus {
        HandleStatus::Succeeded { result: "result_4.img".into() }
    }

    #[test]
    fn result_before_deadline_succeeds_and_expire_is_then_a_no_op() {
        let mut c = ClientState::new(NodeAddress(0));
        let id = c.open(0.0, 300.0);
        assert!(c.resolve(id, ok(), 299.9));
        assert!(!c.expire(id, 300.5));
        assert_eq!(c.handle(id).unwrap().status, ok());
    }

    #[test]
    fn timeout_is_terminal() {
        let mut c = ClientState::new(NodeAddress(0));
        let id = c.open(0.0, 300.0);
        assert!(!c.expire(id, 200.0));
        assert!(c.expire(id, 300.5));
        assert!(!c.expire(id, 400.0));
        assert!(!c.resolve(id, ok(), 301.0));
        assert_eq!(c.handle(id).unwrap().status, HandleStatus::TimedOut);
        assert_eq!(c.handle(id).unwrap().finished_at, Some(300.5));
    }

    #[test]
    fn duplicate_and_unknown_results_are_ignored() {
        let mut c = ClientState::new(NodeAddress(0));
        let id = c.open(0.0, 300.0);
        let err = HandleStatus::Failed {
            error: WorkerError { class: ErrorClass::TaskExecution, message: "boom".into(), task_index: 2, retried: false },
            log: Some("trace".into()),
        };
        assert!(c.resolve(id, err.clone(), 5.0));
        assert!(!c.resolve(id, ok(), 6.0));
        assert_eq!(c.handle(id).unwrap().status, err);
        assert!(!c.resolve(WorkflowId { client: NodeAddress(0), seq: 9 }, ok(), 1.0));
    }

    #[test]
    fn ids_are_sequential_per_client() {
        let mut c = ClientState::new(NodeAddress(3));
        assert_eq!(c.open(0.0, 1.0), WorkflowId { client: NodeAddress(3), seq: 0 });
        assert_eq!(c.open(0.0, 1.0), WorkflowId { client: NodeAddress(3), seq: 1 });
        assert_eq!(c.handles().count(), 2);
    }
}
