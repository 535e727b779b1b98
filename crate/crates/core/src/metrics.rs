//! Observer-side bookkeeping: where each workflow spends its time, how it
//! ended, and who assigned work to whom. Nodes never read any of this.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::assignment::Strategy;
use crate::bundle::WorkflowId;
use crate::simnet::NetCounters;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalState {
    Success,
    WorkerError,
    Transmission,
    Runtime,
    Execution,
}

impl FinalState {
    pub const ALL: [FinalState; 5] =
        [FinalState::Success, FinalState::WorkerError, FinalState::Transmission, FinalState::Runtime, FinalState::Execution];

    pub fn name(self) -> &'static str {
        match self {
            FinalState::Success => "success",
            FinalState::WorkerError => "worker_error",
            FinalState::Transmission => "transmission",
            FinalState::Runtime => "runtime",
            FinalState::Execution => "execution",
        }
    }
}

impl fmt::Display for FinalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    Runtime,
    Transmission,
    Execution,
}

impl Phase {
    fn stuck_state(self) -> FinalState {
        match self {
            Phase::Runtime => FinalState::Runtime,
            Phase::Transmission => FinalState::Transmission,
            Phase::Execution => FinalState::Execution,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPhases {
    pub runtime_s: f64,
    pub transmission_s: f64,
    pub execution_s: f64,
}

impl TaskPhases {
    pub fn total(&self) -> f64 {
        self.runtime_s + self.transmission_s + self.execution_s
    }

    fn add(&mut self, phase: Phase, dt: f64) {
        match phase {
            Phase::Runtime => self.runtime_s += dt,
            Phase::Transmission => self.transmission_s += dt,
            Phase::Execution => self.execution_s += dt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_index: usize,
    pub caller: usize,
    pub worker: usize,
    pub rank: Option<usize>,
    pub retry: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowRecord {
    pub id: String,
    pub client: usize,
    pub final_state: FinalState,
    pub submitted_at: f64,
    pub finished_at: Option<f64>,
    /// One entry per task plus a final entry for the way back to the client.
    pub phases: Vec<TaskPhases>,
    pub error: Option<String>,
    pub error_log: Option<String>,
    pub assignments: Vec<Assignment>,
    pub executions: Vec<usize>,
    pub timed_out: bool,
}

impl WorkflowRecord {
    pub fn task_phases(&self) -> &[TaskPhases] {
        &self.phases[..self.phases.len().saturating_sub(1)]
    }

    pub fn return_phase(&self) -> TaskPhases {
        self.phases.last().copied().unwrap_or_default()
    }

    pub fn total_s(&self) -> f64 {
        self.phases.iter().map(TaskPhases::total).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub clients: usize,
    pub config_digest: String,
    pub ended_at: f64,
    pub workflows: Vec<WorkflowRecord>,
    /// Rows are assigning nodes, columns are chosen workers.
    pub load_matrix: Vec<Vec<u64>>,
    /// Rows are assigning nodes, columns are rank positions.
    pub rank_matrix: Vec<Vec<u64>>,
    pub residual_energy: Vec<f64>,
    pub network: NetCounters,
    pub expired_drops: u64,
    pub late_execution_starts: u64,
    pub malformed_archives: u64,
    /// Bundles tagged with a finished workflow still held anywhere at the end.
    pub cleanup_residue: u64,
}

impl ExperimentReport {
    pub fn count(&self, state: FinalState) -> usize {
        self.workflows.iter().filter(|w| w.final_state == state).count()
    }
}

#[derive(Clone, Debug)]
struct Flow {
    client: usize,
    submitted_at: f64,
    phases: Vec<TaskPhases>,
    current: Option<(Phase, usize)>,
    mark: f64,
    outcome: Option<FinalState>,
    finished_at: Option<f64>,
    timed_out: bool,
    error: Option<String>,
    error_log: Option<String>,
    assignments: Vec<Assignment>,
    executions: Vec<usize>,
}

impl Flow {
    fn close(&mut self, now: f64) {
        if let Some((phase, task)) = self.current {
            self.phases[task].add(phase, now - self.mark);
        }
        self.mark = now;
    }
}

/// Accumulates phase timings per workflow as its single token moves.
#[derive(Clone, Debug)]
pub struct Tracker {
    nodes: usize,
    flows: BTreeMap<WorkflowId, Flow>,
    load: Vec<Vec<u64>>,
    ranks: Vec<Vec<u64>>,
    pub expired_drops: u64,
    pub late_execution_starts: u64,
    pub malformed_archives: u64,
}

impl Tracker {
    pub fn new(nodes: usize) -> Self {
        Tracker {
            nodes,
            flows: BTreeMap::new(),
            load: vec![vec![0; nodes]; nodes],
            ranks: vec![vec![0; nodes]; nodes],
            expired_drops: 0,
            late_execution_starts: 0,
            malformed_archives: 0,
        }
    }

    pub fn submit(&mut self, wf: WorkflowId, client: usize, tasks: usize, now: f64) {
        self.flows.insert(
            wf,
            Flow {
                client,
                submitted_at: now,
                phases: vec![TaskPhases::default(); tasks + 1],
                current: Some((Phase::Runtime, 0)),
                mark: now,
                outcome: None,
                finished_at: None,
                timed_out: false,
                error: None,
                error_log: None,
                assignments: Vec::new(),
                executions: Vec::new(),
            },
        );
    }

    /// Moves the workflow into `phase`, charging time so far to the previous one.
    /// `task` is clamped to the return slot.
    pub fn enter(&mut self, wf: WorkflowId, phase: Phase, task: usize, now: f64) {
        if let Some(f) = self.flows.get_mut(&wf).filter(|f| f.outcome.is_none()) {
            f.close(now);
            f.current = Some((phase, task.min(f.phases.len() - 1)));
        }
    }

    pub fn is_open(&self, wf: WorkflowId) -> bool {
        self.flows.get(&wf).is_some_and(|f| f.outcome.is_none())
    }

    pub fn return_slot(&self, wf: WorkflowId) -> usize {
        self.flows.get(&wf).map_or(0, |f| f.phases.len() - 1)
    }

    pub fn assignment(&mut self, wf: WorkflowId, a: Assignment) {
        // only just-in-time selections count; pinned workers were never chosen here
        if let (Some(r), true) = (a.rank, a.caller < self.nodes && a.worker < self.nodes) {
            self.load[a.caller][a.worker] += 1;
            self.ranks[a.caller][r.min(self.nodes - 1)] += 1;
        }
        if let Some(f) = self.flows.get_mut(&wf) {
            f.assignments.push(a);
        }
    }

    pub fn executed(&mut self, wf: WorkflowId, task: usize) {
        if let Some(f) = self.flows.get_mut(&wf) {
            f.executions.push(task);
        }
    }

    pub fn succeed(&mut self, wf: WorkflowId, now: f64) {
        self.terminate(wf, FinalState::Success, now, None, None);
    }

    pub fn fail(&mut self, wf: WorkflowId, now: f64, error: String, log: Option<String>) {
        self.terminate(wf, FinalState::WorkerError, now, Some(error), log);
    }

    /// Client gave up: the workflow ends in whatever phase it was stuck in.
    pub fn time_out(&mut self, wf: WorkflowId, now: f64) {
        if let Some(f) = self.flows.get_mut(&wf).filter(|f| f.outcome.is_none()) {
            f.timed_out = true;
            let state = f.current.map_or(FinalState::Runtime, |(p, _)| p.stuck_state());
            self.terminate(wf, state, now, None, None);
        }
    }

    fn terminate(&mut self, wf: WorkflowId, state: FinalState, now: f64, error: Option<String>, log: Option<String>) {
        if let Some(f) = self.flows.get_mut(&wf).filter(|f| f.outcome.is_none()) {
            f.close(now);
            f.current = None;
            f.outcome = Some(state);
            f.finished_at = Some(now);
            f.error = error;
            f.error_log = log;
        }
    }

    /// Closes the books at experiment end; still-open workflows are
    /// classified by the phase they were in.
    pub fn records(&mut self, now: f64) -> Vec<WorkflowRecord> {
        self.flows
            .iter_mut()
            .map(|(id, f)| {
                if f.outcome.is_none() {
                    f.close(now);
                }
                let final_state = f.outcome.unwrap_or_else(|| f.current.map_or(FinalState::Runtime, |(p, _)| p.stuck_state()));
                WorkflowRecord {
                    id: id.to_string(),
                    client: f.client,
                    final_state,
                    submitted_at: f.submitted_at,
                    finished_at: f.finished_at,
                    phases: f.phases.clone(),
                    error: f.error.clone(),
                    error_log: f.error_log.clone(),
                    assignments: f.assignments.clone(),
                    executions: f.executions.clone(),
                    timed_out: f.timed_out,
                }
            })
            .collect()
    }

    pub fn load_matrix(&self) -> &[Vec<u64>] {
        &self.load
    }

    pub fn rank_matrix(&self) -> &[Vec<u64>] {
        &self.ranks
    }

    pub fn all_closed(&self) -> bool {
        self.flows.values().all(|f| f.outcome.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::NodeAddress;

    const WF: WorkflowId = WorkflowId { client: NodeAddress(0), seq: 0 };

    #[test]
    fn phases_sum_to_wall_clock() {
        let mut t = Tracker::new(3);
        t.submit(WF, 0, 2, 10.0);
        t.enter(WF, Phase::Transmission, 0, 10.7);
        t.enter(WF, Phase::Runtime, 0, 14.8);
        t.enter(WF, Phase::Execution, 0, 14.9);
        t.enter(WF, Phase::Runtime, 0, 16.9);
        t.enter(WF, Phase::Transmission, 1, 17.5);
        t.enter(WF, Phase::Runtime, 1, 19.0);
        t.enter(WF, Phase::Execution, 1, 19.0);
        t.enter(WF, Phase::Runtime, 1, 20.0);
        t.enter(WF, Phase::Transmission, 9, 20.5);
        t.succeed(WF, 24.5);
        let r = &t.records(100.0)[0];
        assert_eq!(r.final_state, FinalState::Success);
        assert!((r.total_s() - 14.5).abs() < 1e-9);
        assert!((r.phases[0].transmission_s - 4.1).abs() < 1e-9);
        assert!((r.return_phase().transmission_s - 4.0).abs() < 1e-9);
        assert_eq!(r.task_phases().len(), 2);
    }

    #[test]
    fn timeout_classifies_by_current_phase_once() {
        let mut t = Tracker::new(3);
        t.submit(WF, 0, 1, 0.0);
        t.enter(WF, Phase::Transmission, 0, 1.0);
        t.time_out(WF, 50.0);
        t.succeed(WF, 60.0);
        t.enter(WF, Phase::Execution, 0, 61.0);
        let r = &t.records(100.0)[0];
        assert_eq!(r.final_state, FinalState::Transmission);
        assert!(r.timed_out);
        assert_eq!(r.finished_at, Some(50.0));
        assert!((r.total_s() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn open_flows_are_classified_at_the_end() {
        let mut t = Tracker::new(3);
        t.submit(WF, 0, 1, 0.0);
        t.enter(WF, Phase::Execution, 0, 3.0);
        assert!(!t.all_closed());
        assert_eq!(t.records(10.0)[0].final_state, FinalState::Execution);
    }

    #[test]
    fn only_jit_selections_fill_the_matrices() {
        let mut t = Tracker::new(3);
        t.submit(WF, 0, 1, 0.0);
        t.assignment(WF, Assignment { task_index: 0, caller: 0, worker: 2, rank: Some(1), retry: false });
        t.assignment(WF, Assignment { task_index: 1, caller: 2, worker: 1, rank: None, retry: false });
        t.assignment(WF, Assignment { task_index: 1, caller: 0, worker: 1, rank: Some(0), retry: true });
        assert_eq!(t.load_matrix()[0], [0, 1, 1]);
        assert_eq!(t.load_matrix()[2], [0, 0, 0]);
        assert_eq!(t.rank_matrix()[0], [1, 1, 0]);
    }
}
