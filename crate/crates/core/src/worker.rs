//! Worker side of offloading: admission of incoming archives, synthetic
//! execution, the serial execution queue and error routing.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::announce::CapabilityVector;
use crate::assignment::is_capable;
use crate::bundle::NodeAddress;
use crate::workflow::{Archive, Route, Task, WorkerSpec};

/// Stand-in for a service executable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub exec_mean_s: f64,
    #[serde(default)]
    pub exec_jitter_s: f64,
    pub output_bytes: u64,
    #[serde(default = "default_ext")]
    pub output_ext: String,
    #[serde(default)]
    pub energy_cost: f64,
    #[serde(default)]
    pub failure_probability: f64,
}

fn default_ext() -> String {
    "bin".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceDefinition {
    pub name: String,
    pub param_count: u32,
    pub profile: SyntheticProfile,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ErrorClass {
    TaskExecution = 1,
    WorkerSelection = 2,
    WorkerCalling = 3,
}

impl ErrorClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(ErrorClass::TaskExecution),
            2 => Some(ErrorClass::WorkerSelection),
            3 => Some(ErrorClass::WorkerCalling),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::TaskExecution => "task_execution",
            ErrorClass::WorkerSelection => "worker_selection",
            ErrorClass::WorkerCalling => "worker_calling",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerError {
    pub class: ErrorClass,
    pub message: String,
    pub task_index: usize,
    /// Set once the single re-selection for this task has been spent.
    pub retried: bool,
}

impl fmt::Display for WorkerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error at task {}: {}", self.class.name(), self.task_index, self.message)
    }
}

/// What a worker does with an archive addressed to it.
#[derive(Clone, Debug, PartialEq)]
pub enum Admission {
    /// Workflow TTL already passed; nothing is executed.
    Expired,
    Rejected(WorkerError),
    Accepted,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ExecutionPlan {
    pub duration_s: f64,
    pub fails: bool,
}

pub type JobId = u64;

#[derive(Clone, Debug)]
pub struct WorkerState {
    pub address: NodeAddress,
    pub services: BTreeMap<String, ServiceDefinition>,
    /// Current capabilities; announced as-is.
    pub caps: CapabilityVector,
    queue: VecDeque<JobId>,
    running: Option<JobId>,
}

impl WorkerState {
    pub fn new(address: NodeAddress, services: impl IntoIterator<Item = ServiceDefinition>, caps: CapabilityVector) -> Self {
        WorkerState {
            address,
            services: services.into_iter().map(|s| (s.name.clone(), s)).collect(),
            caps,
            queue: VecDeque::new(),
            running: None,
        }
    }

    pub fn offers(&self) -> impl Iterator<Item = (&str, u32)> {
        self.services.values().map(|s| (s.name.as_str(), s.param_count))
    }

    /// Re-checks the current task against what this worker offers right now.
    pub fn check(&self, task: &Task, index: usize) -> Result<&ServiceDefinition, WorkerError> {
        let calling = |message: String| WorkerError { class: ErrorClass::WorkerCalling, message, task_index: index, retried: false };
        let def = self
            .services
            .get(&task.service)
            .ok_or_else(|| calling(format!("worker {} does not offer `{}`", self.address, task.service)))?;
        if !is_capable(&self.caps, &task.requirements) {
            return Err(calling(format!("worker {} no longer meets the requirements of `{}`", self.address, task.service)));
        }
        Ok(def)
    }

    pub fn admit(&self, archive: &Archive, now: f64) -> Admission {
        let d = &archive.description;
        if d.is_expired(now) {
            return Admission::Expired;
        }
        let Some(task) = d.current() else {
            return Admission::Rejected(WorkerError {
                class: ErrorClass::WorkerCalling,
                message: "archive has no pending task".into(),
                task_index: d.cursor,
                retried: archive.route.retried,
            });
        };
        match self.check(task, d.cursor) {
            Ok(_) => Admission::Accepted,
            Err(mut e) => {
                e.retried = archive.route.retried;
                Admission::Rejected(e)
            }
        }
    }

    pub fn plan_execution<R: Rng + ?Sized>(profile: &SyntheticProfile, rng: &mut R) -> ExecutionPlan {
        let j = profile.exec_jitter_s;
        let offset = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let fails = profile.failure_probability > 0.0 && rng.random_bool(profile.failure_probability.min(1.0));
        ExecutionPlan { duration_s: (profile.exec_mean_s + offset).max(0.0), fails }
    }

    /// Charges the energy of one execution; never drops below zero.
    pub fn consume(&mut self, profile: &SyntheticProfile) {
        self.caps.energy = (self.caps.energy - profile.energy_cost).max(0.0);
    }

    /// Queues a job. Returns `true` when it may start immediately.
    pub fn enqueue(&mut self, job: JobId) -> bool {
        if self.running.is_none() {
            self.running = Some(job);
            true
        } else {
            self.queue.push_back(job);
            false
        }
    }

    /// Marks the running job done and returns the next one to start.
    pub fn finish(&mut self, job: JobId) -> Option<JobId> {
        debug_assert_eq!(self.running, Some(job));
        self.running = self.queue.pop_front();
        self.running
    }

    /// Drops a queued job that is no longer wanted (e.g. its workflow was cleaned up).
    pub fn cancel_queued(&mut self, job: JobId) -> bool {
        let before = self.queue.len();
        self.queue.retain(|j| *j != job);
        before != self.queue.len()
    }

    pub fn is_busy(&self) -> bool {
        self.running.is_some()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }
}

/// Where an error produced while handling `task` must go.
///
/// A worker-calling error on a just-in-time task whose single retry is still
/// unspent goes back to the node that assigned it; everything else goes to the
/// client.
pub fn error_destination(task: Option<&Task>, route: &Route, error: &WorkerError, client: NodeAddress) -> NodeAddress {
    let jit = task.is_some_and(|t| t.worker == WorkerSpec::JustInTime);
    match route.prior {
        Some(prior) if jit && error.class == ErrorClass::WorkerCalling && !error.retried => prior,
        _ => client,
    }
}

/// What the assigning node does with an error that came back to it.
#[derive(Clone, Debug, PartialEq)]
pub enum RetryAction {
    /// Pick again, never choosing any of `exclude`.
    Reselect { exclude: Vec<NodeAddress> },
    ToClient,
}

pub fn retry_action(archive: &Archive, failed: NodeAddress) -> RetryAction {
    let Some(error) = &archive.error else {
        return RetryAction::ToClient;
    };
    let jit = archive.description.current().is_some_and(|t| t.worker.is_jit());
    if jit && error.class == ErrorClass::WorkerCalling && !error.retried && !archive.route.retried {
        let mut exclude = archive.route.excluded.clone();
        if !exclude.contains(&failed) {
            exclude.push(failed);
        }
        RetryAction::Reselect { exclude }
    } else {
        RetryAction::ToClient
    }
}
