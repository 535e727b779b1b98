//! The simulated world: nodes on a network, driven by one event queue.
//!
//! Each node owns a bundle store, an offer database, an optional worker and a
//! client endpoint. Anything a node inserts into its store is pushed to its
//! current neighbours right away; a periodic tick re-evaluates contacts, moves
//! mobile nodes and re-runs anti-entropy on every live link.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::announce::{broadcast_offers, CapabilityVector, OfferDatabase};
use crate::assignment::{assign, AssignContext, DistanceMetric, RatingWeights, Strategy};
use crate::bundle::{Bundle, BundleId, BundleIdGen, BundleKind, BundleStore, NodeAddress, WorkflowId};
use crate::client::{ClientState, HandleStatus};
use crate::metrics::{Assignment, ExperimentReport, Phase, Tracker};
use crate::simnet::{ContactModel, EventQueue, LinkModel, Network, Position, Replica, TransferId, WaypointParams, Walker};
use crate::worker::{
    error_destination, retry_action, Admission, ErrorClass, ExecutionPlan, JobId, RetryAction, ServiceDefinition,
    WorkerError, WorkerState,
};
use crate::workflow::{pack, result_file_name, unpack, Archive, Route, WorkerSpec, WorkflowPlan};

/// Numeric knobs of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub strategy: Strategy,
    pub weights: RatingWeights,
    pub link: LinkModel,
    pub tick_s: f64,
    pub announce_interval_s: f64,
    /// Each worker's announce phase is offset by a uniform draw from `[0, jitter)`.
    pub announce_jitter_s: f64,
    pub offer_expiry_s: f64,
    pub preprocess_s: f64,
    pub postprocess_s: f64,
    pub duration_s: f64,
    /// How long to keep running after every workflow is terminal.
    pub drain_s: f64,
    pub default_ttl_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            strategy: Strategy::Spread,
            weights: RatingWeights::default(),
            link: LinkModel::default(),
            tick_s: 0.5,
            announce_interval_s: crate::announce::DEFAULT_ANNOUNCE_INTERVAL_S,
            announce_jitter_s: 0.0,
            offer_expiry_s: crate::announce::DEFAULT_OFFER_EXPIRY_S,
            preprocess_s: 0.05,
            postprocess_s: 0.7,
            duration_s: 1800.0,
            drain_s: 60.0,
            default_ttl_s: 1800.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    /// `nodes` on a ring with links only between neighbours; node `i` sits at
    /// `x = i * spacing_m` and distances wrap around.
    Ring { nodes: usize, spacing_m: f64 },
    Static { positions: Vec<Position>, contacts: ContactModel },
    Waypoint { nodes: usize, params: WaypointParams, range_m: f64 },
}

impl Layout {
    pub fn node_count(&self) -> usize {
        match self {
            Layout::Ring { nodes, .. } | Layout::Waypoint { nodes, .. } => *nodes,
            Layout::Static { positions, .. } => positions.len(),
        }
    }

    pub fn distance_metric(&self) -> DistanceMetric {
        match self {
            Layout::Ring { nodes, spacing_m } => DistanceMetric::Ring { circumference_m: *nodes as f64 * spacing_m },
            _ => DistanceMetric::Euclidean,
        }
    }
}

/// Initial configuration of one node. `caps.position` is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSetup {
    pub caps: CapabilityVector,
    pub services: Vec<ServiceDefinition>,
    pub worker: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Submission {
    pub client: usize,
    pub at: f64,
    pub plan: WorkflowPlan,
    pub input_bytes: u64,
}

/// Labels copied into the report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLabel {
    pub scenario: String,
    pub clients: usize,
    pub config_digest: String,
}

#[derive(Clone, Debug)]
enum Event {
    Tick,
    Announce(usize),
    Transfer(TransferId),
    Submit(usize),
    Admit(JobId),
    ExecDone(JobId),
    Send(JobId),
    Expire(usize, WorkflowId),
    SetEnergy(usize, f64),
}

#[derive(Clone, Debug)]
enum Stage {
    Pending,
    Running { def: ServiceDefinition, plan: ExecutionPlan },
    Forward,
    Retry,
    Error { to: NodeAddress },
}

#[derive(Clone, Debug)]
struct Job {
    node: usize,
    archive: Archive,
    stage: Stage,
}

impl Job {
    fn workflow(&self) -> WorkflowId {
        self.archive.description.id
    }
}

struct Node {
    addr: NodeAddress,
    store: BundleStore,
    offers: OfferDatabase,
    worker: Option<WorkerState>,
    client: ClientState,
    rng: ChaCha8Rng,
    ids: BundleIdGen,
    cleaned: BTreeSet<WorkflowId>,
    handled: BTreeSet<BundleId>,
    dispatched: BTreeSet<WorkflowId>,
    offer_bundles: BTreeMap<NodeAddress, BundleId>,
}

impl Replica for Node {
    fn holds(&self, id: &BundleId) -> bool {
        self.store.contains(id)
    }

    fn offerable(&self, now: f64) -> Vec<&Bundle> {
        self.store.live(now).collect()
    }

    fn wants(&self, b: &Bundle, now: f64) -> bool {
        if b.is_expired(now) {
            return false;
        }
        match b.kind {
            BundleKind::Offer => b.source != self.addr && self.offers.newest_from(b.source).is_none_or(|t| b.created_at > t),
            BundleKind::CleanupMarker => true,
            _ => b.workflow.is_none_or(|w| !self.cleaned.contains(&w)),
        }
    }
}

fn rng_stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((purpose << 32) | index);
    r
}

const STREAM_NODE: u64 = 1;
const STREAM_MOBILITY: u64 = 2;
const STREAM_WORLD: u64 = 3;

fn marker_payload(wf: WorkflowId) -> Bytes {
    let mut v = Vec::with_capacity(12);
    v.extend_from_slice(&wf.client.0.to_le_bytes());
    v.extend_from_slice(&wf.seq.to_le_bytes());
    Bytes::from(v)
}

fn marker_workflow(payload: &[u8]) -> Option<WorkflowId> {
    let client = u64::from_le_bytes(payload.get(..8)?.try_into().ok()?);
    let seq = u32::from_le_bytes(payload.get(8..12)?.try_into().ok()?);
    Some(WorkflowId { client: NodeAddress(client), seq })
}

/// Synthetic file content of `len` bytes.
fn blank(len: u64) -> Bytes {
    Bytes::from(vec![0u8; len as usize])
}

pub struct World {
    cfg: SimConfig,
    metric: DistanceMetric,
    net: Network,
    nodes: Vec<Node>,
    mobility: Vec<ChaCha8Rng>,
    queue: EventQueue<Event>,
    tracker: Tracker,
    submissions: Vec<Submission>,
    submitted: usize,
    jobs: BTreeMap<JobId, Job>,
    next_job: JobId,
    stop_at: f64,
    mobile: bool,
}

impl World {
    pub fn new(cfg: SimConfig, layout: Layout, setups: Vec<NodeSetup>, submissions: Vec<Submission>) -> World {
        let n = layout.node_count();
        assert_eq!(setups.len(), n, "one setup per node");
        let metric = layout.distance_metric();
        let mut mobility: Vec<ChaCha8Rng> = (0..n as u64).map(|i| rng_stream(cfg.seed, STREAM_MOBILITY, i)).collect();
        let mobile = matches!(layout, Layout::Waypoint { .. });
        let mut net = match layout {
            Layout::Ring { nodes, spacing_m } => {
                let positions = (0..nodes).map(|i| Position::new(i as f64 * spacing_m, 0.0)).collect();
                Network::new_static(positions, ContactModel::ring(nodes), cfg.link)
            }
            Layout::Static { positions, contacts } => Network::new_static(positions, contacts, cfg.link),
            Layout::Waypoint { nodes, params, range_m } => {
                let walkers = (0..nodes).map(|i| Walker::spawn(&params, &mut mobility[i])).collect();
                Network::new_mobile(walkers, params, range_m, cfg.link)
            }
        };
        net.refresh_contacts();
        let nodes: Vec<Node> = setups
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let addr = NodeAddress(i as u64);
                let mut caps = s.caps;
                caps.position = net.position(i);
                Node {
                    addr,
                    store: BundleStore::new(),
                    offers: OfferDatabase::new(cfg.offer_expiry_s),
                    worker: s.worker.then(|| WorkerState::new(addr, s.services, caps)),
                    client: ClientState::new(addr),
                    rng: rng_stream(cfg.seed, STREAM_NODE, i as u64),
                    ids: BundleIdGen::new(addr),
                    cleaned: BTreeSet::new(),
                    handled: BTreeSet::new(),
                    dispatched: BTreeSet::new(),
                    offer_bundles: BTreeMap::new(),
                }
            })
            .collect();

        let mut queue = EventQueue::new();
        let mut world_rng = rng_stream(cfg.seed, STREAM_WORLD, 0);
        for (i, node) in nodes.iter().enumerate() {
            let phase = if cfg.announce_jitter_s > 0.0 { world_rng.random_range(0.0..cfg.announce_jitter_s) } else { 0.0 };
            if node.worker.is_some() {
                queue.push(phase, Event::Announce(i));
            }
        }
        for (k, s) in submissions.iter().enumerate() {
            queue.push(s.at, Event::Submit(k));
        }
        queue.push(cfg.tick_s, Event::Tick);
        let stop_at = cfg.duration_s;
        World {
            tracker: Tracker::new(n),
            cfg,
            metric,
            net,
            nodes,
            mobility,
            queue,
            submissions,
            submitted: 0,
            jobs: BTreeMap::new(),
            next_job: 0,
            stop_at,
            mobile,
        }
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn store(&self, node: usize) -> &BundleStore {
        &self.nodes[node].store
    }

    pub fn client(&self, node: usize) -> &ClientState {
        &self.nodes[node].client
    }

    pub fn worker(&self, node: usize) -> Option<&WorkerState> {
        self.nodes[node].worker.as_ref()
    }

    pub fn offers(&self, node: usize) -> &OfferDatabase {
        &self.nodes[node].offers
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Overrides a worker's live energy at `at`, as if drained externally.
    pub fn schedule_energy(&mut self, at: f64, node: usize, energy: f64) {
        self.queue.push(at, Event::SetEnergy(node, energy));
    }

    /// Runs until every workflow is settled and the drain period is over, or
    /// the duration cap is hit.
    pub fn run(&mut self) {
        self.run_until(f64::INFINITY);
    }

    pub fn run_until(&mut self, limit: f64) {
        while let Some(t) = self.queue.peek_time() {
            if t > self.stop_at || t > limit {
                break;
            }
            let (now, ev) = self.queue.pop().expect("peeked");
            self.handle(now, ev);
        }
    }

    pub fn ended_at(&self) -> f64 {
        self.stop_at.min(self.queue.peek_time().unwrap_or(self.stop_at)).max(self.now())
    }

    pub fn into_report(mut self, label: RunLabel) -> ExperimentReport {
        let end = self.ended_at();
        let residue = self.cleanup_residue();
        ExperimentReport {
            scenario: label.scenario,
            seed: self.cfg.seed,
            strategy: self.cfg.strategy,
            clients: label.clients,
            config_digest: label.config_digest,
            ended_at: end,
            workflows: self.tracker.records(end),
            load_matrix: self.tracker.load_matrix().to_vec(),
            rank_matrix: self.tracker.rank_matrix().to_vec(),
            residual_energy: self.nodes.iter().map(|n| n.worker.as_ref().map_or(0.0, |w| w.caps.energy)).collect(),
            network: self.net.counters.clone(),
            expired_drops: self.tracker.expired_drops,
            late_execution_starts: self.tracker.late_execution_starts,
            malformed_archives: self.tracker.malformed_archives,
            cleanup_residue: residue,
        }
    }

    /// Bundles and in-progress archives of terminal workflows still held anywhere.
    pub fn cleanup_residue(&self) -> u64 {
        let terminal: BTreeSet<WorkflowId> = self
            .nodes
            .iter()
            .flat_map(|n| n.client.handles())
            .filter(|h| h.status.is_terminal())
            .map(|h| h.workflow)
            .collect();
        let stored = self
            .nodes
            .iter()
            .flat_map(|n| n.store.iter())
            .filter(|b| b.workflow.is_some_and(|w| terminal.contains(&w)))
            .count();
        let held = self.jobs.values().filter(|j| terminal.contains(&j.workflow())).count();
        (stored + held) as u64
    }

    fn handle(&mut self, now: f64, ev: Event) {
        match ev {
            Event::Tick => self.on_tick(now),
            Event::Announce(i) => self.on_announce(i, now),
            Event::Transfer(id) => self.on_transfer(id, now),
            Event::Submit(k) => self.on_submit(k, now),
            Event::Admit(j) => self.on_admit(j, now),
            Event::ExecDone(j) => self.on_exec_done(j, now),
            Event::Send(j) => self.on_send(j, now),
            Event::Expire(i, wf) => self.on_expire(i, wf, now),
            Event::SetEnergy(i, e) => {
                if let Some(w) = &mut self.nodes[i].worker {
                    w.caps.energy = e.max(0.0);
                }
            }
        }
    }

    fn settle_check(&mut self, now: f64) {
        if self.submitted == self.submissions.len() && self.tracker.all_closed() {
            self.stop_at = self.stop_at.min(now + self.cfg.drain_s);
        }
    }

    fn sync_pair(&mut self, a: usize, b: usize, now: f64) {
        let started = self.net.epidemic_sync((a, &self.nodes[a]), (b, &self.nodes[b]), now);
        for (id, at) in started {
            self.queue.push(at, Event::Transfer(id));
        }
    }

    fn sync_node(&mut self, i: usize, now: f64) {
        for j in 0..self.nodes.len() {
            if j != i && self.net.in_contact(i, j) {
                self.sync_pair(i, j, now);
            }
        }
    }

    fn on_tick(&mut self, now: f64) {
        if self.mobile {
            self.net.move_nodes(self.cfg.tick_s, &mut self.mobility);
        }
        for (a, b) in self.net.refresh_contacts() {
            self.sync_pair(a, b, now);
        }
        for n in &mut self.nodes {
            n.store.prune_expired(now);
        }
        self.queue.push(now + self.cfg.tick_s, Event::Tick);
    }

    fn on_announce(&mut self, i: usize, now: f64) {
        let pos = self.net.position(i);
        let expiry = self.cfg.offer_expiry_s;
        let node = &mut self.nodes[i];
        let Some(worker) = &mut node.worker else { return };
        worker.caps.position = pos;
        let id = node.ids.next_id();
        if let Some(b) = broadcast_offers(id, &worker.caps, worker.offers(), now, expiry) {
            if let Some(old) = node.offer_bundles.insert(node.addr, id) {
                node.store.remove(&old);
            }
            node.store.insert(b);
            self.sync_node(i, now);
        }
        self.queue.push(now + self.cfg.announce_interval_s, Event::Announce(i));
    }

    fn on_transfer(&mut self, id: TransferId, now: f64) {
        let Some(t) = self.net.finish(id) else { return };
        let node = &mut self.nodes[t.to];
        if node.store.contains(&t.bundle.id) || !node.wants(&t.bundle, now) {
            return;
        }
        node.store.insert(t.bundle.clone());
        self.deliver(t.to, t.bundle, now);
        self.sync_node(t.to, now);
    }

    fn deliver(&mut self, i: usize, bundle: Bundle, now: f64) {
        let node = &mut self.nodes[i];
        match bundle.kind {
            BundleKind::Offer => {
                if let Some(old) = node.offer_bundles.insert(bundle.source, bundle.id) {
                    if old != bundle.id {
                        node.store.remove(&old);
                    }
                }
                // malformed offers are counted by the database itself
                let _ = node.offers.ingest(&bundle, now);
            }
            BundleKind::CleanupMarker => {
                if let Some(wf) = marker_workflow(&bundle.payload) {
                    self.clean(i, wf);
                }
            }
            _ => {
                let Some(wf) = bundle.workflow else { return };
                if node.cleaned.contains(&wf) {
                    node.store.remove(&bundle.id);
                    return;
                }
                if bundle.destination != Some(node.addr) || !node.handled.insert(bundle.id) {
                    return;
                }
                let archive = match unpack(bundle.payload.clone()) {
                    Ok(a) => a,
                    Err(_) => {
                        self.tracker.malformed_archives += 1;
                        return;
                    }
                };
                match bundle.kind {
                    BundleKind::WorkflowArchive => self.on_archive(i, archive, now),
                    _ => self.on_reply(i, bundle.kind, bundle.source, archive, now),
                }
            }
        }
    }

    fn new_job(&mut self, job: Job) -> JobId {
        let id = self.next_job;
        self.next_job += 1;
        self.jobs.insert(id, job);
        id
    }

    fn on_submit(&mut self, k: usize, now: f64) {
        self.submitted += 1;
        let s = &self.submissions[k];
        let (i, input_bytes) = (s.client, s.input_bytes);
        let ttl = s.plan.ttl_seconds.unwrap_or(self.cfg.default_ttl_s);
        let wf = self.nodes[i].client.open(now, ttl);
        let desc = s.plan.instantiate(wf, now, ttl);
        let n_tasks = desc.tasks.len();
        let input_name = desc.tasks[0].params.first().cloned().unwrap_or_else(|| "input".into());
        let mut archive = Archive::new(desc);
        archive.files.insert(input_name, blank(input_bytes));
        self.tracker.submit(wf, i, n_tasks, now);
        self.queue.push(now + ttl, Event::Expire(i, wf));
        let job = self.new_job(Job { node: i, archive, stage: Stage::Forward });
        self.queue.push(now + self.cfg.postprocess_s, Event::Send(job));
    }

    fn on_archive(&mut self, i: usize, archive: Archive, now: f64) {
        let wf = archive.description.id;
        self.tracker.enter(wf, Phase::Runtime, archive.description.cursor, now);
        let job = self.new_job(Job { node: i, archive, stage: Stage::Pending });
        self.queue.push(now + self.cfg.preprocess_s, Event::Admit(job));
    }

    fn on_admit(&mut self, j: JobId, now: f64) {
        let Some(mut job) = self.jobs.remove(&j) else { return };
        let node = &mut self.nodes[job.node];
        if node.cleaned.contains(&job.workflow()) {
            return;
        }
        let admission = match &node.worker {
            Some(w) => w.admit(&job.archive, now),
            None if job.archive.description.is_expired(now) => Admission::Expired,
            None => Admission::Rejected(WorkerError {
                class: ErrorClass::WorkerCalling,
                message: format!("node {} is not a worker", node.addr),
                task_index: job.archive.description.cursor,
                retried: job.archive.route.retried,
            }),
        };
        match admission {
            Admission::Expired => self.tracker.expired_drops += 1,
            Admission::Rejected(e) => {
                let d = &job.archive.description;
                let to = error_destination(d.current(), &job.archive.route, &e, d.client);
                job.archive.error_log = Some(format!("{e}\n"));
                job.archive.error = Some(e);
                job.stage = Stage::Error { to };
                self.jobs.insert(j, job);
                self.queue.push(now + self.cfg.postprocess_s, Event::Send(j));
            }
            Admission::Accepted => {
                self.jobs.insert(j, job);
                let worker = self.nodes[self.jobs[&j].node].worker.as_mut().expect("admitted by a worker");
                if worker.enqueue(j) {
                    self.start_exec(j, now);
                }
            }
        }
    }

    /// Starts `j` or, if it is no longer runnable, the next runnable job in
    /// the same worker's queue.
    fn start_exec(&mut self, mut j: JobId, now: f64) {
        loop {
            let job = self.jobs.get_mut(&j).expect("queued job exists");
            let i = job.node;
            let wf = job.archive.description.id;
            let node = &mut self.nodes[i];
            let worker = node.worker.as_mut().expect("queued on a worker");
            let runnable = !node.cleaned.contains(&wf) && !job.archive.description.is_expired(now);
            if runnable {
                let d = &job.archive.description;
                let def = d.current().and_then(|t| worker.services.get(&t.service)).cloned().expect("admitted task has a service");
                let plan = WorkerState::plan_execution(&def.profile, &mut node.rng);
                self.tracker.enter(wf, Phase::Execution, d.cursor, now);
                if d.deadline() < now {
                    self.tracker.late_execution_starts += 1;
                }
                let at = now + plan.duration_s;
                job.stage = Stage::Running { def, plan };
                self.queue.push(at, Event::ExecDone(j));
                return;
            }
            if job.archive.description.is_expired(now) {
                self.tracker.expired_drops += 1;
            }
            self.jobs.remove(&j);
            match worker.finish(j) {
                Some(next) => j = next,
                None => return,
            }
        }
    }

    fn on_exec_done(&mut self, j: JobId, now: f64) {
        let mut job = self.jobs.remove(&j).expect("running job exists");
        let i = job.node;
        let Stage::Running { def, plan } = std::mem::replace(&mut job.stage, Stage::Pending) else {
            unreachable!("exec completion for a job that is not running")
        };
        let wf = job.workflow();
        let cursor = job.archive.description.cursor;
        let node = &mut self.nodes[i];
        let worker = node.worker.as_mut().expect("job runs on a worker");
        worker.consume(&def.profile);
        let next = worker.finish(j);
        let me = node.addr;
        let cleaned = node.cleaned.contains(&wf);
        self.tracker.executed(wf, cursor);
        self.tracker.enter(wf, Phase::Runtime, cursor, now);
        if let Some(n) = next {
            self.start_exec(n, now);
        }
        if cleaned {
            return;
        }
        let a = &mut job.archive;
        if plan.fails {
            let e = WorkerError {
                class: ErrorClass::TaskExecution,
                message: format!("`{}` exited with status 1", def.name),
                task_index: cursor,
                retried: a.route.retried,
            };
            a.error_log = Some(format!("worker {me}: task {cursor} `{}` failed after {:.3} s\nsynthetic fault injected\n", def.name, plan.duration_s));
            let to = error_destination(a.description.current(), &a.route, &e, a.description.client);
            a.error = Some(e);
            job.stage = Stage::Error { to };
        } else {
            let name = result_file_name(cursor, &def.profile.output_ext);
            a.files = BTreeMap::from([(name.clone(), blank(def.profile.output_bytes))]);
            a.description.substitute_result(Some(&name)).expect("cursor is on a task");
            a.description.advance();
            job.stage = Stage::Forward;
        }
        let id = self.new_job(job);
        self.queue.push(now + self.cfg.postprocess_s, Event::Send(id));
    }

    fn on_reply(&mut self, i: usize, kind: BundleKind, from: NodeAddress, mut archive: Archive, now: f64) {
        let me = self.nodes[i].addr;
        let wf = archive.description.id;
        let client = archive.description.client;
        if kind == BundleKind::ErrorArchive && archive.route.prior == Some(me) {
            if let RetryAction::Reselect { exclude } = retry_action(&archive, from) {
                self.tracker.enter(wf, Phase::Runtime, archive.description.cursor, now);
                archive.error = None;
                archive.error_log = None;
                archive.route.excluded = exclude;
                let job = self.new_job(Job { node: i, archive, stage: Stage::Retry });
                self.queue.push(now + self.cfg.postprocess_s, Event::Send(job));
                return;
            }
        }
        if me != client {
            return;
        }
        let status = match kind {
            BundleKind::ResultArchive => {
                let result = archive.files.keys().next().cloned().unwrap_or_default();
                HandleStatus::Succeeded { result }
            }
            _ => {
                let error = archive.error.clone().unwrap_or(WorkerError {
                    class: ErrorClass::TaskExecution,
                    message: "error archive without error record".into(),
                    task_index: archive.description.cursor,
                    retried: false,
                });
                HandleStatus::Failed { error, log: archive.error_log.clone() }
            }
        };
        self.resolve(i, wf, status, now);
    }

    fn resolve(&mut self, i: usize, wf: WorkflowId, status: HandleStatus, now: f64) {
        let tracked = status.clone();
        if !self.nodes[i].client.resolve(wf, status, now) {
            return;
        }
        match tracked {
            HandleStatus::Succeeded { .. } => self.tracker.succeed(wf, now),
            HandleStatus::Failed { error, log } => self.tracker.fail(wf, now, error.to_string(), log),
            HandleStatus::TimedOut => self.tracker.time_out(wf, now),
            HandleStatus::Pending => unreachable!("resolve takes terminal states"),
        }
        self.broadcast_cleanup(i, wf, now);
        self.settle_check(now);
    }

    fn on_expire(&mut self, i: usize, wf: WorkflowId, now: f64) {
        if self.nodes[i].client.handle(wf).is_some_and(|h| !h.status.is_terminal()) {
            self.resolve(i, wf, HandleStatus::TimedOut, now);
        }
    }

    fn broadcast_cleanup(&mut self, i: usize, wf: WorkflowId, now: f64) {
        self.clean(i, wf);
        let node = &mut self.nodes[i];
        if !node.dispatched.contains(&wf) {
            return;
        }
        let ttl = node.client.handle(wf).map_or(self.cfg.default_ttl_s, |h| h.ttl_seconds);
        let id = node.ids.next_id();
        node.store.insert(Bundle {
            id,
            source: node.addr,
            destination: None,
            kind: BundleKind::CleanupMarker,
            workflow: None,
            payload: marker_payload(wf),
            created_at: now,
            ttl_seconds: ttl,
        });
        self.sync_node(i, now);
    }

    /// Drops every trace of `wf` held by node `i`.
    fn clean(&mut self, i: usize, wf: WorkflowId) {
        let node = &mut self.nodes[i];
        node.cleaned.insert(wf);
        node.store.remove_workflow(wf);
        let stale: Vec<JobId> = self.jobs.iter().filter(|(_, j)| j.node == i && j.workflow() == wf).map(|(id, _)| *id).collect();
        for id in stale {
            let running = matches!(self.jobs[&id].stage, Stage::Running { .. });
            let queued = node.worker.as_mut().is_some_and(|w| w.cancel_queued(id));
            // a running execution finishes and is discarded; anything else goes now
            if !running || queued {
                self.jobs.remove(&id);
            }
        }
    }

    fn on_send(&mut self, j: JobId, now: f64) {
        let Some(mut job) = self.jobs.remove(&j) else { return };
        let i = job.node;
        let wf = job.workflow();
        if self.nodes[i].cleaned.contains(&wf) {
            return;
        }
        if job.archive.description.is_expired(now) {
            self.tracker.expired_drops += 1;
            return;
        }
        let me = self.nodes[i].addr;
        let client = job.archive.description.client;
        let (kind, to) = match job.stage {
            Stage::Error { to } => (BundleKind::ErrorArchive, to),
            Stage::Forward | Stage::Retry => {
                let retry = matches!(job.stage, Stage::Retry);
                let a = &mut job.archive;
                if a.description.current().is_none() {
                    (BundleKind::ResultArchive, client)
                } else {
                    if retry {
                        a.route.prior = Some(me);
                        a.route.retried = true;
                    } else {
                        a.route = Route { prior: Some(me), retried: false, excluded: Vec::new() };
                    }
                    match self.resolve_worker(i, &job.archive, retry, now) {
                        Ok(w) => (BundleKind::WorkflowArchive, w),
                        Err(e) => {
                            job.archive.error_log = Some(format!("{e}\n"));
                            job.archive.error = Some(e);
                            (BundleKind::ErrorArchive, client)
                        }
                    }
                }
            }
            Stage::Pending | Stage::Running { .. } => unreachable!("send on a job that is not ready"),
        };
        let slot = if to == client && kind != BundleKind::WorkflowArchive {
            self.tracker.return_slot(wf)
        } else {
            job.archive.description.cursor
        };
        self.tracker.enter(wf, Phase::Transmission, slot, now);
        let deadline = job.archive.description.deadline();
        let node = &mut self.nodes[i];
        let bundle = Bundle {
            id: node.ids.next_id(),
            source: me,
            destination: Some(to),
            kind,
            workflow: Some(wf),
            payload: pack(&job.archive),
            created_at: now,
            ttl_seconds: deadline - now,
        };
        if to == me {
            self.tracker.enter(wf, Phase::Runtime, slot, now);
            self.deliver(i, bundle, now);
            return;
        }
        node.dispatched.insert(wf);
        node.store.insert(bundle);
        self.sync_node(i, now);
    }

    /// Picks the node for the archive's current task as seen from node `i`.
    fn resolve_worker(&mut self, i: usize, archive: &Archive, retry: bool, now: f64) -> Result<NodeAddress, WorkerError> {
        let d = &archive.description;
        let task = d.current().expect("caller checked");
        if let WorkerSpec::AheadOfTime(a) = task.worker {
            self.tracker.assignment(d.id, Assignment { task_index: d.cursor, caller: i, worker: a.index(), rank: None, retry });
            return Ok(a);
        }
        let origin = self.net.position(i);
        let node = &mut self.nodes[i];
        let mut exclude = archive.route.excluded.clone();
        exclude.push(node.addr);
        let offers = node.offers.lookup(&task.service, now);
        let ctx = AssignContext {
            origin,
            weights: &self.cfg.weights,
            metric: &self.metric,
            strategy: self.cfg.strategy,
            exclude: &exclude,
        };
        match assign(&task.service, &offers, &task.requirements, &ctx, &mut node.rng) {
            Ok(sel) => {
                self.tracker.assignment(
                    d.id,
                    Assignment { task_index: d.cursor, caller: i, worker: sel.worker.index(), rank: Some(sel.rank), retry },
                );
                Ok(sel.worker)
            }
            Err(e) => Err(WorkerError {
                class: ErrorClass::WorkerSelection,
                message: e.to_string(),
                task_index: d.cursor,
                retried: retry,
            }),
        }
    }
}
