//! Scenario files: schema, validation and construction of a [`World`].
//!
//! A scenario is TOML with the sections `[topology]`, `[link]`, `[services]`,
//! `[[cohorts]]`, `[workflow]` and `[run]`. Everything except `[topology]`,
//! `[services]`, `[[cohorts]]` and `[workflow]` has defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::announce::CapabilityVector;
use crate::assignment::{RatingWeights, Strategy};
use crate::simnet::{LinkModel, Position, WaypointParams};
use crate::sim::{Layout, NodeSetup, RunLabel, SimConfig, Submission, World};
use crate::worker::{ServiceDefinition, SyntheticProfile};
use crate::workflow::{self, WorkerSpec, WorkflowPlan};
use crate::ExperimentReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyConfig {
    Ring {
        nodes: usize,
        #[serde(default = "default_spacing")]
        spacing_m: f64,
    },
    Waypoint {
        nodes: usize,
        #[serde(default = "default_area")]
        area_width_m: f64,
        #[serde(default = "default_area")]
        area_height_m: f64,
        #[serde(default = "default_speed_min")]
        speed_min_mps: f64,
        #[serde(default = "default_speed_max")]
        speed_max_mps: f64,
        #[serde(default = "default_pause")]
        pause_max_s: f64,
        #[serde(default = "default_range")]
        range_m: f64,
    },
}

fn default_spacing() -> f64 {
    100.0
}
fn default_area() -> f64 {
    1304.0
}
fn default_speed_min() -> f64 {
    0.8
}
fn default_speed_max() -> f64 {
    1.9
}
fn default_pause() -> f64 {
    60.0
}
fn default_range() -> f64 {
    40.0
}

impl TopologyConfig {
    pub fn nodes(&self) -> usize {
        match self {
            TopologyConfig::Ring { nodes, .. } | TopologyConfig::Waypoint { nodes, .. } => *nodes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub bandwidth_bps: f64,
    pub latency_s: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        let l = LinkModel::default();
        LinkConfig { bandwidth_bps: l.bandwidth_bps, latency_s: l.latency_s }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "one")]
    pub params: u32,
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

fn one() -> u32 {
    1
}
fn default_ext() -> String {
    "bin".into()
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub name: String,
    pub count: Option<usize>,
    pub fraction: Option<f64>,
    pub cpu: f64,
    pub memory: f64,
    pub disk: f64,
    pub energy: f64,
    /// Services offered; all catalog services when absent.
    pub services: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub worker: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowConfig {
    /// Workflow description file, relative to the scenario file.
    pub file: Option<PathBuf>,
    /// Inline workflow description; wins over `file`.
    pub text: Option<String>,
    #[serde(default)]
    pub input_bytes: u64,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Explicit client nodes; defaults to nodes `0..clients`.
    pub client_nodes: Option<Vec<usize>>,
    #[serde(default = "default_submit_at")]
    pub submit_at_s: f64,
    #[serde(default = "default_ttl")]
    pub ttl_s: f64,
}

fn default_clients() -> usize {
    1
}
fn default_submit_at() -> f64 {
    10.0
}
fn default_ttl() -> f64 {
    1800.0
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Cohorts are dealt to a seed-shuffled node order.
    Shuffled,
    /// Cohorts are dealt to nodes in index order.
    Ordered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: Strategy,
    pub duration_s: f64,
    pub drain_s: f64,
    pub tick_s: f64,
    pub announce_interval_s: f64,
    pub announce_jitter_s: f64,
    pub offer_expiry_s: f64,
    pub preprocess_s: f64,
    pub postprocess_s: f64,
    pub placement: Placement,
    pub weights: RatingWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SimConfig::default();
        RunConfig {
            seed: 1,
            strategy: s.strategy,
            duration_s: s.duration_s,
            drain_s: s.drain_s,
            tick_s: s.tick_s,
            announce_interval_s: s.announce_interval_s,
            announce_jitter_s: s.announce_jitter_s,
            offer_expiry_s: s.offer_expiry_s,
            preprocess_s: s.preprocess_s,
            postprocess_s: s.postprocess_s,
            placement: Placement::Shuffled,
            weights: RatingWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub link: LinkConfig,
    pub services: BTreeMap<String, ServiceConfig>,
    pub cohorts: Vec<CohortConfig>,
    pub workflow: WorkflowConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("invalid scenario `{name}`:\n  - {}", .problems.join("\n  - "))]
    Invalid { name: String, problems: Vec<String> },
}

/// A scenario with its workflow text resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub workflow_text: String,
}

impl Scenario {
    pub fn from_file(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// `base` resolves a relative `workflow.file`; `origin` only labels errors.
    pub fn from_toml(text: &str, base: &Path, origin: &Path) -> Result<Scenario, ScenarioError> {
        let config: ScenarioConfig =
            toml::from_str(text).map_err(|e| ScenarioError::Syntax { path: origin.into(), message: e.to_string() })?;
        let workflow_text = match (&config.workflow.text, &config.workflow.file) {
            (Some(t), _) => t.clone(),
            (None, Some(f)) => {
                let p = base.join(f);
                std::fs::read_to_string(&p).map_err(|source| ScenarioError::Io { path: p, source })?
            }
            (None, None) => String::new(),
        };
        let s = Scenario { config, workflow_text };
        s.validate()?;
        Ok(s)
    }

    pub fn from_config(config: ScenarioConfig, workflow_text: String) -> Result<Scenario, ScenarioError> {
        let s = Scenario { config, workflow_text };
        s.validate()?;
        Ok(s)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.run.seed = seed;
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.config.run.strategy = strategy;
        self
    }

    pub fn with_clients(mut self, clients: usize) -> Self {
        self.config.workflow.clients = clients;
        self.config.workflow.client_nodes = None;
        self
    }

    pub fn with_workflow_text(mut self, text: String) -> Self {
        self.workflow_text = text;
        self.config.workflow.text = None;
        self
    }

    pub fn plan(&self) -> Result<WorkflowPlan, workflow::ParseError> {
        workflow::parse(&self.workflow_text)
    }

    pub fn client_nodes(&self) -> Vec<usize> {
        let w = &self.config.workflow;
        w.client_nodes.clone().unwrap_or_else(|| (0..w.clients).collect())
    }

    /// Lists every problem at once.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let c = &self.config;
        let mut p = Vec::new();
        let n = c.topology.nodes();
        match &c.topology {
            TopologyConfig::Ring { nodes, spacing_m } => {
                if *nodes < 3 {
                    p.push(format!("ring needs at least 3 nodes, got {nodes}"));
                }
                if !(*spacing_m > 0.0) {
                    p.push("topology.spacing_m must be positive".into());
                }
            }
            TopologyConfig::Waypoint { nodes, area_width_m, area_height_m, speed_min_mps, speed_max_mps, pause_max_s, range_m } => {
                if *nodes < 2 {
                    p.push(format!("waypoint topology needs at least 2 nodes, got {nodes}"));
                }
                if !(*area_width_m > 0.0 && *area_height_m > 0.0) {
                    p.push("topology area must be positive".into());
                }
                if !(*speed_min_mps > 0.0 && speed_max_mps >= speed_min_mps) {
                    p.push("topology speeds need 0 < speed_min_mps <= speed_max_mps".into());
                }
                if *pause_max_s < 0.0 {
                    p.push("topology.pause_max_s must not be negative".into());
                }
                if !(*range_m > 0.0) {
                    p.push("topology.range_m must be positive".into());
                }
            }
        }
        if !(c.link.bandwidth_bps > 0.0) || c.link.latency_s < 0.0 {
            p.push("link needs positive bandwidth_bps and non-negative latency_s".into());
        }
        for (name, s) in &c.services {
            if !(s.exec_mean_s > 0.0) {
                p.push(format!("service `{name}`: exec_mean_s must be positive"));
            }
            if s.exec_jitter_s < 0.0 || s.exec_jitter_s > s.exec_mean_s {
                p.push(format!("service `{name}`: exec_jitter_s must lie in [0, exec_mean_s]"));
            }
            if s.energy_cost < 0.0 {
                p.push(format!("service `{name}`: energy_cost must not be negative"));
            }
            if !(0.0..=1.0).contains(&s.failure_probability) {
                p.push(format!("service `{name}`: failure_probability must lie in [0, 1]"));
            }
            if name.len() > crate::announce::MAX_SERVICE_NAME_BYTES {
                p.push(format!("service `{name}`: name longer than {} bytes", crate::announce::MAX_SERVICE_NAME_BYTES));
            }
        }
        if c.cohorts.is_empty() {
            p.push("at least one cohort is required".into());
        }
        for k in &c.cohorts {
            match (k.count, k.fraction) {
                (Some(_), Some(_)) => p.push(format!("cohort `{}`: give count or fraction, not both", k.name)),
                (None, None) => p.push(format!("cohort `{}`: needs count or fraction", k.name)),
                (None, Some(f)) if !(0.0..=1.0).contains(&f) => p.push(format!("cohort `{}`: fraction must lie in [0, 1]", k.name)),
                _ => {}
            }
            if [k.cpu, k.memory, k.disk, k.energy].iter().any(|v| !(*v >= 0.0)) {
                p.push(format!("cohort `{}`: capabilities must be non-negative", k.name));
            }
            for s in k.services.iter().flatten() {
                if !c.services.contains_key(s) {
                    p.push(format!("cohort `{}`: unknown service `{s}`", k.name));
                }
            }
        }
        let counts: Vec<_> = c.cohorts.iter().map(|k| k.count).collect();
        let fractions: Vec<_> = c.cohorts.iter().map(|k| k.fraction).collect();
        if counts.iter().all(Option::is_some) && !counts.is_empty() {
            let total: usize = counts.iter().flatten().sum();
            if total != n {
                p.push(format!("cohort counts sum to {total}, but there are {n} nodes"));
            }
        } else if fractions.iter().all(Option::is_some) && !fractions.is_empty() {
            let total: f64 = fractions.iter().flatten().sum();
            if (total - 1.0).abs() > 1e-6 {
                p.push(format!("cohort fractions sum to {total}, expected 1"));
            }
        } else if !c.cohorts.is_empty() {
            p.push("cohorts must all use count or all use fraction".into());
        }
        let clients = self.client_nodes();
        if clients.is_empty() {
            p.push("workflow needs at least one client".into());
        }
        if let Some(bad) = clients.iter().find(|&&i| i >= n) {
            p.push(format!("client node {bad} does not exist ({n} nodes)"));
        }
        let mut sorted = clients.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != clients.len() {
            p.push("client nodes must be distinct".into());
        }
        if c.workflow.submit_at_s < 0.0 || !(c.workflow.ttl_s > 0.0) {
            p.push("workflow needs submit_at_s >= 0 and ttl_s > 0".into());
        }
        if c.workflow.text.is_none() && c.workflow.file.is_none() {
            p.push("workflow needs `file` or `text`".into());
        } else {
            match self.plan() {
                Err(e) => p.push(format!("workflow: {e}")),
                Ok(plan) => {
                    for (i, t) in plan.tasks.iter().enumerate() {
                        if !c.services.contains_key(&t.service) {
                            p.push(format!("workflow task {i}: service `{}` is not defined", t.service));
                        }
                        if let WorkerSpec::AheadOfTime(a) = t.worker {
                            if a.index() >= n {
                                p.push(format!("workflow task {i}: worker {a} does not exist"));
                            }
                        }
                    }
                }
            }
        }
        let r = &c.run;
        if let Err(e) = r.weights.validate() {
            p.push(format!("run.weights: {e}"));
        }
        for (what, v) in [
            ("duration_s", r.duration_s),
            ("tick_s", r.tick_s),
            ("announce_interval_s", r.announce_interval_s),
            ("offer_expiry_s", r.offer_expiry_s),
        ] {
            if !(v > 0.0) {
                p.push(format!("run.{what} must be positive"));
            }
        }
        for (what, v) in [
            ("drain_s", r.drain_s),
            ("announce_jitter_s", r.announce_jitter_s),
            ("preprocess_s", r.preprocess_s),
            ("postprocess_s", r.postprocess_s),
        ] {
            if !(v >= 0.0) {
                p.push(format!("run.{what} must not be negative"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid { name: c.name.clone(), problems: p })
        }
    }

    /// Hex SHA-256 over the canonical JSON of the config plus the workflow text.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update([0u8]);
        h.update(self.workflow_text.as_bytes());
        hex::encode(h.finalize())
    }

    /// Node index → cohort index, realised exactly and reproducibly from the seed.
    pub fn cohort_assignment(&self) -> Vec<usize> {
        let c = &self.config;
        let n = c.topology.nodes();
        let counts = cohort_counts(&c.cohorts, n);
        let mut order: Vec<usize> = (0..n).collect();
        if c.run.placement == Placement::Shuffled {
            let mut rng = ChaCha8Rng::seed_from_u64(c.run.seed);
            rng.set_stream(0xC0_4027);
            order.shuffle(&mut rng);
        }
        let mut out = vec![0; n];
        let mut slots = order.into_iter();
        for (k, count) in counts.into_iter().enumerate() {
            for node in slots.by_ref().take(count) {
                out[node] = k;
            }
        }
        out
    }

    pub fn build(&self) -> World {
        let c = &self.config;
        let n = c.topology.nodes();
        let catalog: BTreeMap<&str, ServiceDefinition> = c
            .services
            .iter()
            .map(|(name, s)| {
                let def = ServiceDefinition {
                    name: name.clone(),
                    param_count: s.params,
                    profile: SyntheticProfile {
                        exec_mean_s: s.exec_mean_s,
                        exec_jitter_s: s.exec_jitter_s,
                        output_bytes: s.output_bytes,
                        output_ext: s.output_ext.clone(),
                        energy_cost: s.energy_cost,
                        failure_probability: s.failure_probability,
                    },
                };
                (name.as_str(), def)
            })
            .collect();
        let cohorts = self.cohort_assignment();
        let setups = (0..n)
            .map(|i| {
                let k = &c.cohorts[cohorts[i]];
                let services = match &k.services {
                    Some(list) => list.iter().map(|s| catalog[s.as_str()].clone()).collect(),
                    None => catalog.values().cloned().collect(),
                };
                NodeSetup {
                    caps: CapabilityVector { cpu: k.cpu, memory: k.memory, disk: k.disk, energy: k.energy, position: Position::default() },
                    services,
                    worker: k.worker,
                }
            })
            .collect();
        let layout = match c.topology {
            TopologyConfig::Ring { nodes, spacing_m } => Layout::Ring { nodes, spacing_m },
            TopologyConfig::Waypoint { nodes, area_width_m, area_height_m, speed_min_mps, speed_max_mps, pause_max_s, range_m } => {
                Layout::Waypoint {
                    nodes,
                    params: WaypointParams {
                        area_width: area_width_m,
                        area_height: area_height_m,
                        speed_min: speed_min_mps,
                        speed_max: speed_max_mps,
                        pause_max: pause_max_s,
                    },
                    range_m,
                }
            }
        };
        let plan = self.plan().expect("validated");
        let submissions = self
            .client_nodes()
            .into_iter()
            .map(|client| Submission { client, at: c.workflow.submit_at_s, plan: plan.clone(), input_bytes: c.workflow.input_bytes })
            .collect();
        let r = &c.run;
        let cfg = SimConfig {
            seed: r.seed,
            strategy: r.strategy,
            weights: r.weights,
            link: LinkModel { bandwidth_bps: c.link.bandwidth_bps, latency_s: c.link.latency_s },
            tick_s: r.tick_s,
            announce_interval_s: r.announce_interval_s,
            announce_jitter_s: r.announce_jitter_s,
            offer_expiry_s: r.offer_expiry_s,
            preprocess_s: r.preprocess_s,
            postprocess_s: r.postprocess_s,
            duration_s: r.duration_s,
            drain_s: r.drain_s,
            default_ttl_s: c.workflow.ttl_s,
        };
        World::new(cfg, layout, setups, submissions)
    }

    pub fn label(&self) -> RunLabel {
        RunLabel { scenario: self.config.name.clone(), clients: self.client_nodes().len(), config_digest: self.digest() }
    }

    pub fn run(&self) -> ExperimentReport {
        let mut world = self.build();
        world.run();
        world.into_report(self.label())
    }
}

/// Realises cohort sizes. Explicit counts are taken as-is. Fractions are
/// rounded half-up; if the rounded sizes miss the node count, the difference
/// is settled one node at a time on the cohorts whose exact share was rounded
/// the most in the wrong direction (earlier cohorts first on ties).
pub fn cohort_counts(cohorts: &[CohortConfig], nodes: usize) -> Vec<usize> {
    if cohorts.iter().all(|k| k.count.is_some()) {
        return cohorts.iter().map(|k| k.count.unwrap_or(0)).collect();
    }
    let exact: Vec<f64> = cohorts.iter().map(|k| k.fraction.unwrap_or(0.0) * nodes as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| (x + 0.5 + 1e-9).floor() as usize).collect();
    let mut total: usize = counts.iter().sum();
    while total != nodes {
        // error = rounded - exact; shrink the most over-rounded, grow the most under-rounded
        let err = |i: usize, c: &[usize]| c[i] as f64 - exact[i];
        let pick = if total > nodes {
            (0..counts.len()).filter(|&i| counts[i] > 0).max_by(|&a, &b| err(a, &counts).total_cmp(&err(b, &counts)).then(b.cmp(&a)))
        } else {
            (0..counts.len()).min_by(|&a, &b| err(a, &counts).total_cmp(&err(b, &counts)).then(a.cmp(&b)))
        };
        let Some(i) = pick else { break };
        if total > nodes {
            counts[i] -= 1;
            total -= 1;
        } else {
            counts[i] += 1;
            total += 1;
        }
    }
    counts
}
