//! Suites of runs and the tables aggregated from their reports.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::Strategy;
use crate::metrics::{ExperimentReport, FinalState};
use crate::scenario::{Scenario, ScenarioError};

/// A matrix of scenarios × client counts × strategies × seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub name: String,
    /// Scenario files, relative to the suite file.
    #[serde(default)]
    pub scenarios: Vec<PathBuf>,
    /// Explicit seeds; otherwise `seed_start..seed_start + seed_count`.
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "one")]
    pub seed_count: u64,
    #[serde(default = "one")]
    pub seed_start: u64,
    /// Defaults to all four.
    pub strategies: Option<Vec<Strategy>>,
    /// Client counts to sweep; each scenario's own setting when empty.
    #[serde(default)]
    pub clients: Vec<usize>,
}

fn one() -> u64 {
    1
}

impl SuiteConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| (self.seed_start..self.seed_start + self.seed_count).collect())
    }

    pub fn strategy_list(&self) -> Vec<Strategy> {
        self.strategies.clone().unwrap_or_else(|| Strategy::ALL.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub name: String,
    pub scenarios: Vec<Scenario>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub clients: Vec<usize>,
}

impl Suite {
    pub fn from_file(path: &Path) -> Result<Suite, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        let cfg: SuiteConfig =
            toml::from_str(&text).map_err(|e| ScenarioError::Syntax { path: path.into(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let scenarios = cfg.scenarios.iter().map(|p| Scenario::from_file(&base.join(p))).collect::<Result<Vec<_>, _>>()?;
        Ok(Suite { name: cfg.name.clone(), scenarios, seeds: cfg.seed_list(), strategies: cfg.strategy_list(), clients: cfg.clients })
    }

    /// Expands the matrix in a fixed order: scenario, clients, strategy, seed.
    pub fn jobs(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for s in &self.scenarios {
            let clients: Vec<Option<usize>> =
                if self.clients.is_empty() { vec![None] } else { self.clients.iter().copied().map(Some).collect() };
            for c in clients {
                for &strategy in &self.strategies {
                    for &seed in &self.seeds {
                        let mut job = s.clone().with_strategy(strategy).with_seed(seed);
                        if let Some(c) = c {
                            job = job.with_clients(c);
                        }
                        out.push(job);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub scenario: String,
    pub clients: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub reports: Vec<ExperimentReport>,
    pub failures: Vec<RunFailure>,
}

pub fn run_scenario(scenario: &Scenario) -> Result<ExperimentReport, ScenarioError> {
    scenario.validate()?;
    Ok(scenario.run())
}

/// Runs every job in parallel. Reports come back in job order; a job that
/// fails validation or panics is recorded and the rest carry on.
pub fn run_suite(name: &str, jobs: &[Scenario]) -> SuiteOutcome {
    let results: Vec<Result<ExperimentReport, RunFailure>> = jobs
        .par_iter()
        .map(|job| {
            let fail = |message: String| RunFailure {
                scenario: job.config.name.clone(),
                clients: job.client_nodes().len(),
                strategy: job.config.run.strategy,
                seed: job.config.run.seed,
                message,
            };
            match catch_unwind(AssertUnwindSafe(|| run_scenario(job))) {
                Ok(Ok(r)) => Ok(r),
                Ok(Err(e)) => Err(fail(e.to_string())),
                Err(panic) => Err(fail(panic_message(panic.as_ref()))),
            }
        })
        .collect();
    let mut out = SuiteOutcome { name: name.to_string(), ..Default::default() };
    for r in results {
        match r {
            Ok(r) => out.reports.push(r),
            Err(f) => out.failures.push(f),
        }
    }
    out
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "run panicked".into())
}

/// Hex SHA-256 over the canonical JSON of each report, in order.
pub fn suite_hash(reports: &[ExperimentReport]) -> String {
    let mut h = Sha256::new();
    for r in reports {
        h.update(serde_json::to_vec(r).expect("report serializes"));
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub scenario: String,
    pub clients: usize,
    pub strategy: Strategy,
}

impl GroupKey {
    pub fn of(r: &ExperimentReport) -> GroupKey {
        GroupKey { scenario: r.scenario.clone(), clients: r.clients, strategy: r.strategy }
    }
}

fn group(reports: &[ExperimentReport]) -> BTreeMap<GroupKey, Vec<&ExperimentReport>> {
    let mut m: BTreeMap<GroupKey, Vec<&ExperimentReport>> = BTreeMap::new();
    for r in reports {
        m.entry(GroupKey::of(r)).or_default().push(r);
    }
    m
}

/// Mean and sample standard deviation.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Stat { n, mean, std }
    }
}

/// Phase times over successful workflows. `transmission` counts the task
/// legs only; the way back to the client is `return_leg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub key: GroupKey,
    pub runs: usize,
    pub workflows: usize,
    pub successes: usize,
    pub execution: Stat,
    pub runtime: Stat,
    pub transmission: Stat,
    pub return_leg: Stat,
    pub total: Stat,
}

pub fn phase_summary(reports: &[ExperimentReport]) -> Vec<PhaseSummary> {
    group(reports)
        .into_iter()
        .map(|(key, rs)| {
            let ok: Vec<_> =
                rs.iter().flat_map(|r| &r.workflows).filter(|w| w.final_state == FinalState::Success).collect();
            let sum = |f: &dyn Fn(&crate::TaskPhases) -> f64| -> Vec<f64> {
                ok.iter().map(|w| w.task_phases().iter().map(f).sum()).collect()
            };
            PhaseSummary {
                runs: rs.len(),
                workflows: rs.iter().map(|r| r.workflows.len()).sum(),
                successes: ok.len(),
                execution: Stat::of(&sum(&|p| p.execution_s)),
                runtime: Stat::of(&sum(&|p| p.runtime_s)),
                transmission: Stat::of(&sum(&|p| p.transmission_s)),
                return_leg: Stat::of(&ok.iter().map(|w| w.return_phase().total()).collect::<Vec<_>>()),
                total: Stat::of(&ok.iter().map(|w| w.total_s()).collect::<Vec<_>>()),
                key,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateCounts {
    pub key: GroupKey,
    /// Indexed like [`FinalState::ALL`].
    pub counts: [usize; 5],
}

impl StateCounts {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn get(&self, s: FinalState) -> usize {
        self.counts[FinalState::ALL.iter().position(|x| *x == s).expect("listed")]
    }

    pub fn success_rate(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.get(FinalState::Success) as f64 / t as f64,
        }
    }
}

pub fn final_states(reports: &[ExperimentReport]) -> Vec<StateCounts> {
    group(reports)
        .into_iter()
        .map(|(key, rs)| {
            let mut counts = [0; 5];
            for (i, s) in FinalState::ALL.into_iter().enumerate() {
                counts[i] = rs.iter().map(|r| r.count(s)).sum();
            }
            StateCounts { key, counts }
        })
        .collect()
}

/// Selection counts summed per group. Rows are callers, columns workers.
pub fn load_matrices(reports: &[ExperimentReport]) -> Vec<(GroupKey, Vec<Vec<u64>>)> {
    group(reports)
        .into_iter()
        .map(|(key, rs)| {
            let n = rs.iter().map(|r| r.load_matrix.len()).max().unwrap_or(0);
            let mut m = vec![vec![0u64; n]; n];
            for r in rs {
                for (i, row) in r.load_matrix.iter().enumerate() {
                    for (j, c) in row.iter().enumerate() {
                        m[i][j] += c;
                    }
                }
            }
            (key, m)
        })
        .collect()
}

/// Per group, how often each client picked each worker for the first task.
/// Rows are clients, columns workers. A client that also works mid-chain makes
/// later picks too; those are left out, as are AoT tasks.
pub fn client_selection_matrices(reports: &[ExperimentReport]) -> Vec<(GroupKey, Vec<Vec<u64>>)> {
    group(reports)
        .into_iter()
        .map(|(key, rs)| {
            let n = rs.iter().map(|r| r.load_matrix.len()).max().unwrap_or(0);
            let mut m = vec![vec![0u64; n]; n];
            for r in rs {
                for w in &r.workflows {
                    for a in w.assignments.iter().filter(|a| a.task_index == 0 && a.caller == w.client && a.rank.is_some()) {
                        m[a.caller][a.worker] += 1;
                    }
                }
            }
            (key, m)
        })
        .collect()
}

/// Shannon entropy (bits) of a count vector.
pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENARIO: &str = r#"
name = "mini"
[topology]
kind = "ring"
nodes = 5
[services.echo]
exec_mean_s = 1.0
output_bytes = 1000
[[cohorts]]
name = "all"
count = 5
cpu = 1.0
memory = 1.0
disk = 1.0
energy = 100.0
[workflow]
text = "any echo in\nany echo ##result##"
input_bytes = 1000
"#;

    fn mini() -> Scenario {
        Scenario::from_toml(SCENARIO, Path::new("."), Path::new("mini.toml")).unwrap()
    }

    fn suite() -> Suite {
        Suite { name: "t".into(), scenarios: vec![mini()], seeds: vec![1, 2, 3], strategies: Strategy::ALL.to_vec(), clients: vec![1, 2] }
    }

    #[test]
    fn jobs_expand_in_fixed_order() {
        let jobs = suite().jobs();
        assert_eq!(jobs.len(), 2 * 4 * 3);
        assert_eq!(jobs[0].config.run.strategy, Strategy::Recent);
        assert_eq!(jobs[1].config.run.seed, 2);
        assert_eq!(jobs[12].client_nodes(), [0, 1]);
    }

    #[test]
    fn suite_runs_aggregate_and_are_reproducible() {
        let jobs = suite().jobs();
        let a = run_suite("t", &jobs);
        let b = run_suite("t", &jobs);
        assert!(a.failures.is_empty());
        assert_eq!(a.reports.len(), 24);
        assert_eq!(suite_hash(&a.reports), suite_hash(&b.reports));

        let phases = phase_summary(&a.reports);
        assert_eq!(phases.len(), 8);
        for p in &phases {
            assert_eq!(p.runs, 3);
            assert_eq!(p.successes, p.workflows);
            let parts = p.execution.mean + p.runtime.mean + p.transmission.mean + p.return_leg.mean;
            assert!((parts - p.total.mean).abs() < 1e-6);
        }
        let states = final_states(&a.reports);
        assert!(states.iter().all(|s| s.success_rate() == 1.0));
        for (key, m) in load_matrices(&a.reports) {
            let picks: u64 = m.iter().flatten().sum();
            // 2 JiT tasks per workflow
            assert_eq!(picks, 3 * 2 * key.clients as u64);
        }
        for (key, m) in client_selection_matrices(&a.reports) {
            // one first-task pick per workflow, on the client's own row
            assert_eq!(m.iter().flatten().sum::<u64>(), 3 * key.clients as u64);
            let clients = if key.clients == 1 { vec![0] } else { vec![0, 1] };
            for (i, row) in m.iter().enumerate() {
                assert_eq!(row.iter().sum::<u64>() > 0, clients.contains(&i), "row {i}");
                assert_eq!(row[i], 0);
            }
        }
    }

    #[test]
    fn broken_jobs_are_recorded_and_the_rest_run() {
        let mut jobs = suite().jobs();
        jobs[3].config.workflow.clients = 99;
        let out = run_suite("t", &jobs);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.reports.len(), jobs.len() - 1);
        assert!(out.failures[0].message.contains("client node"));
    }

    #[test]
    fn empty_suite_is_fine() {
        let out = run_suite("empty", &[]);
        assert!(out.reports.is_empty() && out.failures.is_empty());
        assert!(phase_summary(&out.reports).is_empty());
    }

    #[test]
    fn stats_and_entropy() {
        let s = Stat::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        assert!((s.std - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[3.0]).std, 0.0);
        assert_eq!(entropy(&[5, 5]), 1.0);
        assert_eq!(entropy(&[7, 0]), 0.0);
        assert!((entropy(&[1, 1, 1, 1]) - 2.0).abs() < 1e-12);
    }
}
