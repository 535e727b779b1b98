//! CSV/JSON rendering of reports and all-or-nothing writes to a directory.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{self, RunFailure, Stat};
use crate::metrics::{ExperimentReport, FinalState};

pub const PHASES_CSV: &str = "phases.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const FINAL_STATES_CSV: &str = "final_states.csv";
pub const LOAD_MATRIX_CSV: &str = "load_matrix.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("output directory {path} is not writable: {source}")]
    Unwritable { path: PathBuf, source: std::io::Error },
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("reading {path}: {message}")]
    BadReport { path: PathBuf, message: String },
}

/// Files to write, as paths relative to the output directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileSet {
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

impl FileSet {
    pub fn add(&mut self, name: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(p, _)| p == Path::new(name)).map(|(_, b)| b.as_slice())
    }

    /// Checks that every target directory can be created and written before
    /// touching any final path; each file then lands via rename.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
        let mut dirs: Vec<PathBuf> = self.files.iter().map(|(p, _)| dir.join(p).parent().unwrap_or(dir).to_path_buf()).collect();
        dirs.push(dir.to_path_buf());
        dirs.sort();
        dirs.dedup();
        for d in &dirs {
            let unwritable = |source| OutputError::Unwritable { path: d.clone(), source };
            std::fs::create_dir_all(d).map_err(unwritable)?;
            let mut probe = tempfile::NamedTempFile::new_in(d).map_err(unwritable)?;
            probe.write_all(b"probe").map_err(unwritable)?;
        }
        let mut written = Vec::new();
        for (rel, bytes) in &self.files {
            let path = dir.join(rel);
            let io = |source| OutputError::Io { path: path.clone(), source };
            let parent = path.parent().unwrap_or(dir);
            let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io)?;
            tmp.write_all(bytes).map_err(io)?;
            tmp.persist(&path).map_err(|e| io(e.error))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn f(x: f64) -> String {
    format!("{x:.6}")
}

fn csv_bytes(header: &[String], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// One row per task (and one `return` row) of every workflow.
pub fn phases_csv(reports: &[ExperimentReport]) -> Vec<u8> {
    let header = strings(&[
        "scenario", "clients", "strategy", "seed", "workflow", "task", "runtime_s", "transmission_s", "execution_s",
        "total_s", "final_state",
    ]);
    let mut rows = Vec::new();
    for r in reports {
        for w in &r.workflows {
            let n = w.phases.len();
            for (i, p) in w.phases.iter().enumerate() {
                let task = if i + 1 == n { "return".to_string() } else { i.to_string() };
                rows.push(vec![
                    r.scenario.clone(),
                    r.clients.to_string(),
                    r.strategy.to_string(),
                    r.seed.to_string(),
                    w.id.clone(),
                    task,
                    f(p.runtime_s),
                    f(p.transmission_s),
                    f(p.execution_s),
                    f(p.total()),
                    w.final_state.to_string(),
                ]);
            }
        }
    }
    csv_bytes(&header, rows)
}

pub fn summary_csv(reports: &[ExperimentReport]) -> Vec<u8> {
    let mut header = strings(&["scenario", "clients", "strategy", "runs", "workflows", "successes"]);
    for p in ["execution", "runtime", "transmission", "return", "total"] {
        header.push(format!("{p}_mean_s"));
        header.push(format!("{p}_std_s"));
    }
    let rows = harness::phase_summary(reports)
        .into_iter()
        .map(|s| {
            let mut row = vec![
                s.key.scenario.clone(),
                s.key.clients.to_string(),
                s.key.strategy.to_string(),
                s.runs.to_string(),
                s.workflows.to_string(),
                s.successes.to_string(),
            ];
            for st in [s.execution, s.runtime, s.transmission, s.return_leg, s.total] {
                row.push(f(st.mean));
                row.push(f(st.std));
            }
            row
        })
        .collect();
    csv_bytes(&header, rows)
}

pub fn final_states_csv(reports: &[ExperimentReport]) -> Vec<u8> {
    let mut header = strings(&["scenario", "clients", "strategy"]);
    header.extend(FinalState::ALL.iter().map(|s| s.name().to_string()));
    header.extend(strings(&["total", "success_rate"]));
    let rows = harness::final_states(reports)
        .into_iter()
        .map(|s| {
            let mut row = vec![s.key.scenario.clone(), s.key.clients.to_string(), s.key.strategy.to_string()];
            row.extend(s.counts.iter().map(|c| c.to_string()));
            row.push(s.total().to_string());
            row.push(f(s.success_rate()));
            row
        })
        .collect();
    csv_bytes(&header, rows)
}

/// Rows are callers; worker columns are padded to the largest world.
pub fn load_matrix_csv(reports: &[ExperimentReport]) -> Vec<u8> {
    let groups = harness::load_matrices(reports);
    let width = groups.iter().map(|(_, m)| m.len()).max().unwrap_or(0);
    let mut header = strings(&["scenario", "clients", "strategy", "caller"]);
    header.extend((0..width).map(|j| format!("w{j}")));
    let mut rows = Vec::new();
    for (key, m) in groups {
        for (i, row) in m.iter().enumerate() {
            let mut r = vec![key.scenario.clone(), key.clients.to_string(), key.strategy.to_string(), i.to_string()];
            r.extend((0..width).map(|j| row.get(j).map(u64::to_string).unwrap_or_default()));
            rows.push(r);
        }
    }
    csv_bytes(&header, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scenario: String,
    pub clients: usize,
    pub strategy: String,
    pub seed: u64,
    pub config_digest: String,
    pub report: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub suite: String,
    pub suite_hash: String,
    pub runs: Vec<ManifestEntry>,
    pub failures: Vec<RunFailure>,
    pub files: Vec<String>,
}

pub fn report_file_name(r: &ExperimentReport) -> String {
    format!("{}-c{}-{}-s{}.json", r.scenario, r.clients, r.strategy, r.seed)
}

/// Everything a run or suite writes: reports, tables and the manifest.
pub fn suite_files(suite: &str, reports: &[ExperimentReport], failures: &[RunFailure]) -> FileSet {
    let mut set = tables(reports);
    let mut runs = Vec::new();
    for r in reports {
        let rel = Path::new(REPORTS_DIR).join(report_file_name(r));
        runs.push(ManifestEntry {
            scenario: r.scenario.clone(),
            clients: r.clients,
            strategy: r.strategy.to_string(),
            seed: r.seed,
            config_digest: r.config_digest.clone(),
            report: rel.to_string_lossy().into_owned(),
        });
        set.add(rel, serde_json::to_vec_pretty(r).expect("report serializes"));
    }
    let mut files: Vec<String> = set.files.iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    files.push(MANIFEST_JSON.into());
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        suite: suite.into(),
        suite_hash: harness::suite_hash(reports),
        runs,
        failures: failures.to_vec(),
        files,
    };
    set.add(MANIFEST_JSON, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"));
    set
}

/// The four aggregate tables.
pub fn tables(reports: &[ExperimentReport]) -> FileSet {
    let mut set = FileSet::default();
    set.add(PHASES_CSV, phases_csv(reports));
    set.add(SUMMARY_CSV, summary_csv(reports));
    set.add(FINAL_STATES_CSV, final_states_csv(reports));
    set.add(LOAD_MATRIX_CSV, load_matrix_csv(reports));
    set
}

/// Long-format tables ready for plotting.
pub fn plot_files(reports: &[ExperimentReport]) -> FileSet {
    let mut set = FileSet::default();

    let mut rows = Vec::new();
    for s in harness::phase_summary(reports) {
        let parts: [(&str, Stat); 5] = [
            ("execution", s.execution),
            ("runtime", s.runtime),
            ("transmission", s.transmission),
            ("return", s.return_leg),
            ("total", s.total),
        ];
        for (name, st) in parts {
            rows.push(vec![
                s.key.scenario.clone(),
                s.key.clients.to_string(),
                s.key.strategy.to_string(),
                name.to_string(),
                st.n.to_string(),
                f(st.mean),
                f(st.std),
            ]);
        }
    }
    set.add("plot_phases.csv", csv_bytes(&strings(&["scenario", "clients", "strategy", "phase", "n", "mean_s", "std_s"]), rows));

    let mut rows = Vec::new();
    for (key, m) in harness::load_matrices(reports) {
        for (i, row) in m.iter().enumerate() {
            let total: u64 = row.iter().sum();
            for (j, &c) in row.iter().enumerate() {
                let share = if total == 0 { 0.0 } else { c as f64 / total as f64 };
                rows.push(vec![
                    key.scenario.clone(),
                    key.clients.to_string(),
                    key.strategy.to_string(),
                    i.to_string(),
                    j.to_string(),
                    c.to_string(),
                    f(share),
                ]);
            }
        }
    }
    set.add(
        "plot_load.csv",
        csv_bytes(&strings(&["scenario", "clients", "strategy", "caller", "worker", "count", "row_share"]), rows),
    );

    let mut rows = Vec::new();
    for s in harness::final_states(reports) {
        let total = s.total();
        for (k, state) in FinalState::ALL.into_iter().enumerate() {
            let share = if total == 0 { 0.0 } else { s.counts[k] as f64 / total as f64 };
            rows.push(vec![
                s.key.scenario.clone(),
                s.key.clients.to_string(),
                s.key.strategy.to_string(),
                state.name().to_string(),
                s.counts[k].to_string(),
                f(share),
            ]);
        }
    }
    set.add(
        "plot_final_states.csv",
        csv_bytes(&strings(&["scenario", "clients", "strategy", "state", "count", "share"]), rows),
    );
    set
}

/// Loads every `*.json` report from `dir` (or `dir/reports`), sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<ExperimentReport>, OutputError> {
    let nested = dir.join(REPORTS_DIR);
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let io = |source| OutputError::Io { path: dir.clone(), source };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|source| OutputError::Io { path: p.clone(), source })?;
            serde_json::from_slice(&bytes).map_err(|e| OutputError::BadReport { path: p.clone(), message: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    fn reports() -> Vec<ExperimentReport> {
        let text = r#"
name = "mini"
[topology]
kind = "ring"
nodes = 4
[services.echo]
exec_mean_s = 1.0
output_bytes = 1000
[[cohorts]]
name = "all"
count = 4
cpu = 1.0
memory = 1.0
disk = 1.0
energy = 100.0
[workflow]
text = "any echo in\nany echo ##result##"
input_bytes = 1000
"#;
        let s = Scenario::from_toml(text, Path::new("."), Path::new("mini.toml")).unwrap();
        vec![s.clone().with_seed(1).run(), s.with_seed(2).run()]
    }

    #[test]
    fn tables_have_stable_headers_and_rows() {
        let rs = reports();
        let phases = String::from_utf8(phases_csv(&rs)).unwrap();
        let mut lines = phases.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scenario,clients,strategy,seed,workflow,task,runtime_s,transmission_s,execution_s,total_s,final_state"
        );
        assert_eq!(lines.count(), 2 * 3);
        assert!(phases.contains(",return,"));

        let lm = String::from_utf8(load_matrix_csv(&rs)).unwrap();
        assert!(lm.starts_with("scenario,clients,strategy,caller,w0,w1,w2,w3\n"));
        assert_eq!(lm.lines().count(), 1 + 4);

        let fs = String::from_utf8(final_states_csv(&rs)).unwrap();
        assert_eq!(fs.lines().nth(1).unwrap(), "mini,1,spread,2,0,0,0,0,2,1.000000");
    }

    #[test]
    fn suite_files_round_trip_through_disk() {
        let rs = reports();
        let dir = tempfile::tempdir().unwrap();
        let set = suite_files("t", &rs, &[]);
        let written = set.write_to(dir.path()).unwrap();
        assert_eq!(written.len(), set.files.len());
        let back = load_reports(dir.path()).unwrap();
        assert_eq!(back, rs);
        let manifest: Manifest = serde_json::from_slice(set.get(MANIFEST_JSON).unwrap()).unwrap();
        assert_eq!(manifest.suite_hash, harness::suite_hash(&rs));
        assert_eq!(manifest.runs[0].config_digest, rs[0].config_digest);
        assert_eq!(tables(&back).files, tables(&rs).files);
    }

    #[test]
    fn unwritable_target_fails_before_writing_anything() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let err = suite_files("t", &reports(), &[]).write_to(&blocker.join("out")).unwrap_err();
        assert!(matches!(err, OutputError::Unwritable { .. }), "{err}");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn plot_files_cover_every_group() {
        let set = plot_files(&reports());
        let load = String::from_utf8(set.get("plot_load.csv").unwrap().to_vec()).unwrap();
        assert_eq!(load.lines().count(), 1 + 16);
        let states = String::from_utf8(set.get("plot_final_states.csv").unwrap().to_vec()).unwrap();
        assert_eq!(states.lines().count(), 1 + 5);
    }
}
