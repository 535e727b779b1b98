use std::path::{Path, PathBuf};

use chainload::harness::{self, Suite};
use chainload::scenario::Scenario;
use chainload::{FinalState, Strategy};

fn dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> Scenario {
    Scenario::from_file(&dir().join(name)).unwrap()
}

#[test]
fn shipped_scenarios_validate() {
    for f in std::fs::read_dir(dir()).unwrap() {
        let p = f.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_owned();
        if name.ends_with(".suite.toml") {
            let s = Suite::from_file(&p).unwrap();
            assert!(!s.jobs().is_empty(), "{name}");
            for j in s.jobs() {
                j.validate().unwrap();
            }
        } else if name.ends_with(".toml") {
            let s = Scenario::from_file(&p).unwrap();
            s.validate().unwrap();
            assert_eq!(s.digest(), Scenario::from_file(&p).unwrap().digest());
        }
    }
}

#[test]
fn suite_sizes() {
    let jobs = |f: &str| Suite::from_file(&dir().join(f)).unwrap().jobs().len();
    assert_eq!(jobs("ring.suite.toml"), 4 * 25);
    assert_eq!(jobs("ring-homogeneous.suite.toml"), 4 * 25);
    assert_eq!(jobs("ring-aot.suite.toml"), 25);
    assert_eq!(jobs("mobile.suite.toml"), 2 * 4 * 5);
}

#[test]
fn cohorts_are_realised_exactly() {
    let count = |a: &[usize], k: usize| a.iter().filter(|&&c| c == k).count();
    let ring = scenario("ring-hetero.toml");
    let a = ring.cohort_assignment();
    assert_eq!((0..4).map(|k| count(&a, k)).collect::<Vec<_>>(), [2, 5, 3, 2]);
    let mobile = scenario("mobile.toml");
    for seed in 1..=5 {
        let a = mobile.clone().with_seed(seed).cohort_assignment();
        assert_eq!((0..4).map(|k| count(&a, k)).collect::<Vec<_>>(), [6, 12, 9, 3]);
    }
    assert_ne!(ring.clone().with_seed(1).cohort_assignment(), ring.with_seed(2).cohort_assignment());
}

#[test]
fn pinning_a_task_to_an_incapable_node_is_a_worker_error() {
    let s = scenario("ring-hetero.toml");
    let incapable = s.config.cohorts.iter().position(|c| c.name == "incapable").unwrap();
    let node = s.cohort_assignment().iter().position(|&k| k == incapable).unwrap();
    let text = format!("{node:016x} denoise input.img [cpu=1,memory=1024,disk=2048,energy=20]\n");
    let r = harness::run_scenario(&s.with_workflow_text(text)).unwrap();
    assert_eq!(r.workflows.len(), 1);
    assert_eq!(r.workflows[0].final_state, FinalState::WorkerError);
    assert!(r.workflows[0].executions.is_empty());
}

#[test]
fn aot_chain_follows_its_pins() {
    let r = harness::run_scenario(&scenario("ring-aot.toml").with_strategy(Strategy::Random)).unwrap();
    let w = &r.workflows[0];
    assert_eq!(w.final_state, FinalState::Success);
    assert!(w.assignments.iter().all(|a| a.rank.is_none()));
    assert_eq!(w.executions, [0, 1, 2, 3, 4]);
    assert_eq!(w.assignments.iter().map(|a| a.worker).collect::<Vec<_>>(), [2, 4, 6, 8, 10]);
    // AoT tasks never enter the load matrix
    assert!(r.load_matrix.iter().flatten().all(|&c| c == 0));
}
