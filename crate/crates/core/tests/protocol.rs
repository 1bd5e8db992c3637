mod common;

use std::collections::BTreeSet;

use common::{published_scenario, Scenario};
use plotbench::library::PlotLibrary::{Matplotlib, Seaborn};
use plotbench::metrics::build_report;
use plotbench::task_store::RunStore;

fn set(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

#[test]
fn frontier_shrinks_and_final_output_is_the_fix() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new();
    s.coded("a", Matplotlib, "P")
        .coded("b", Matplotlib, "AP")
        .coded("c", Matplotlib, "TVP")
        .coded("d", Matplotlib, "VVVV")
        .coded("e", Matplotlib, "NP");
    let (run, state) = s.run_in(dir.path(), "run", 3, 1).unwrap();
    assert_eq!(
        run.state.failed_sets,
        vec![set(&["b", "c", "d", "e"]), set(&["c", "d"]), set(&["d"]), set(&["d"])]
    );
    assert_eq!(state.final_record("a").unwrap().attempt_index, 0);
    assert_eq!(state.final_record("b").unwrap().attempt_index, 1);
    assert_eq!(state.final_record("c").unwrap().attempt_index, 2);
    assert_eq!(state.final_record("d").unwrap().attempt_index, 3);
    assert_eq!(state.records["a"].len(), 1);
    assert_eq!(state.records["d"].len(), 4);
    for recs in state.records.values() {
        assert_eq!(recs.iter().filter(|r| r.is_final).count(), 1);
    }
}

#[test]
fn repair_turns_carry_the_error_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new();
    s.coded("a", Matplotlib, "AVP");
    let (run, _) = s.run_in(dir.path(), "run", 3, 1).unwrap();
    let h = &run.histories["a"];
    let second = &h.attempts[2].dialogue.messages;
    // user, assistant, user(error), assistant, user(error)
    assert_eq!(second.len(), 5);
    assert!(second[2].content.contains("AttributeError"));
    assert!(second[4].content.contains("ValueError"));
    assert!(second[0].content.contains("[[a]]"));
}

#[test]
fn workers_do_not_change_results() {
    let one = tempfile::tempdir().unwrap();
    let many = tempfile::tempdir().unwrap();
    let mut s = Scenario::new();
    for (i, code) in ["P", "AP", "TTP", "VVVV", "KP", "NNNN", "XYP", "P"].iter().enumerate() {
        s.coded(&format!("t{i}"), if i % 2 == 0 { Matplotlib } else { Seaborn }, code);
    }
    let (r1, s1) = s.run_in(one.path(), "run", 3, 1).unwrap();
    let (r4, s4) = s.run_in(many.path(), "run", 3, 4).unwrap();
    assert_eq!(r1.state, r4.state);
    assert_eq!(s1.records, s4.records);
    let a = std::fs::read(one.path().join("run/records.jsonl")).unwrap();
    let b = std::fs::read(many.path().join("run/records.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn published_trajectories_reproduce_the_headline_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, state) = published_scenario().run_in(dir.path(), "run", 3, 4).unwrap();
    let report = build_report(&state, None).unwrap();
    let row = |lib| report.libraries.iter().find(|l| l.library == lib).unwrap();
    let cells = |rates: &[plotbench::metrics::PassRate]| {
        rates.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" & ")
    };
    assert_eq!(cells(&row(Matplotlib).round_exec_pass), "87.4 & 90.9 & 91.4 & 91.4");
    assert_eq!(cells(&row(Seaborn).round_exec_pass), "76.6 & 86.9 & 89.7 & 90.3");
    let attr = row(Seaborn)
        .transitions
        .iter()
        .find(|t| t.error_class == "AttributeError")
        .unwrap();
    assert_eq!((attr.initial, attr.r#final), (15, 2));
}

#[test]
fn resume_after_interruption_reuses_persisted_attempts() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new();
    s.coded("a", Matplotlib, "AP").coded("b", Matplotlib, "VVP");
    // Rounds 0..=1 first, then extend to 3 in the same run directory.
    let (first, _) = s.run_in(dir.path(), "run", 1, 1).unwrap();
    assert_eq!(first.state.failed_sets.len(), 2);

    let files = s.write(&dir.path().join("inputs"));
    let mut store = RunStore::open(&dir.path().join("run")).unwrap();
    let tasks = store.tasks().unwrap();
    let digest = plotbench::digest::file_digest(&files.tasks).unwrap();
    let config = plotbench::selfdebug::EngineConfig {
        rounds: 3,
        ..Default::default()
    };
    let run = plotbench::selfdebug::run_protocol(&tasks, &digest, &s.gateway(), &s.executor(), &mut store, &config).unwrap();
    assert_eq!(run.histories["b"].fixed_at(), Some(2));
    assert_eq!(run.state.failed_sets.last().unwrap(), &set(&[]));
}

#[test]
fn changed_task_file_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new();
    s.coded("a", Matplotlib, "AP");
    s.run_in(dir.path(), "run", 1, 1).unwrap();
    let mut store = RunStore::open(&dir.path().join("run")).unwrap();
    let tasks = store.tasks().unwrap();
    let err = plotbench::selfdebug::run_protocol(
        &tasks,
        "0000",
        &s.gateway(),
        &s.executor(),
        &mut store,
        &Default::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("task file changed"));
}

#[test]
fn persistent_infrastructure_failure_quarantines_the_task() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new();
    s.coded("a", Matplotlib, "P").coded("b", Matplotlib, "AP");
    // Attempt 1 of b always hits the infrastructure.
    s.rules[2].infra_failures = 5;
    let (run, state) = s.run_in(dir.path(), "run", 3, 1).unwrap();
    assert_eq!(run.quarantined.len(), 1);
    assert_eq!(run.quarantined[0].task_id, "b");
    assert!(run.state.failed_sets.iter().all(|f| !f.contains("b")));
    let report = build_report(&state, None).unwrap();
    assert_eq!(report.tasks, 1);
}

#[test]
fn one_infrastructure_hiccup_is_retried() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new();
    s.coded("a", Matplotlib, "AP");
    s.rules[1].infra_failures = 1;
    let (run, _) = s.run_in(dir.path(), "run", 3, 1).unwrap();
    assert!(run.quarantined.is_empty());
    assert_eq!(run.histories["a"].fixed_at(), Some(1));
}

#[test]
fn reply_without_code_counts_as_plotless_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new();
    s.coded("a", Matplotlib, "P");
    s.entries[0].response = "Sure.\n```python\n```\n".into();
    s.entries.push(plotbench::gateway::ScriptEntry::for_attempt("[[a]]", 1, "```python\nrender('a', 0)\n```"));
    let (run, state) = s.run_in(dir.path(), "run", 1, 1).unwrap();
    let first = &state.records["a"][0];
    assert_eq!(first.candidate_code, "");
    assert!(first.outcome.images.is_empty());
    assert_eq!(run.histories["a"].fixed_at(), Some(1));
}
