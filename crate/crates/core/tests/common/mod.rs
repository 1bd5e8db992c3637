//! Scenario builder shared by the integration tests: scripted replies plus a
//! fake executor keyed on the code each reply carries.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use plotbench::digest::file_digest;
use plotbench::gateway::{Gateway, ScriptEntry, ScriptTable};
use plotbench::library::PlotLibrary;
use plotbench::sandbox::{ExecLimits, FakeExecutor, FakeOutcome, FakeRule, FakeScript};
use plotbench::selfdebug::{run_protocol, EngineConfig, EngineError, ProtocolRun};
use plotbench::task_store::{load_run, BenchTask, RunState, RunStore};

/// Code carried by the reply to attempt `n` of task `id`.
pub fn attempt_code(id: &str, n: usize) -> String {
    format!("render('{id}', {n})")
}

pub fn task_marker(id: &str) -> String {
    format!("[[{id}]]")
}

/// Outcome for a failure class name; `KeyboardInterrupt` is a timeout.
pub fn failure(class: &str) -> FakeOutcome {
    match class {
        "KeyboardInterrupt" => FakeOutcome::timeout(),
        "NoPlot" => FakeOutcome::ok_without_image(),
        other => FakeOutcome::error(other, "boom"),
    }
}

pub fn plot() -> FakeOutcome {
    FakeOutcome::ok_with_image()
}

#[derive(Debug, Clone, Default)]
pub struct Scenario {
    pub tasks: Vec<BenchTask>,
    pub entries: Vec<ScriptEntry>,
    pub rules: Vec<FakeRule>,
}

#[derive(Debug, Clone)]
pub struct ScenarioFiles {
    pub tasks: PathBuf,
    pub script: PathBuf,
    pub fake: PathBuf,
}

impl Scenario {
    pub fn new() -> Self {
        Self::default()
    }

    /// A task whose attempt `i` yields `outcomes[i]`. Attempts beyond the
    /// list have no scripted reply.
    pub fn task(&mut self, id: &str, library: PlotLibrary, outcomes: &[FakeOutcome]) -> &mut Self {
        self.tasks.push(BenchTask {
            id: id.to_string(),
            library,
            instruction: format!("{} Draw the chart for task {id}.", task_marker(id)),
            data_preview: "x,y\n1,2\n3,4\n".into(),
            reference_image: None,
        });
        for (n, outcome) in outcomes.iter().enumerate() {
            let code = attempt_code(id, n);
            self.entries.push(ScriptEntry::for_attempt(
                task_marker(id),
                n,
                format!("Here you go.\n```python\n{code}\n```\n"),
            ));
            self.rules.push(FakeRule::contains(code, outcome.clone()));
        }
        self
    }

    /// Shorthand: one letter per attempt. `P` plot, `N` clean run without
    /// a plot, `K` timeout, `A`/`T`/`V`/`Y`/`X` Attribute/Type/Value/Key/
    /// SyntaxError.
    pub fn coded(&mut self, id: &str, library: PlotLibrary, code: &str) -> &mut Self {
        let outcomes: Vec<FakeOutcome> = code.chars().map(letter_outcome).collect();
        self.task(id, library, &outcomes)
    }

    pub fn gateway(&self) -> Gateway {
        Gateway::scripted(ScriptTable::new(self.entries.clone()), None)
    }

    pub fn executor(&self) -> FakeExecutor {
        FakeExecutor::new(self.fake_script())
    }

    pub fn fake_script(&self) -> FakeScript {
        FakeScript {
            rules: self.rules.clone(),
            default: None,
        }
    }

    /// Task file, script table and fake-executor script under `dir`.
    pub fn write(&self, dir: &Path) -> ScenarioFiles {
        fs::create_dir_all(dir).unwrap();
        let tasks = dir.join("tasks.jsonl");
        let mut body = String::new();
        for t in &self.tasks {
            body.push_str(&serde_json::to_string(t).unwrap());
            body.push('\n');
        }
        fs::write(&tasks, body).unwrap();
        let script = dir.join("script.json");
        fs::write(&script, serde_json::to_string_pretty(&ScriptTable::new(self.entries.clone())).unwrap()).unwrap();
        let fake = dir.join("fake.json");
        fs::write(&fake, serde_json::to_string_pretty(&self.fake_script()).unwrap()).unwrap();
        ScenarioFiles { tasks, script, fake }
    }

    /// Run the protocol in `root/<run_name>` and load what was persisted.
    pub fn run_in(&self, root: &Path, run_name: &str, rounds: u32, workers: usize) -> Result<(ProtocolRun, RunState), EngineError> {
        let files = self.write(&root.join("inputs"));
        let run_dir = root.join(run_name);
        let gateway = self.gateway();
        let (mut store, tasks) = RunStore::create(&run_dir, &files.tasks, gateway.config().digest(), ExecLimits::default())?;
        let digest = file_digest(&files.tasks).unwrap();
        let config = EngineConfig {
            rounds,
            workers,
            ..EngineConfig::default()
        };
        let run = run_protocol(&tasks, &digest, &gateway, &self.executor(), &mut store, &config)?;
        drop(store);
        Ok((run, load_run(&run_dir)?))
    }
}

fn letter_outcome(c: char) -> FakeOutcome {
    match c {
        'P' => plot(),
        'N' => failure("NoPlot"),
        'K' => failure("KeyboardInterrupt"),
        'A' => failure("AttributeError"),
        'T' => failure("TypeError"),
        'V' => failure("ValueError"),
        'Y' => failure("KeyError"),
        'X' => failure("SyntaxError"),
        other => panic!("unknown outcome letter {other:?}"),
    }
}

/// Per-task outcome lists reproducing given failure counts per round.
///
/// `counts` maps a class name to its count after rounds 0..=K. Tasks that
/// fail after round `r` are a prefix of those failing after `r - 1`; tasks
/// that drop out are fixed in that round. Remaining tasks plot at once.
pub fn trajectories(total: usize, counts: &[(&str, Vec<u32>)]) -> Vec<Vec<FakeOutcome>> {
    let rounds = counts.first().map_or(0, |(_, c)| c.len());
    let mut paths: Vec<Vec<FakeOutcome>> = vec![Vec::new(); total];
    let mut failing: Vec<usize> = (0..total).collect();
    for r in 0..rounds {
        let classes: Vec<&str> = counts
            .iter()
            .flat_map(|(name, c)| std::iter::repeat(*name).take(c[r] as usize))
            .collect();
        assert!(classes.len() <= failing.len(), "failure counts must not grow");
        for (slot, &task) in failing.iter().enumerate() {
            match classes.get(slot) {
                Some(class) => paths[task].push(failure(class)),
                None => paths[task].push(plot()),
            }
        }
        failing.truncate(classes.len());
    }
    paths
}

pub fn matplotlib_counts() -> Vec<(&'static str, Vec<u32>)> {
    vec![
        ("AttributeError", vec![5, 2, 2, 2]),
        ("TypeError", vec![7, 5, 5, 5]),
        ("ValueError", vec![4, 5, 5, 5]),
        ("KeyError", vec![1, 2, 1, 1]),
        ("KeyboardInterrupt", vec![1, 1, 1, 1]),
        ("OSError", vec![1, 1, 1, 1]),
        ("ImportError", vec![1, 0, 0, 0]),
        ("IndexError", vec![1, 0, 0, 0]),
        ("SyntaxError", vec![1, 0, 0, 0]),
    ]
}

pub fn seaborn_counts() -> Vec<(&'static str, Vec<u32>)> {
    vec![
        ("AttributeError", vec![15, 3, 2, 2]),
        ("AxisError", vec![1, 1, 1, 1]),
        ("ImportError", vec![1, 0, 0, 0]),
        ("KeyboardInterrupt", vec![2, 1, 1, 1]),
        ("NameError", vec![5, 4, 2, 1]),
        ("OSError", vec![1, 1, 1, 1]),
        ("TypeError", vec![8, 5, 4, 4]),
        ("ValueError", vec![8, 8, 7, 7]),
    ]
}

/// 175 matplotlib and 175 seaborn tasks following the published trajectories.
pub fn published_scenario() -> Scenario {
    let mut s = Scenario::new();
    for (prefix, library, counts) in [
        ("mpl", PlotLibrary::Matplotlib, matplotlib_counts()),
        ("sns", PlotLibrary::Seaborn, seaborn_counts()),
    ] {
        for (i, path) in trajectories(175, &counts).into_iter().enumerate() {
            s.task(&format!("{prefix}{i:03}"), library.clone(), &path);
        }
    }
    s
}
