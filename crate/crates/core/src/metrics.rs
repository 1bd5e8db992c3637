//! Pass rates, per-round tables, error distributions, and the run report.
//!
//! Percentages are computed in integer arithmetic and rounded half-up to one
//! decimal (judge means and Good shares to integers), so every port of this
//! harness renders the same digits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::library::PlotLibrary;
use crate::sandbox::{plot_produced, ExecStatus};
use crate::task_store::{OutcomeRecord, QuarantineEntry, RunState};
use crate::taxonomy::{group_of, transition_table, ErrorGroup, FailureKind, TaxonomyError, TransitionTable};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("rate is undefined over an empty task set")]
    EmptyTaskSet,
    #[error("task {task_id:?} has {attempts} attempts, more than the {max} allowed with K = {k}")]
    TooManyAttempts { task_id: String, attempts: usize, max: usize, k: u32 },
    #[error("task {0:?} has no records")]
    NoRecords(String),
    #[error("unknown report format {0:?} (expected csv, json, or text)")]
    UnknownFormat(String),
    #[error("judge score for task {task_id:?} out of range: {value}")]
    JudgeOutOfRange { task_id: String, value: f64 },
    #[error("reading judge scores: {0}")]
    JudgeFile(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// A count ratio rendered as a one-decimal, half-up percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassRate {
    pub numerator: u32,
    pub denominator: u32,
    /// Percentage in tenths, rounded half-up.
    pub tenths: u32,
}

impl PassRate {
    pub fn new(numerator: u32, denominator: u32) -> Result<Self, MetricsError> {
        if denominator == 0 {
            return Err(MetricsError::EmptyTaskSet);
        }
        let (n, d) = (numerator as u64, denominator as u64);
        // floor(1000 n / d + 1/2) without floating point
        let tenths = (2000 * n + d) / (2 * d);
        Ok(Self {
            numerator,
            denominator,
            tenths: tenths as u32,
        })
    }

    pub fn percent(&self) -> f64 {
        self.tenths as f64 / 10.0
    }
}

impl fmt::Display for PassRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.tenths / 10, self.tenths % 10)
    }
}

impl Serialize for PassRate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("PassRate", 3)?;
        st.serialize_field("numerator", &self.numerator)?;
        st.serialize_field("denominator", &self.denominator)?;
        st.serialize_field("percent", &self.percent())?;
        st.end()
    }
}

/// Integer percentage, half-up.
fn int_percent(numerator: u64, denominator: u64) -> u32 {
    ((200 * numerator + denominator) / (2 * denominator)) as u32
}

/// Records of one task, ordered by attempt index.
pub type TaskRecords<'a> = &'a [OutcomeRecord];

fn nonempty<'a>(tasks: &[TaskRecords<'a>]) -> Result<(), MetricsError> {
    if tasks.is_empty() {
        return Err(MetricsError::EmptyTaskSet);
    }
    Ok(())
}

/// Share of tasks with at least one cleanly executing attempt at or before
/// `attempt_cutoff`. A plot is not required here.
pub fn exec_pass_rate(tasks: &[TaskRecords<'_>], attempt_cutoff: u32) -> Result<PassRate, MetricsError> {
    nonempty(tasks)?;
    let passed = tasks
        .iter()
        .filter(|recs| {
            recs.iter()
                .any(|r| r.attempt_index <= attempt_cutoff && r.outcome.status == ExecStatus::Success)
        })
        .count();
    PassRate::new(passed as u32, tasks.len() as u32)
}

/// Share of tasks fixed (clean run with a plot) at or before `attempt_cutoff`.
pub fn fixed_rate(tasks: &[TaskRecords<'_>], attempt_cutoff: u32) -> Result<PassRate, MetricsError> {
    nonempty(tasks)?;
    let fixed = tasks
        .iter()
        .filter(|recs| recs.iter().any(|r| r.attempt_index <= attempt_cutoff && plot_produced(&r.outcome)))
        .count();
    PassRate::new(fixed as u32, tasks.len() as u32)
}

/// The recorded final output: the flagged record, else the fixing attempt,
/// else the last attempt.
pub fn final_record<'a>(records: TaskRecords<'a>) -> Option<&'a OutcomeRecord> {
    records
        .iter()
        .find(|r| r.is_final)
        .or_else(|| records.iter().find(|r| plot_produced(&r.outcome)))
        .or_else(|| records.last())
}

/// Share of tasks whose final output produced no plot at all: errors,
/// timeouts, and plotless clean runs alike.
pub fn incorrect_code_rate(tasks: &[TaskRecords<'_>]) -> Result<PassRate, MetricsError> {
    nonempty(tasks)?;
    let mut bad = 0;
    for recs in tasks {
        let last = final_record(recs).ok_or_else(|| MetricsError::NoRecords(String::new()))?;
        if !plot_produced(&last.outcome) {
            bad += 1;
        }
    }
    PassRate::new(bad, tasks.len() as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundRow {
    pub library: PlotLibrary,
    /// Clean-execution pass rate with cutoff 0 (normal), 1, .., K.
    pub exec: Vec<PassRate>,
    /// Fix-criterion rate with the same cutoffs.
    pub fixed: Vec<PassRate>,
}

impl RoundRow {
    /// `87.4 & 90.9 & 91.4 & 91.4`
    pub fn exec_cells(&self) -> String {
        join_cells(&self.exec)
    }

    pub fn fixed_cells(&self) -> String {
        join_cells(&self.fixed)
    }
}

fn join_cells(rates: &[PassRate]) -> String {
    rates.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" & ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundTable {
    pub k: u32,
    pub rows: Vec<RoundRow>,
}

pub fn round_columns(k: u32) -> Vec<String> {
    std::iter::once("normal".to_string())
        .chain((1..=k).map(|i| format!("round_{i}")))
        .collect()
}

fn check_attempt_budget(tasks: &[(&str, TaskRecords<'_>)], k: u32) -> Result<(), MetricsError> {
    let max = k as usize + 1;
    for (id, recs) in tasks {
        if recs.is_empty() {
            return Err(MetricsError::NoRecords(id.to_string()));
        }
        if recs.len() > max {
            return Err(MetricsError::TooManyAttempts {
                task_id: id.to_string(),
                attempts: recs.len(),
                max,
                k,
            });
        }
    }
    Ok(())
}

/// One row for a library: pass rates at cutoffs 0..=K.
pub fn per_round_row(library: PlotLibrary, tasks: &[(&str, TaskRecords<'_>)], k: u32) -> Result<RoundRow, MetricsError> {
    check_attempt_budget(tasks, k)?;
    let recs: Vec<TaskRecords<'_>> = tasks.iter().map(|(_, r)| *r).collect();
    let exec = (0..=k).map(|cut| exec_pass_rate(&recs, cut)).collect::<Result<_, _>>()?;
    let fixed = (0..=k).map(|cut| fixed_rate(&recs, cut)).collect::<Result<_, _>>()?;
    Ok(RoundRow { library, exec, fixed })
}

pub fn per_round_table(
    by_library: &BTreeMap<PlotLibrary, Vec<(&str, TaskRecords<'_>)>>,
    k: u32,
) -> Result<RoundTable, MetricsError> {
    let rows = by_library
        .iter()
        .map(|(lib, tasks)| per_round_row(lib.clone(), tasks, k))
        .collect::<Result<_, _>>()?;
    Ok(RoundTable { k, rows })
}

/// Failure counts per kind after each round: a task still unsolved after
/// round `r` is counted under the kind of its latest attempt at or before `r`.
pub fn error_distribution(tasks: &[(&str, TaskRecords<'_>)], k: u32) -> BTreeMap<FailureKind, Vec<u32>> {
    let mut table: BTreeMap<FailureKind, Vec<u32>> = BTreeMap::new();
    for (_, recs) in tasks {
        for round in 0..=k {
            let upto: Vec<&OutcomeRecord> = recs.iter().filter(|r| r.attempt_index <= round).collect();
            if upto.iter().any(|r| plot_produced(&r.outcome)) {
                continue;
            }
            let Some(latest) = upto.last() else { continue };
            if let Some(kind) = FailureKind::of(&latest.outcome) {
                table.entry(kind).or_insert_with(|| vec![0; k as usize + 1])[round as usize] += 1;
            }
        }
    }
    table
}

/// Externally produced judge scores, keyed by task id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores(pub BTreeMap<String, JudgeScore>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub vis: f64,
    pub task: f64,
}

impl JudgeScores {
    pub fn from_json(raw: &str) -> Result<Self, MetricsError> {
        let scores: JudgeScores = serde_json::from_str(raw).map_err(|e| MetricsError::JudgeFile(e.to_string()))?;
        for (id, s) in &scores.0 {
            for value in [s.vis, s.task] {
                if !(0.0..=100.0).contains(&value) {
                    return Err(MetricsError::JudgeOutOfRange {
                        task_id: id.clone(),
                        value,
                    });
                }
            }
        }
        Ok(scores)
    }

    pub fn from_file(path: &Path) -> Result<Self, MetricsError> {
        let raw = std::fs::read_to_string(path).map_err(|e| MetricsError::JudgeFile(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }
}

pub const GOOD_THRESHOLD: f64 = 75.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct JudgeSummary {
    pub scored_tasks: u32,
    pub vis_mean: u32,
    pub vis_good_percent: u32,
    pub task_mean: u32,
    pub task_good_percent: u32,
}

fn mean_half_up(values: &[f64]) -> u32 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    // Scores are at most 100 with few decimals; nudge past representation error.
    (mean + 0.5 + 1e-9).floor() as u32
}

/// Integer means and the share of tasks scoring at least 75, over the tasks
/// in `task_ids` that have a score.
pub fn summarize_judge(scores: &JudgeScores, task_ids: &[&str]) -> Option<JudgeSummary> {
    let scored: Vec<JudgeScore> = task_ids.iter().filter_map(|id| scores.0.get(*id).copied()).collect();
    if scored.is_empty() {
        return None;
    }
    let n = scored.len() as u64;
    let vis: Vec<f64> = scored.iter().map(|s| s.vis).collect();
    let task: Vec<f64> = scored.iter().map(|s| s.task).collect();
    let good = |xs: &[f64]| xs.iter().filter(|x| **x >= GOOD_THRESHOLD).count() as u64;
    Some(JudgeSummary {
        scored_tasks: n as u32,
        vis_mean: mean_half_up(&vis),
        vis_good_percent: int_percent(good(&vis), n),
        task_mean: mean_half_up(&task),
        task_good_percent: int_percent(good(&task), n),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransitionRow {
    pub error_class: String,
    pub group: Option<ErrorGroup>,
    pub initial: u32,
    pub r#final: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DistributionRow {
    pub error_class: String,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LibraryReport {
    pub library: PlotLibrary,
    pub tasks: u32,
    /// Default-mode execution pass rate (attempt 0).
    pub exec_pass: PassRate,
    /// Share of final outputs with no plot.
    pub incorrect_code_rate: PassRate,
    pub columns: Vec<String>,
    pub round_exec_pass: Vec<PassRate>,
    pub round_fixed: Vec<PassRate>,
    pub transitions: Vec<TransitionRow>,
    pub errors_by_round: Vec<DistributionRow>,
    pub judge: Option<JudgeSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub run_id: String,
    pub rounds: u32,
    pub tasks: u32,
    pub quarantined: Vec<QuarantineEntry>,
    pub libraries: Vec<LibraryReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "text" => Ok(Self::Text),
            other => Err(MetricsError::UnknownFormat(other.to_string())),
        }
    }
}

/// Rendered report: one document, or several named CSV tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportArtifact {
    Document(String),
    Tables(Vec<(String, String)>),
}

impl ReportArtifact {
    /// Everything concatenated, for printing.
    pub fn to_text(&self) -> String {
        match self {
            ReportArtifact::Document(s) => s.clone(),
            ReportArtifact::Tables(tables) => tables
                .iter()
                .map(|(name, body)| format!("# {name}\n{body}"))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

const DASH: &str = "—";

/// Build the report from persisted state only. Quarantined tasks are excluded.
pub fn build_report(state: &RunState, judge: Option<&JudgeScores>) -> Result<Report, MetricsError> {
    let k = state.manifest.rounds_completed;
    let mut by_library: BTreeMap<PlotLibrary, Vec<(&str, TaskRecords<'_>)>> = BTreeMap::new();
    let excluded: BTreeSet<&str> = state.manifest.quarantined.iter().map(|q| q.task_id.as_str()).collect();
    for task in &state.tasks {
        if excluded.contains(task.id.as_str()) {
            continue;
        }
        let Some(recs) = state.records.get(&task.id) else { continue };
        by_library.entry(task.library.clone()).or_default().push((task.id.as_str(), recs.as_slice()));
    }
    let mut libraries = Vec::new();
    for (library, tasks) in &by_library {
        let row = per_round_row(library.clone(), tasks, k)?;
        let recs: Vec<TaskRecords<'_>> = tasks.iter().map(|(_, r)| *r).collect();
        let initial: Vec<OutcomeRecord> = recs.iter().map(|r| r[0].clone()).collect();
        let finals: Vec<OutcomeRecord> = recs
            .iter()
            .map(|r| final_record(r).cloned().expect("nonempty"))
            .collect();
        let table = transition_table(&initial, &finals, library.clone())?;
        let ids: Vec<&str> = tasks.iter().map(|(id, _)| *id).collect();
        libraries.push(LibraryReport {
            library: library.clone(),
            tasks: tasks.len() as u32,
            exec_pass: row.exec[0],
            incorrect_code_rate: incorrect_code_rate(&recs)?,
            columns: round_columns(k),
            round_exec_pass: row.exec.clone(),
            round_fixed: row.fixed.clone(),
            transitions: transition_rows(&table),
            errors_by_round: error_distribution(tasks, k)
                .into_iter()
                .map(|(kind, counts)| DistributionRow {
                    error_class: kind.label().to_string(),
                    counts,
                })
                .collect(),
            judge: judge.and_then(|j| summarize_judge(j, &ids)),
        });
    }
    Ok(Report {
        run_id: state.manifest.run_id.clone(),
        rounds: k,
        tasks: by_library.values().map(|v| v.len() as u32).sum(),
        quarantined: state.manifest.quarantined.clone(),
        libraries,
    })
}

fn transition_rows(table: &TransitionTable) -> Vec<TransitionRow> {
    table
        .rows
        .iter()
        .map(|(kind, counts)| TransitionRow {
            error_class: kind.label().to_string(),
            group: match kind {
                FailureKind::Error(c) => Some(group_of(c)),
                FailureKind::NoPlot => None,
            },
            initial: counts.initial,
            r#final: counts.r#final,
        })
        .collect()
}

pub fn render_report(
    state: &RunState,
    judge: Option<&JudgeScores>,
    format: ReportFormat,
) -> Result<ReportArtifact, MetricsError> {
    let report = build_report(state, judge)?;
    Ok(match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
            s.push('\n');
            ReportArtifact::Document(s)
        }
        ReportFormat::Text => ReportArtifact::Document(render_text(&report)),
        ReportFormat::Csv => ReportArtifact::Tables(render_csv(&report)),
    })
}

fn judge_cells(j: Option<&JudgeSummary>) -> [String; 4] {
    match j {
        Some(j) => [
            j.vis_mean.to_string(),
            format!("{}%", j.vis_good_percent),
            j.task_mean.to_string(),
            format!("{}%", j.task_good_percent),
        ],
        None => std::array::from_fn(|_| DASH.to_string()),
    }
}

pub fn render_text(report: &Report) -> String {
    let mut out = format!(
        "Run {} (K = {}, {} tasks, {} quarantined)\n",
        report.run_id,
        report.rounds,
        report.tasks,
        report.quarantined.len()
    );
    for q in &report.quarantined {
        out.push_str(&format!(
            "  quarantined: {} at attempt {} ({})\n",
            q.task_id, q.attempt_index, q.reason
        ));
    }
    let header = std::iter::once("Normal".to_string())
        .chain((1..=report.rounds).map(|i| format!("Round {i}")))
        .collect::<Vec<_>>()
        .join(" & ");
    for lib in &report.libraries {
        let [vis_mean, vis_good, task_mean, task_good] = judge_cells(lib.judge.as_ref());
        out.push_str(&format!("\n== {} ({} tasks) ==\n", lib.library.display_name(), lib.tasks));
        out.push_str(&format!("Exec Pass:            {}\n", lib.exec_pass));
        out.push_str(&format!("Incorrect Code Rate:  {}\n", lib.incorrect_code_rate));
        out.push_str(&format!("Vis Mean / Good:      {vis_mean} / {vis_good}\n"));
        out.push_str(&format!("Task Mean / Good:     {task_mean} / {task_good}\n"));
        out.push_str(&format!("\nExecution pass rate by round ({header}):\n"));
        out.push_str(&format!("  exec   {}\n", join_cells(&lib.round_exec_pass)));
        out.push_str(&format!("  fixed  {}\n", join_cells(&lib.round_fixed)));
        if !lib.transitions.is_empty() {
            out.push_str("\nError transitions (initial → final):\n");
            let width = lib.transitions.iter().map(|t| t.error_class.len()).max().unwrap_or(0);
            for t in &lib.transitions {
                out.push_str(&format!("  {:<width$}  {} → {}\n", t.error_class, t.initial, t.r#final));
            }
        }
        if !lib.errors_by_round.is_empty() {
            out.push_str(&format!("\nErrors by round ({header}):\n"));
            let width = lib.errors_by_round.iter().map(|t| t.error_class.len()).max().unwrap_or(0);
            for row in &lib.errors_by_round {
                let cells = row.counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" & ");
                out.push_str(&format!("  {:<width$}  {cells}\n", row.error_class));
            }
            let totals: Vec<String> = (0..=report.rounds as usize)
                .map(|i| lib.errors_by_round.iter().map(|r| r.counts[i]).sum::<u32>().to_string())
                .collect();
            out.push_str(&format!("  {:<width$}  {}\n", "Total Errors", totals.join(" & ")));
        }
    }
    out
}

/// `summary.csv`, `rounds.csv`, `transitions.csv`, `errors_by_round.csv`.
pub fn render_csv(report: &Report) -> Vec<(String, String)> {
    let cols = round_columns(report.rounds).join(",");
    let mut summary = String::from("library,tasks,exec_pass,incorrect_code_rate,vis_mean,vis_good,task_mean,task_good\n");
    let mut rounds = format!("library,series,{cols}\n");
    let mut transitions = String::from("library,error_class,group,initial,final\n");
    let mut errors = format!("library,error_class,{cols}\n");
    for lib in &report.libraries {
        let [vm, vg, tm, tg] = judge_cells(lib.judge.as_ref());
        summary.push_str(&format!(
            "{},{},{},{},{vm},{vg},{tm},{tg}\n",
            lib.library, lib.tasks, lib.exec_pass, lib.incorrect_code_rate
        ));
        let cells = |rates: &[PassRate]| rates.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
        rounds.push_str(&format!("{},exec,{}\n", lib.library, cells(&lib.round_exec_pass)));
        rounds.push_str(&format!("{},fixed,{}\n", lib.library, cells(&lib.round_fixed)));
        for t in &lib.transitions {
            let group = match t.group {
                Some(ErrorGroup::Structural) => "structural",
                Some(ErrorGroup::Semantic) => "semantic",
                Some(ErrorGroup::Other) => "other",
                None => "",
            };
            transitions.push_str(&format!("{},{},{group},{},{}\n", lib.library, t.error_class, t.initial, t.r#final));
        }
        for row in &lib.errors_by_round {
            let cells = row.counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
            errors.push_str(&format!("{},{},{cells}\n", lib.library, row.error_class));
        }
    }
    vec![
        ("summary.csv".into(), summary),
        ("rounds.csv".into(), rounds),
        ("transitions.csv".into(), transitions),
        ("errors_by_round.csv".into(), errors),
    ]
}
