//! Default generation followed by up to `K` feedback-driven repair rounds.
//!
//! Round 0 generates once per task. Every task whose output fails the fix
//! criterion (clean execution *and* a rendered plot) forms the frontier
//! `F_0`. Round `i` revisits only the tasks in `F_{i-1}`, sending a dialogue
//! that replays the original request, every earlier reply, and an error
//! report for each. Tasks that get fixed leave the frontier for good. When
//! the rounds are spent, each task's final output is its fixing attempt, or
//! its last failed attempt.
//!
//! Attempts within a round run in parallel; a barrier separates rounds and
//! records are persisted in `(task_id, attempt_index)` order, so scheduling
//! never shows up in the log. Attempts already in the log are reused, which
//! makes a run resumable and extendable to more rounds.
//!
//! Infrastructure failures of the sandbox never count against the model: the
//! execution is retried once, then the task is quarantined and excluded from
//! every metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::codeblock::{extract_code, CandidateCode};
use crate::gateway::{ChatDialogue, ChatMessage, CompletionResult, Gateway, GatewayError};
use crate::pool::par_map;
use crate::prompts::{fill, PromptSet};
use crate::sandbox::{plot_produced, ExecLimits, ExecStatus, ExecutionOutcome, ExecutionRequest, Executor, SandboxError};
use crate::task_store::{BenchTask, OutcomeRecord, QuarantineEntry, RunStore, StoreError};

/// Anything that can answer a chat dialogue.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, dialogue: &ChatDialogue) -> Result<CompletionResult, GatewayError>;
}

impl ChatBackend for Gateway {
    fn complete(&self, dialogue: &ChatDialogue) -> Result<CompletionResult, GatewayError> {
        Gateway::complete(self, dialogue)
    }
}

pub const DEFAULT_ROUNDS: u32 = 3;
pub const DEFAULT_TRACEBACK_TAIL: usize = 120;
const EMPTY_REPLY_PLACEHOLDER: &str = "(empty response)";

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub rounds: u32,
    pub workers: usize,
    pub limits: ExecLimits,
    pub traceback_tail_lines: usize,
    pub prompts: PromptSet,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            workers: 1,
            limits: ExecLimits::default(),
            traceback_tail_lines: DEFAULT_TRACEBACK_TAIL,
            prompts: PromptSet::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptRecord {
    pub attempt_index: u32,
    pub dialogue: ChatDialogue,
    pub response: String,
    /// `None` when the reply held no usable code.
    pub candidate: Option<CandidateCode>,
    pub outcome: ExecutionOutcome,
    pub fixed: bool,
}

impl AttemptRecord {
    fn new(attempt_index: u32, dialogue: ChatDialogue, response: String, candidate: Option<CandidateCode>, outcome: ExecutionOutcome) -> Self {
        let fixed = plot_produced(&outcome);
        Self {
            attempt_index,
            dialogue,
            response,
            candidate,
            outcome,
            fixed,
        }
    }

    pub fn to_outcome_record(&self, task_id: &str, is_final: bool) -> OutcomeRecord {
        OutcomeRecord {
            task_id: task_id.to_string(),
            attempt_index: self.attempt_index,
            candidate_code: self.candidate.as_ref().map(|c| c.source.clone()).unwrap_or_default(),
            response: self.response.clone(),
            outcome: self.outcome.clone(),
            is_final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptHistory {
    pub task_id: String,
    pub attempts: Vec<AttemptRecord>,
    pub final_index: usize,
}

impl AttemptHistory {
    fn new(task_id: &str, first: AttemptRecord) -> Self {
        Self {
            task_id: task_id.to_string(),
            attempts: vec![first],
            final_index: 0,
        }
    }

    fn push(&mut self, attempt: AttemptRecord) {
        self.attempts.push(attempt);
        self.refresh_final();
    }

    fn refresh_final(&mut self) {
        self.final_index = self
            .attempts
            .iter()
            .position(|a| a.fixed)
            .unwrap_or(self.attempts.len() - 1);
    }

    pub fn latest(&self) -> &AttemptRecord {
        self.attempts.last().expect("history is never empty")
    }

    pub fn final_attempt(&self) -> &AttemptRecord {
        &self.attempts[self.final_index]
    }

    pub fn is_fixed(&self) -> bool {
        self.attempts.iter().any(|a| a.fixed)
    }

    /// Attempt index at which the task was fixed, if it was.
    pub fn fixed_at(&self) -> Option<u32> {
        self.attempts.iter().find(|a| a.fixed).map(|a| a.attempt_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolState {
    pub k: u32,
    pub round: u32,
    /// `failed_sets[i]` is the frontier after round `i`.
    pub failed_sets: Vec<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolRun {
    pub state: ProtocolState,
    pub histories: BTreeMap<String, AttemptHistory>,
    pub quarantined: Vec<QuarantineEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("backend failure on task {task_id:?} attempt {attempt}: {source}")]
    Backend {
        task_id: String,
        attempt: u32,
        #[source]
        source: GatewayError,
    },
    #[error("protocol misuse: {0}")]
    ProtocolMisuse(String),
    #[error("task file changed since the run started (manifest {expected}, now {actual}); refusing to continue")]
    TaskDrift { expected: String, actual: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("sandbox error: {0}")]
    Sandbox(#[from] SandboxError),
}

/// The first user turn: task instruction plus data preview.
pub fn task_prompt(task: &BenchTask, prompts: &PromptSet) -> String {
    fill(
        &prompts.task,
        &[
            ("instruction", task.instruction.trim()),
            ("data_preview", task.data_preview.trim_end()),
            ("library", task.library.tag()),
        ],
    )
}

fn opening(task: &BenchTask, prompts: &PromptSet) -> Vec<ChatMessage> {
    let mut messages = Vec::new();
    if let Some(system) = prompts.system.as_deref().filter(|s| !s.trim().is_empty()) {
        messages.push(ChatMessage::system(system));
    }
    messages.push(ChatMessage::user(task_prompt(task, prompts)));
    messages
}

/// Keep the last `tail` lines; note how many were dropped.
pub fn truncate_traceback(traceback: &str, tail: usize) -> String {
    let lines: Vec<&str> = traceback.trim_end().lines().collect();
    if lines.len() <= tail {
        return lines.join("\n");
    }
    let dropped = lines.len() - tail;
    let mut out = format!("... ({dropped} earlier traceback lines omitted)\n");
    out.push_str(&lines[dropped..].join("\n"));
    out
}

/// The correction request for one failed attempt.
pub fn correction_message(outcome: &ExecutionOutcome, prompts: &PromptSet, tail: usize) -> String {
    if outcome.status == ExecStatus::Success {
        return fill(&prompts.repair_no_plot, &[]);
    }
    let class = outcome
        .error_class
        .as_ref()
        .map(|c| c.name().to_string())
        .unwrap_or_else(|| "Exception".into());
    let message = match (&outcome.exception_message, outcome.status) {
        (Some(m), _) if !m.trim().is_empty() => m.trim().to_string(),
        (_, ExecStatus::Timeout) => "execution timed out and was interrupted".to_string(),
        _ => "(no message)".to_string(),
    };
    let traceback = outcome
        .traceback
        .as_deref()
        .filter(|t| !t.trim().is_empty())
        .map(|t| truncate_traceback(t, tail))
        .unwrap_or_else(|| "(no traceback)".to_string());
    fill(
        &prompts.repair,
        &[
            ("error_class", &class),
            ("exception_message", &message),
            ("traceback", &traceback),
        ],
    )
}

/// Original request, then for every earlier attempt its reply and an error
/// report, in order.
pub fn build_repair_dialogue(
    task: &BenchTask,
    history: &AttemptHistory,
    prompts: &PromptSet,
    traceback_tail: usize,
) -> Result<ChatDialogue, EngineError> {
    if history.is_fixed() {
        return Err(EngineError::ProtocolMisuse(format!(
            "task {:?} is already fixed; no repair dialogue applies",
            task.id
        )));
    }
    let mut messages = opening(task, prompts);
    for attempt in &history.attempts {
        let reply = if attempt.response.trim().is_empty() {
            EMPTY_REPLY_PLACEHOLDER.to_string()
        } else {
            attempt.response.clone()
        };
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(correction_message(&attempt.outcome, prompts, traceback_tail)));
    }
    Ok(ChatDialogue::new(messages))
}

enum AttemptResult {
    Done(AttemptRecord),
    Quarantined(String),
}

/// Generate, extract, execute. Infrastructure failures are retried once.
fn run_attempt(
    task: &BenchTask,
    attempt_index: u32,
    dialogue: ChatDialogue,
    backend: &dyn ChatBackend,
    executor: &dyn Executor,
    workdir: &Path,
    limits: ExecLimits,
) -> Result<AttemptResult, EngineError> {
    let reply = backend.complete(&dialogue).map_err(|source| EngineError::Backend {
        task_id: task.id.clone(),
        attempt: attempt_index,
        source,
    })?;
    let candidate = extract_code(&reply.text).ok();
    let Some(code) = candidate.clone() else {
        // Nothing to run: equivalent to executing an empty program.
        let outcome = ExecutionOutcome::success(Vec::new(), 0);
        return Ok(AttemptResult::Done(AttemptRecord::new(attempt_index, dialogue, reply.text, None, outcome)));
    };
    let mut last_infra = String::new();
    for _ in 0..2 {
        if workdir.exists() {
            fs::remove_dir_all(workdir).map_err(SandboxError::from)?;
        }
        let request = ExecutionRequest::new(code.clone(), workdir, limits);
        match executor.execute(&request) {
            Ok(outcome) => {
                return Ok(AttemptResult::Done(AttemptRecord::new(
                    attempt_index,
                    dialogue,
                    reply.text,
                    candidate,
                    outcome,
                )))
            }
            Err(e) if e.is_infrastructure() => {
                log::warn!("task {} attempt {attempt_index}: {e}", task.id);
                last_infra = e.to_string();
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(AttemptResult::Quarantined(last_infra))
}

/// One default-generation attempt for `task`.
pub fn initial_attempt(
    task: &BenchTask,
    backend: &dyn ChatBackend,
    executor: &dyn Executor,
    workdir: &Path,
    config: &EngineConfig,
) -> Result<Option<AttemptRecord>, EngineError> {
    let dialogue = ChatDialogue::new(opening(task, &config.prompts));
    match run_attempt(task, 0, dialogue, backend, executor, workdir, config.limits)? {
        AttemptResult::Done(a) => Ok(Some(a)),
        AttemptResult::Quarantined(_) => Ok(None),
    }
}

fn from_persisted(
    task: &BenchTask,
    record: &OutcomeRecord,
    history: Option<&AttemptHistory>,
    config: &EngineConfig,
) -> Result<AttemptRecord, EngineError> {
    let dialogue = match history {
        None => ChatDialogue::new(opening(task, &config.prompts)),
        Some(h) => build_repair_dialogue(task, h, &config.prompts, config.traceback_tail_lines)?,
    };
    let candidate = (!record.candidate_code.is_empty())
        .then(|| extract_code(&record.response).ok())
        .flatten();
    Ok(AttemptRecord::new(
        record.attempt_index,
        dialogue,
        record.response.clone(),
        candidate,
        record.outcome.clone(),
    ))
}

/// Run (or resume) the protocol over `tasks` with `config.rounds` rounds.
///
/// `task_digest` is the digest of the task file `tasks` were read from; it
/// must match the digest the run was created with.
pub fn run_protocol(
    tasks: &[BenchTask],
    task_digest: &str,
    backend: &dyn ChatBackend,
    executor: &dyn Executor,
    store: &mut RunStore,
    config: &EngineConfig,
) -> Result<ProtocolRun, EngineError> {
    let mut manifest = store.manifest()?;
    if manifest.task_file_digest != task_digest {
        return Err(EngineError::TaskDrift {
            expected: manifest.task_file_digest.clone(),
            actual: task_digest.to_string(),
        });
    }
    if config.rounds < manifest.rounds_completed {
        return Err(EngineError::ProtocolMisuse(format!(
            "run already completed {} round(s); cannot evaluate with only {}",
            manifest.rounds_completed, config.rounds
        )));
    }
    manifest.configured_rounds = manifest.configured_rounds.max(config.rounds);
    store.update_manifest(&manifest)?;

    let by_id: BTreeMap<&str, &BenchTask> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut quarantined: Vec<QuarantineEntry> = manifest.quarantined.clone();
    let mut histories: BTreeMap<String, AttemptHistory> = BTreeMap::new();

    // Round 0.
    let round0: Vec<&BenchTask> = tasks.iter().filter(|t| !manifest.is_quarantined(&t.id)).collect();
    let results = par_map(config.workers, &round0, |task| -> Result<Option<AttemptResult>, EngineError> {
        if let Some(rec) = store.get(&task.id, 0) {
            return Ok(Some(AttemptResult::Done(from_persisted(task, rec, None, config)?)));
        }
        let dialogue = ChatDialogue::new(opening(task, &config.prompts));
        let workdir = store.artifact_dir(&task.id, 0);
        run_attempt(task, 0, dialogue, backend, executor, &workdir, config.limits).map(Some)
    });
    let first_error = absorb_round(0, &round0, results, store, &mut quarantined, &mut histories)?;
    if let Some(err) = first_error {
        persist_quarantine(store, &quarantined)?;
        return Err(err);
    }

    let mut failed_sets = vec![histories
        .values()
        .filter(|h| !h.is_fixed())
        .map(|h| h.task_id.clone())
        .collect::<BTreeSet<_>>()];

    for round in 1..=config.rounds {
        let previous = failed_sets.last().expect("F_0 exists");
        let frontier: Vec<&BenchTask> = previous.iter().map(|id| by_id[id.as_str()]).collect();
        let snapshot = &histories;
        let results = par_map(config.workers, &frontier, |task| -> Result<Option<AttemptResult>, EngineError> {
            let history = &snapshot[&task.id];
            if let Some(rec) = store.get(&task.id, round) {
                return Ok(Some(AttemptResult::Done(from_persisted(task, rec, Some(history), config)?)));
            }
            let dialogue = build_repair_dialogue(task, history, &config.prompts, config.traceback_tail_lines)?;
            let workdir = store.artifact_dir(&task.id, round);
            run_attempt(task, round, dialogue, backend, executor, &workdir, config.limits).map(Some)
        });
        let first_error = absorb_round(round, &frontier, results, store, &mut quarantined, &mut histories)?;
        if let Some(err) = first_error {
            persist_quarantine(store, &quarantined)?;
            return Err(err);
        }
        let next: BTreeSet<String> = previous
            .iter()
            .filter(|id| histories.get(*id).is_some_and(|h| !h.is_fixed()))
            .cloned()
            .collect();
        failed_sets.push(next);
        let mut manifest = store.manifest()?;
        manifest.rounds_completed = manifest.rounds_completed.max(round);
        manifest.quarantined = quarantined.clone();
        store.update_manifest(&manifest)?;
    }

    // Finalize: exactly one final record per surviving task.
    for history in histories.values() {
        for attempt in &history.attempts {
            let is_final = attempt.attempt_index as usize == history.final_index;
            store.persist(&attempt.to_outcome_record(&history.task_id, is_final))?;
        }
    }
    persist_quarantine(store, &quarantined)?;

    // Tasks quarantined in later rounds leave every frontier.
    let dropped: BTreeSet<&str> = quarantined.iter().map(|q| q.task_id.as_str()).collect();
    for set in &mut failed_sets {
        set.retain(|id| !dropped.contains(id.as_str()));
    }

    Ok(ProtocolRun {
        state: ProtocolState {
            k: config.rounds,
            round: config.rounds,
            failed_sets,
        },
        histories,
        quarantined,
    })
}

/// Fold one round's results into the histories, persisting new attempts in
/// task-id order. Returns the first backend error, after persisting the
/// attempts that did complete.
fn absorb_round(
    round: u32,
    tasks: &[&BenchTask],
    results: Vec<Result<Option<AttemptResult>, EngineError>>,
    store: &mut RunStore,
    quarantined: &mut Vec<QuarantineEntry>,
    histories: &mut BTreeMap<String, AttemptHistory>,
) -> Result<Option<EngineError>, EngineError> {
    let mut ordered: Vec<(&BenchTask, Result<Option<AttemptResult>, EngineError>)> =
        tasks.iter().copied().zip(results).collect();
    ordered.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let mut first_error = None;
    for (task, result) in ordered {
        match result {
            Ok(Some(AttemptResult::Done(attempt))) => {
                if store.get(&task.id, round).is_none() {
                    store.persist(&attempt.to_outcome_record(&task.id, false))?;
                }
                match histories.get_mut(&task.id) {
                    Some(h) => h.push(attempt),
                    None => {
                        histories.insert(task.id.clone(), AttemptHistory::new(&task.id, attempt));
                    }
                }
            }
            Ok(Some(AttemptResult::Quarantined(reason))) => {
                quarantined.push(QuarantineEntry {
                    task_id: task.id.clone(),
                    attempt_index: round,
                    reason,
                });
                histories.remove(&task.id);
            }
            Ok(None) => {}
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    Ok(first_error)
}

fn persist_quarantine(store: &RunStore, quarantined: &[QuarantineEntry]) -> Result<(), StoreError> {
    let mut manifest = store.manifest()?;
    if manifest.quarantined != quarantined {
        manifest.quarantined = quarantined.to_vec();
        store.update_manifest(&manifest)?;
    }
    Ok(())
}
