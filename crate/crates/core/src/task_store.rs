//! Benchmark tasks and persisted run state.
//!
//! A run directory holds:
//! - `manifest.json`: run identity, input digests, progress
//! - `tasks.jsonl`: byte copy of the task file the run was started with
//! - `records.jsonl`: append-only log of [`OutcomeRecord`]s
//! - `artifacts/<task_id>/<attempt>/`: execution workdirs kept for audit
//!
//! One [`RunStore`] owns the writes for a directory. A record line may be
//! appended again with only `is_final` changed; the latest line wins for that
//! flag. Any other difference for the same `(task_id, attempt_index)` is a
//! conflict.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::digest::{sha256_hex, write_atomic};
use crate::library::PlotLibrary;
use crate::sandbox::{ExecLimits, ExecutionOutcome};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const ARTIFACTS_DIR: &str = "artifacts";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchTask {
    pub id: String,
    pub library: PlotLibrary,
    pub instruction: String,
    pub data_preview: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid task {id:?}: {message}")]
    Validation { id: String, message: String },
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
    #[error("{0} is not a run directory (no manifest)")]
    NotARun(PathBuf),
    #[error("run directory {0} already exists and is not empty")]
    RunExists(PathBuf),
    #[error("conflicting record for task {task_id:?} attempt {attempt_index}")]
    Conflict { task_id: String, attempt_index: u32 },
    #[error("corrupt run state: {0}")]
    Corruption(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Read a JSONL task file, preserving order and rejecting duplicate ids.
pub fn load_tasks(path: &Path) -> Result<Vec<BenchTask>, StoreError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    parse_tasks(&raw, path)
}

pub fn parse_tasks(raw: &str, path: &Path) -> Result<Vec<BenchTask>, StoreError> {
    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: BenchTask = serde_json::from_str(line).map_err(|e| StoreError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if task.id.trim().is_empty() {
            return Err(StoreError::Validation {
                id: task.id,
                message: format!("empty id on line {}", idx + 1),
            });
        }
        if task.instruction.trim().is_empty() {
            return Err(StoreError::Validation {
                id: task.id,
                message: "empty instruction".into(),
            });
        }
        if !seen.insert(task.id.clone()) {
            return Err(StoreError::DuplicateId(task.id));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub task_id: String,
    pub attempt_index: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub task_file_digest: String,
    pub backend_config_digest: String,
    pub rounds_completed: u32,
    /// Largest round budget any invocation has asked for.
    pub configured_rounds: u32,
    pub limits: ExecLimits,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub quarantined: Vec<QuarantineEntry>,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, task_file_digest: String, backend_config_digest: String, limits: ExecLimits) -> Self {
        Self {
            run_id: run_id.into(),
            task_file_digest,
            backend_config_digest,
            rounds_completed: 0,
            configured_rounds: 0,
            limits,
            created_at: Utc::now(),
            quarantined: Vec::new(),
        }
    }

    pub fn is_quarantined(&self, task_id: &str) -> bool {
        self.quarantined.iter().any(|q| q.task_id == task_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub task_id: String,
    /// 0 is the default generation; i is self-debug round i.
    pub attempt_index: u32,
    pub candidate_code: String,
    /// Full model reply the candidate was extracted from.
    pub response: String,
    pub outcome: ExecutionOutcome,
    pub is_final: bool,
}

impl OutcomeRecord {
    fn same_content(&self, other: &OutcomeRecord) -> bool {
        self.task_id == other.task_id
            && self.attempt_index == other.attempt_index
            && self.candidate_code == other.candidate_code
            && self.response == other.response
            && self.outcome == other.outcome
    }
}

/// Everything persisted for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub manifest: RunManifest,
    pub tasks: Vec<BenchTask>,
    /// Records per task, ordered by attempt index (contiguous from 0).
    pub records: BTreeMap<String, Vec<OutcomeRecord>>,
}

impl RunState {
    pub fn task(&self, id: &str) -> Option<&BenchTask> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn final_record(&self, task_id: &str) -> Option<&OutcomeRecord> {
        self.records.get(task_id)?.iter().find(|r| r.is_final)
    }
}

/// Single writer for a run directory.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    index: BTreeMap<(String, u32), OutcomeRecord>,
    log: File,
}

impl RunStore {
    /// Create a run directory from a task file. The directory must be absent
    /// or empty.
    pub fn create(
        dir: &Path,
        task_file: &Path,
        backend_config_digest: String,
        limits: ExecLimits,
    ) -> Result<(RunStore, Vec<BenchTask>), StoreError> {
        let bytes = fs::read(task_file).map_err(io_err(task_file))?;
        let raw = String::from_utf8_lossy(&bytes);
        let tasks = parse_tasks(&raw, task_file)?;
        if dir.exists() && fs::read_dir(dir).map_err(io_err(dir))?.next().is_some() {
            return Err(StoreError::RunExists(dir.to_path_buf()));
        }
        fs::create_dir_all(dir.join(ARTIFACTS_DIR)).map_err(io_err(dir))?;
        let tasks_copy = dir.join(TASKS_FILE);
        fs::write(&tasks_copy, &bytes).map_err(io_err(&tasks_copy))?;
        let run_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let manifest = RunManifest::new(run_id, sha256_hex(&bytes), backend_config_digest, limits);
        write_manifest(dir, &manifest)?;
        let store = RunStore::open(dir)?;
        Ok((store, tasks))
    }

    /// Open an existing run for appending.
    pub fn open(dir: &Path) -> Result<RunStore, StoreError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(StoreError::NotARun(dir.to_path_buf()));
        }
        let records_path = dir.join(RECORDS_FILE);
        let index = read_record_log(&records_path)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&records_path)
            .map_err(io_err(&records_path))?;
        Ok(RunStore {
            dir: dir.to_path_buf(),
            index,
            log,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn artifact_dir(&self, task_id: &str, attempt_index: u32) -> PathBuf {
        artifact_dir(&self.dir, task_id, attempt_index)
    }

    pub fn get(&self, task_id: &str, attempt_index: u32) -> Option<&OutcomeRecord> {
        self.index.get(&(task_id.to_string(), attempt_index))
    }

    /// Append a record. Identical re-writes are no-ops; a change of only the
    /// `is_final` flag is appended as an update.
    pub fn persist(&mut self, record: &OutcomeRecord) -> Result<(), StoreError> {
        let key = (record.task_id.clone(), record.attempt_index);
        if let Some(existing) = self.index.get(&key) {
            if !existing.same_content(record) {
                return Err(StoreError::Conflict {
                    task_id: record.task_id.clone(),
                    attempt_index: record.attempt_index,
                });
            }
            if existing.is_final == record.is_final {
                return Ok(());
            }
        }
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let path = self.dir.join(RECORDS_FILE);
        self.log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.log.flush().map_err(io_err(&path))?;
        self.log.sync_data().map_err(io_err(&path))?;
        self.index.insert(key, record.clone());
        Ok(())
    }

    pub fn manifest(&self) -> Result<RunManifest, StoreError> {
        read_manifest(&self.dir)
    }

    pub fn update_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        write_manifest(&self.dir, manifest)
    }

    pub fn tasks(&self) -> Result<Vec<BenchTask>, StoreError> {
        load_tasks(&self.dir.join(TASKS_FILE))
    }
}

pub fn artifact_dir(run_dir: &Path, task_id: &str, attempt_index: u32) -> PathBuf {
    run_dir
        .join(ARTIFACTS_DIR)
        .join(sanitize_component(task_id))
        .join(attempt_index.to_string())
}

/// Task ids become directory names; keep them to a safe alphabet.
pub fn sanitize_component(id: &str) -> String {
    let cleaned: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if cleaned == id && !cleaned.chars().all(|c| c == '.') {
        cleaned
    } else {
        format!("{cleaned}-{}", &sha256_hex(id.as_bytes())[..8])
    }
}

/// Append one record to a run directory.
pub fn persist_record(run_dir: &Path, record: &OutcomeRecord) -> Result<(), StoreError> {
    RunStore::open(run_dir)?.persist(record)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&path, &bytes).map_err(io_err(&path))
}

fn read_manifest(dir: &Path) -> Result<RunManifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(StoreError::NotARun(dir.to_path_buf()));
    }
    let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&raw).map_err(|e| StoreError::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn read_record_log(path: &Path) -> Result<BTreeMap<(String, u32), OutcomeRecord>, StoreError> {
    let mut index: BTreeMap<(String, u32), OutcomeRecord> = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(index),
        Err(e) => return Err(io_err(path)(e)),
    };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: OutcomeRecord = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let key = (record.task_id.clone(), record.attempt_index);
        if let Some(existing) = index.get(&key) {
            if !existing.same_content(&record) {
                return Err(StoreError::Corruption(format!(
                    "line {}: conflicting duplicate for task {:?} attempt {}",
                    idx + 1,
                    record.task_id,
                    record.attempt_index
                )));
            }
        }
        index.insert(key, record);
    }
    Ok(index)
}

/// Load the manifest, the task copy, and every record grouped by task.
pub fn load_run(run_dir: &Path) -> Result<RunState, StoreError> {
    let manifest = read_manifest(run_dir)?;
    let tasks = load_tasks(&run_dir.join(TASKS_FILE))?;
    let index = read_record_log(&run_dir.join(RECORDS_FILE))?;
    let mut records: BTreeMap<String, Vec<OutcomeRecord>> = BTreeMap::new();
    for ((task_id, _), record) in index {
        records.entry(task_id).or_default().push(record);
    }
    for (task_id, list) in &mut records {
        list.sort_by_key(|r| r.attempt_index);
        for (expected, record) in list.iter().enumerate() {
            if record.attempt_index != expected as u32 {
                return Err(StoreError::Corruption(format!(
                    "task {task_id:?} has attempt {} but is missing attempt {expected}",
                    record.attempt_index
                )));
            }
        }
        if !tasks.iter().any(|t| &t.id == task_id) {
            return Err(StoreError::Corruption(format!(
                "records reference unknown task {task_id:?}"
            )));
        }
    }
    Ok(RunState {
        manifest,
        tasks,
        records,
    })
}
