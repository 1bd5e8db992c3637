//! Dataset construction: library filtering, extraction or reconstruction of
//! standalone plotting scripts, runtime validation, library balancing,
//! dialogue filtering, and instruction assembly.
//!
//! Each stage maps a list to a list and reports why items were dropped.
//! Output order always follows input order, so a rerun with the same seed,
//! backend script and executor is byte-identical.

mod instruction;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use instruction::{
    assemble_instruction, locate_mock_data, parse_numbered_parts, InstructionParts, MockData, MOCK_BEGIN_MARKER,
    MOCK_CONNECTIVE, MOCK_END_MARKER, PREVIEW_CONNECTIVE,
};
pub use synthetic::{build_data_preview, has_render_call, reconstruct_synthetic, save_stanza, DataPreview, DATA_FILE};

use crate::codeblock::{extract_code, CandidateCode, SignatureTable};
use crate::gateway::{ChatDialogue, ChatMessage, GatewayError};
use crate::library::PlotLibrary;
use crate::pool::par_map;
use crate::prompts::{fill, PromptSet};
use crate::sandbox::{plot_produced, ExecLimits, ExecStatus, ExecutionRequest, Executor, SandboxError};
use crate::selfdebug::ChatBackend;
use crate::task_store::sanitize_component;
use crate::taxonomy::ErrorClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    EduCorpus,
    SyntheticCorpus,
    DialogueCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    #[serde(default)]
    pub source: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub detected_libraries: BTreeSet<PlotLibrary>,
    /// CSV text for items whose data is stored apart from the code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_table: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    MockInline,
    PreviewTwoRows,
}

impl DataMode {
    pub fn connective(self) -> &'static str {
        match self {
            DataMode::MockInline => MOCK_CONNECTIVE,
            DataMode::PreviewTwoRows => PREVIEW_CONNECTIVE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "error_class", rename_all = "snake_case")]
pub enum ValidationVerdict {
    Accepted,
    RejectedError(ErrorClass),
    RejectedNoImage,
    RejectedTimeout,
}

impl ValidationVerdict {
    /// Short label used in drop-reason counts.
    pub fn label(&self) -> String {
        match self {
            ValidationVerdict::Accepted => "accepted".into(),
            ValidationVerdict::RejectedError(class) => format!("rejected_error:{class}"),
            ValidationVerdict::RejectedNoImage => "rejected_no_image".into(),
            ValidationVerdict::RejectedTimeout => "rejected_timeout".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub id: String,
    pub library: PlotLibrary,
    pub provenance: Provenance,
    pub data_mode: DataMode,
    pub code_block: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ValidationVerdict>,
    /// Rendered image, relative to the validation work root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_parts: Option<InstructionParts>,
}

/// One finished dataset entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub instruction: String,
    pub code: String,
    pub library: PlotLibrary,
    pub image: Option<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueItem {
    pub id: String,
    pub turns: Vec<ChatMessage>,
    #[serde(default)]
    pub turn_count: usize,
    /// Sum of turn lengths in Unicode scalar values.
    #[serde(default)]
    pub total_chars: usize,
}

impl DialogueItem {
    pub fn new(id: impl Into<String>, turns: Vec<ChatMessage>) -> Self {
        Self {
            id: id.into(),
            turns,
            turn_count: 0,
            total_chars: 0,
        }
        .normalized()
    }

    /// Recompute the derived counts from the turns.
    pub fn normalized(mut self) -> Self {
        self.turn_count = self.turns.len();
        self.total_chars = self.turns.iter().map(|t| t.content.chars().count()).sum();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueLimits {
    pub max_turns: usize,
    pub max_chars: usize,
}

impl Default for DialogueLimits {
    fn default() -> Self {
        Self {
            max_turns: 10,
            max_chars: 16_000,
        }
    }
}

/// Item counts for one stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
}

impl StageReport {
    fn new(stage: &str, input: usize) -> Self {
        Self {
            stage: stage.into(),
            input,
            ..Default::default()
        }
    }

    fn drop(&mut self, reason: impl Into<String>) {
        *self.dropped.entry(reason.into()).or_default() += 1;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("reconstruction error: {0}")]
    Reconstruct(String),
    #[error("preview error: {0}")]
    Preview(String),
    #[error("instruction assembly error: empty part {part}")]
    Assembly { part: &'static str },
    #[error("instruction parse error: {0}")]
    Parse(String),
    #[error("item {id:?} has provenance {actual:?}, expected {expected:?}")]
    WrongProvenance {
        id: String,
        expected: Provenance,
        actual: Provenance,
    },
    #[error("backend failure on {id:?}: {source}")]
    Backend {
        id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn require_provenance(id: &str, actual: Provenance, expected: Provenance) -> Result<(), ForgeError> {
    if actual == expected {
        Ok(())
    } else {
        Err(ForgeError::WrongProvenance {
            id: id.into(),
            expected,
            actual,
        })
    }
}

/// Read a JSONL file; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ForgeError> {
    let io = |e: std::io::Error| ForgeError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut items = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| ForgeError::Io {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", idx + 1),
        })?);
    }
    Ok(items)
}

/// Write items as JSONL, one per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ForgeError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("forge types serialize");
        buf.push(b'\n');
    }
    let io = |e: std::io::Error| ForgeError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&buf).map_err(io)
}

/// The library a multi-library sample is filed under: any non-matplotlib
/// library outranks matplotlib, which is usually there only as a backend.
pub fn primary_library(libraries: &BTreeSet<PlotLibrary>) -> Option<PlotLibrary> {
    libraries
        .iter()
        .find(|l| !l.is_matplotlib())
        .or_else(|| libraries.iter().next())
        .cloned()
}

/// Keep items importing any wanted library, annotated with the matches.
pub fn filter_by_library(
    items: Vec<CorpusItem>,
    wanted: &BTreeSet<PlotLibrary>,
    table: &SignatureTable,
) -> (Vec<CorpusItem>, StageReport) {
    let mut report = StageReport::new("filter", items.len());
    let mut kept = Vec::new();
    for mut item in items {
        if item.provenance == Provenance::DialogueCorpus {
            report.drop("dialogue_item");
            continue;
        }
        let matches: BTreeSet<PlotLibrary> = table
            .detect(&item.source)
            .libraries
            .intersection(wanted)
            .cloned()
            .collect();
        if matches.is_empty() {
            report.drop("no_wanted_library");
            continue;
        }
        item.detected_libraries = matches;
        kept.push(item);
    }
    report.kept = kept.len();
    (kept, report)
}

/// What the extraction prompt yielded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Extraction {
    Block(String),
    /// The model answered the literal `null`.
    Null,
    /// The reply could not be used; the reason says why.
    Unusable(String),
}

fn is_null_reply(text: &str) -> bool {
    let t = text.trim().trim_matches('"').trim();
    t == "null"
}

/// Ask the backend for a minimal standalone block using the item's library.
pub fn extract_block(item: &CorpusItem, backend: &dyn ChatBackend, prompts: &PromptSet) -> Result<Extraction, ForgeError> {
    require_provenance(&item.id, item.provenance, Provenance::EduCorpus)?;
    let libraries = if item.detected_libraries.is_empty() {
        SignatureTable::default().detect(&item.source).libraries
    } else {
        item.detected_libraries.clone()
    };
    let used_libs = libraries.iter().map(|l| l.tag()).collect::<Vec<_>>().join(", ");
    let prompt = fill(&prompts.extraction, &[("used_libs", &used_libs), ("code", &item.source)]);
    let dialogue = ChatDialogue::new(vec![ChatMessage::user(prompt)]);
    let reply = backend.complete(&dialogue).map_err(|source| ForgeError::Backend {
        id: item.id.clone(),
        source,
    })?;
    let text = reply.text;
    if is_null_reply(&text) {
        return Ok(Extraction::Null);
    }
    if !text.contains("```") {
        return Ok(Extraction::Unusable("no fenced code block in reply".into()));
    }
    match extract_code(&text) {
        Ok(code) if is_null_reply(&code.source) => Ok(Extraction::Null),
        Ok(code) => Ok(Extraction::Block(code.source)),
        Err(e) => Ok(Extraction::Unusable(e.to_string())),
    }
}

/// Run extraction over edu items, keeping those that yield a block with a
/// detectable plotting library.
pub fn extract_all(
    items: &[CorpusItem],
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    workers: usize,
) -> Result<(Vec<DatasetSample>, StageReport), ForgeError> {
    let mut report = StageReport::new("extract", items.len());
    let table = SignatureTable::default();
    let results = par_map(workers, items, |item| extract_block(item, backend, prompts));
    let mut samples = Vec::new();
    for (item, result) in items.iter().zip(results) {
        let block = match result? {
            Extraction::Block(block) => block,
            Extraction::Null => {
                report.drop("null_reply");
                continue;
            }
            Extraction::Unusable(reason) => {
                report.drop(format!("unusable_reply: {reason}"));
                continue;
            }
        };
        let mut libraries = table.detect(&block).libraries;
        if libraries.is_empty() {
            libraries = item.detected_libraries.clone();
        }
        let Some(library) = primary_library(&libraries) else {
            report.drop("no_plotting_library");
            continue;
        };
        samples.push(DatasetSample {
            id: item.id.clone(),
            library,
            provenance: Provenance::EduCorpus,
            data_mode: DataMode::MockInline,
            code_block: block,
            data_table: None,
            verdict: None,
            image_path: None,
            instruction_parts: None,
        });
    }
    report.kept = samples.len();
    Ok((samples, report))
}

/// Reconstruct runnable scripts for synthetic items; items that cannot be
/// reconstructed are dropped with the reason.
pub fn reconstruct_all(items: &[CorpusItem]) -> Result<(Vec<DatasetSample>, StageReport), ForgeError> {
    let mut report = StageReport::new("reconstruct", items.len());
    let table = SignatureTable::default();
    let mut samples = Vec::new();
    for item in items {
        require_provenance(&item.id, item.provenance, Provenance::SyntheticCorpus)?;
        let mut libraries = item.detected_libraries.clone();
        if libraries.is_empty() {
            libraries = table.detect(&item.source).libraries;
        }
        let Some(library) = primary_library(&libraries) else {
            report.drop("no_plotting_library");
            continue;
        };
        let Some(data) = item.data_table.as_deref() else {
            report.drop("missing_data_table");
            continue;
        };
        match reconstruct_synthetic(&item.source, data, &library) {
            Ok(code) => samples.push(DatasetSample {
                id: item.id.clone(),
                library,
                provenance: Provenance::SyntheticCorpus,
                data_mode: DataMode::PreviewTwoRows,
                code_block: code,
                data_table: Some(data.to_string()),
                verdict: None,
                image_path: None,
                instruction_parts: None,
            }),
            Err(e) => report.drop(e.to_string()),
        }
    }
    report.kept = samples.len();
    Ok((samples, report))
}

/// Result of one validation run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Verdict {
        verdict: ValidationVerdict,
        /// First rendered image, relative to the work root.
        image: Option<String>,
    },
    /// The sandbox itself failed; the sample deserves another try.
    Deferred(String),
}

/// Execute a sample's code in `work_root/<id>` and judge the outcome.
/// Images anywhere in the sample's workdir count.
pub fn validate_sample(
    sample: &DatasetSample,
    executor: &dyn Executor,
    work_root: &Path,
    limits: ExecLimits,
) -> Result<Validation, ForgeError> {
    let dir_name = sanitize_component(&sample.id);
    let workdir = work_root.join(&dir_name);
    if workdir.exists() {
        fs::remove_dir_all(&workdir).map_err(SandboxError::from)?;
    }
    let mut request = ExecutionRequest::new(CandidateCode::bare(sample.code_block.clone()), &workdir, limits);
    request.image_dir = workdir.clone();
    if let Some(table) = &sample.data_table {
        request = request.with_file(DATA_FILE, table.as_bytes().to_vec());
    }
    let outcome = match executor.execute(&request) {
        Ok(outcome) => outcome,
        Err(e) if e.is_infrastructure() => return Ok(Validation::Deferred(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let verdict = match outcome.status {
        ExecStatus::Success if plot_produced(&outcome) => ValidationVerdict::Accepted,
        ExecStatus::Success => ValidationVerdict::RejectedNoImage,
        ExecStatus::Timeout => ValidationVerdict::RejectedTimeout,
        ExecStatus::Error => ValidationVerdict::RejectedError(
            outcome.error_class.clone().unwrap_or_else(|| ErrorClass::from_name("Exception")),
        ),
    };
    let image = (verdict == ValidationVerdict::Accepted)
        .then(|| outcome.images.first().map(|img| format!("{dir_name}/{}", img.path)))
        .flatten();
    Ok(Validation::Verdict { verdict, image })
}

/// Validate every sample; samples deferred by an infrastructure failure are
/// requeued once after the rest. Only accepted samples are returned.
pub fn validate_all(
    samples: &[DatasetSample],
    executor: &dyn Executor,
    work_root: &Path,
    limits: ExecLimits,
    workers: usize,
) -> Result<(Vec<DatasetSample>, StageReport), ForgeError> {
    let mut report = StageReport::new("validate", samples.len());
    let mut results: Vec<Validation> = par_map(workers, samples, |s| validate_sample(s, executor, work_root, limits))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let requeue: Vec<usize> = (0..samples.len())
        .filter(|&i| matches!(results[i], Validation::Deferred(_)))
        .collect();
    let retried: Vec<Result<Validation, ForgeError>> = par_map(workers, &requeue, |&i| {
        validate_sample(&samples[i], executor, work_root, limits)
    });
    for (i, result) in requeue.into_iter().zip(retried) {
        results[i] = result?;
    }
    let mut kept = Vec::new();
    for (sample, result) in samples.iter().zip(results) {
        match result {
            Validation::Deferred(_) => report.drop("infrastructure"),
            Validation::Verdict { verdict, image } => {
                if verdict == ValidationVerdict::Accepted {
                    let mut sample = sample.clone();
                    sample.verdict = Some(verdict);
                    sample.image_path = image;
                    kept.push(sample);
                } else {
                    report.drop(verdict.label());
                }
            }
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}

/// Subsample matplotlib down to the size of the largest other library, with
/// a seeded uniform draw. Everything else is kept, and input order is
/// preserved. A corpus without other libraries is returned unchanged.
pub fn balance_corpus(samples: Vec<DatasetSample>, seed: u64) -> Vec<DatasetSample> {
    let mut counts: BTreeMap<&PlotLibrary, usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry(&s.library).or_default() += 1;
    }
    let Some(target) = counts.iter().filter(|(l, _)| !l.is_matplotlib()).map(|(_, &n)| n).max() else {
        return samples;
    };
    let mpl: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].library.is_matplotlib()).collect();
    if mpl.len() <= target {
        return samples;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = index::sample(&mut rng, mpl.len(), target).into_iter().map(|k| mpl[k]).collect();
    samples
        .into_iter()
        .enumerate()
        .filter(|(i, s)| !s.library.is_matplotlib() || chosen.contains(i))
        .map(|(_, s)| s)
        .collect()
}

/// Library counts after balancing, as a drop report.
pub fn balance_report(before: &[DatasetSample], after: &[DatasetSample]) -> StageReport {
    let mut report = StageReport::new("balance", before.len());
    report.kept = after.len();
    let dropped = before.len() - after.len();
    if dropped > 0 {
        report.dropped.insert("matplotlib_subsampled".into(), dropped);
    }
    report
}

/// Keep dialogues within both limits.
pub fn filter_dialogues(items: Vec<DialogueItem>, limits: DialogueLimits) -> (Vec<DialogueItem>, StageReport) {
    let mut report = StageReport::new("dialogues", items.len());
    let mut kept = Vec::new();
    for item in items {
        let item = item.normalized();
        let too_many_turns = item.turn_count > limits.max_turns;
        let too_long = item.total_chars > limits.max_chars;
        match (too_many_turns, too_long) {
            (false, false) => kept.push(item),
            (true, false) => report.drop("turns"),
            (false, true) => report.drop("chars"),
            (true, true) => report.drop("turns_and_chars"),
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// Ask for the instruction parts of an accepted sample. Edu samples take
/// their data block from the code; synthetic samples from the table preview.
/// Returns the parts and whether the data block is a low-confidence guess.
pub fn generate_instruction_parts(
    sample: &DatasetSample,
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    image_root: Option<&Path>,
) -> Result<(InstructionParts, bool), ForgeError> {
    let (template, count) = match sample.provenance {
        Provenance::EduCorpus => (&prompts.instruction_edu, 5),
        Provenance::SyntheticCorpus => (&prompts.instruction_synthetic, 4),
        Provenance::DialogueCorpus => {
            return Err(ForgeError::WrongProvenance {
                id: sample.id.clone(),
                expected: Provenance::EduCorpus,
                actual: Provenance::DialogueCorpus,
            })
        }
    };
    let mut message = ChatMessage::user(fill(template, &[("code", &sample.code_block)]));
    if let (Some(root), Some(image)) = (image_root, &sample.image_path) {
        message = message.with_image(root.join(image));
    }
    let reply = backend
        .complete(&ChatDialogue::new(vec![message]))
        .map_err(|source| ForgeError::Backend {
            id: sample.id.clone(),
            source,
        })?;
    let parts = parse_numbered_parts(&reply.text, count)?;
    let mut it = parts.into_iter();
    let mut next = || it.next().expect("parser returned every part");
    match sample.provenance {
        Provenance::SyntheticCorpus => {
            let table = sample
                .data_table
                .as_deref()
                .ok_or_else(|| ForgeError::Preview(format!("sample {:?} has no data table", sample.id)))?;
            let preview = build_data_preview(table)?;
            let setup = next();
            let data_description = next();
            let plot_description = next();
            let style_description = next();
            Ok((
                InstructionParts {
                    plot_description,
                    setup,
                    data_description,
                    data_block: preview.text,
                    style_description,
                },
                false,
            ))
        }
        _ => {
            let setup = next();
            let data_description = next();
            let generated = next();
            let plot_description = next();
            let style_description = next();
            let (data_block, low_confidence) = match locate_mock_data(&sample.code_block) {
                Some(mock) => (mock.text, mock.low_confidence),
                None => (generated, true),
            };
            Ok((
                InstructionParts {
                    plot_description,
                    setup,
                    data_description,
                    data_block,
                    style_description,
                },
                low_confidence,
            ))
        }
    }
}

/// Generate and assemble instructions for accepted samples. A sample whose
/// reply does not parse is asked once more, then dropped.
pub fn instructions_all(
    samples: &[DatasetSample],
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    image_root: Option<&Path>,
    workers: usize,
) -> Result<(Vec<DatasetRecord>, StageReport), ForgeError> {
    let mut report = StageReport::new("instructions", samples.len());
    let attempt = |s: &DatasetSample| -> Result<Result<(InstructionParts, bool), String>, ForgeError> {
        if s.verdict.as_ref().is_some_and(|v| *v != ValidationVerdict::Accepted) {
            return Ok(Err("not_accepted".into()));
        }
        let mut last = String::new();
        for _ in 0..2 {
            match generate_instruction_parts(s, backend, prompts, image_root) {
                Ok(parts) => return Ok(Ok(parts)),
                Err(ForgeError::Parse(msg)) => last = format!("parse_error: {msg}"),
                Err(e) => return Err(e),
            }
        }
        Ok(Err(last))
    };
    let results = par_map(workers, samples, |s| attempt(s));
    let mut records = Vec::new();
    let mut low_confidence = 0;
    for (sample, result) in samples.iter().zip(results) {
        let (parts, low) = match result? {
            Ok(parts) => parts,
            Err(reason) => {
                report.drop(reason);
                continue;
            }
        };
        let instruction = match assemble_instruction(&parts, sample.data_mode) {
            Ok(text) => text,
            Err(e) => {
                report.drop(e.to_string());
                continue;
            }
        };
        low_confidence += usize::from(low);
        records.push(DatasetRecord {
            id: sample.id.clone(),
            instruction,
            code: sample.code_block.clone(),
            library: sample.library.clone(),
            image: sample.image_path.clone(),
            provenance: sample.provenance,
        });
    }
    if low_confidence > 0 {
        log::warn!("{low_confidence} sample(s) have a heuristically located data block");
    }
    report.kept = records.len();
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::CompletionResult;
    use crate::sandbox::{FakeExecutor, FakeOutcome, FakeRule, FakeScript, FakeStatus};

    struct Canned(Vec<(&'static str, &'static str)>);

    impl ChatBackend for Canned {
        fn complete(&self, dialogue: &ChatDialogue) -> Result<CompletionResult, GatewayError> {
            let prompt = &dialogue.messages[0].content;
            let text = self
                .0
                .iter()
                .find(|(needle, _)| prompt.contains(needle))
                .map(|(_, reply)| reply.to_string())
                .unwrap_or_default();
            Ok(CompletionResult {
                text,
                from_cache: false,
                latency_ms: 0,
            })
        }
    }

    fn edu(id: &str, source: &str) -> CorpusItem {
        CorpusItem {
            id: id.into(),
            source: source.into(),
            provenance: Provenance::EduCorpus,
            detected_libraries: BTreeSet::new(),
            data_table: None,
        }
    }

    fn sample(id: &str, library: PlotLibrary) -> DatasetSample {
        DatasetSample {
            id: id.into(),
            library,
            provenance: Provenance::EduCorpus,
            data_mode: DataMode::MockInline,
            code_block: format!("plot_{id}()"),
            data_table: None,
            verdict: None,
            image_path: None,
            instruction_parts: None,
        }
    }

    #[test]
    fn filter_keeps_wanted_and_annotates() {
        let items = vec![
            edu("a", "import seaborn as sns\nsns.histplot(x)"),
            edu("b", "import numpy as np\nprint(np.ones(3))"),
            edu("c", "import matplotlib.pyplot as plt\nimport plotly.express as px"),
        ];
        let wanted: BTreeSet<_> = [PlotLibrary::Seaborn, PlotLibrary::Plotly].into();
        let (kept, report) = filter_by_library(items, &wanted, &SignatureTable::default());
        let ids: Vec<_> = kept.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(kept[1].detected_libraries, [PlotLibrary::Plotly].into());
        assert_eq!(report.dropped["no_wanted_library"], 1);
    }

    #[test]
    fn extraction_replies() {
        let backend = Canned(vec![
            ("BLOCK", "```python\nimport seaborn as sns\nsns.lineplot(x=[1], y=[2])\n```"),
            ("NULL", "null"),
            ("PROSE", "This snippet does not really use the library."),
        ]);
        let prompts = PromptSet::default();
        let got = |src: &str| extract_block(&edu("x", src), &backend, &prompts).unwrap();
        assert!(matches!(got("import seaborn # BLOCK"), Extraction::Block(b) if b.starts_with("import seaborn")));
        assert_eq!(got("import seaborn # NULL"), Extraction::Null);
        assert!(matches!(got("import seaborn # PROSE"), Extraction::Unusable(_)));
    }

    #[test]
    fn extraction_requires_edu_items() {
        let mut item = edu("x", "import seaborn");
        item.provenance = Provenance::SyntheticCorpus;
        let backend = Canned(vec![]);
        assert!(matches!(
            extract_block(&item, &backend, &PromptSet::default()),
            Err(ForgeError::WrongProvenance { .. })
        ));
    }

    #[test]
    fn balance_reduces_matplotlib_to_largest_other() {
        let mut samples = Vec::new();
        for i in 0..100 {
            samples.push(sample(&format!("m{i:03}"), PlotLibrary::Matplotlib));
        }
        for i in 0..50 {
            samples.push(sample(&format!("p{i:03}"), PlotLibrary::Plotly));
        }
        for i in 0..30 {
            samples.push(sample(&format!("s{i:03}"), PlotLibrary::Seaborn));
        }
        let out = balance_corpus(samples.clone(), 7);
        let count = |lib: &PlotLibrary| out.iter().filter(|s| &s.library == lib).count();
        assert_eq!(count(&PlotLibrary::Matplotlib), 50);
        assert_eq!(count(&PlotLibrary::Plotly), 50);
        assert_eq!(count(&PlotLibrary::Seaborn), 30);
        assert_eq!(out, balance_corpus(samples, 7));
    }

    #[test]
    fn already_balanced_is_unchanged() {
        let mut samples: Vec<_> = (0..40).map(|i| sample(&format!("m{i}"), PlotLibrary::Matplotlib)).collect();
        samples.extend((0..50).map(|i| sample(&format!("p{i}"), PlotLibrary::Plotly)));
        assert_eq!(balance_corpus(samples.clone(), 1), samples);
        let only_mpl: Vec<_> = (0..5).map(|i| sample(&format!("m{i}"), PlotLibrary::Matplotlib)).collect();
        assert_eq!(balance_corpus(only_mpl.clone(), 1), only_mpl);
    }

    #[test]
    fn dialogue_limits() {
        let turns = |n: usize, len: usize| -> Vec<ChatMessage> {
            (0..n).map(|_| ChatMessage::user("x".repeat(len))).collect()
        };
        let items = vec![
            DialogueItem::new("ok", turns(6, 2_000 / 6)),
            DialogueItem::new("long", turns(14, 10)),
            DialogueItem::new("wide", turns(2, 9_000)),
        ];
        let (kept, report) = filter_dialogues(items, DialogueLimits::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "ok");
        assert_eq!(report.dropped["turns"], 1);
        assert_eq!(report.dropped["chars"], 1);
    }

    #[test]
    fn validation_verdicts() {
        let exec = FakeExecutor::new(FakeScript {
            rules: vec![
                FakeRule::contains("good", FakeOutcome::ok_with_image()),
                FakeRule::contains("imports", FakeOutcome::error("ImportError", "No module named 'x'")),
                FakeRule::contains("hangs", FakeOutcome::timeout()),
                FakeRule::contains("blank", FakeOutcome::ok_without_image()),
            ],
            default: None,
        });
        let root = tempfile::tempdir().unwrap();
        let limits = ExecLimits::default();
        let verdict = |code: &str| {
            let mut s = sample("v", PlotLibrary::Matplotlib);
            s.code_block = code.into();
            validate_sample(&s, &exec, root.path(), limits).unwrap()
        };
        match verdict("good()") {
            Validation::Verdict { verdict, image } => {
                assert_eq!(verdict, ValidationVerdict::Accepted);
                let image = image.unwrap();
                assert!(fs::metadata(root.path().join(&image)).unwrap().len() > 0);
            }
            other => panic!("{other:?}"),
        }
        let v = |code| match verdict(code) {
            Validation::Verdict { verdict, .. } => verdict,
            other => panic!("{other:?}"),
        };
        assert_eq!(v("imports()"), ValidationVerdict::RejectedError(ErrorClass::from_name("ImportError")));
        assert_eq!(v("hangs()"), ValidationVerdict::RejectedTimeout);
        assert_eq!(v("blank()"), ValidationVerdict::RejectedNoImage);
    }

    #[test]
    fn infrastructure_failure_is_requeued_once() {
        let flaky = FakeRule {
            infra_failures: 1,
            ..FakeRule::contains("flaky", FakeOutcome::ok_with_image())
        };
        let broken = FakeRule::contains(
            "broken",
            FakeOutcome {
                status: FakeStatus::Infra,
                ..FakeOutcome::ok_without_image()
            },
        );
        let exec = FakeExecutor::new(FakeScript {
            rules: vec![flaky, broken],
            default: None,
        });
        let mut a = sample("a", PlotLibrary::Seaborn);
        a.code_block = "flaky()".into();
        let mut b = sample("b", PlotLibrary::Seaborn);
        b.code_block = "broken()".into();
        let root = tempfile::tempdir().unwrap();
        let (kept, report) = validate_all(&[a, b], &exec, root.path(), ExecLimits::default(), 2).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "a");
        assert_eq!(report.dropped["infrastructure"], 1);
    }

    #[test]
    fn synthetic_instruction_uses_preview_not_reply() {
        let backend = Canned(vec![(
            "CODE",
            "1. Setup: Python with plotly.\n2. Data Description: Two numeric columns.\n3. Plot Description: Create a scatter plot.\n4. Plot Style Description: Large orange markers.",
        )]);
        let mut s = sample("syn", PlotLibrary::Plotly);
        s.provenance = Provenance::SyntheticCorpus;
        s.data_mode = DataMode::PreviewTwoRows;
        s.code_block = "# CODE".into();
        s.data_table = Some("a,b\n1,2\n3,4\n5,6\n".into());
        let (parts, low) = generate_instruction_parts(&s, &backend, &PromptSet::default(), None).unwrap();
        assert_eq!(parts.data_block, "a,b\n1,2\n3,4\n");
        assert_eq!(parts.plot_description, "Create a scatter plot.");
        assert!(!low);
    }

    #[test]
    fn unparseable_reply_drops_sample_after_retry() {
        let backend = Canned(vec![("CODE", "1. only one part")]);
        let mut s = sample("e", PlotLibrary::Seaborn);
        s.code_block = "# CODE".into();
        let (records, report) = instructions_all(&[s], &backend, &PromptSet::default(), None, 1).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.dropped.keys().next().unwrap(), "parse_error: reply is missing part 2");
    }
}
