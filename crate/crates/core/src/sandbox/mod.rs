//! Isolated execution of candidate plotting code.
//!
//! Every request runs in its own worker process and its own working
//! directory. The verdict contract mirrors notebook execution without
//! allowed errors: the run succeeds only when the script completes with no
//! uncaught exception, and a run that exceeds its time budget is interrupted
//! and reported as a `KeyboardInterrupt` timeout. Whether a plot was produced
//! is judged separately by [`plot_produced`].
//!
//! Two executors implement [`Executor`]:
//! - [`ProcessExecutor`] drives the runner shim over its one-line JSON protocol.
//! - [`FakeExecutor`] replays a scripted table of outcomes for tests.

mod fake;
mod process;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codeblock::CandidateCode;
use crate::pool::par_map;
use crate::taxonomy::ErrorClass;

pub use fake::{FakeExecutor, FakeImage, FakeOutcome, FakeRule, FakeScript, FakeStatus, FAKE_MARKER_FILE};
pub use process::{ProcessExecutor, RunnerPayload, RunnerResult, RunnerStatus};

/// File extensions accepted as rendered plots.
pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "svg", "pdf", "html"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub timeout_s: f64,
    /// Window between the interrupt and the hard kill.
    pub grace_s: f64,
    pub max_output_bytes: u64,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            timeout_s: 60.0,
            grace_s: 5.0,
            max_output_bytes: 1024 * 1024,
        }
    }
}

impl ExecLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(SandboxError::InvalidRequest(format!(
                "timeout_s must be positive, got {}",
                self.timeout_s
            )));
        }
        if !(self.grace_s >= 0.0 && self.grace_s.is_finite()) {
            return Err(SandboxError::InvalidRequest(format!(
                "grace_s must be non-negative, got {}",
                self.grace_s
            )));
        }
        if self.max_output_bytes == 0 {
            return Err(SandboxError::InvalidRequest(
                "max_output_bytes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExecutionRequest {
    pub code: CandidateCode,
    pub workdir: PathBuf,
    pub limits: ExecLimits,
    pub image_dir: PathBuf,
    /// Extra files materialized into the workdir before the run (e.g. a CSV
    /// the script loads). Names are relative to the workdir.
    pub files: Vec<(String, Vec<u8>)>,
}

impl ExecutionRequest {
    /// Request with the conventional `images/` directory inside `workdir`.
    pub fn new(code: CandidateCode, workdir: impl Into<PathBuf>, limits: ExecLimits) -> Self {
        let workdir = workdir.into();
        let image_dir = workdir.join("images");
        Self {
            code,
            workdir,
            limits,
            image_dir,
            files: Vec::new(),
        }
    }

    pub fn with_file(mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        self.files.push((name.into(), bytes.into()));
        self
    }

    /// Check request invariants and create the directories. The workdir must
    /// be absent or empty.
    pub fn prepare(&self) -> Result<(), SandboxError> {
        self.limits.validate()?;
        if !self.image_dir.starts_with(&self.workdir) {
            return Err(SandboxError::InvalidRequest(format!(
                "image_dir {} is not inside workdir {}",
                self.image_dir.display(),
                self.workdir.display()
            )));
        }
        if self.workdir.exists() {
            let mut entries = fs::read_dir(&self.workdir)?;
            if entries.next().is_some() {
                return Err(SandboxError::InvalidRequest(format!(
                    "workdir {} is not empty",
                    self.workdir.display()
                )));
            }
        }
        fs::create_dir_all(&self.image_dir)?;
        for (name, bytes) in &self.files {
            let rel = Path::new(name);
            if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(SandboxError::InvalidRequest(format!(
                    "support file {name:?} escapes the workdir"
                )));
            }
            let dest = self.workdir.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(dest, bytes)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Success,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageArtifact {
    /// Path relative to the request workdir, `/`-separated.
    pub path: String,
    pub bytes: u64,
}

impl ImageArtifact {
    pub fn new(path: impl Into<String>, bytes: u64) -> Self {
        Self {
            path: path.into(),
            bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traceback: Option<String>,
    #[serde(default)]
    pub images: Vec<ImageArtifact>,
    pub duration_ms: u64,
}

impl ExecutionOutcome {
    pub fn success(images: Vec<ImageArtifact>, duration_ms: u64) -> Self {
        Self {
            status: ExecStatus::Success,
            error_class: None,
            exception_message: None,
            traceback: None,
            images,
            duration_ms,
        }
    }

    pub fn error(
        class: ErrorClass,
        message: impl Into<String>,
        traceback: impl Into<String>,
        duration_ms: u64,
    ) -> Self {
        let traceback = traceback.into();
        Self {
            status: ExecStatus::Error,
            error_class: Some(class),
            exception_message: Some(message.into()),
            traceback: (!traceback.is_empty()).then_some(traceback),
            images: Vec::new(),
            duration_ms,
        }
    }

    pub fn timeout(duration_ms: u64) -> Self {
        Self {
            status: ExecStatus::Timeout,
            error_class: Some(ErrorClass::KEYBOARD_INTERRUPT),
            exception_message: None,
            traceback: None,
            images: Vec::new(),
            duration_ms,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == ExecStatus::Success
    }

    /// Check the status/class invariants.
    pub fn check(&self) -> Result<(), String> {
        match self.status {
            ExecStatus::Success if self.error_class.is_some() => {
                Err("successful outcome carries an error class".into())
            }
            ExecStatus::Error if self.error_class.is_none() => {
                Err("error outcome lacks an error class".into())
            }
            ExecStatus::Timeout if self.error_class != Some(ErrorClass::KEYBOARD_INTERRUPT) => {
                Err("timeout outcome must be classified KeyboardInterrupt".into())
            }
            _ => Ok(()),
        }
    }
}

/// True iff the run succeeded and left at least one non-empty image.
pub fn plot_produced(outcome: &ExecutionOutcome) -> bool {
    outcome.status == ExecStatus::Success
        && !outcome.images.is_empty()
        && outcome.images.iter().all(|img| img.bytes > 0)
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    /// The harness itself failed (runner protocol violation, spawn failure).
    /// Never attributed to the candidate code.
    #[error("infrastructure error: {0}")]
    Infrastructure(String),
    #[error("invalid execution request: {0}")]
    InvalidRequest(String),
    #[error("sandbox i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SandboxError {
    pub fn is_infrastructure(&self) -> bool {
        matches!(self, SandboxError::Infrastructure(_) | SandboxError::Io(_))
    }
}

pub trait Executor: Send + Sync {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutcome, SandboxError>;
}

impl<E: Executor + ?Sized> Executor for std::sync::Arc<E> {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutcome, SandboxError> {
        (**self).execute(request)
    }
}

impl<E: Executor + ?Sized> Executor for Box<E> {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutcome, SandboxError> {
        (**self).execute(request)
    }
}

/// Run requests on a pool of `width` workers. Output order matches input order.
pub fn execute_many(
    executor: &dyn Executor,
    requests: &[ExecutionRequest],
    width: usize,
) -> Vec<Result<ExecutionOutcome, SandboxError>> {
    par_map(width, requests, |req| executor.execute(req))
}

/// Every allow-listed, non-empty image under `image_dir`, as paths relative to
/// `workdir`, sorted.
pub fn scan_images(workdir: &Path, image_dir: &Path) -> std::io::Result<Vec<ImageArtifact>> {
    let mut found = Vec::new();
    if image_dir.is_dir() {
        walk(image_dir, &mut found)?;
    }
    let mut images = Vec::new();
    for path in found {
        let meta = fs::metadata(&path)?;
        if meta.len() == 0 {
            continue;
        }
        let rel = path.strip_prefix(workdir).unwrap_or(&path);
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        images.push(ImageArtifact::new(rel, meta.len()));
    }
    images.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(images)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let ft = entry.file_type()?;
        if ft.is_dir() {
            walk(&path, out)?;
        } else if ft.is_file() && has_image_extension(&path) {
            out.push(path);
        }
    }
    Ok(())
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .map(|ext| ext.to_string_lossy().to_ascii_lowercase())
        .is_some_and(|ext| IMAGE_EXTENSIONS.contains(&ext.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_produced_cases() {
        let one = ExecutionOutcome::success(vec![ImageArtifact::new("images/a.png", 34 * 1024)], 5);
        assert!(plot_produced(&one));
        assert!(!plot_produced(&ExecutionOutcome::success(vec![], 5)));
        let mut stale = ExecutionOutcome::error(ErrorClass::from_name("ValueError"), "m", "", 1);
        stale.images.push(ImageArtifact::new("images/old.png", 100));
        assert!(!plot_produced(&stale));
        let empty = ExecutionOutcome::success(vec![ImageArtifact::new("images/a.png", 0)], 5);
        assert!(!plot_produced(&empty));
    }

    #[test]
    fn outcome_invariants() {
        assert!(ExecutionOutcome::timeout(10).check().is_ok());
        assert!(ExecutionOutcome::success(vec![], 1).check().is_ok());
        let mut bad = ExecutionOutcome::success(vec![], 1);
        bad.error_class = Some(ErrorClass::from_name("TypeError"));
        assert!(bad.check().is_err());
    }

    #[test]
    fn scan_filters_extension_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        fs::create_dir_all(images.join("sub")).unwrap();
        fs::write(images.join("a.png"), b"x").unwrap();
        fs::write(images.join("sub/b.SVG"), b"<svg/>").unwrap();
        fs::write(images.join("c.txt"), b"no").unwrap();
        fs::write(images.join("d.png"), b"").unwrap();
        let found = scan_images(dir.path(), &images).unwrap();
        let paths: Vec<_> = found.iter().map(|i| i.path.as_str()).collect();
        assert_eq!(paths, ["images/a.png", "images/sub/b.SVG"]);
    }

    #[test]
    fn prepare_rejects_nonempty_workdir_and_escapes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("leftover"), b"x").unwrap();
        let req = ExecutionRequest::new(CandidateCode::bare("pass"), dir.path(), ExecLimits::default());
        assert!(matches!(req.prepare(), Err(SandboxError::InvalidRequest(_))));

        let fresh = dir.path().join("fresh");
        let req = ExecutionRequest::new(CandidateCode::bare("pass"), &fresh, ExecLimits::default())
            .with_file("../evil", b"x".to_vec());
        assert!(matches!(req.prepare(), Err(SandboxError::InvalidRequest(_))));
    }

    #[test]
    fn limits_validation() {
        let mut limits = ExecLimits::default();
        assert!(limits.validate().is_ok());
        limits.timeout_s = 0.0;
        assert!(limits.validate().is_err());
    }
}
