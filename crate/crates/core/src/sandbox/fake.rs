//! Scripted executor: maps code fragments to canned outcomes without running
//! anything. Images named by a rule are written to disk for real, so the
//! artifact checks downstream behave exactly as with the process executor.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{scan_images, ExecutionOutcome, ExecutionRequest, Executor, SandboxError};
use crate::digest::sha256_hex;
use crate::taxonomy::{classify, ErrorClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeStatus {
    Ok,
    Error,
    Timeout,
    /// Simulates a runner protocol failure.
    Infra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeImage {
    pub name: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeOutcome {
    pub status: FakeStatus,
    #[serde(default)]
    pub exception_type: Option<String>,
    #[serde(default)]
    pub exception_message: Option<String>,
    #[serde(default)]
    pub traceback: Option<String>,
    #[serde(default)]
    pub images: Vec<FakeImage>,
    #[serde(default)]
    pub duration_ms: u64,
}

impl FakeOutcome {
    pub fn ok_with_image() -> Self {
        Self {
            status: FakeStatus::Ok,
            exception_type: None,
            exception_message: None,
            traceback: None,
            images: vec![FakeImage {
                name: "plot.png".into(),
                bytes: 1024,
            }],
            duration_ms: 0,
        }
    }

    pub fn ok_without_image() -> Self {
        Self {
            images: Vec::new(),
            ..Self::ok_with_image()
        }
    }

    pub fn error(exception_type: &str, message: &str) -> Self {
        Self {
            status: FakeStatus::Error,
            exception_type: Some(exception_type.into()),
            exception_message: Some(message.into()),
            traceback: Some(format!(
                "Traceback (most recent call last):\n  File \"candidate.py\", line 1, in <module>\n{exception_type}: {message}"
            )),
            images: Vec::new(),
            duration_ms: 0,
        }
    }

    pub fn timeout() -> Self {
        Self {
            status: FakeStatus::Timeout,
            ..Self::ok_without_image()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeRule {
    /// Matches when the candidate source contains this fragment.
    #[serde(default)]
    pub contains: Option<String>,
    /// Matches the SHA-256 of the candidate source.
    #[serde(default)]
    pub code_sha256: Option<String>,
    /// The first `infra_failures` matching executions report an
    /// infrastructure error before the outcome is served.
    #[serde(default)]
    pub infra_failures: u32,
    pub outcome: FakeOutcome,
}

impl FakeRule {
    pub fn contains(fragment: impl Into<String>, outcome: FakeOutcome) -> Self {
        Self {
            contains: Some(fragment.into()),
            code_sha256: None,
            infra_failures: 0,
            outcome,
        }
    }

    fn matches(&self, source: &str, digest: &str) -> bool {
        let by_text = self.contains.as_deref().map(|frag| source.contains(frag));
        let by_hash = self.code_sha256.as_deref().map(|h| h.eq_ignore_ascii_case(digest));
        match (by_text, by_hash) {
            (None, None) => false,
            (a, b) => a.unwrap_or(true) && b.unwrap_or(true),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FakeScript {
    #[serde(default)]
    pub rules: Vec<FakeRule>,
    #[serde(default)]
    pub default: Option<FakeOutcome>,
}

#[derive(Debug)]
pub struct FakeExecutor {
    script: FakeScript,
    infra_seen: Mutex<Vec<u32>>,
}

pub const FAKE_MARKER_FILE: &str = ".fake-executor";

impl FakeExecutor {
    pub fn new(script: FakeScript) -> Self {
        let n = script.rules.len();
        Self {
            script,
            infra_seen: Mutex::new(vec![0; n]),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, SandboxError> {
        let raw = fs::read_to_string(path)?;
        let script: FakeScript = serde_json::from_str(&raw).map_err(|e| {
            SandboxError::InvalidRequest(format!("bad fake executor script {}: {e}", path.display()))
        })?;
        Ok(Self::new(script))
    }

    fn pick(&self, source: &str) -> Result<FakeOutcome, SandboxError> {
        let digest = sha256_hex(source.as_bytes());
        for (idx, rule) in self.script.rules.iter().enumerate() {
            if rule.matches(source, &digest) {
                let mut seen = self.infra_seen.lock().expect("fake executor state poisoned");
                if seen[idx] < rule.infra_failures {
                    seen[idx] += 1;
                    return Err(SandboxError::Infrastructure(format!(
                        "scripted infrastructure failure (rule {idx})"
                    )));
                }
                return Ok(rule.outcome.clone());
            }
        }
        self.script.default.clone().ok_or_else(|| {
            SandboxError::Infrastructure(format!(
                "fake executor has no rule for code with sha256 {digest}"
            ))
        })
    }
}

impl Executor for FakeExecutor {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutcome, SandboxError> {
        request.prepare()?;
        let source = &request.code.source;
        fs::write(
            request.workdir.join(FAKE_MARKER_FILE),
            sha256_hex(source.as_bytes()),
        )?;
        let scripted = self.pick(source)?;
        for image in &scripted.images {
            let dest = request.image_dir.join(&image.name);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(dest, vec![0x89u8; image.bytes as usize])?;
        }
        let images = scan_images(&request.workdir, &request.image_dir)?;
        let outcome = match scripted.status {
            FakeStatus::Ok => ExecutionOutcome::success(images, scripted.duration_ms),
            FakeStatus::Error => {
                let traceback = scripted.traceback.unwrap_or_default();
                let class = classify(&traceback, scripted.exception_type.as_deref())
                    .unwrap_or_else(|_| ErrorClass::Other("Unknown".into()));
                let mut outcome = ExecutionOutcome::error(
                    class,
                    scripted.exception_message.unwrap_or_default(),
                    traceback,
                    scripted.duration_ms,
                );
                outcome.images = images;
                outcome
            }
            FakeStatus::Timeout => {
                let mut outcome = ExecutionOutcome::timeout(scripted.duration_ms);
                outcome.traceback = scripted.traceback;
                outcome
            }
            FakeStatus::Infra => {
                return Err(SandboxError::Infrastructure("scripted infrastructure failure".into()))
            }
        };
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codeblock::CandidateCode;
    use crate::sandbox::{plot_produced, ExecLimits, ExecStatus};

    fn req(dir: &Path, code: &str) -> ExecutionRequest {
        ExecutionRequest::new(CandidateCode::bare(code), dir, ExecLimits::default())
    }

    fn script() -> FakeScript {
        FakeScript {
            rules: vec![
                FakeRule::contains("savefig", FakeOutcome::ok_with_image()),
                FakeRule::contains("raise ValueError", FakeOutcome::error("ValueError", "bad")),
                FakeRule::contains("while True", FakeOutcome::timeout()),
            ],
            default: None,
        }
    }

    #[test]
    fn scripted_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let exec = FakeExecutor::new(script());

        let out = exec.execute(&req(&dir.path().join("a"), "plt.savefig('x.png')")).unwrap();
        assert_eq!(out.status, ExecStatus::Success);
        assert_eq!(out.images.len(), 1);
        assert!(plot_produced(&out));

        let out = exec.execute(&req(&dir.path().join("b"), "raise ValueError('bad')")).unwrap();
        assert_eq!(out.status, ExecStatus::Error);
        assert_eq!(out.error_class, Some(ErrorClass::from_name("ValueError")));
        assert!(out.traceback.as_deref().unwrap().ends_with("ValueError: bad"));

        let out = exec.execute(&req(&dir.path().join("c"), "while True: pass")).unwrap();
        assert_eq!(out.status, ExecStatus::Timeout);
        assert_eq!(out.error_class, Some(ErrorClass::KEYBOARD_INTERRUPT));
    }

    #[test]
    fn miss_is_infrastructure_error() {
        let dir = tempfile::tempdir().unwrap();
        let exec = FakeExecutor::new(script());
        let err = exec.execute(&req(dir.path(), "print(1)")).unwrap_err();
        assert!(err.is_infrastructure());
    }

    #[test]
    fn infra_failures_then_outcome() {
        let dir = tempfile::tempdir().unwrap();
        let mut rule = FakeRule::contains("flaky", FakeOutcome::ok_with_image());
        rule.infra_failures = 1;
        let exec = FakeExecutor::new(FakeScript {
            rules: vec![rule],
            default: None,
        });
        assert!(exec.execute(&req(&dir.path().join("1"), "flaky")).is_err());
        assert!(exec.execute(&req(&dir.path().join("2"), "flaky")).is_ok());
    }

    #[test]
    fn zero_byte_image_is_not_listed() {
        let dir = tempfile::tempdir().unwrap();
        let mut outcome = FakeOutcome::ok_with_image();
        outcome.images[0].bytes = 0;
        let exec = FakeExecutor::new(FakeScript {
            rules: vec![FakeRule::contains("x", outcome)],
            default: None,
        });
        let out = exec.execute(&req(dir.path(), "x")).unwrap();
        assert!(out.images.is_empty());
        assert!(!plot_produced(&out));
    }
}
