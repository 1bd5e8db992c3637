use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{scan_images, ExecutionOutcome, ExecutionRequest, Executor, SandboxError};
use crate::taxonomy::{classify, ErrorClass};

/// Payload file handed to the runner shim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerPayload {
    pub code: String,
    pub workdir: String,
    pub image_dir: String,
    pub timeout_hint_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunnerStatus {
    Ok,
    Error,
}

/// The single JSON line the shim prints on stdout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerResult {
    pub status: RunnerStatus,
    #[serde(default)]
    pub exception_type: Option<String>,
    #[serde(default)]
    pub exception_message: Option<String>,
    #[serde(default)]
    pub traceback: Option<String>,
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub duration_ms: u64,
}

impl RunnerResult {
    pub fn parse_line(line: &str) -> Result<RunnerResult, String> {
        let result: RunnerResult =
            serde_json::from_str(line).map_err(|e| format!("malformed result line: {e}"))?;
        if result.status == RunnerStatus::Error
            && result.exception_type.as_deref().map_or(true, |t| t.trim().is_empty())
        {
            return Err("error result without exception_type".into());
        }
        Ok(result)
    }
}

const PAYLOAD_FILE: &str = "payload.json";
const STDERR_TAIL_BYTES: usize = 4096;
const POLL_INTERVAL: Duration = Duration::from_millis(10);

/// Executes requests by spawning the runner shim, one process per request.
#[derive(Debug, Clone)]
pub struct ProcessExecutor {
    /// Program followed by any leading arguments, e.g. `["python3", "runner.py"]`.
    command: Vec<String>,
    autocapture: bool,
}

impl ProcessExecutor {
    pub fn new(command: Vec<String>) -> Result<Self, SandboxError> {
        if command.is_empty() || command[0].trim().is_empty() {
            return Err(SandboxError::InvalidRequest("runner command is empty".into()));
        }
        Ok(Self {
            command,
            autocapture: true,
        })
    }

    /// Parse a whitespace-separated command line such as `python3 runner.py`.
    pub fn from_command_line(line: &str) -> Result<Self, SandboxError> {
        Self::new(line.split_whitespace().map(str::to_string).collect())
    }

    pub fn with_autocapture(mut self, enabled: bool) -> Self {
        self.autocapture = enabled;
        self
    }

    fn spawn(&self, request: &ExecutionRequest, payload_path: &Path) -> Result<Child, SandboxError> {
        let mut cmd = Command::new(&self.command[0]);
        cmd.args(&self.command[1..])
            .arg("--payload")
            .arg(payload_path);
        if !self.autocapture {
            cmd.arg("--no-autocapture");
        }
        cmd.current_dir(&request.workdir)
            .env("MPLBACKEND", "Agg")
            .env("PYTHONUNBUFFERED", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            // Own process group so the interrupt reaches grandchildren too.
            .process_group(0);
        cmd.spawn().map_err(|e| {
            SandboxError::Infrastructure(format!("failed to spawn runner {:?}: {e}", self.command[0]))
        })
    }
}

impl Executor for ProcessExecutor {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutcome, SandboxError> {
        request.prepare()?;
        let payload = RunnerPayload {
            code: request.code.source.clone(),
            workdir: request.workdir.to_string_lossy().into_owned(),
            image_dir: request.image_dir.to_string_lossy().into_owned(),
            timeout_hint_s: request.limits.timeout_s,
        };
        let payload_path = request.workdir.join(PAYLOAD_FILE);
        std::fs::write(
            &payload_path,
            serde_json::to_vec(&payload).expect("payload serializes"),
        )?;

        let started = Instant::now();
        let mut child = self.spawn(request, &payload_path)?;
        let max_out = request.limits.max_output_bytes as usize;
        let stdout = capture(child.stdout.take().expect("stdout piped"), max_out);
        let stderr = capture_tail(child.stderr.take().expect("stderr piped"), STDERR_TAIL_BYTES);

        let timeout = Duration::from_secs_f64(request.limits.timeout_s);
        let grace = Duration::from_secs_f64(request.limits.grace_s);
        let (exit, timed_out) = supervise(&mut child, timeout, grace)?;
        let duration_ms = started.elapsed().as_millis() as u64;

        let (out_bytes, overflowed) = stdout.join().unwrap_or_default();
        let err_tail = stderr.join().unwrap_or_default();
        let out_text = String::from_utf8_lossy(&out_bytes);
        let lines: Vec<&str> = out_text.lines().filter(|l| !l.trim().is_empty()).collect();

        if timed_out {
            let mut outcome = ExecutionOutcome::timeout(duration_ms);
            // The shim may still have flushed its interrupt report.
            if let [line] = lines.as_slice() {
                if let Ok(result) = RunnerResult::parse_line(line) {
                    outcome.exception_message = result.exception_message;
                    outcome.traceback = result.traceback;
                }
            }
            return Ok(outcome);
        }

        if overflowed {
            return Err(SandboxError::Infrastructure(format!(
                "runner wrote more than {max_out} bytes to the result channel"
            )));
        }
        if !exit.success() {
            return Err(SandboxError::Infrastructure(format!(
                "runner exited with {exit}; stderr tail: {}",
                String::from_utf8_lossy(&err_tail).trim()
            )));
        }
        let line = match lines.as_slice() {
            [line] => *line,
            [] => return Err(SandboxError::Infrastructure("runner emitted no result line".into())),
            many => {
                return Err(SandboxError::Infrastructure(format!(
                    "runner emitted {} result lines, expected exactly one",
                    many.len()
                )))
            }
        };
        let result = RunnerResult::parse_line(line).map_err(SandboxError::Infrastructure)?;
        let images = scan_images(&request.workdir, &request.image_dir)?;
        Ok(match result.status {
            RunnerStatus::Ok => ExecutionOutcome::success(images, duration_ms),
            RunnerStatus::Error => {
                let traceback = result.traceback.unwrap_or_default();
                let class = classify(&traceback, result.exception_type.as_deref())
                    .unwrap_or_else(|_| ErrorClass::Other("Unknown".into()));
                let mut outcome = ExecutionOutcome::error(
                    class,
                    result.exception_message.unwrap_or_default(),
                    traceback,
                    duration_ms,
                );
                outcome.images = images;
                outcome
            }
        })
    }
}

/// Wait for the child; on timeout send SIGINT to its group, then SIGKILL
/// after the grace window. Returns the exit status and whether it timed out.
fn supervise(
    child: &mut Child,
    timeout: Duration,
    grace: Duration,
) -> Result<(ExitStatus, bool), SandboxError> {
    let start = Instant::now();
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((status, false));
        }
        if start.elapsed() >= timeout {
            break;
        }
        thread::sleep(POLL_INTERVAL);
    }
    signal_group(child, libc::SIGINT);
    let interrupted = Instant::now();
    loop {
        if let Some(status) = child.try_wait()? {
            // Reap stragglers left in the group.
            signal_group(child, libc::SIGKILL);
            return Ok((status, true));
        }
        if interrupted.elapsed() >= grace {
            break;
        }
        thread::sleep(POLL_INTERVAL);
    }
    signal_group(child, libc::SIGKILL);
    let status = child.wait()?;
    Ok((status, true))
}

fn signal_group(child: &Child, signal: libc::c_int) {
    let pgid = child.id() as libc::pid_t;
    // SAFETY: kill(2) with a negative pid targets the process group we created;
    // failure (group already gone) is harmless.
    unsafe {
        libc::kill(-pgid, signal);
    }
}

/// Read everything, keeping at most `cap` bytes; reports whether more arrived.
fn capture<R: Read + Send + 'static>(mut reader: R, cap: usize) -> JoinHandle<(Vec<u8>, bool)> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut overflowed = false;
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        overflowed = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        (kept, overflowed)
    })
}

fn capture_tail<R: Read + Send + 'static>(mut reader: R, cap: usize) -> JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    kept.extend_from_slice(&buf[..n]);
                    if kept.len() > cap {
                        kept.drain(..kept.len() - cap);
                    }
                }
            }
        }
        kept
    })
}
