//! Newline-delimited JSON protocol for out-of-process backends.
//!
//! The coordinator writes one [`WireRequest`] per line to the adapter's
//! stdin and reads exactly one [`WireResponse`] line back from its stdout.
//! Models and tensors travel through files named in the request.

use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;

use super::{Backend, BackendId, BackendOutcome, BackendStatus, CrashSignature};
use crate::dljt;
use crate::exec::RunError;
use crate::graph::{from_json, to_json, GraphModel};
use crate::optimizer::{execute_optimized_until, OptimizeConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub model_path: PathBuf,
    pub tensor_path: PathBuf,
    pub output_path: PathBuf,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase", deny_unknown_fields)]
pub enum WireResponse {
    Ok { output_path: PathBuf },
    Crash { error_kind: String, message: String },
    Timeout {},
}

impl WireResponse {
    pub fn crash(error_kind: &str, message: impl Into<String>) -> WireResponse {
        WireResponse::Crash {
            error_kind: error_kind.into(),
            message: message.into(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

/// Answers one request with the built-in optimizing executor.
pub fn handle_request(line: &str, cfg: &OptimizeConfig) -> WireResponse {
    let req: WireRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return WireResponse::crash("bad-request", e.to_string()),
    };
    let deadline = Instant::now() + Duration::from_millis(req.timeout_ms);
    let text = match std::fs::read_to_string(&req.model_path) {
        Ok(t) => t,
        Err(e) => return WireResponse::crash("io-error", format!("cannot read model: {}", e.kind())),
    };
    let g = match from_json(&text) {
        Ok(g) => g,
        Err(e) if e.location.ends_with(".op") => return WireResponse::crash("unsupported-op", e.message),
        Err(e) => return WireResponse::crash("parse-error", e.to_string()),
    };
    if let Some(v) = g.validate().first() {
        return WireResponse::crash("invalid-model", v.to_string());
    }
    let x = match dljt::read_file(&req.tensor_path) {
        Ok(x) => x,
        Err(e) => return WireResponse::crash("bad-tensor", e.to_string()),
    };
    match execute_optimized_until(&g, &x, cfg, Some(deadline)) {
        Ok((out, _)) => match dljt::write_file(&req.output_path, &out) {
            Ok(()) => WireResponse::Ok { output_path: req.output_path },
            Err(e) => WireResponse::crash("io-error", format!("cannot write output: {}", e.kind())),
        },
        Err(RunError::Exec(e)) => WireResponse::crash(e.kind.name(), e.to_string()),
        Err(RunError::TimedOut) => WireResponse::Timeout {},
    }
}

/// Serves requests from `input` until end of stream, one response line each.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, cfg: &OptimizeConfig) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", handle_request(&line, cfg).to_line())?;
        output.flush()?;
    }
    Ok(())
}

/// Extra wait beyond the request budget before the adapter counts as hung.
const GRACE: Duration = Duration::from_secs(2);

struct Adapter {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
}

impl Adapter {
    fn spawn(command: &str) -> io::Result<Adapter> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Adapter { child, stdin, lines })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A system under test running in a long-lived subprocess, restarted after
/// a hang or exit.
pub struct ExternBackend {
    name: String,
    command: String,
    adapter: Option<Adapter>,
    dir: TempDir,
    seq: u64,
}

impl ExternBackend {
    pub fn new(command: impl Into<String>) -> io::Result<ExternBackend> {
        Ok(ExternBackend {
            name: "extern".into(),
            command: command.into(),
            adapter: None,
            dir: tempfile::tempdir()?,
            seq: 0,
        })
    }

    fn roundtrip(&mut self, g: &GraphModel, x: &Tensor, timeout: Duration) -> BackendStatus {
        self.seq += 1;
        let base = self.dir.path().join(format!("r{}", self.seq));
        let req = WireRequest {
            model_path: base.with_extension("model.json"),
            tensor_path: base.with_extension("input.dljt"),
            output_path: base.with_extension("output.dljt"),
            timeout_ms: timeout.as_millis().min(u64::MAX as u128) as u64,
        };
        if std::fs::write(&req.model_path, to_json(g)).is_err() || dljt::write_file(&req.tensor_path, x).is_err() {
            return BackendStatus::Crash(CrashSignature::new("io-error", "", "cannot stage request files"));
        }
        if self.adapter.is_none() {
            match Adapter::spawn(&self.command) {
                Ok(a) => self.adapter = Some(a),
                Err(e) => return BackendStatus::Crash(CrashSignature::new("adapter-spawn", "", &e.kind().to_string())),
            }
        }
        let adapter = self.adapter.as_mut().unwrap();
        let line = serde_json::to_string(&req).expect("request serializes");
        if writeln!(adapter.stdin, "{line}").and_then(|_| adapter.stdin.flush()).is_err() {
            self.adapter.take().unwrap().kill();
            return BackendStatus::Crash(CrashSignature::new("adapter-exit", "", "adapter closed its input"));
        }
        let status = match adapter.lines.recv_timeout(timeout + GRACE) {
            Ok(Ok(text)) => match serde_json::from_str::<WireResponse>(&text) {
                Ok(WireResponse::Ok { output_path }) => match dljt::read_file(&output_path) {
                    Ok(t) => BackendStatus::Ok(t),
                    Err(e) => BackendStatus::Crash(CrashSignature::new("bad-output", "", &e.to_string())),
                },
                Ok(WireResponse::Crash { error_kind, message }) => BackendStatus::Crash(CrashSignature::new(error_kind, "", &message)),
                Ok(WireResponse::Timeout {}) => BackendStatus::Timeout,
                Err(e) => BackendStatus::Crash(CrashSignature::new("protocol-error", "", &e.to_string())),
            },
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => {
                self.adapter.take().unwrap().kill();
                BackendStatus::Crash(CrashSignature::new("adapter-exit", "", "adapter exited without responding"))
            }
            Err(RecvTimeoutError::Timeout) => {
                self.adapter.take().unwrap().kill();
                BackendStatus::Timeout
            }
        };
        for p in [&req.model_path, &req.tensor_path, &req.output_path] {
            let _ = std::fs::remove_file(p);
        }
        status
    }
}

impl Drop for ExternBackend {
    fn drop(&mut self) {
        if let Some(a) = self.adapter.take() {
            a.kill();
        }
    }
}

impl Backend for ExternBackend {
    fn id(&self) -> BackendId {
        BackendId::under_test(self.name.clone())
    }

    fn execute(&mut self, g: &GraphModel, x: &Tensor, timeout: Duration) -> BackendOutcome {
        let start = Instant::now();
        let status = self.roundtrip(g, x, timeout);
        BackendOutcome {
            status,
            duration: start.elapsed(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_framing() {
        assert_eq!(WireResponse::Timeout {}.to_line(), r#"{"status":"timeout"}"#);
        assert_eq!(
            WireResponse::crash("unsupported-op", "Gelu").to_line(),
            r#"{"status":"crash","error_kind":"unsupported-op","message":"Gelu"}"#
        );
        let ok: WireResponse = serde_json::from_str(r#"{"status":"ok","output_path":"/tmp/o.dljt"}"#).unwrap();
        assert_eq!(ok, WireResponse::Ok { output_path: "/tmp/o.dljt".into() });
        assert!(serde_json::from_str::<WireResponse>(r#"{"status":"ok"}"#).is_err());
        assert!(serde_json::from_str::<WireResponse>(r#"{"status":"timeout","message":"x"}"#).is_err());
        assert!(serde_json::from_str::<WireResponse>(r#"{"status":"ok","output_path":"/o","message":"x"}"#).is_err());
    }

    #[test]
    fn malformed_request_is_a_crash_line() {
        let r = handle_request("not json", &OptimizeConfig::default());
        assert!(matches!(r, WireResponse::Crash { ref error_kind, .. } if error_kind == "bad-request"));
    }
}
