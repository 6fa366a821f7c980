use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use super::{Target, TargetError};
use crate::transforms::PriorBox;
use crate::util::fmt_f64;

pub const PROTOCOL: &str = "nora-target/1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Worker {
    fn spawn(command: &str, dim: usize, timeout: Duration) -> Result<Self, TargetError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| TargetError::Spawn {
                command: command.to_string(),
                reason: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut w = Worker {
            child,
            stdin,
            lines: rx,
        };
        let hello = w.read_line(Instant::now() + timeout, timeout)?;
        let bad = |reason: &str| TargetError::Protocol {
            reason: reason.to_string(),
            line: hello.clone(),
        };
        let v: Value = serde_json::from_str(&hello).map_err(|_| bad("handshake is not JSON"))?;
        if v.get("protocol").and_then(Value::as_str) != Some(PROTOCOL) {
            return Err(bad(&format!("expected protocol {PROTOCOL}")));
        }
        match v.get("dim").and_then(Value::as_u64) {
            Some(d) if d as usize == dim => Ok(w),
            Some(d) => Err(TargetError::Dimension {
                expected: dim,
                got: d as usize,
            }),
            None => Err(bad("handshake lacks dim")),
        }
    }

    fn read_line(&mut self, deadline: Instant, timeout: Duration) -> Result<String, TargetError> {
        let left = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(left) {
            Ok(line) => Ok(line),
            Err(RecvTimeoutError::Timeout) => Err(TargetError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(TargetError::ChildExited),
        }
    }

    fn evaluate(&mut self, id: u64, x: &[f64], timeout: Duration) -> Result<f64, TargetError> {
        let xs: Vec<String> = x.iter().map(|&v| fmt_f64(v)).collect();
        let request = format!("{{\"id\":{id},\"x\":[{}]}}\n", xs.join(","));
        self.stdin
            .write_all(request.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|_| TargetError::ChildExited)?;
        let deadline = Instant::now() + timeout;
        let line = self.read_line(deadline, timeout)?;
        let bad = |reason: &str| TargetError::Protocol {
            reason: reason.to_string(),
            line: line.clone(),
        };
        let v: Value = serde_json::from_str(&line).map_err(|_| bad("response is not JSON"))?;
        if v.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(bad(&format!("expected id {id}")));
        }
        match v.get("logp") {
            Some(Value::Number(n)) => n.as_f64().ok_or_else(|| bad("logp out of range")),
            Some(Value::String(s)) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Some(Value::String(s)) if s == "nan" => Err(TargetError::NotANumber(x.to_vec())),
            _ => Err(bad("logp must be a number, \"-inf\" or \"nan\"")),
        }
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A target evaluated by child processes speaking line-delimited JSON.
///
/// Each concurrent evaluation borrows an idle child or spawns a new one, so
/// the number of children tracks the number of workers. A child that fails
/// in any way is killed and discarded.
pub struct ExternalTarget {
    command: String,
    prior: PriorBox,
    timeout: Duration,
    idle: Mutex<Vec<Worker>>,
    next_id: AtomicU64,
}

impl ExternalTarget {
    pub fn new(command: &str, prior: PriorBox, timeout: Duration) -> Self {
        Self {
            command: command.to_string(),
            prior,
            timeout,
            idle: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(0),
        }
    }

    /// Starts one child and validates its handshake.
    pub fn check(&self) -> Result<(), TargetError> {
        let w = Worker::spawn(&self.command, self.prior.dim(), self.timeout)?;
        self.idle.lock().expect("child pool").push(w);
        Ok(())
    }

    pub fn children(&self) -> usize {
        self.idle.lock().expect("child pool").len()
    }
}

impl Target for ExternalTarget {
    fn name(&self) -> String {
        format!("external:{}", self.command)
    }

    fn prior(&self) -> &PriorBox {
        &self.prior
    }

    fn log_density(&self, x: &[f64]) -> Result<f64, TargetError> {
        if x.len() != self.prior.dim() {
            return Err(TargetError::Dimension {
                expected: self.prior.dim(),
                got: x.len(),
            });
        }
        let taken = self.idle.lock().expect("child pool").pop();
        let mut w = match taken {
            Some(w) => w,
            None => Worker::spawn(&self.command, self.prior.dim(), self.timeout)?,
        };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        match w.evaluate(id, x, self.timeout) {
            Ok(v) => {
                self.idle.lock().expect("child pool").push(w);
                Ok(v)
            }
            Err(e @ TargetError::NotANumber(_)) => {
                self.idle.lock().expect("child pool").push(w);
                Err(e)
            }
            Err(e) => {
                w.kill();
                Err(e)
            }
        }
    }
}

impl Drop for ExternalTarget {
    fn drop(&mut self) {
        if let Ok(mut idle) = self.idle.lock() {
            for w in idle.drain(..) {
                w.kill();
            }
        }
    }
}

impl std::fmt::Debug for ExternalTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalTarget")
            .field("command", &self.command)
            .field("dim", &self.prior.dim())
            .field("timeout", &self.timeout)
            .finish()
    }
}
