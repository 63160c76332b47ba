use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use super::protocol::{self, ProtocolError};
use super::{EvalError, EvalRequest, EvalResponse, Evaluator};

struct Worker {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    lines_read: u64,
}

impl Worker {
    fn exchange(&mut self, index: usize, req: &EvalRequest) -> Result<EvalResponse, EvalError> {
        let transport = |source| EvalError::Transport { worker: index, source };
        let stdin = self.stdin.as_mut().ok_or(EvalError::Closed { worker: index })?;
        stdin.write_all(&protocol::encode(req)).map_err(transport)?;
        stdin.flush().map_err(transport)?;

        let mut line = Vec::new();
        loop {
            line.clear();
            let n = self.stdout.read_until(b'\n', &mut line).map_err(transport)?;
            if n == 0 {
                return Err(EvalError::Closed { worker: index });
            }
            self.lines_read += 1;
            if line.last() != Some(&b'\n') {
                let source = ProtocolError::Truncated { line: self.lines_read };
                return Err(EvalError::Protocol { worker: index, source });
            }
            if !line.iter().all(u8::is_ascii_whitespace) {
                break;
            }
        }
        let resp: EvalResponse = protocol::decode(&line, self.lines_read)
            .map_err(|source| EvalError::Protocol { worker: index, source })?;
        if resp.id != req.id {
            return Err(EvalError::IdMismatch { expected: req.id, got: resp.id });
        }
        Ok(resp)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved worker exit on its own
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Client for trainer processes speaking the NDJSON protocol on stdio.
///
/// Each worker has at most one request in flight. A batch is dealt
/// round-robin across workers and the replies are returned in request
/// order, so results do not depend on the worker count.
pub struct ExternalEvaluator {
    command: String,
    workers: Vec<Worker>,
}

impl ExternalEvaluator {
    /// Starts `count` copies of `command` (split on whitespace). The worker
    /// config path, if any, is appended as the last argument. Workers inherit
    /// the environment, including `TSENAS_WORKER_LOG`.
    pub fn spawn(command: &str, config_path: Option<PathBuf>, count: usize) -> Result<Self, EvalError> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| EvalError::Spawn {
            command: command.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty worker command"),
        })?;
        let args: Vec<&str> = parts.collect();
        let mut workers = Vec::with_capacity(count.max(1));
        for _ in 0..count.max(1) {
            let mut cmd = Command::new(program);
            cmd.args(&args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::inherit());
            if let Some(p) = &config_path {
                cmd.arg(p);
            }
            let mut child =
                cmd.spawn().map_err(|source| EvalError::Spawn { command: command.to_string(), source })?;
            let stdin = child.stdin.take();
            let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
            workers.push(Worker { child, stdin, stdout, lines_read: 0 });
        }
        Ok(ExternalEvaluator { command: command.to_string(), workers })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate_batch(&mut self, requests: &[EvalRequest]) -> Result<Vec<EvalResponse>, EvalError> {
        let w = self.workers.len();
        if w == 1 {
            let worker = &mut self.workers[0];
            return requests.iter().map(|r| worker.exchange(0, r)).collect();
        }
        let results: Vec<Result<Vec<(usize, EvalResponse)>, EvalError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .workers
                .iter_mut()
                .enumerate()
                .map(|(wi, worker)| {
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for (i, req) in requests.iter().enumerate().skip(wi).step_by(w) {
                            out.push((i, worker.exchange(wi, req)?));
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
        });
        let mut slots: Vec<Option<EvalResponse>> = vec![None; requests.len()];
        for r in results {
            for (i, resp) in r? {
                slots[i] = Some(resp);
            }
        }
        Ok(slots.into_iter().map(|s| s.expect("every request answered")).collect())
    }
}
