//! Evaluator running as a child process, spoken to over its stdin/stdout.

use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::arch::ArchState;

use super::protocol::{layers_of, LineTransport, ProtocolClient, ProtocolError, StreamTransport};
use super::{Backend, BackendResult, EvalError, Source, WarmStart};

/// A `sh -c` child whose stdio carries the protocol. Stderr is inherited.
pub struct ChildTransport {
    child: Child,
    stream: Option<StreamTransport>,
}

impl ChildTransport {
    pub fn spawn(command: &str) -> std::io::Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        Ok(Self {
            child,
            stream: Some(StreamTransport::new(stdout, stdin)),
        })
    }

    pub fn id(&self) -> u32 {
        self.child.id()
    }

    fn exit_status(&mut self) -> String {
        let deadline = Instant::now() + Duration::from_millis(500);
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => return status.to_string(),
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                Ok(None) => return "output closed, process still running".into(),
                Err(e) => return format!("status unavailable: {e}"),
            }
        }
    }

    fn annotate(&mut self, e: ProtocolError) -> ProtocolError {
        match e {
            ProtocolError::ProcessExited { .. } => ProtocolError::ProcessExited {
                status: self.exit_status(),
            },
            ProtocolError::Io(io) if io.kind() == std::io::ErrorKind::BrokenPipe => ProtocolError::ProcessExited {
                status: self.exit_status(),
            },
            other => other,
        }
    }
}

impl LineTransport for ChildTransport {
    fn send_line(&mut self, line: &str) -> Result<(), ProtocolError> {
        let r = self.stream.as_mut().expect("open").send_line(line);
        r.map_err(|e| self.annotate(e))
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<String, ProtocolError> {
        let r = self.stream.as_mut().expect("open").recv_line(timeout);
        r.map_err(|e| self.annotate(e))
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved evaluator exit on EOF
        self.stream.take();
        let deadline = Instant::now() + Duration::from_secs(1);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalBackend {
    client: ProtocolClient<ChildTransport>,
}

impl ExternalBackend {
    /// Spawns `command` through `sh -c` and performs the handshake.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, ProtocolError> {
        let transport = ChildTransport::spawn(command)?;
        Ok(Self {
            client: ProtocolClient::connect(transport, timeout)?,
        })
    }
}

impl Backend for ExternalBackend {
    fn name(&self) -> &'static str {
        "external"
    }

    fn evaluate(&mut self, state: &ArchState, warm_start: Option<&WarmStart>) -> Result<BackendResult, EvalError> {
        let reply = self
            .client
            .evaluate(layers_of(state), warm_start.cloned())
            .inspect_err(|e| log::error!("external evaluation of {} failed: {e}", state.canonical_string()))?;
        Ok(BackendResult {
            accuracy: reply.accuracy,
            cost_units: Some(reply.cost_units),
            source: Source::External,
        })
    }
}
