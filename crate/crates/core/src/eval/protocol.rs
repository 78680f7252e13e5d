//! Newline-delimited JSON protocol spoken with an external evaluator.
//!
//! ```text
//! -> {"type":"hello","version":1}
//! <- {"type":"hello","version":1}
//! -> {"type":"evaluate","id":1,"layers":[{"kind":"conv","kernel":3,"filters":64}],"warm_start":null}
//! <- {"type":"result","id":1,"accuracy":0.42,"cost_units":5.0}
//! <- {"type":"error","id":1,"message":"..."}
//! ```

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Action, ActionKind, ArchState, SpaceConfig};

use super::surrogate::{surrogate_reward, SurrogateConfig};
use super::WarmStart;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { kernel: u32, filters: u32 },
    Pool { size: u32, stride: u32 },
    Fc { units: u32 },
}

impl LayerSpec {
    /// `None` for the softmax, which is implicit on the wire.
    pub fn from_action(action: Action) -> Option<Self> {
        match action.kind() {
            ActionKind::Conv { kernel, filters } => Some(LayerSpec::Conv { kernel, filters }),
            ActionKind::Pool { size, stride } => Some(LayerSpec::Pool { size, stride }),
            ActionKind::Fc { units } => Some(LayerSpec::Fc { units }),
            ActionKind::Terminate => None,
        }
    }

    /// `None` if the layer is not in the action set.
    pub fn to_action(self) -> Option<Action> {
        match self {
            LayerSpec::Conv { kernel, filters } => Action::conv(kernel, filters),
            LayerSpec::Pool { size, stride } => Action::pool(size).filter(|a| {
                matches!(a.kind(), ActionKind::Pool { stride: s, .. } if s == stride)
            }),
            LayerSpec::Fc { units } => Action::fc(units),
        }
    }
}

pub fn layers_of(state: &ArchState) -> Vec<LayerSpec> {
    state.layers().iter().filter_map(|&a| LayerSpec::from_action(a)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello {
        version: u32,
    },
    Evaluate {
        id: u64,
        layers: Vec<LayerSpec>,
        warm_start: Option<WarmStart>,
    },
    #[serde(rename = "result")]
    Reply {
        id: u64,
        accuracy: f64,
        cost_units: f64,
    },
    Error {
        id: u64,
        message: String,
    },
}

impl Message {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("protocol messages serialize")
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("no response {} within {seconds} s", id.map_or("to handshake".to_string(), |i| format!("to request {i}")))]
    Timeout { id: Option<u64>, seconds: f64 },
    #[error("evaluator exited ({status})")]
    ProcessExited { status: String },
    #[error("malformed evaluator message `{line}`: {reason}")]
    Malformed { line: String, reason: String },
    #[error("response for unknown request id {got} while awaiting {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("evaluator rejected request {id}: {message}")]
    Remote { id: u64, message: String },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("unexpected `{0}` message from evaluator")]
    Unexpected(String),
    #[error("evaluator I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Line-oriented duplex channel.
pub trait LineTransport: Send {
    fn send_line(&mut self, line: &str) -> Result<(), ProtocolError>;

    /// Next line without its terminator. End of stream is reported as
    /// [`ProtocolError::ProcessExited`].
    fn recv_line(&mut self, timeout: Duration) -> Result<String, ProtocolError>;
}

/// Transport over any byte streams, with a reader thread so that receives
/// can time out.
pub struct StreamTransport {
    writer: Box<dyn Write + Send>,
    lines: mpsc::Receiver<std::io::Result<String>>,
}

impl StreamTransport {
    pub fn new(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let failed = line.is_err();
                if tx.send(line).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            writer: Box::new(writer),
            lines: rx,
        }
    }
}

impl LineTransport for StreamTransport {
    fn send_line(&mut self, line: &str) -> Result<(), ProtocolError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<String, ProtocolError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ProtocolError::Io(e)),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(ProtocolError::Timeout {
                id: None,
                seconds: timeout.as_secs_f64(),
            }),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(ProtocolError::ProcessExited {
                status: "end of output stream".into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReply {
    pub accuracy: f64,
    pub cost_units: f64,
}

enum Answer {
    Ok(EvalReply),
    Rejected(String),
}

/// Client side of the protocol. Several requests may be in flight;
/// responses are matched by id in any order.
pub struct ProtocolClient<Tr> {
    transport: Tr,
    timeout: Duration,
    next_id: u64,
    outstanding: BTreeSet<u64>,
    abandoned: BTreeSet<u64>,
    buffered: HashMap<u64, Answer>,
}

impl<Tr: LineTransport> ProtocolClient<Tr> {
    /// Sends `hello` and waits for the matching reply.
    pub fn connect(mut transport: Tr, timeout: Duration) -> Result<Self, ProtocolError> {
        transport.send_line(&Message::Hello { version: PROTOCOL_VERSION }.to_line())?;
        let line = transport.recv_line(timeout).map_err(|e| match e {
            ProtocolError::Timeout { .. } => ProtocolError::Handshake(format!(
                "no hello within {} s",
                timeout.as_secs_f64()
            )),
            other => other,
        })?;
        match serde_json::from_str::<Message>(&line) {
            Ok(Message::Hello { version }) if version == PROTOCOL_VERSION => {}
            Ok(Message::Hello { version }) => {
                return Err(ProtocolError::Handshake(format!("unsupported version {version}")));
            }
            _ => return Err(ProtocolError::Handshake(format!("expected hello, got `{line}`"))),
        }
        Ok(Self {
            transport,
            timeout,
            next_id: 1,
            outstanding: BTreeSet::new(),
            abandoned: BTreeSet::new(),
            buffered: HashMap::new(),
        })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn transport_mut(&mut self) -> &mut Tr {
        &mut self.transport
    }

    pub fn submit(&mut self, layers: Vec<LayerSpec>, warm_start: Option<WarmStart>) -> Result<u64, ProtocolError> {
        let id = self.next_id;
        self.next_id += 1;
        let msg = Message::Evaluate { id, layers, warm_start };
        self.transport.send_line(&msg.to_line())?;
        self.outstanding.insert(id);
        Ok(id)
    }

    /// Waits for the response to `id`, buffering responses to other
    /// in-flight requests. On failure `id` is abandoned and a late response
    /// to it is dropped.
    pub fn wait(&mut self, id: u64) -> Result<EvalReply, ProtocolError> {
        let result = self.wait_inner(id);
        if result.is_err() && self.outstanding.remove(&id) {
            self.abandoned.insert(id);
        }
        result
    }

    fn wait_inner(&mut self, id: u64) -> Result<EvalReply, ProtocolError> {
        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some(answer) = self.buffered.remove(&id) {
                self.outstanding.remove(&id);
                return match answer {
                    Answer::Ok(r) => Ok(r),
                    Answer::Rejected(message) => Err(ProtocolError::Remote { id, message }),
                };
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = self.transport.recv_line(remaining).map_err(|e| match e {
                ProtocolError::Timeout { .. } => ProtocolError::Timeout {
                    id: Some(id),
                    seconds: self.timeout.as_secs_f64(),
                },
                other => other,
            })?;
            let msg: Message = serde_json::from_str(&line).map_err(|e| ProtocolError::Malformed {
                line: line.clone(),
                reason: e.to_string(),
            })?;
            let (rid, answer) = match msg {
                Message::Reply { id, accuracy, cost_units } => (id, Answer::Ok(EvalReply { accuracy, cost_units })),
                Message::Error { id, message } => (id, Answer::Rejected(message)),
                Message::Hello { .. } => return Err(ProtocolError::Unexpected("hello".into())),
                Message::Evaluate { .. } => return Err(ProtocolError::Unexpected("evaluate".into())),
            };
            if self.outstanding.contains(&rid) {
                self.buffered.insert(rid, answer);
            } else if self.abandoned.remove(&rid) {
                log::warn!("dropping late response to abandoned request {rid}");
            } else {
                return Err(ProtocolError::IdMismatch { expected: id, got: rid });
            }
        }
    }

    pub fn evaluate(&mut self, layers: Vec<LayerSpec>, warm_start: Option<WarmStart>) -> Result<EvalReply, ProtocolError> {
        let id = self.submit(layers, warm_start)?;
        self.wait(id)
    }
}

/// Misbehavior injected into [`serve_surrogate`] at the `at`-th evaluate
/// request (1-based), for exercising client error paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Stop answering and return.
    Exit { at: u64 },
    /// Sleep for the given duration before answering.
    Stall { at: u64, millis: u64 },
    /// Answer with a line that is not JSON.
    Garbage { at: u64 },
    /// Answer with a different id.
    WrongId { at: u64 },
    /// Answer with accuracy 1.5.
    OutOfRange { at: u64 },
}

impl Fault {
    fn at(self) -> u64 {
        match self {
            Fault::Exit { at }
            | Fault::Stall { at, .. }
            | Fault::Garbage { at }
            | Fault::WrongId { at }
            | Fault::OutOfRange { at } => at,
        }
    }
}

/// Reference evaluator: answers with the surrogate formula, charging 1 unit
/// for warm starts and 5 otherwise. Returns the number of evaluate
/// requests seen when the input ends.
pub fn serve_surrogate<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    cfg: &SurrogateConfig,
    space: &SpaceConfig,
    fault: Option<Fault>,
) -> std::io::Result<u64> {
    let mut seen = 0u64;
    let mut greeted = false;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Message>(&line) {
            Ok(Message::Hello { version }) => {
                greeted = true;
                Message::Hello { version: version.min(PROTOCOL_VERSION) }
            }
            Ok(Message::Evaluate { id, layers, warm_start }) => {
                seen += 1;
                if let Some(f) = fault.filter(|f| f.at() == seen) {
                    match f {
                        Fault::Exit { .. } => return Ok(seen),
                        Fault::Stall { millis, .. } => thread::sleep(Duration::from_millis(millis)),
                        Fault::Garbage { .. } => {
                            writeln!(output, "not json {{")?;
                            output.flush()?;
                            continue;
                        }
                        Fault::WrongId { .. } => {
                            let m = Message::Reply { id: id + 1000, accuracy: 0.5, cost_units: 5.0 };
                            writeln!(output, "{}", m.to_line())?;
                            output.flush()?;
                            continue;
                        }
                        Fault::OutOfRange { .. } => {
                            let m = Message::Reply { id, accuracy: 1.5, cost_units: 5.0 };
                            writeln!(output, "{}", m.to_line())?;
                            output.flush()?;
                            continue;
                        }
                    }
                }
                if !greeted {
                    Message::Error { id, message: "evaluate before hello".into() }
                } else {
                    answer(id, &layers, warm_start.is_some(), cfg, space)
                }
            }
            Ok(other) => Message::Error { id: 0, message: format!("unexpected message {other:?}") },
            Err(e) => Message::Error { id: 0, message: format!("malformed request: {e}") },
        };
        writeln!(output, "{}", reply.to_line())?;
        output.flush()?;
    }
    Ok(seen)
}

fn answer(id: u64, layers: &[LayerSpec], warm: bool, cfg: &SurrogateConfig, space: &SpaceConfig) -> Message {
    let mut actions = Vec::with_capacity(layers.len() + 1);
    for l in layers {
        match l.to_action() {
            Some(a) => actions.push(a),
            None => return Message::Error { id, message: format!("unsupported layer {l:?}") },
        }
    }
    actions.push(Action::TERMINATE);
    match ArchState::from_actions(&actions, space) {
        Ok(state) => Message::Reply {
            id,
            accuracy: surrogate_reward(&state, cfg),
            cost_units: if warm { 1.0 } else { 5.0 },
        },
        Err(e) => Message::Error { id, message: e.to_string() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{pipe, PipeReader, PipeWriter};

    fn layers(text: &str) -> Vec<LayerSpec> {
        layers_of(&ArchState::parse(text, &SpaceConfig::default()).unwrap())
    }

    /// Client transport plus the server's ends of both pipes.
    fn wired() -> (StreamTransport, BufReader<PipeReader>, PipeWriter) {
        let (client_in, server_out) = pipe().unwrap();
        let (server_in, client_out) = pipe().unwrap();
        (StreamTransport::new(client_in, client_out), BufReader::new(server_in), server_out)
    }

    fn read_msg(r: &mut BufReader<PipeReader>) -> Message {
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    }

    fn send(w: &mut PipeWriter, m: &Message) {
        writeln!(w, "{}", m.to_line()).unwrap();
    }

    fn handshaken(timeout: Duration) -> (ProtocolClient<StreamTransport>, BufReader<PipeReader>, PipeWriter) {
        let (t, mut sr, mut sw) = wired();
        send(&mut sw, &Message::Hello { version: 1 });
        let client = ProtocolClient::connect(t, timeout).unwrap();
        assert_eq!(read_msg(&mut sr), Message::Hello { version: 1 });
        (client, sr, sw)
    }

    #[test]
    fn wire_format() {
        assert_eq!(Message::Hello { version: 1 }.to_line(), r#"{"type":"hello","version":1}"#);
        let req = Message::Evaluate {
            id: 7,
            layers: vec![
                LayerSpec::Conv { kernel: 3, filters: 64 },
                LayerSpec::Pool { size: 2, stride: 2 },
                LayerSpec::Fc { units: 256 },
            ],
            warm_start: None,
        };
        assert_eq!(
            req.to_line(),
            r#"{"type":"evaluate","id":7,"layers":[{"kind":"conv","kernel":3,"filters":64},{"kind":"pool","size":2,"stride":2},{"kind":"fc","units":256}],"warm_start":null}"#
        );
        let warm = Message::Evaluate {
            id: 8,
            layers: vec![],
            warm_start: Some(WarmStart { donor: "C(3,64)-SM".into(), distance: 1 }),
        };
        assert_eq!(
            warm.to_line(),
            r#"{"type":"evaluate","id":8,"layers":[],"warm_start":{"donor":"C(3,64)-SM","distance":1}}"#
        );
        let res: Message = serde_json::from_str(r#"{"type":"result","id":3,"accuracy":0.5,"cost_units":5.0}"#).unwrap();
        assert_eq!(res, Message::Reply { id: 3, accuracy: 0.5, cost_units: 5.0 });
        let err: Message = serde_json::from_str(r#"{"type":"error","id":3,"message":"boom"}"#).unwrap();
        assert_eq!(err, Message::Error { id: 3, message: "boom".into() });
    }

    #[test]
    fn layer_specs_round_trip() {
        for a in Action::all() {
            match LayerSpec::from_action(a) {
                Some(l) => assert_eq!(l.to_action(), Some(a)),
                None => assert!(a.is_terminate()),
            }
        }
        assert_eq!(LayerSpec::Pool { size: 2, stride: 3 }.to_action(), None);
        assert_eq!(LayerSpec::Conv { kernel: 7, filters: 64 }.to_action(), None);
    }

    #[test]
    fn matching_id_round_trip() {
        let (mut c, mut sr, mut sw) = handshaken(Duration::from_secs(5));
        let id = c.submit(layers("C(3,64)-SM"), None).unwrap();
        match read_msg(&mut sr) {
            Message::Evaluate { id: got, layers: l, warm_start } => {
                assert_eq!(got, id);
                assert_eq!(l, layers("C(3,64)-SM"));
                assert!(warm_start.is_none());
            }
            other => panic!("{other:?}"),
        }
        send(&mut sw, &Message::Reply { id, accuracy: 0.25, cost_units: 5.0 });
        assert_eq!(c.wait(id).unwrap(), EvalReply { accuracy: 0.25, cost_units: 5.0 });
    }

    #[test]
    fn out_of_order_responses() {
        let (mut c, _sr, mut sw) = handshaken(Duration::from_secs(5));
        let a = c.submit(layers("SM"), None).unwrap();
        let b = c.submit(layers("C(1,64)-SM"), None).unwrap();
        send(&mut sw, &Message::Reply { id: b, accuracy: 0.2, cost_units: 1.0 });
        send(&mut sw, &Message::Reply { id: a, accuracy: 0.1, cost_units: 5.0 });
        assert_eq!(c.wait(a).unwrap().accuracy, 0.1);
        assert_eq!(c.wait(b).unwrap().accuracy, 0.2);
    }

    #[test]
    fn unknown_id_is_mismatch() {
        let (mut c, _sr, mut sw) = handshaken(Duration::from_secs(5));
        let a = c.submit(layers("SM"), None).unwrap();
        send(&mut sw, &Message::Reply { id: a + 40, accuracy: 0.2, cost_units: 1.0 });
        assert!(matches!(c.wait(a), Err(ProtocolError::IdMismatch { got, .. }) if got == a + 40));
    }

    #[test]
    fn remote_error_and_malformed_lines() {
        let (mut c, _sr, mut sw) = handshaken(Duration::from_secs(5));
        let a = c.submit(layers("SM"), None).unwrap();
        send(&mut sw, &Message::Error { id: a, message: "out of memory".into() });
        assert!(matches!(c.wait(a), Err(ProtocolError::Remote { message, .. }) if message == "out of memory"));
        let b = c.submit(layers("SM"), None).unwrap();
        writeln!(sw, "{{\"type\":\"result\"").unwrap();
        assert!(matches!(c.wait(b), Err(ProtocolError::Malformed { .. })));
    }

    #[test]
    fn timeout_then_late_reply_dropped() {
        let (mut c, _sr, mut sw) = handshaken(Duration::from_millis(50));
        let a = c.submit(layers("SM"), None).unwrap();
        assert!(matches!(c.wait(a), Err(ProtocolError::Timeout { id: Some(x), .. }) if x == a));
        let b = c.submit(layers("SM"), None).unwrap();
        send(&mut sw, &Message::Reply { id: a, accuracy: 0.9, cost_units: 5.0 });
        send(&mut sw, &Message::Reply { id: b, accuracy: 0.3, cost_units: 5.0 });
        assert_eq!(c.wait(b).unwrap().accuracy, 0.3);
    }

    #[test]
    fn closed_stream_is_exit() {
        let (mut c, sr, sw) = handshaken(Duration::from_secs(5));
        let a = c.submit(layers("SM"), None).unwrap();
        drop(sw);
        drop(sr);
        assert!(matches!(c.wait(a), Err(ProtocolError::ProcessExited { .. })));
    }

    #[test]
    fn handshake_failures() {
        let (t, _sr, mut sw) = wired();
        send(&mut sw, &Message::Hello { version: 2 });
        assert!(matches!(ProtocolClient::connect(t, Duration::from_secs(5)), Err(ProtocolError::Handshake(_))));
        let (t, _sr, mut sw) = wired();
        send(&mut sw, &Message::Reply { id: 1, accuracy: 0.5, cost_units: 1.0 });
        assert!(matches!(ProtocolClient::connect(t, Duration::from_secs(5)), Err(ProtocolError::Handshake(_))));
        let (t, _sr, _sw) = wired();
        assert!(matches!(ProtocolClient::connect(t, Duration::from_millis(20)), Err(ProtocolError::Handshake(_))));
    }

    fn served(fault: Option<Fault>) -> ProtocolClient<StreamTransport> {
        let (t, sr, sw) = wired();
        thread::spawn(move || {
            serve_surrogate(sr, sw, &SurrogateConfig::default(), &SpaceConfig::default(), fault).unwrap();
        });
        ProtocolClient::connect(t, Duration::from_secs(5)).unwrap()
    }

    #[test]
    fn reference_server_matches_in_process_surrogate() {
        let mut c = served(None);
        let sp = SpaceConfig::default();
        for text in ["SM", "C(3,64)-P(2,2)-SM", "C(5,256)-P(5,3)-C(1,64)-P(5,3)-FC(512)-FC(128)-SM"] {
            let state = ArchState::parse(text, &sp).unwrap();
            let r = c.evaluate(layers_of(&state), None).unwrap();
            assert_eq!(r.accuracy, surrogate_reward(&state, &SurrogateConfig::default()));
            assert_eq!(r.cost_units, 5.0);
        }
        let warm = WarmStart { donor: "SM".into(), distance: 2 };
        assert_eq!(c.evaluate(layers("C(1,64)-SM"), Some(warm)).unwrap().cost_units, 1.0);
        let bad = vec![LayerSpec::Pool { size: 2, stride: 2 }];
        assert!(matches!(c.evaluate(bad, None), Err(ProtocolError::Remote { .. })));
    }

    #[test]
    fn injected_faults_surface_distinctly() {
        let mut c = served(Some(Fault::Garbage { at: 1 }));
        assert!(matches!(c.evaluate(layers("SM"), None), Err(ProtocolError::Malformed { .. })));
        let mut c = served(Some(Fault::WrongId { at: 1 }));
        assert!(matches!(c.evaluate(layers("SM"), None), Err(ProtocolError::IdMismatch { .. })));
        let mut c = served(Some(Fault::Exit { at: 2 }));
        assert!(c.evaluate(layers("SM"), None).is_ok());
        assert!(matches!(c.evaluate(layers("SM"), None), Err(ProtocolError::ProcessExited { .. })));
        let mut c = served(Some(Fault::OutOfRange { at: 1 }));
        assert_eq!(c.evaluate(layers("SM"), None).unwrap().accuracy, 1.5);
    }
}
