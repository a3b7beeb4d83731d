//! Adapter for feature extractors running in a child process.
//!
//! Wire protocol, all integers little-endian:
//!
//! 1. The child writes one handshake line to stdout:
//!    `EMBED v1 <dim> <sample_rate> <window_samples>\n`.
//! 2. The parent writes one record per frame to the child's stdin.
//! 3. The child answers each frame, in order, with one embedding record.
//!
//! A record is a `u32` count of `f32` values followed by the values.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use ndarray::Array2;

use super::{BackendError, Embedder, ModelSpec};
use crate::audio::SegmentBatch;

pub const DEFAULT_BATCH_DEADLINE: Duration = Duration::from_secs(60);
pub const PROTOCOL_MAGIC: &str = "EMBED";
pub const PROTOCOL_VERSION: &str = "v1";
/// Upper bound on a record's value count; anything larger is a desync.
const MAX_RECORD_VALUES: u32 = 1 << 26;

pub fn handshake_line(dim: usize, sample_rate: u32, window_samples: usize) -> String {
    format!("{PROTOCOL_MAGIC} {PROTOCOL_VERSION} {dim} {sample_rate} {window_samples}\n")
}

/// Parse a handshake into `(dim, sample_rate, window_samples)`.
pub fn parse_handshake(line: &str) -> Result<(usize, u32, usize), String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        [magic, version, dim, rate, window]
            if *magic == PROTOCOL_MAGIC && *version == PROTOCOL_VERSION =>
        {
            let dim = dim.parse().map_err(|_| format!("bad dim {dim:?}"))?;
            let rate = rate.parse().map_err(|_| format!("bad sample rate {rate:?}"))?;
            let window = window
                .parse()
                .map_err(|_| format!("bad window length {window:?}"))?;
            Ok((dim, rate, window))
        }
        _ => Err(format!("unrecognised handshake {:?}", line.trim_end())),
    }
}

pub fn write_record<W: Write>(w: &mut W, values: &[f32]) -> io::Result<()> {
    let count = u32::try_from(values.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "record too long"))?;
    let mut bytes = Vec::with_capacity(4 + values.len() * 4);
    bytes.extend_from_slice(&count.to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

/// Read one record. A clean EOF before the length prefix yields `Ok(None)`.
pub fn read_record<R: Read>(r: &mut R) -> io::Result<Option<Vec<f32>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let count = u32::from_le_bytes(len);
    if count > MAX_RECORD_VALUES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("record length {count} exceeds limit"),
        ));
    }
    let mut payload = vec![0u8; count as usize * 4];
    r.read_exact(&mut payload)?;
    Ok(Some(
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    ))
}

enum Message {
    Handshake(String),
    Record(Vec<f32>),
    Closed(String),
}

fn reader_loop(stdout: ChildStdout, tx: Sender<Message>) {
    let mut reader = BufReader::new(stdout);
    let mut line = String::new();
    match reader.read_line(&mut line) {
        Ok(0) => {
            let _ = tx.send(Message::Closed("child closed stdout before handshake".into()));
            return;
        }
        Ok(_) => {
            if tx.send(Message::Handshake(line)).is_err() {
                return;
            }
        }
        Err(e) => {
            let _ = tx.send(Message::Closed(format!("reading handshake: {e}")));
            return;
        }
    }
    loop {
        let msg = match read_record(&mut reader) {
            Ok(Some(values)) => Message::Record(values),
            Ok(None) => Message::Closed("child exited".into()),
            Err(e) => Message::Closed(format!("protocol error: {e}")),
        };
        let done = matches!(msg, Message::Closed(_));
        if tx.send(msg).is_err() || done {
            return;
        }
    }
}

fn writer_loop(mut stdin: ChildStdin, rx: Receiver<Vec<f32>>) {
    for frame in rx {
        if write_record(&mut stdin, &frame).is_err() || stdin.flush().is_err() {
            return;
        }
    }
}

/// A child process embedding frames over stdin/stdout. The child lives as
/// long as this value.
pub struct ExternalBackend {
    spec: ModelSpec,
    child: Child,
    frames_tx: Option<Sender<Vec<f32>>>,
    replies: Receiver<Message>,
    deadline: Duration,
    failed: Option<String>,
}

impl ExternalBackend {
    pub fn spawn(
        spec: ModelSpec,
        command: &[String],
        deadline: Duration,
    ) -> Result<Self, BackendError> {
        let model = spec.name.clone();
        let fail = |reason: String| BackendError::External {
            model: model.clone(),
            reason,
        };
        let (program, args) = command
            .split_first()
            .ok_or_else(|| fail("empty command line".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(format!("cannot spawn {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let (reply_tx, replies) = mpsc::channel();
        thread::spawn(move || reader_loop(stdout, reply_tx));
        let (frames_tx, frames_rx) = mpsc::channel();
        thread::spawn(move || writer_loop(stdin, frames_rx));

        let backend = Self {
            spec,
            child,
            frames_tx: Some(frames_tx),
            replies,
            deadline,
            failed: None,
        };
        match backend.replies.recv_timeout(deadline) {
            Ok(Message::Handshake(line)) => {
                let (dim, rate, window) = parse_handshake(&line).map_err(&fail)?;
                let s = &backend.spec;
                if dim != s.embedding_dim || rate != s.sample_rate || window != s.window_samples()
                {
                    return Err(fail(format!(
                        "handshake declares dim {dim}, {rate} Hz, {window} samples; registry expects dim {}, {} Hz, {} samples",
                        s.embedding_dim,
                        s.sample_rate,
                        s.window_samples()
                    )));
                }
            }
            Ok(Message::Closed(reason)) => return Err(fail(reason)),
            Ok(Message::Record(_)) => return Err(fail("record before handshake".into())),
            Err(_) => {
                return Err(BackendError::Timeout {
                    model: backend.spec.name.clone(),
                    deadline,
                })
            }
        }
        Ok(backend)
    }

    fn poison(&mut self, reason: String) -> BackendError {
        self.failed = Some(reason.clone());
        self.frames_tx = None;
        let _ = self.child.kill();
        BackendError::External {
            model: self.spec.name.clone(),
            reason,
        }
    }
}

impl Embedder for ExternalBackend {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn embed(&mut self, batch: &SegmentBatch) -> Result<Array2<f32>, BackendError> {
        if let Some(reason) = &self.failed {
            return Err(BackendError::External {
                model: self.spec.name.clone(),
                reason: format!("backend unusable after earlier failure: {reason}"),
            });
        }
        self.spec.check_batch(batch)?;
        let started = Instant::now();
        let tx = self.frames_tx.as_ref().expect("live backend has a writer");
        for row in batch.frames.rows() {
            if tx.send(row.to_vec()).is_err() {
                return Err(self.poison("child stopped reading frames".into()));
            }
        }
        let dim = self.spec.embedding_dim;
        let mut out = Array2::<f32>::zeros((batch.len(), dim));
        for i in 0..batch.len() {
            let remaining = self.deadline.saturating_sub(started.elapsed());
            match self.replies.recv_timeout(remaining) {
                Ok(Message::Record(values)) if values.len() == dim => {
                    out.row_mut(i)
                        .iter_mut()
                        .zip(values)
                        .for_each(|(o, v)| *o = v);
                }
                Ok(Message::Record(values)) => {
                    return Err(self.poison(format!(
                        "protocol desync: record of {} values, expected {dim}",
                        values.len()
                    )))
                }
                Ok(Message::Handshake(_)) => {
                    return Err(self.poison("unexpected second handshake".into()))
                }
                Ok(Message::Closed(reason)) => {
                    return Err(self.poison(format!("{reason} after {i} of {} frames", batch.len())))
                }
                Err(RecvTimeoutError::Timeout) => {
                    let deadline = self.deadline;
                    self.poison(format!("timed out after {deadline:?}"));
                    return Err(BackendError::Timeout {
                        model: self.spec.name.clone(),
                        deadline,
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(self.poison("reader thread ended".into()))
                }
            }
        }
        Ok(out)
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        self.frames_tx = None;
        if let Ok(None) = self.child.try_wait() {
            // give a well-behaved child a moment to exit on stdin EOF
            thread::sleep(Duration::from_millis(5));
            if let Ok(None) = self.child.try_wait() {
                let _ = self.child.kill();
            }
        }
        let _ = self.child.wait();
    }
}
