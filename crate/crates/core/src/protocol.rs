//! Length-prefixed JSON framing shared by external scorers and detectors.
//!
//! Each frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. A session is `hello` / `ready`, then stop-and-wait request /
//! response pairs, then `bye`.

use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::process::{Child, Command, Stdio};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Patch, Raster};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;
pub const CHANNELS: u32 = 3;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer closed the channel")]
    Closed,
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    Oversized(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("expected a {expected} message, got {got}")]
    Unexpected { expected: &'static str, got: String },
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("{got} results for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("peer reported an error{}: {message}", .id.map(|i| format!(" for request {i}")).unwrap_or_default())]
    Remote { id: Option<u64>, message: String },
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("patch payload has {got} bytes, expected {expected}")]
    PatchSize { expected: usize, got: usize },
    #[error("invalid probabilities {0:?}")]
    BadProbs(Vec<f64>),
    #[error("invalid box {0:?}")]
    BadBox([f64; 5]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello {
        protocol: u32,
        patch_size: u32,
        channels: u32,
    },
    Ready {
        name: String,
        classes: u32,
    },
    Score {
        id: u64,
        patches: Vec<String>,
    },
    Probs {
        id: u64,
        probs: Vec<Vec<f64>>,
    },
    /// Stage-1 request: one base64 tile of `width`×`height` RGB8.
    Detect {
        id: u64,
        width: u32,
        height: u32,
        tile: String,
    },
    /// Stage-1 response: `[x0, y0, x1, y1, score]` in tile pixels.
    Boxes {
        id: u64,
        boxes: Vec<[f64; 5]>,
    },
    Bye,
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        message: String,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Ready { .. } => "ready",
            Message::Score { .. } => "score",
            Message::Probs { .. } => "probs",
            Message::Detect { .. } => "detect",
            Message::Boxes { .. } => "boxes",
            Message::Bye => "bye",
            Message::Error { .. } => "error",
        }
    }

    pub fn hello(patch_size: usize) -> Self {
        Message::Hello {
            protocol: PROTOCOL_VERSION,
            patch_size: patch_size as u32,
            channels: CHANNELS,
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), ProtocolError> {
    if payload.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversized(payload.len()));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Read one frame; `Ok(None)` on a clean end of stream before the header.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Malformed("truncated frame header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversized(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => ProtocolError::Malformed("truncated frame body".into()),
        _ => e.into(),
    })?;
    Ok(Some(payload))
}

pub fn send<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    let payload = serde_json::to_vec(msg).expect("messages always serialize");
    write_frame(w, &payload)
}

pub fn recv<R: Read>(r: &mut R) -> Result<Message, ProtocolError> {
    let payload = read_frame(r)?.ok_or(ProtocolError::Closed)?;
    decode_message(&payload)
}

pub fn decode_message(payload: &[u8]) -> Result<Message, ProtocolError> {
    let text = std::str::from_utf8(payload).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn patch_bytes(size: usize) -> usize {
    size * size * CHANNELS as usize
}

pub fn encode_patch(patch: &Patch) -> String {
    B64.encode(patch.as_bytes())
}

/// Decode a square patch, checking the byte length before building it.
pub fn decode_patch(b64: &str, size: usize) -> Result<Patch, ProtocolError> {
    decode_rect(b64, size, size)
}

pub fn decode_rect(b64: &str, width: usize, height: usize) -> Result<Raster, ProtocolError> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| ProtocolError::Malformed(format!("base64: {e}")))?;
    let expected = width * height * CHANNELS as usize;
    if bytes.len() != expected {
        return Err(ProtocolError::PatchSize {
            expected,
            got: bytes.len(),
        });
    }
    Ok(Raster::from_vec(width, height, bytes).expect("length checked"))
}

/// Client side of the handshake: send `hello`, expect `ready`.
pub fn handshake<R: Read, W: Write>(r: &mut R, w: &mut W, patch_size: usize) -> Result<(String, u32), ProtocolError> {
    send(w, &Message::hello(patch_size))?;
    match recv(r)? {
        Message::Ready { name, classes } => Ok((name, classes)),
        Message::Error { id, message } => Err(ProtocolError::Remote { id, message }),
        other => Err(ProtocolError::Unexpected {
            expected: "ready",
            got: other.kind().to_string(),
        }),
    }
}

/// What a server does with each request.
pub trait Handler {
    fn name(&self) -> &str;
    fn classes(&self) -> u32 {
        2
    }
    fn score(&mut self, patches: &[Patch]) -> Result<Vec<[f64; 2]>, String>;
    fn detect(&mut self, _tile: &Raster) -> Result<Vec<[f64; 5]>, String> {
        Err("this server does not detect".into())
    }
}

/// Server loop: answer `hello`, then requests until `bye` or end of stream.
///
/// A malformed request is answered with an `error` message and ends the
/// session with `Err`.
pub fn serve<R: Read, W: Write, H: Handler>(r: &mut R, w: &mut W, handler: &mut H) -> Result<(), ProtocolError> {
    let fail = |w: &mut W, id: Option<u64>, err: ProtocolError| -> ProtocolError {
        let _ = send(
            w,
            &Message::Error {
                id,
                message: err.to_string(),
            },
        );
        err
    };
    let patch_size = match recv(r) {
        Ok(Message::Hello {
            protocol,
            patch_size,
            channels,
        }) => {
            if protocol != PROTOCOL_VERSION {
                return Err(fail(w, None, ProtocolError::Version(protocol)));
            }
            if channels != CHANNELS {
                return Err(fail(w, None, ProtocolError::Malformed(format!("{channels} channels"))));
            }
            patch_size as usize
        }
        Ok(other) => {
            let err = ProtocolError::Unexpected {
                expected: "hello",
                got: other.kind().into(),
            };
            return Err(fail(w, None, err));
        }
        Err(e) => return Err(fail(w, None, e)),
    };
    send(
        w,
        &Message::Ready {
            name: handler.name().to_string(),
            classes: handler.classes(),
        },
    )?;
    loop {
        let msg = match read_frame(r) {
            Ok(None) => return Ok(()),
            Ok(Some(p)) => match decode_message(&p) {
                Ok(m) => m,
                Err(e) => return Err(fail(w, None, e)),
            },
            Err(e) => return Err(fail(w, None, e)),
        };
        match msg {
            Message::Bye => return Ok(()),
            Message::Score { id, patches } => {
                let decoded: Result<Vec<Patch>, _> = patches.iter().map(|p| decode_patch(p, patch_size)).collect();
                let patches = decoded.map_err(|e| fail(w, Some(id), e))?;
                match handler.score(&patches) {
                    Ok(probs) => send(
                        w,
                        &Message::Probs {
                            id,
                            probs: probs.iter().map(|p| p.to_vec()).collect(),
                        },
                    )?,
                    Err(message) => return Err(fail(w, Some(id), ProtocolError::Malformed(message))),
                }
            }
            Message::Detect {
                id,
                width,
                height,
                tile,
            } => {
                let tile = decode_rect(&tile, width as usize, height as usize).map_err(|e| fail(w, Some(id), e))?;
                match handler.detect(&tile) {
                    Ok(boxes) => send(w, &Message::Boxes { id, boxes })?,
                    Err(message) => return Err(fail(w, Some(id), ProtocolError::Malformed(message))),
                }
            }
            other => {
                let err = ProtocolError::Unexpected {
                    expected: "score, detect or bye",
                    got: other.kind().into(),
                };
                return Err(fail(w, None, err));
            }
        }
    }
}

/// Client end of a session with a scorer or detector process.
pub struct Channel {
    name: String,
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    next_id: u64,
    closed: bool,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("name", &self.name)
            .field("next_id", &self.next_id)
            .finish_non_exhaustive()
    }
}

impl Channel {
    /// Handshake over an existing transport.
    pub fn connect(
        mut reader: Box<dyn Read + Send>,
        mut writer: Box<dyn Write + Send>,
        patch_size: usize,
    ) -> Result<Self, ProtocolError> {
        let (name, _) = handshake(&mut reader, &mut writer, patch_size)?;
        Ok(Self {
            name,
            reader,
            writer,
            child: None,
            next_id: 0,
            closed: false,
        })
    }

    /// Start `command[0]` with the remaining arguments and handshake over its
    /// stdin/stdout. Its stderr is inherited.
    pub fn spawn(command: &[String], patch_size: usize) -> Result<Self, ProtocolError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| ProtocolError::Malformed("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let writer = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let reader = BufReader::new(child.stdout.take().expect("piped stdout"));
        match Self::connect(Box::new(reader), Box::new(writer), patch_size) {
            Ok(mut ch) => {
                ch.child = Some(child);
                Ok(ch)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Id the next request will carry.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Send one request built around a fresh id and return the reply.
    /// Remote errors and id mismatches are turned into errors here.
    pub fn request(&mut self, build: impl FnOnce(u64) -> Message) -> Result<Message, ProtocolError> {
        let id = self.next_id;
        self.next_id += 1;
        send(&mut self.writer, &build(id))?;
        let reply = recv(&mut self.reader)?;
        let got = match &reply {
            Message::Error { id, message } => {
                return Err(ProtocolError::Remote {
                    id: *id,
                    message: message.clone(),
                })
            }
            Message::Probs { id, .. } | Message::Boxes { id, .. } => *id,
            other => {
                return Err(ProtocolError::Unexpected {
                    expected: "probs or boxes",
                    got: other.kind().into(),
                })
            }
        };
        if got != id {
            return Err(ProtocolError::IdMismatch { expected: id, got });
        }
        Ok(reply)
    }

    /// Send `bye` and, for spawned processes, require a zero exit status.
    pub fn close(&mut self) -> Result<(), ProtocolError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        send(&mut self.writer, &Message::Bye)?;
        if let Some(mut child) = self.child.take() {
            drop(child.stdin.take());
            let status = child.wait()?;
            if !status.success() {
                return Err(ProtocolError::Remote {
                    id: None,
                    message: format!("process exited with {status}"),
                });
            }
        }
        Ok(())
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        if !self.closed {
            let _ = send(&mut self.writer, &Message::Bye);
        }
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
