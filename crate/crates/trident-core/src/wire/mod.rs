//! Client/server protocol.
//!
//! Frames are a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON, capped at 64 KiB. Five message types flow: `REGISTER`,
//! `NAME`, and `PASSWORD` from the client (each carrying the credential text
//! plus the device-attested IMEI and IMSI), `RESULT` and `TOKEN` from the
//! server. Identifiers, codebooks, and authentication passwords never
//! appear in any frame; the login fields accept only lowercase letters and
//! digits, so hash output pasted into a field is rejected before the gates
//! ever run.

mod client;
mod scenario;
mod server;

pub use client::{SimClient, SimDevice};
pub use scenario::{
    run_scenario, Scenario, ScenarioError, ScenarioFixture, ScenarioReport, Verdict,
};
pub use server::{
    handle_connection, run_server, spawn_server, GatePoint, ServerEvent, ServerHandle, SharedStore,
};

use std::io::{Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame payloads may not exceed this many bytes.
pub const MAX_FRAME_LEN: usize = 65536;

/// Default TCP port of the reference server.
pub const DEFAULT_PORT: u16 = 4117;

/// `RESULT` outcome text for a passed gate.
pub const OUTCOME_PROCEED: &str = "proceed";
/// `RESULT` outcome text for any denial, regardless of cause.
pub const OUTCOME_DENIED: &str = "access denied";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame length {len} exceeds {MAX_FRAME_LEN}")]
    Oversize { len: usize },
    #[error("malformed JSON payload: {0}")]
    MalformedJson(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("connection ended mid-frame")]
    ShortRead,
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// The login fields accept exclusively lowercase letters and digits; all
/// other characters are invalid and the frame is denied before any gate
/// runs.
pub fn field_filter_accepts(text: &str) -> bool {
    text.chars().all(crate::matrix_hash::is_valid_login_char)
}

/// Protocol message, tagged by `t` in the JSON payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t")]
pub enum Message {
    #[serde(rename = "REGISTER")]
    Register {
        session: String,
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phone: Option<String>,
        password: String,
        imei: String,
        imsi: String,
    },
    #[serde(rename = "NAME")]
    Name {
        session: String,
        credential: String,
        imei: String,
        imsi: String,
    },
    #[serde(rename = "PASSWORD")]
    Password {
        session: String,
        credential: String,
        imei: String,
        imsi: String,
    },
    #[serde(rename = "RESULT")]
    Result { outcome: String },
    #[serde(rename = "TOKEN")]
    Token { token_hex: String },
}

const KNOWN_TYPES: [&str; 5] = ["REGISTER", "NAME", "PASSWORD", "RESULT", "TOKEN"];

/// Encode a message as a complete frame (length prefix included).
pub fn encode_message(message: &Message) -> Result<Vec<u8>, WireError> {
    let payload = serde_json::to_vec(message).map_err(|e| WireError::MalformedJson(e.to_string()))?;
    frame_payload(&payload)
}

/// Wrap raw payload bytes in a length-prefixed frame.
pub fn frame_payload(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_FRAME_LEN {
        return Err(WireError::Oversize {
            len: payload.len(),
        });
    }
    let mut frame = Vec::with_capacity(4 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(payload);
    Ok(frame)
}

/// Decode a frame payload into a message. Unknown `t` values and JSON that
/// does not fit the message shapes are distinct errors.
pub fn decode_message(payload: &[u8]) -> Result<Message, WireError> {
    let value: serde_json::Value =
        serde_json::from_slice(payload).map_err(|e| WireError::MalformedJson(e.to_string()))?;
    let tag = value
        .get("t")
        .and_then(|t| t.as_str())
        .ok_or_else(|| WireError::MalformedJson("missing message type tag".into()))?;
    if !KNOWN_TYPES.contains(&tag) {
        return Err(WireError::UnknownType(tag.to_owned()));
    }
    serde_json::from_value(value).map_err(|e| WireError::MalformedJson(e.to_string()))
}

/// Write one frame.
pub fn write_frame<W: Write>(writer: &mut W, payload: &[u8]) -> Result<(), WireError> {
    let frame = frame_payload(payload)?;
    writer.write_all(&frame)?;
    writer.flush()?;
    Ok(())
}

/// Read one frame payload. `Ok(None)` means the peer closed cleanly at a
/// frame boundary; ending inside a frame is a [`WireError::ShortRead`].
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < prefix.len() {
        match reader.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::ShortRead),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::Oversize { len });
    }
    let mut payload = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        match reader.read(&mut payload[filled..]) {
            Ok(0) => return Err(WireError::ShortRead),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(payload))
}

/// Which way a recorded frame traveled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireDirection {
    ClientToServer,
    ServerToClient,
}

impl WireDirection {
    pub fn code(self) -> &'static str {
        match self {
            WireDirection::ClientToServer => "C2S",
            WireDirection::ServerToClient => "S2C",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub direction: WireDirection,
    pub frame: Vec<u8>,
    pub at: SystemTime,
}

/// Append-only record of every frame a client exchanged, complete in both
/// directions.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn record(&mut self, direction: WireDirection, frame: Vec<u8>) {
        self.entries.push(TranscriptEntry {
            direction,
            frame,
            at: SystemTime::now(),
        });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All raw frame bytes, for secrecy byte-scans.
    pub fn frames(&self) -> impl Iterator<Item = &[u8]> {
        self.entries.iter().map(|e| e.frame.as_slice())
    }

    /// Hex-dump text: one frame per line, `DIR LEN HEX`.
    pub fn render_hex_dump(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&format!(
                "{} {} {}\n",
                entry.direction.code(),
                entry.frame.len(),
                hex::encode(&entry.frame)
            ));
        }
        out
    }
}

/// One half of an in-memory bidirectional byte stream. Used for
/// deterministic protocol tests and the scenario harness; closing one half
/// is seen as EOF by the other.
#[derive(Debug)]
pub struct DuplexStream {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
}

/// Connected pair of in-memory streams.
pub fn duplex_pair() -> (DuplexStream, DuplexStream) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (
        DuplexStream {
            tx: tx_a,
            rx: rx_a,
            pending: Vec::new(),
        },
        DuplexStream {
            tx: tx_b,
            rx: rx_b,
            pending: Vec::new(),
        },
    )
}

impl Read for DuplexStream {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        while self.pending.is_empty() {
            match self.rx.recv() {
                Ok(chunk) => self.pending = chunk,
                Err(_) => return Ok(0), // peer gone: EOF
            }
        }
        let n = buf.len().min(self.pending.len());
        buf[..n].copy_from_slice(&self.pending[..n]);
        self.pending.drain(..n);
        Ok(n)
    }
}

impl Write for DuplexStream {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "peer closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
