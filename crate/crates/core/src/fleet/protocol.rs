//! Wire format between coordinator and agents.
//!
//! A frame is a 4-byte big-endian payload length followed by that many
//! bytes of UTF-8 canonical JSON encoding an [`Envelope`].

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::weaver::{WeaveOptions, WeaveReport};

pub const SCHEMA_VERSION: u32 = 1;
/// Larger frames are refused and skipped.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub schema: u32,
    /// Copied into the reply.
    pub id: u64,
    pub message: Message,
}

impl Envelope {
    pub fn new(id: u64, message: Message) -> Envelope {
        Envelope { schema: SCHEMA_VERSION, id, message }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessListing {
    pub name: String,
    pub symbols: Vec<String>,
    pub woven: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessStatus {
    pub name: String,
    pub woven: Vec<String>,
    pub threads: usize,
    pub clock_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Ping,
    Pong {
        agent_version: String,
    },
    List,
    Listing {
        processes: Vec<ProcessListing>,
    },
    Weave {
        process: String,
        bundle: String,
        options: WeaveOptions,
    },
    Unweave {
        process: String,
        bundle_id: String,
        timeout_us: u64,
    },
    Status,
    StatusReply {
        processes: Vec<ProcessStatus>,
    },
    Report {
        report: WeaveReport,
    },
    /// The request was understood but could not be carried out.
    Error {
        message: String,
    },
    /// The frame could not be decoded.
    ProtocolError {
        message: String,
    },
}

pub fn encode(env: &Envelope) -> Vec<u8> {
    let body = crate::canon::to_canonical(env);
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body.as_bytes());
    out
}

pub fn write_frame(w: &mut impl Write, env: &Envelope) -> io::Result<()> {
    w.write_all(&encode(env))?;
    w.flush()
}

#[derive(Debug)]
pub enum Frame {
    Payload(Vec<u8>),
    /// Length over [`MAX_FRAME`]; the payload was skipped.
    Oversized(u32),
}

/// `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Frame>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        io::copy(&mut r.take(u64::from(len)), &mut io::sink())?;
        return Ok(Some(Frame::Oversized(len)));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(Frame::Payload(buf)))
}

/// Decode a payload. On failure the error carries whatever correlation id
/// could be recovered, else 0.
pub fn decode(payload: &[u8]) -> Result<Envelope, (u64, String)> {
    let text = std::str::from_utf8(payload).map_err(|e| (0, format!("payload is not UTF-8: {e}")))?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| (0, format!("payload is not JSON: {e}")))?;
    let id = value.get("id").and_then(|v| v.as_u64()).unwrap_or(0);
    match value.get("schema").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err((id, format!("unsupported schema version {v}"))),
        None => return Err((id, "missing schema version".into())),
    }
    serde_json::from_value(value).map_err(|e| (id, format!("bad message: {e}")))
}
