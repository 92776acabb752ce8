use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::{Message, MessageKind, Payload};
use crate::scene::SceneFrame;
use crate::time::SimTime;

pub const PAYLOAD_VERSION: u64 = 1;
/// Upper bound on a single frame body.
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN} byte limit")]
    Oversized(usize),
    #[error("{0} trailing bytes after the frame")]
    TrailingBytes(usize),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("unsupported payload version {0}")]
    UnsupportedVersion(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid message: {0}")]
    Invalid(String),
}

fn body_value<T: Serialize>(body: &T) -> Result<Value, serde_json::Error> {
    let mut v = serde_json::to_value(body)?;
    if let Value::Object(map) = &mut v {
        map.insert("v".into(), Value::from(PAYLOAD_VERSION));
    }
    Ok(v)
}

pub(super) fn to_value(m: &Message) -> Result<Value, serde_json::Error> {
    let payload = match &m.payload {
        Payload::Telemetry(b) => body_value(b)?,
        Payload::ObstacleReport(b) => body_value(b)?,
        Payload::StopCmd(b) => body_value(b)?,
        Payload::PlanProposed(b) => body_value(b)?,
        Payload::ValidationResult(b) => body_value(b)?,
        Payload::PlanDeploy(b) => body_value(b)?,
        Payload::DeployAck(b) => body_value(b)?,
        Payload::MotionStarted(b) => body_value(b)?,
        Payload::TaskDone(b) => body_value(b)?,
    };
    let mut map = Map::new();
    map.insert("kind".into(), Value::from(m.kind().as_str()));
    map.insert("payload".into(), payload);
    map.insert("sent_at".into(), serde_json::to_value(m.sent_at)?);
    map.insert("seq".into(), Value::from(m.seq));
    Ok(Value::Object(map))
}

fn body<T: DeserializeOwned>(v: Value) -> Result<T, DecodeError> {
    serde_json::from_value(v).map_err(|e| DecodeError::Malformed(format!("payload: {e}")))
}

pub(super) fn from_value(value: Value) -> Result<Message, DecodeError> {
    let Value::Object(mut map) = value else {
        return Err(DecodeError::Malformed("top level is not an object".into()));
    };
    if let Some(extra) = map.keys().find(|k| !matches!(k.as_str(), "kind" | "payload" | "sent_at" | "seq")) {
        return Err(DecodeError::Malformed(format!("unexpected field {extra:?}")));
    }
    let kind_str = match map.remove("kind") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(DecodeError::Malformed("kind is not a string".into())),
        None => return Err(DecodeError::Malformed("missing kind".into())),
    };
    let kind = MessageKind::parse(&kind_str).ok_or(DecodeError::UnknownKind(kind_str))?;
    let seq = map
        .remove("seq")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| DecodeError::Malformed("seq must be a non-negative integer".into()))?;
    let sent_at: SimTime = map
        .remove("sent_at")
        .ok_or_else(|| DecodeError::Malformed("missing sent_at".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| DecodeError::Malformed(format!("sent_at: {e}"))))?;
    let mut payload = match map.remove("payload") {
        Some(Value::Object(p)) => p,
        _ => return Err(DecodeError::Malformed("payload must be an object".into())),
    };
    match payload.remove("v") {
        Some(v) if v.as_u64() == Some(PAYLOAD_VERSION) => {}
        Some(v) => return Err(DecodeError::UnsupportedVersion(v.to_string())),
        None => return Err(DecodeError::Malformed("payload missing \"v\"".into())),
    }
    let p = Value::Object(payload);
    let payload = match kind {
        MessageKind::Telemetry => Payload::Telemetry(body(p)?),
        MessageKind::ObstacleReport => Payload::ObstacleReport(body(p)?),
        MessageKind::StopCmd => Payload::StopCmd(body(p)?),
        MessageKind::PlanProposed => Payload::PlanProposed(body(p)?),
        MessageKind::ValidationResult => Payload::ValidationResult(body(p)?),
        MessageKind::PlanDeploy => Payload::PlanDeploy(body(p)?),
        MessageKind::DeployAck => Payload::DeployAck(body(p)?),
        MessageKind::MotionStarted => Payload::MotionStarted(body(p)?),
        MessageKind::TaskDone => Payload::TaskDone(body(p)?),
    };
    let m = Message { seq, sent_at, payload };
    validate(&m)?;
    Ok(m)
}

fn validate(m: &Message) -> Result<(), DecodeError> {
    match &m.payload {
        Payload::ObstacleReport(r) if !r.is_valid() => Err(DecodeError::Invalid("obstacle report out of range".into())),
        Payload::Telemetry(t) if t.state.gripper_width < 0.0 => {
            Err(DecodeError::Invalid("negative gripper width".into()))
        }
        _ => Ok(()),
    }
}

fn frame(body: Vec<u8>) -> Vec<u8> {
    let len = u32::try_from(body.len()).expect("frame body below 4 GiB");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Canonical JSON body of a message, without framing.
pub fn message_json(m: &Message) -> Vec<u8> {
    serde_json::to_vec(&to_value(m).expect("message payloads serialize")).expect("values serialize")
}

pub fn encode_message(m: &Message) -> Vec<u8> {
    frame(message_json(m))
}

/// Parses an unframed JSON body (the console bridge carries these).
pub fn decode_message_json(body: &[u8]) -> Result<Message, DecodeError> {
    let text = std::str::from_utf8(body).map_err(|e| DecodeError::Malformed(format!("utf-8: {e}")))?;
    let value: Value = serde_json::from_str(text).map_err(|e| DecodeError::Malformed(format!("json: {e}")))?;
    from_value(value)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    let (m, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - used));
    }
    Ok(m)
}

fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::Oversized(len));
    }
    let end = 4 + len;
    if bytes.len() < end {
        return Err(DecodeError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    Ok((decode_message_json(&bytes[4..end])?, end))
}

/// Incremental decoder for a byte stream carrying back-to-back frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        FrameDecoder::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `None` while the buffered bytes are still partial.
    /// A malformed frame is consumed and reported.
    pub fn next_message(&mut self) -> Option<Result<Message, DecodeError>> {
        if self.buf.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len > MAX_FRAME_LEN {
            self.buf.clear();
            return Some(Err(DecodeError::Oversized(len)));
        }
        if self.buf.len() < 4 + len {
            return None;
        }
        let rest = self.buf.split_off(4 + len);
        let result = decode_message_json(&self.buf[4..]);
        self.buf = rest;
        Some(result)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Raw sensor frame in the same framing, used to compare transfer volume
/// against the edge node's compact report.
pub fn encode_scene_frame(f: &SceneFrame) -> Vec<u8> {
    frame(serde_json::to_vec(f).expect("scene frames serialize"))
}
