//! Wire frames: a 4-byte little-endian length followed by a UTF-8 JSON
//! object. WebSocket peers send the same JSON object as a text message.

use bytes::{Buf, BufMut, BytesMut};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio_util::codec::{Decoder, Encoder};

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Op {
    Hello,
    Advertise,
    Subscribe,
    Unsubscribe,
    Publish,
    Call,
    Reply,
    Error,
    ListTopics,
    ListClients,
    Topics,
    Clients,
    Ping,
    Pong,
}

impl Op {
    pub const ALL: [Op; 14] = [
        Op::Hello,
        Op::Advertise,
        Op::Subscribe,
        Op::Unsubscribe,
        Op::Publish,
        Op::Call,
        Op::Reply,
        Op::Error,
        Op::ListTopics,
        Op::ListClients,
        Op::Topics,
        Op::Clients,
        Op::Ping,
        Op::Pong,
    ];
}

/// One protocol message.
///
/// `seq` is assigned by the sender and increases per connection. Responses
/// (REPLY, ERROR, TOPICS, CLIENTS, PONG and the HELLO answer) carry the
/// request's seq in `re`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub op: Op,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub type_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Keeps an explicit `null` payload distinct from a missing one.
fn present<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

impl Frame {
    pub fn new(op: Op) -> Self {
        Self {
            op,
            seq: 0,
            re: None,
            topic: None,
            service: None,
            type_name: None,
            name: None,
            payload: None,
            code: None,
            message: None,
        }
    }

    pub fn re(mut self, seq: u64) -> Self {
        self.re = Some(seq);
        self
    }

    pub fn topic(mut self, topic: impl Into<String>) -> Self {
        self.topic = Some(topic.into());
        self
    }

    pub fn service(mut self, service: impl Into<String>) -> Self {
        self.service = Some(service.into());
        self
    }

    pub fn type_name(mut self, t: impl Into<String>) -> Self {
        self.type_name = Some(t.into());
        self
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn payload(mut self, payload: Value) -> Self {
        self.payload = Some(payload);
        self
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        let mut f = Frame::new(Op::Error);
        f.code = Some(code.to_string());
        f.message = Some(message.into());
        f
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    /// Parses a frame body, as carried by a WebSocket text message.
    pub fn from_json(body: &[u8]) -> Result<Self, FrameError> {
        let value: Value = serde_json::from_slice(body).map_err(|e| FrameError::Json(e.to_string()))?;
        if !value.is_object() {
            return Err(FrameError::Json("frame body is not a JSON object".into()));
        }
        serde_json::from_value(value).map_err(|e| FrameError::Json(e.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    TooLarge(usize),
    #[error("malformed frame body: {0}")]
    Json(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for FrameError {
    fn from(e: std::io::Error) -> Self {
        FrameError::Io(e.to_string())
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let body = frame.to_json();
    if body.len() > MAX_FRAME {
        return Err(FrameError::TooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body.as_bytes());
    Ok(out)
}

/// Decodes one frame from the front of `buf`. `Ok(None)` means more bytes
/// are needed; on success the number of bytes consumed is returned too.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let frame = Frame::from_json(&buf[4..4 + len])?;
    Ok(Some((frame, 4 + len)))
}

/// tokio codec over [`encode_frame`] and [`decode_frame`].
#[derive(Debug, Default, Clone, Copy)]
pub struct FrameCodec;

impl Decoder for FrameCodec {
    type Item = Frame;
    type Error = FrameError;

    fn decode(&mut self, src: &mut BytesMut) -> Result<Option<Frame>, FrameError> {
        match decode_frame(src)? {
            Some((frame, used)) => {
                src.advance(used);
                Ok(Some(frame))
            }
            None => {
                if src.len() >= 4 {
                    let len = u32::from_le_bytes([src[0], src[1], src[2], src[3]]) as usize;
                    src.reserve(4 + len - src.len());
                }
                Ok(None)
            }
        }
    }
}

impl Encoder<Frame> for FrameCodec {
    type Error = FrameError;

    fn encode(&mut self, frame: Frame, dst: &mut BytesMut) -> Result<(), FrameError> {
        let body = frame.to_json();
        if body.len() > MAX_FRAME {
            return Err(FrameError::TooLarge(body.len()));
        }
        dst.reserve(4 + body.len());
        dst.put_u32_le(body.len() as u32);
        dst.put_slice(body.as_bytes());
        Ok(())
    }
}
