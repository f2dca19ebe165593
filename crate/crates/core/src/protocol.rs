//! Message set and framing for the server/client byte stream.
//!
//! Every message travels in a frame:
//!
//! ```text
//! "FLWR"   magic (4 bytes)
//! u8       version (= 1)
//! u8       message type
//! u32 BE   body length (≤ 1 GiB)
//! body
//! ```
//!
//! Body fields are written in declaration order. Weights use the layout in
//! [`crate::tensor`]. A [`ConfigMap`] is a u16 BE entry count followed by, per
//! entry, a u16-prefixed UTF-8 key, a value tag (0 = i64, 1 = f64, 2 = string,
//! 3 = bool) and the value (i64 BE, f64 bits BE, u16-prefixed string, or one
//! byte 0/1). Strings elsewhere are u16 BE length + UTF-8.

use std::fmt;

use thiserror::Error;

use crate::codec::{
    put_f64, put_i64, put_str, put_u16, put_u32, put_u64, put_u8, CodecError, Reader,
};
use crate::tensor::{encode_weights_into, read_weights, weights_byte_size, Weights};

pub const MAGIC: [u8; 4] = *b"FLWR";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAX_BODY_LEN: usize = 1 << 30;

#[derive(Debug, Clone)]
pub enum ConfigValue {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
}

impl ConfigValue {
    fn tag(&self) -> u8 {
        match self {
            ConfigValue::Int(_) => 0,
            ConfigValue::Float(_) => 1,
            ConfigValue::Str(_) => 2,
            ConfigValue::Bool(_) => 3,
        }
    }
}

impl PartialEq for ConfigValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ConfigValue::Int(a), ConfigValue::Int(b)) => a == b,
            (ConfigValue::Float(a), ConfigValue::Float(b)) => a.to_bits() == b.to_bits(),
            (ConfigValue::Str(a), ConfigValue::Str(b)) => a == b,
            (ConfigValue::Bool(a), ConfigValue::Bool(b)) => a == b,
            _ => false,
        }
    }
}

impl fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigValue::Int(v) => write!(f, "{v}"),
            ConfigValue::Float(v) => write!(f, "{v}"),
            ConfigValue::Str(v) => write!(f, "{v:?}"),
            ConfigValue::Bool(v) => write!(f, "{v}"),
        }
    }
}

impl From<i64> for ConfigValue {
    fn from(v: i64) -> Self {
        ConfigValue::Int(v)
    }
}

impl From<f64> for ConfigValue {
    fn from(v: f64) -> Self {
        ConfigValue::Float(v)
    }
}

impl From<bool> for ConfigValue {
    fn from(v: bool) -> Self {
        ConfigValue::Bool(v)
    }
}

impl From<&str> for ConfigValue {
    fn from(v: &str) -> Self {
        ConfigValue::Str(v.to_owned())
    }
}

impl From<String> for ConfigValue {
    fn from(v: String) -> Self {
        ConfigValue::Str(v)
    }
}

/// Ordered key/value map with unique keys.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigMap {
    entries: Vec<(String, ConfigValue)>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces; a replaced key keeps its original position.
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<ConfigValue>) {
        let key = key.into();
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<ConfigValue>) -> Self {
        self.insert(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&ConfigValue> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn get_i64(&self, key: &str) -> Option<i64> {
        match self.get(key)? {
            ConfigValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    /// Floats, and ints widened to f64.
    pub fn get_f64(&self, key: &str) -> Option<f64> {
        match self.get(key)? {
            ConfigValue::Float(v) => Some(*v),
            ConfigValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        match self.get(key)? {
            ConfigValue::Str(v) => Some(v),
            _ => None,
        }
    }

    pub fn get_bool(&self, key: &str) -> Option<bool> {
        match self.get(key)? {
            ConfigValue::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ConfigValue)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisconnectReason {
    ReconnectLater,
    PowerStateChange,
    Shutdown,
    Error,
}

impl DisconnectReason {
    fn tag(self) -> u8 {
        match self {
            DisconnectReason::ReconnectLater => 0,
            DisconnectReason::PowerStateChange => 1,
            DisconnectReason::Shutdown => 2,
            DisconnectReason::Error => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => DisconnectReason::ReconnectLater,
            1 => DisconnectReason::PowerStateChange,
            2 => DisconnectReason::Shutdown,
            3 => DisconnectReason::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ClientHello {
        client_name: String,
        capabilities: ConfigMap,
    },
    GetWeightsIns,
    GetWeightsRes {
        weights: Weights,
    },
    FitIns {
        weights: Weights,
        config: ConfigMap,
    },
    FitRes {
        weights: Weights,
        num_examples: u64,
        metrics: ConfigMap,
    },
    EvaluateIns {
        weights: Weights,
        config: ConfigMap,
    },
    EvaluateRes {
        loss: f64,
        num_examples: u64,
        metrics: ConfigMap,
    },
    ReconnectIns {
        seconds: u32,
    },
    DisconnectRes {
        reason: DisconnectReason,
    },
    ErrorRes {
        code: u16,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    ClientHello = 1,
    GetWeightsIns = 2,
    GetWeightsRes = 3,
    FitIns = 4,
    FitRes = 5,
    EvaluateIns = 6,
    EvaluateRes = 7,
    ReconnectIns = 8,
    DisconnectRes = 9,
    ErrorRes = 10,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageType::*;
        Some(match v {
            1 => ClientHello,
            2 => GetWeightsIns,
            3 => GetWeightsRes,
            4 => FitIns,
            5 => FitRes,
            6 => EvaluateIns,
            7 => EvaluateRes,
            8 => ReconnectIns,
            9 => DisconnectRes,
            10 => ErrorRes,
            _ => return None,
        })
    }

    /// Sent by the server.
    pub fn is_server_originated(self) -> bool {
        matches!(
            self,
            MessageType::GetWeightsIns
                | MessageType::FitIns
                | MessageType::EvaluateIns
                | MessageType::ReconnectIns
        )
    }
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::ClientHello { .. } => MessageType::ClientHello,
            Message::GetWeightsIns => MessageType::GetWeightsIns,
            Message::GetWeightsRes { .. } => MessageType::GetWeightsRes,
            Message::FitIns { .. } => MessageType::FitIns,
            Message::FitRes { .. } => MessageType::FitRes,
            Message::EvaluateIns { .. } => MessageType::EvaluateIns,
            Message::EvaluateRes { .. } => MessageType::EvaluateRes,
            Message::ReconnectIns { .. } => MessageType::ReconnectIns,
            Message::DisconnectRes { .. } => MessageType::DisconnectRes,
            Message::ErrorRes { .. } => MessageType::ErrorRes,
        }
    }

    /// The result type a well-behaved client answers this instruction with.
    pub fn expected_reply(&self) -> Option<MessageType> {
        match self {
            Message::GetWeightsIns => Some(MessageType::GetWeightsRes),
            Message::FitIns { .. } => Some(MessageType::FitRes),
            Message::EvaluateIns { .. } => Some(MessageType::EvaluateRes),
            Message::ReconnectIns { .. } => Some(MessageType::DisconnectRes),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("frame body of {0} bytes exceeds the 1 GiB limit")]
    FrameTooLarge(u64),
    #[error("invalid {kind:?} message: {reason}")]
    InvalidMessage { kind: MessageType, reason: String },
    #[error("malformed body: {0}")]
    Body(#[from] CodecError),
}

/// Outcome of decoding from a possibly incomplete buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Message { message: Message, consumed: usize },
    /// At least `needed` more bytes are required before anything can be decoded.
    NeedMore { needed: usize },
}

fn put_config(out: &mut Vec<u8>, map: &ConfigMap) -> Result<(), CodecError> {
    let count = u16::try_from(map.entries.len()).map_err(|_| CodecError::TooMany {
        what: "config entry",
        count: map.entries.len(),
        limit: u16::MAX as usize,
    })?;
    put_u16(out, count);
    for (key, value) in &map.entries {
        put_str(out, key)?;
        put_u8(out, value.tag());
        match value {
            ConfigValue::Int(v) => put_i64(out, *v),
            ConfigValue::Float(v) => put_f64(out, *v),
            ConfigValue::Str(v) => put_str(out, v)?,
            ConfigValue::Bool(v) => put_u8(out, u8::from(*v)),
        }
    }
    Ok(())
}

fn read_config(r: &mut Reader<'_>) -> Result<ConfigMap, CodecError> {
    let count = r.u16()? as usize;
    let mut map = ConfigMap {
        entries: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let key_at = r.offset();
        let key = r.string()?;
        if map.get(&key).is_some() {
            return Err(CodecError::DuplicateKey {
                key,
                offset: key_at,
            });
        }
        let tag_at = r.offset();
        let value = match r.u8()? {
            0 => ConfigValue::Int(r.i64()?),
            1 => ConfigValue::Float(r.f64()?),
            2 => ConfigValue::Str(r.string()?),
            3 => {
                let at = r.offset();
                match r.u8()? {
                    0 => ConfigValue::Bool(false),
                    1 => ConfigValue::Bool(true),
                    b => {
                        return Err(CodecError::InvalidValue {
                            offset: at,
                            reason: format!("bool byte {b}"),
                        })
                    }
                }
            }
            tag => {
                return Err(CodecError::UnknownTag {
                    what: "config value",
                    tag,
                    offset: tag_at,
                })
            }
        };
        map.entries.push((key, value));
    }
    Ok(map)
}

fn encode_body(m: &Message, out: &mut Vec<u8>) -> Result<(), CodecError> {
    match m {
        Message::ClientHello {
            client_name,
            capabilities,
        } => {
            put_str(out, client_name)?;
            put_config(out, capabilities)?;
        }
        Message::GetWeightsIns => {}
        Message::GetWeightsRes { weights } => encode_weights_into(weights, out)?,
        Message::FitIns { weights, config } | Message::EvaluateIns { weights, config } => {
            encode_weights_into(weights, out)?;
            put_config(out, config)?;
        }
        Message::FitRes {
            weights,
            num_examples,
            metrics,
        } => {
            encode_weights_into(weights, out)?;
            put_u64(out, *num_examples);
            put_config(out, metrics)?;
        }
        Message::EvaluateRes {
            loss,
            num_examples,
            metrics,
        } => {
            put_f64(out, *loss);
            put_u64(out, *num_examples);
            put_config(out, metrics)?;
        }
        Message::ReconnectIns { seconds } => put_u32(out, *seconds),
        Message::DisconnectRes { reason } => put_u8(out, reason.tag()),
        Message::ErrorRes { code, detail } => {
            put_u16(out, *code);
            put_str(out, detail)?;
        }
    }
    Ok(())
}

fn decode_body(kind: MessageType, body: &[u8]) -> Result<Message, ProtocolError> {
    let mut r = Reader::with_base(body, HEADER_LEN);
    let m = match kind {
        MessageType::ClientHello => Message::ClientHello {
            client_name: r.string()?,
            capabilities: read_config(&mut r)?,
        },
        MessageType::GetWeightsIns => Message::GetWeightsIns,
        MessageType::GetWeightsRes => Message::GetWeightsRes {
            weights: read_weights(&mut r)?,
        },
        MessageType::FitIns => Message::FitIns {
            weights: read_weights(&mut r)?,
            config: read_config(&mut r)?,
        },
        MessageType::FitRes => Message::FitRes {
            weights: read_weights(&mut r)?,
            num_examples: r.u64()?,
            metrics: read_config(&mut r)?,
        },
        MessageType::EvaluateIns => Message::EvaluateIns {
            weights: read_weights(&mut r)?,
            config: read_config(&mut r)?,
        },
        MessageType::EvaluateRes => {
            let loss = r.f64()?;
            let n_at = r.offset();
            let num_examples = r.u64()?;
            if num_examples == 0 {
                return Err(CodecError::InvalidValue {
                    offset: n_at,
                    reason: "EvaluateRes.num_examples must be at least 1".into(),
                }
                .into());
            }
            Message::EvaluateRes {
                loss,
                num_examples,
                metrics: read_config(&mut r)?,
            }
        }
        MessageType::ReconnectIns => Message::ReconnectIns { seconds: r.u32()? },
        MessageType::DisconnectRes => {
            let at = r.offset();
            let tag = r.u8()?;
            let reason = DisconnectReason::from_tag(tag).ok_or(CodecError::UnknownTag {
                what: "disconnect reason",
                tag,
                offset: at,
            })?;
            Message::DisconnectRes { reason }
        }
        MessageType::ErrorRes => Message::ErrorRes {
            code: r.u16()?,
            detail: r.string()?,
        },
    };
    r.finish()?;
    Ok(m)
}

/// Size of the frame [`encode_message`] would produce, without encoding it.
pub fn encoded_len(m: &Message) -> usize {
    fn config_len(c: &ConfigMap) -> usize {
        2 + c
            .entries
            .iter()
            .map(|(k, v)| {
                2 + k.len()
                    + 1
                    + match v {
                        ConfigValue::Int(_) | ConfigValue::Float(_) => 8,
                        ConfigValue::Str(s) => 2 + s.len(),
                        ConfigValue::Bool(_) => 1,
                    }
            })
            .sum::<usize>()
    }
    let body = match m {
        Message::ClientHello {
            client_name,
            capabilities,
        } => 2 + client_name.len() + config_len(capabilities),
        Message::GetWeightsIns => 0,
        Message::GetWeightsRes { weights } => weights_byte_size(weights),
        Message::FitIns { weights, config } | Message::EvaluateIns { weights, config } => {
            weights_byte_size(weights) + config_len(config)
        }
        Message::FitRes {
            weights, metrics, ..
        } => weights_byte_size(weights) + 8 + config_len(metrics),
        Message::EvaluateRes { metrics, .. } => 16 + config_len(metrics),
        Message::ReconnectIns { .. } => 4,
        Message::DisconnectRes { .. } => 1,
        Message::ErrorRes { detail, .. } => 2 + 2 + detail.len(),
    };
    HEADER_LEN + body
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>, ProtocolError> {
    if let Message::EvaluateRes {
        num_examples: 0, ..
    } = m
    {
        return Err(ProtocolError::InvalidMessage {
            kind: MessageType::EvaluateRes,
            reason: "num_examples must be at least 1".into(),
        });
    }
    let mut out = Vec::with_capacity(encoded_len(m));
    out.extend_from_slice(&MAGIC);
    out.push(PROTOCOL_VERSION);
    out.push(m.message_type() as u8);
    out.extend_from_slice(&[0; 4]);
    encode_body(m, &mut out)?;
    let body_len = out.len() - HEADER_LEN;
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::FrameTooLarge(body_len as u64));
    }
    out[6..10].copy_from_slice(&(body_len as u32).to_be_bytes());
    Ok(out)
}

/// Decodes one frame from the front of `buf`.
///
/// Header problems are reported as soon as the offending bytes are present,
/// so a bad magic or oversized length never waits for the rest of the frame.
pub fn decode_message(buf: &[u8]) -> Result<Decoded, ProtocolError> {
    let magic_len = buf.len().min(4);
    if buf[..magic_len] != MAGIC[..magic_len] {
        return Err(ProtocolError::BadMagic(buf[..magic_len].to_vec()));
    }
    if buf.len() > 4 && buf[4] != PROTOCOL_VERSION {
        return Err(ProtocolError::UnsupportedVersion(buf[4]));
    }
    if buf.len() > 5 && MessageType::from_u8(buf[5]).is_none() {
        return Err(ProtocolError::UnknownMessageType(buf[5]));
    }
    if buf.len() < HEADER_LEN {
        return Ok(Decoded::NeedMore {
            needed: HEADER_LEN - buf.len(),
        });
    }
    let body_len = u32::from_be_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::FrameTooLarge(body_len as u64));
    }
    let total = HEADER_LEN + body_len;
    if buf.len() < total {
        return Ok(Decoded::NeedMore {
            needed: total - buf.len(),
        });
    }
    let kind = MessageType::from_u8(buf[5]).expect("checked above");
    let message = decode_body(kind, &buf[HEADER_LEN..total])?;
    Ok(Decoded::Message {
        message,
        consumed: total,
    })
}

/// Incremental decoder for a byte stream carrying back-to-back frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes buffered but not yet consumed by a decoded frame.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        if self.pending() == 0 {
            return Ok(None);
        }
        match decode_message(&self.buf[self.start..])? {
            Decoded::NeedMore { .. } => Ok(None),
            Decoded::Message { message, consumed } => {
                self.start += consumed;
                if self.start == self.buf.len() {
                    self.buf.clear();
                    self.start = 0;
                } else if self.start > self.buf.len() / 2 {
                    self.buf.drain(..self.start);
                    self.start = 0;
                }
                Ok(Some(message))
            }
        }
    }
}
