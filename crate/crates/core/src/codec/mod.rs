//! ROMANO message codec.
//!
//! Every ROMANO message is `[data type][total length][body]`, carried whole
//! inside the Data field of an MQTT-SN PUBLISH. Multi-octet integers are
//! big-endian.
//!
//! | code | type                         | body                                      |
//! |------|------------------------------|-------------------------------------------|
//! | 0x00 | ConnectionRequest            | ROMANO id (8 ASCII octets)                |
//! | 0x01 | ConnectionAck                | empty                                     |
//! | 0x02 | RequestConnectedNodesInfo    | ROMANO id (8 ASCII octets)                |
//! | 0x03 | ConnectedNodesInfo           | concatenated ROMANO ids                   |
//! | 0x04 | Heartbeat                    | ROMANO id (8 ASCII octets)                |
//! | 0x05 | NormalData                   | opaque                                    |
//! | 0x06 | MqttSubscribe                | topic name                                |
//! | 0x07 | MqttUnsubscribe              | topic name                                |
//! | 0x08 | MqttPublishRequest           | end offset m, topic (octets 3..=m), data  |
//! | 0x09 | MovementControl              | control type (u16), control data          |
//! | 0x0A | SensorData                   | sensor type (u16), sensor data            |
//! | 0x11 | UdpSendReq (extension)       | opaque                                    |
//! | 0x12 | UdpSendGo (extension)        | opaque                                    |
//!
//! The numeric codes for the eleven built-in types are a local convention.

mod id;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use id::RomanoId;

/// Header octets: data type and total length.
pub const HEADER_LEN: usize = 2;
/// Largest body that still lets the total length fit in one octet.
pub const MAX_PAYLOAD: usize = 253;
pub const MAX_MESSAGE: usize = HEADER_LEN + MAX_PAYLOAD;

pub const UDP_SEND_REQ: u8 = 0x11;
pub const UDP_SEND_GO: u8 = 0x12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("payload of {0} octets exceeds the {MAX_PAYLOAD}-octet limit")]
    OversizePayload(usize),
    #[error("message truncated: header says {declared} octets, got {available}")]
    TruncatedMessage { declared: usize, available: usize },
    #[error("unknown ROMANO data type 0x{0:02x}")]
    UnknownType(u8),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid ROMANO id {0:?}")]
    InvalidId(String),
    #[error("topic name is not valid UTF-8")]
    InvalidTopic,
    #[error("malformed IPv6 address {0:?}")]
    MalformedAddress(String),
    #[error("type 0x{0:02x} collides with a built-in type")]
    ReservedCode(u8),
}

/// Discriminant of a ROMANO message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RomanoDataType {
    ConnectionRequest,
    ConnectionAck,
    RequestConnectedNodesInfo,
    ConnectedNodesInfo,
    Heartbeat,
    NormalData,
    MqttSubscribe,
    MqttUnsubscribe,
    MqttPublishRequest,
    MovementControl,
    SensorData,
    /// Application-defined type, accepted only when present in an [`ExtensionRegistry`].
    Custom(u8),
}

impl RomanoDataType {
    pub const BUILT_IN: [RomanoDataType; 11] = [
        RomanoDataType::ConnectionRequest,
        RomanoDataType::ConnectionAck,
        RomanoDataType::RequestConnectedNodesInfo,
        RomanoDataType::ConnectedNodesInfo,
        RomanoDataType::Heartbeat,
        RomanoDataType::NormalData,
        RomanoDataType::MqttSubscribe,
        RomanoDataType::MqttUnsubscribe,
        RomanoDataType::MqttPublishRequest,
        RomanoDataType::MovementControl,
        RomanoDataType::SensorData,
    ];

    pub const UDP_SEND_REQ: RomanoDataType = RomanoDataType::Custom(UDP_SEND_REQ);
    pub const UDP_SEND_GO: RomanoDataType = RomanoDataType::Custom(UDP_SEND_GO);

    pub fn code(self) -> u8 {
        match self {
            RomanoDataType::ConnectionRequest => 0x00,
            RomanoDataType::ConnectionAck => 0x01,
            RomanoDataType::RequestConnectedNodesInfo => 0x02,
            RomanoDataType::ConnectedNodesInfo => 0x03,
            RomanoDataType::Heartbeat => 0x04,
            RomanoDataType::NormalData => 0x05,
            RomanoDataType::MqttSubscribe => 0x06,
            RomanoDataType::MqttUnsubscribe => 0x07,
            RomanoDataType::MqttPublishRequest => 0x08,
            RomanoDataType::MovementControl => 0x09,
            RomanoDataType::SensorData => 0x0A,
            RomanoDataType::Custom(c) => c,
        }
    }

    /// Resolves a wire code against the built-ins and the given extension set.
    pub fn from_code(code: u8, extensions: &ExtensionRegistry) -> Result<Self, CodecError> {
        if let Some(t) = Self::BUILT_IN.get(code as usize) {
            return Ok(*t);
        }
        if extensions.contains(code) {
            Ok(RomanoDataType::Custom(code))
        } else {
            Err(CodecError::UnknownType(code))
        }
    }

    pub fn is_built_in(code: u8) -> bool {
        (code as usize) < Self::BUILT_IN.len()
    }
}

impl fmt::Display for RomanoDataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RomanoDataType::Custom(UDP_SEND_REQ) => f.write_str("UdpSendReq"),
            RomanoDataType::Custom(UDP_SEND_GO) => f.write_str("UdpSendGo"),
            RomanoDataType::Custom(c) => write!(f, "Custom(0x{c:02x})"),
            other => write!(f, "{other:?}"),
        }
    }
}

/// Set of application-defined type codes a decoder accepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionRegistry {
    codes: BTreeSet<u8>,
}

impl Default for ExtensionRegistry {
    fn default() -> Self {
        ExtensionRegistry {
            codes: [UDP_SEND_REQ, UDP_SEND_GO].into_iter().collect(),
        }
    }
}

impl ExtensionRegistry {
    pub fn empty() -> Self {
        ExtensionRegistry { codes: BTreeSet::new() }
    }

    pub fn register(&mut self, code: u8) -> Result<(), CodecError> {
        if RomanoDataType::is_built_in(code) {
            return Err(CodecError::ReservedCode(code));
        }
        self.codes.insert(code);
        Ok(())
    }

    pub fn contains(&self, code: u8) -> bool {
        self.codes.contains(&code)
    }

    pub fn codes(&self) -> impl Iterator<Item = u8> + '_ {
        self.codes.iter().copied()
    }
}

/// Built-in movement control types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MovementKind {
    MoveFront,
    MoveBack,
    MoveLeft,
    MoveRight,
    RotateLeft,
    RotateRight,
}

impl MovementKind {
    pub const ALL: [MovementKind; 6] = [
        MovementKind::MoveFront,
        MovementKind::MoveBack,
        MovementKind::MoveLeft,
        MovementKind::MoveRight,
        MovementKind::RotateLeft,
        MovementKind::RotateRight,
    ];

    pub fn code(self) -> u16 {
        match self {
            MovementKind::MoveFront => 0x0000,
            MovementKind::MoveBack => 0x0001,
            MovementKind::MoveLeft => 0x0002,
            MovementKind::MoveRight => 0x0003,
            MovementKind::RotateLeft => 0x0004,
            MovementKind::RotateRight => 0x0005,
        }
    }

    pub fn from_code(code: u16) -> Option<MovementKind> {
        Self::ALL.get(code as usize).copied()
    }

    /// Distance commands carry millimetres, rotations carry degrees.
    pub fn is_rotation(self) -> bool {
        matches!(self, MovementKind::RotateLeft | MovementKind::RotateRight)
    }
}

impl std::str::FromStr for MovementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "movefront" | "front" | "forward" => Ok(MovementKind::MoveFront),
            "moveback" | "back" | "backward" => Ok(MovementKind::MoveBack),
            "moveleft" | "left" => Ok(MovementKind::MoveLeft),
            "moveright" | "right" => Ok(MovementKind::MoveRight),
            "rotateleft" => Ok(MovementKind::RotateLeft),
            "rotateright" => Ok(MovementKind::RotateRight),
            _ => Err(format!("unknown movement {s:?}")),
        }
    }
}

/// A movement instruction as queued in a robot's control mailbox.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MovementCommand {
    pub control_type: u16,
    /// Millimetres for translations, degrees for rotations.
    pub magnitude: u16,
}

impl MovementCommand {
    pub fn new(kind: MovementKind, magnitude: u16) -> Self {
        MovementCommand {
            control_type: kind.code(),
            magnitude,
        }
    }

    pub fn kind(&self) -> Option<MovementKind> {
        MovementKind::from_code(self.control_type)
    }

    pub fn to_message(self) -> RomanoMessage {
        RomanoMessage::MovementControl {
            control_type: self.control_type,
            data: self.magnitude.to_be_bytes().to_vec(),
        }
    }

    /// Recovers a command from a MovementControl body with a 2-octet magnitude.
    pub fn from_message(msg: &RomanoMessage) -> Option<MovementCommand> {
        match msg {
            RomanoMessage::MovementControl { control_type, data } if data.len() == 2 => {
                Some(MovementCommand {
                    control_type: *control_type,
                    magnitude: u16::from_be_bytes([data[0], data[1]]),
                })
            }
            _ => None,
        }
    }
}

/// A decoded ROMANO message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RomanoMessage {
    ConnectionRequest { id: RomanoId },
    ConnectionAck,
    RequestConnectedNodesInfo { id: RomanoId },
    ConnectedNodesInfo { ids: Vec<RomanoId> },
    Heartbeat { id: RomanoId },
    NormalData { data: Vec<u8> },
    MqttSubscribe { topic: String },
    MqttUnsubscribe { topic: String },
    MqttPublishRequest { topic: String, data: Vec<u8> },
    MovementControl { control_type: u16, data: Vec<u8> },
    SensorData { sensor_type: u16, data: Vec<u8> },
    Custom { code: u8, data: Vec<u8> },
}

impl RomanoMessage {
    pub fn data_type(&self) -> RomanoDataType {
        match self {
            RomanoMessage::ConnectionRequest { .. } => RomanoDataType::ConnectionRequest,
            RomanoMessage::ConnectionAck => RomanoDataType::ConnectionAck,
            RomanoMessage::RequestConnectedNodesInfo { .. } => {
                RomanoDataType::RequestConnectedNodesInfo
            }
            RomanoMessage::ConnectedNodesInfo { .. } => RomanoDataType::ConnectedNodesInfo,
            RomanoMessage::Heartbeat { .. } => RomanoDataType::Heartbeat,
            RomanoMessage::NormalData { .. } => RomanoDataType::NormalData,
            RomanoMessage::MqttSubscribe { .. } => RomanoDataType::MqttSubscribe,
            RomanoMessage::MqttUnsubscribe { .. } => RomanoDataType::MqttUnsubscribe,
            RomanoMessage::MqttPublishRequest { .. } => RomanoDataType::MqttPublishRequest,
            RomanoMessage::MovementControl { .. } => RomanoDataType::MovementControl,
            RomanoMessage::SensorData { .. } => RomanoDataType::SensorData,
            RomanoMessage::Custom { code, .. } => RomanoDataType::Custom(*code),
        }
    }

    pub fn movement(kind: MovementKind, magnitude: u16) -> Self {
        MovementCommand::new(kind, magnitude).to_message()
    }

    /// Encoded size in octets, header included.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload_len()
    }

    fn payload_len(&self) -> usize {
        match self {
            RomanoMessage::ConnectionRequest { .. }
            | RomanoMessage::RequestConnectedNodesInfo { .. }
            | RomanoMessage::Heartbeat { .. } => RomanoId::LEN,
            RomanoMessage::ConnectionAck => 0,
            RomanoMessage::ConnectedNodesInfo { ids } => ids.len() * RomanoId::LEN,
            RomanoMessage::NormalData { data } | RomanoMessage::Custom { data, .. } => data.len(),
            RomanoMessage::MqttSubscribe { topic } | RomanoMessage::MqttUnsubscribe { topic } => {
                topic.len()
            }
            RomanoMessage::MqttPublishRequest { topic, data } => 1 + topic.len() + data.len(),
            RomanoMessage::MovementControl { data, .. }
            | RomanoMessage::SensorData { data, .. } => 2 + data.len(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        encode(self)
    }
}

/// Serializes a message to its wire octets.
pub fn encode(msg: &RomanoMessage) -> Result<Vec<u8>, CodecError> {
    let payload = msg.payload_len();
    if payload > MAX_PAYLOAD {
        return Err(CodecError::OversizePayload(payload));
    }
    if let RomanoMessage::Custom { code, .. } = msg {
        if RomanoDataType::is_built_in(*code) {
            return Err(CodecError::ReservedCode(*code));
        }
    }
    let total = HEADER_LEN + payload;
    let mut out = Vec::with_capacity(total);
    out.push(msg.data_type().code());
    out.push(total as u8);
    match msg {
        RomanoMessage::ConnectionRequest { id }
        | RomanoMessage::RequestConnectedNodesInfo { id }
        | RomanoMessage::Heartbeat { id } => out.extend_from_slice(id.as_bytes()),
        RomanoMessage::ConnectionAck => {}
        RomanoMessage::ConnectedNodesInfo { ids } => {
            for id in ids {
                out.extend_from_slice(id.as_bytes());
            }
        }
        RomanoMessage::NormalData { data } | RomanoMessage::Custom { data, .. } => {
            out.extend_from_slice(data)
        }
        RomanoMessage::MqttSubscribe { topic } | RomanoMessage::MqttUnsubscribe { topic } => {
            out.extend_from_slice(topic.as_bytes())
        }
        RomanoMessage::MqttPublishRequest { topic, data } => {
            // Offset of the last topic octet, counted from the start of the message.
            out.push((HEADER_LEN + topic.len()) as u8);
            out.extend_from_slice(topic.as_bytes());
            out.extend_from_slice(data);
        }
        RomanoMessage::MovementControl { control_type: ty, data }
        | RomanoMessage::SensorData { sensor_type: ty, data } => {
            out.extend_from_slice(&ty.to_be_bytes());
            out.extend_from_slice(data);
        }
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

/// Decodes with the default extension registry (0x11, 0x12).
pub fn decode(bytes: &[u8]) -> Result<RomanoMessage, CodecError> {
    decode_with(bytes, &ExtensionRegistry::default())
}

pub fn decode_with(bytes: &[u8], extensions: &ExtensionRegistry) -> Result<RomanoMessage, CodecError> {
    let Some(&code) = bytes.first() else {
        return Err(CodecError::TruncatedMessage {
            declared: HEADER_LEN,
            available: 0,
        });
    };
    let data_type = RomanoDataType::from_code(code, extensions)?;
    let Some(&declared) = bytes.get(1) else {
        return Err(CodecError::TruncatedMessage {
            declared: HEADER_LEN,
            available: bytes.len(),
        });
    };
    let declared = declared as usize;
    if declared < HEADER_LEN {
        return Err(CodecError::LengthMismatch(format!(
            "length field {declared} is shorter than the header"
        )));
    }
    if declared > bytes.len() {
        return Err(CodecError::TruncatedMessage {
            declared,
            available: bytes.len(),
        });
    }
    if declared < bytes.len() {
        return Err(CodecError::LengthMismatch(format!(
            "{} trailing octets after a {declared}-octet message",
            bytes.len() - declared
        )));
    }
    let body = &bytes[HEADER_LEN..];

    let id_body = |body: &[u8]| -> Result<RomanoId, CodecError> {
        if body.len() != RomanoId::LEN {
            return Err(CodecError::LengthMismatch(format!(
                "{data_type} body must be {} octets, got {}",
                RomanoId::LEN,
                body.len()
            )));
        }
        RomanoId::from_bytes(body)
    };
    let topic = |raw: &[u8]| -> Result<String, CodecError> {
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::InvalidTopic)
    };
    let typed_body = |body: &[u8]| -> Result<(u16, Vec<u8>), CodecError> {
        if body.len() < 2 {
            return Err(CodecError::LengthMismatch(format!(
                "{data_type} needs a 2-octet type field"
            )));
        }
        Ok((u16::from_be_bytes([body[0], body[1]]), body[2..].to_vec()))
    };

    let msg = match data_type {
        RomanoDataType::ConnectionRequest => RomanoMessage::ConnectionRequest { id: id_body(body)? },
        RomanoDataType::ConnectionAck => {
            if !body.is_empty() {
                return Err(CodecError::LengthMismatch(
                    "ConnectionAck carries no body".to_string(),
                ));
            }
            RomanoMessage::ConnectionAck
        }
        RomanoDataType::RequestConnectedNodesInfo => {
            RomanoMessage::RequestConnectedNodesInfo { id: id_body(body)? }
        }
        RomanoDataType::ConnectedNodesInfo => {
            if !body.len().is_multiple_of(RomanoId::LEN) {
                return Err(CodecError::LengthMismatch(format!(
                    "node roster of {} octets is not a multiple of {}",
                    body.len(),
                    RomanoId::LEN
                )));
            }
            let ids = body
                .chunks_exact(RomanoId::LEN)
                .map(RomanoId::from_bytes)
                .collect::<Result<Vec<_>, _>>()?;
            RomanoMessage::ConnectedNodesInfo { ids }
        }
        RomanoDataType::Heartbeat => RomanoMessage::Heartbeat { id: id_body(body)? },
        RomanoDataType::NormalData => RomanoMessage::NormalData { data: body.to_vec() },
        RomanoDataType::MqttSubscribe => RomanoMessage::MqttSubscribe { topic: topic(body)? },
        RomanoDataType::MqttUnsubscribe => RomanoMessage::MqttUnsubscribe { topic: topic(body)? },
        RomanoDataType::MqttPublishRequest => {
            let Some(&end) = body.first() else {
                return Err(CodecError::LengthMismatch(
                    "publish request without topic length".to_string(),
                ));
            };
            let end = end as usize;
            if end < HEADER_LEN || end >= declared {
                return Err(CodecError::LengthMismatch(format!(
                    "topic end offset {end} outside message of {declared} octets"
                )));
            }
            RomanoMessage::MqttPublishRequest {
                topic: topic(&bytes[3..=end])?,
                data: bytes[end + 1..].to_vec(),
            }
        }
        RomanoDataType::MovementControl => {
            let (control_type, data) = typed_body(body)?;
            RomanoMessage::MovementControl { control_type, data }
        }
        RomanoDataType::SensorData => {
            let (sensor_type, data) = typed_body(body)?;
            RomanoMessage::SensorData { sensor_type, data }
        }
        RomanoDataType::Custom(code) => RomanoMessage::Custom {
            code,
            data: body.to_vec(),
        },
    };
    Ok(msg)
}

/// Splits an MQTT-SN Data field into the ROMANO message and any trailing octets.
///
/// Relays append metadata after the message; the length octet marks where it ends.
pub fn split_frame(data: &[u8]) -> Option<(&[u8], &[u8])> {
    let len = *data.get(1)? as usize;
    if len < HEADER_LEN || len > data.len() {
        return None;
    }
    Some(data.split_at(len))
}
