//! MQTT-SN v1.2 wire format, restricted to the packets ROMANO needs.
//!
//! Only the one-octet length form is supported, so every packet is at most
//! 255 octets and a PUBLISH carries at most 248 octets of data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_PACKET: usize = 255;
pub const PUBLISH_HEADER: usize = 7;
pub const MAX_PUBLISH_DATA: usize = MAX_PACKET - PUBLISH_HEADER;
pub const PROTOCOL_ID: u8 = 0x01;

pub mod msg_type {
    pub const CONNECT: u8 = 0x04;
    pub const CONNACK: u8 = 0x05;
    pub const REGISTER: u8 = 0x0A;
    pub const REGACK: u8 = 0x0B;
    pub const PUBLISH: u8 = 0x0C;
    pub const PUBACK: u8 = 0x0D;
    pub const SUBSCRIBE: u8 = 0x12;
    pub const SUBACK: u8 = 0x13;
    pub const UNSUBSCRIBE: u8 = 0x14;
    pub const UNSUBACK: u8 = 0x15;
    pub const DISCONNECT: u8 = 0x18;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("packet truncated: need {needed} octets, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown MQTT-SN message type 0x{0:02x}")]
    UnknownMsgType(u8),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("packet of {0} octets exceeds {MAX_PACKET}")]
    Oversize(usize),
    #[error("topic name is not valid UTF-8")]
    InvalidTopic,
}

/// Delivery guarantee. QoS 2 is outside this implementation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum QoS {
    #[default]
    AtMostOnce,
    AtLeastOnce,
}

impl QoS {
    pub fn level(self) -> u8 {
        match self {
            QoS::AtMostOnce => 0,
            QoS::AtLeastOnce => 1,
        }
    }
}

/// The MQTT-SN flags octet: DUP(7) QoS(6..5) Retain(4) Will(3) CleanSession(2) TopicIdType(1..0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Flags(pub u8);

impl Flags {
    pub const DUP: u8 = 0x80;
    pub const RETAIN: u8 = 0x10;
    pub const WILL: u8 = 0x08;
    pub const CLEAN_SESSION: u8 = 0x04;
    pub const TOPIC_NORMAL: u8 = 0x00;
    pub const TOPIC_PREDEFINED: u8 = 0x01;
    pub const TOPIC_SHORT: u8 = 0x02;

    pub fn with_qos(qos: QoS) -> Flags {
        Flags(qos.level() << 5)
    }

    pub fn qos_bits(self) -> u8 {
        (self.0 >> 5) & 0x03
    }

    /// `None` for the QoS levels this implementation does not speak (2 and -1).
    pub fn qos(self) -> Option<QoS> {
        match self.qos_bits() {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            _ => None,
        }
    }

    pub fn dup(self) -> bool {
        self.0 & Self::DUP != 0
    }

    pub fn set_dup(self) -> Flags {
        Flags(self.0 | Self::DUP)
    }

    pub fn topic_id_type(self) -> u8 {
        self.0 & 0x03
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReturnCode {
    Accepted,
    RejectedCongestion,
    RejectedInvalidTopicId,
    RejectedNotSupported,
    Other(u8),
}

impl ReturnCode {
    pub fn to_byte(self) -> u8 {
        match self {
            ReturnCode::Accepted => 0x00,
            ReturnCode::RejectedCongestion => 0x01,
            ReturnCode::RejectedInvalidTopicId => 0x02,
            ReturnCode::RejectedNotSupported => 0x03,
            ReturnCode::Other(b) => b,
        }
    }

    pub fn from_byte(b: u8) -> ReturnCode {
        match b {
            0x00 => ReturnCode::Accepted,
            0x01 => ReturnCode::RejectedCongestion,
            0x02 => ReturnCode::RejectedInvalidTopicId,
            0x03 => ReturnCode::RejectedNotSupported,
            other => ReturnCode::Other(other),
        }
    }

    pub fn is_accepted(self) -> bool {
        self == ReturnCode::Accepted
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Publish {
    pub flags: Flags,
    pub topic_id: u16,
    pub msg_id: u16,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Packet {
    Connect { flags: Flags, duration: u16, client_id: String },
    Connack { code: ReturnCode },
    Register { topic_id: u16, msg_id: u16, topic_name: String },
    Regack { topic_id: u16, msg_id: u16, code: ReturnCode },
    Publish(Publish),
    Puback { topic_id: u16, msg_id: u16, code: ReturnCode },
    Subscribe { flags: Flags, msg_id: u16, topic_name: String },
    Suback { flags: Flags, topic_id: u16, msg_id: u16, code: ReturnCode },
    Unsubscribe { flags: Flags, msg_id: u16, topic_name: String },
    Unsuback { msg_id: u16 },
    Disconnect,
}

impl Packet {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Packet::Connect { .. } => CONNECT,
            Packet::Connack { .. } => CONNACK,
            Packet::Register { .. } => REGISTER,
            Packet::Regack { .. } => REGACK,
            Packet::Publish(_) => PUBLISH,
            Packet::Puback { .. } => PUBACK,
            Packet::Subscribe { .. } => SUBSCRIBE,
            Packet::Suback { .. } => SUBACK,
            Packet::Unsubscribe { .. } => UNSUBSCRIBE,
            Packet::Unsuback { .. } => UNSUBACK,
            Packet::Disconnect => DISCONNECT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Packet::Connect { .. } => "CONNECT",
            Packet::Connack { .. } => "CONNACK",
            Packet::Register { .. } => "REGISTER",
            Packet::Regack { .. } => "REGACK",
            Packet::Publish(_) => "PUBLISH",
            Packet::Puback { .. } => "PUBACK",
            Packet::Subscribe { .. } => "SUBSCRIBE",
            Packet::Suback { .. } => "SUBACK",
            Packet::Unsubscribe { .. } => "UNSUBSCRIBE",
            Packet::Unsuback { .. } => "UNSUBACK",
            Packet::Disconnect => "DISCONNECT",
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, PacketError> {
        encode(self)
    }
}

pub fn encode(pkt: &Packet) -> Result<Vec<u8>, PacketError> {
    let mut out = vec![0u8, pkt.msg_type()];
    match pkt {
        Packet::Connect { flags, duration, client_id } => {
            out.push(flags.0);
            out.push(PROTOCOL_ID);
            out.extend_from_slice(&duration.to_be_bytes());
            out.extend_from_slice(client_id.as_bytes());
        }
        Packet::Connack { code } => out.push(code.to_byte()),
        Packet::Register { topic_id, msg_id, topic_name } => {
            out.extend_from_slice(&topic_id.to_be_bytes());
            out.extend_from_slice(&msg_id.to_be_bytes());
            out.extend_from_slice(topic_name.as_bytes());
        }
        Packet::Regack { topic_id, msg_id, code } | Packet::Puback { topic_id, msg_id, code } => {
            out.extend_from_slice(&topic_id.to_be_bytes());
            out.extend_from_slice(&msg_id.to_be_bytes());
            out.push(code.to_byte());
        }
        Packet::Publish(p) => {
            out.push(p.flags.0);
            out.extend_from_slice(&p.topic_id.to_be_bytes());
            out.extend_from_slice(&p.msg_id.to_be_bytes());
            out.extend_from_slice(&p.data);
        }
        Packet::Subscribe { flags, msg_id, topic_name }
        | Packet::Unsubscribe { flags, msg_id, topic_name } => {
            out.push(flags.0);
            out.extend_from_slice(&msg_id.to_be_bytes());
            out.extend_from_slice(topic_name.as_bytes());
        }
        Packet::Suback { flags, topic_id, msg_id, code } => {
            out.push(flags.0);
            out.extend_from_slice(&topic_id.to_be_bytes());
            out.extend_from_slice(&msg_id.to_be_bytes());
            out.push(code.to_byte());
        }
        Packet::Unsuback { msg_id } => out.extend_from_slice(&msg_id.to_be_bytes()),
        Packet::Disconnect => {}
    }
    if out.len() > MAX_PACKET {
        return Err(PacketError::Oversize(out.len()));
    }
    out[0] = out.len() as u8;
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, PacketError> {
        let b = *self.buf.get(self.pos).ok_or(PacketError::Truncated {
            needed: self.pos + 1,
            available: self.buf.len(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, PacketError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn rest(&mut self) -> &'a [u8] {
        let r = &self.buf[self.pos..];
        self.pos = self.buf.len();
        r
    }

    fn text(&mut self) -> Result<String, PacketError> {
        String::from_utf8(self.rest().to_vec()).map_err(|_| PacketError::InvalidTopic)
    }

    fn finish(&self) -> Result<(), PacketError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(PacketError::LengthMismatch(format!(
                "{} unexpected trailing octets",
                self.buf.len() - self.pos
            )))
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Packet, PacketError> {
    if bytes.len() < 2 {
        return Err(PacketError::Truncated {
            needed: 2,
            available: bytes.len(),
        });
    }
    let declared = bytes[0] as usize;
    if declared == 0x01 {
        return Err(PacketError::LengthMismatch(
            "three-octet length form is not supported".to_string(),
        ));
    }
    if declared < 2 {
        return Err(PacketError::LengthMismatch(format!("length field {declared}")));
    }
    if declared > bytes.len() {
        return Err(PacketError::Truncated {
            needed: declared,
            available: bytes.len(),
        });
    }
    if declared < bytes.len() {
        return Err(PacketError::LengthMismatch(format!(
            "length field {declared} but {} octets supplied",
            bytes.len()
        )));
    }
    let mut r = Reader { buf: bytes, pos: 2 };
    use msg_type::*;
    let pkt = match bytes[1] {
        CONNECT => {
            let flags = Flags(r.u8()?);
            let proto = r.u8()?;
            if proto != PROTOCOL_ID {
                return Err(PacketError::LengthMismatch(format!("protocol id 0x{proto:02x}")));
            }
            let duration = r.u16()?;
            Packet::Connect { flags, duration, client_id: r.text()? }
        }
        CONNACK => Packet::Connack { code: ReturnCode::from_byte(r.u8()?) },
        REGISTER => Packet::Register {
            topic_id: r.u16()?,
            msg_id: r.u16()?,
            topic_name: r.text()?,
        },
        REGACK => Packet::Regack {
            topic_id: r.u16()?,
            msg_id: r.u16()?,
            code: ReturnCode::from_byte(r.u8()?),
        },
        PUBLISH => Packet::Publish(Publish {
            flags: Flags(r.u8()?),
            topic_id: r.u16()?,
            msg_id: r.u16()?,
            data: r.rest().to_vec(),
        }),
        PUBACK => Packet::Puback {
            topic_id: r.u16()?,
            msg_id: r.u16()?,
            code: ReturnCode::from_byte(r.u8()?),
        },
        SUBSCRIBE => Packet::Subscribe {
            flags: Flags(r.u8()?),
            msg_id: r.u16()?,
            topic_name: r.text()?,
        },
        SUBACK => Packet::Suback {
            flags: Flags(r.u8()?),
            topic_id: r.u16()?,
            msg_id: r.u16()?,
            code: ReturnCode::from_byte(r.u8()?),
        },
        UNSUBSCRIBE => Packet::Unsubscribe {
            flags: Flags(r.u8()?),
            msg_id: r.u16()?,
            topic_name: r.text()?,
        },
        UNSUBACK => Packet::Unsuback { msg_id: r.u16()? },
        DISCONNECT => Packet::Disconnect,
        other => return Err(PacketError::UnknownMsgType(other)),
    };
    r.finish()?;
    Ok(pkt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn publish_layout_matches_table() {
        let p = Packet::Publish(Publish {
            flags: Flags::with_qos(QoS::AtMostOnce),
            topic_id: 7,
            msg_id: 0,
            data: (0..32).collect(),
        });
        let bytes = encode(&p).unwrap();
        assert_eq!(bytes.len(), 39);
        assert_eq!(bytes[0], 39);
        assert_eq!(bytes[1], msg_type::PUBLISH);
        assert_eq!(bytes[2], 0x00);
        assert_eq!(&bytes[3..5], &[0, 7]);
        assert_eq!(&bytes[5..7], &[0, 0]);
        assert_eq!(&bytes[7..], &(0..32).collect::<Vec<u8>>()[..]);
        assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn empty_publish_is_header_only() {
        let p = Packet::Publish(Publish {
            flags: Flags::with_qos(QoS::AtLeastOnce),
            topic_id: 1,
            msg_id: 9,
            data: vec![],
        });
        let bytes = encode(&p).unwrap();
        assert_eq!(bytes.len(), PUBLISH_HEADER);
        assert_eq!(bytes[2], 0x20);
        assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn publish_data_limit() {
        let mk = |n| {
            Packet::Publish(Publish {
                flags: Flags::default(),
                topic_id: 1,
                msg_id: 1,
                data: vec![0; n],
            })
        };
        assert_eq!(encode(&mk(MAX_PUBLISH_DATA)).unwrap().len(), 255);
        assert_eq!(encode(&mk(MAX_PUBLISH_DATA + 1)), Err(PacketError::Oversize(256)));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode(&[7]), Err(PacketError::Truncated { .. })));
        assert!(matches!(decode(&[9, 0x0C, 0, 0]), Err(PacketError::Truncated { .. })));
        assert!(matches!(decode(&[3, 0x0C, 0, 0]), Err(PacketError::LengthMismatch(_))));
        assert_eq!(decode(&[2, 0x7F]), Err(PacketError::UnknownMsgType(0x7F)));
        // CONNACK with a missing return code
        assert!(matches!(decode(&[2, 0x05]), Err(PacketError::Truncated { .. })));
        // UNSUBACK with an extra octet
        assert!(matches!(decode(&[5, 0x15, 0, 1, 9]), Err(PacketError::LengthMismatch(_))));
    }

    #[test]
    fn control_packets_roundtrip() {
        let pkts = vec![
            Packet::Connect {
                flags: Flags(Flags::CLEAN_SESSION),
                duration: 60,
                client_id: "fe80::212:4b00:abcd:1234".into(),
            },
            Packet::Connack { code: ReturnCode::Accepted },
            Packet::Register { topic_id: 0, msg_id: 3, topic_name: "init-info".into() },
            Packet::Regack { topic_id: 4, msg_id: 3, code: ReturnCode::Accepted },
            Packet::Puback { topic_id: 4, msg_id: 9, code: ReturnCode::RejectedInvalidTopicId },
            Packet::Subscribe { flags: Flags::default(), msg_id: 2, topic_name: "common".into() },
            Packet::Suback { flags: Flags::default(), topic_id: 1, msg_id: 2, code: ReturnCode::Accepted },
            Packet::Unsubscribe { flags: Flags::default(), msg_id: 5, topic_name: "x".into() },
            Packet::Unsuback { msg_id: 5 },
            Packet::Disconnect,
        ];
        for p in pkts {
            assert_eq!(decode(&encode(&p).unwrap()).unwrap(), p);
        }
    }

    #[test]
    fn flag_bits() {
        let f = Flags::with_qos(QoS::AtLeastOnce).set_dup();
        assert!(f.dup());
        assert_eq!(f.qos(), Some(QoS::AtLeastOnce));
        assert_eq!(Flags(0x40).qos(), None);
    }
}
