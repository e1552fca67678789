//! Minimal MQTT-SN: wire codec and client session.

pub mod packet;
pub mod session;

pub use packet::{decode, encode, Flags, Packet, PacketError, Publish, QoS, ReturnCode, MAX_PUBLISH_DATA};
pub use session::{
    ClientSession, PublishHandle, RetryPolicy, SessionError, SessionEvent, SessionState, TopicMap,
    TopicRef,
};
