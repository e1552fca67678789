use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::CodecError;

/// Eight lowercase hex characters naming a node; doubles as the node's private topic.
///
/// Derived from the tail of the node's IPv6 address, so at most 2^32 distinct ids exist.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RomanoId([u8; RomanoId::LEN]);

impl RomanoId {
    pub const LEN: usize = 8;

    /// Last 8 hex digits of the fully expanded address.
    pub fn derive(addr: &Ipv6Addr) -> RomanoId {
        let seg = addr.segments();
        Self::from_u32(((seg[6] as u32) << 16) | seg[7] as u32)
    }

    /// Parses `addr` as IPv6 text before deriving.
    pub fn derive_from_str(addr: &str) -> Result<RomanoId, CodecError> {
        let parsed: Ipv6Addr = addr
            .trim()
            .parse()
            .map_err(|_| CodecError::MalformedAddress(addr.to_string()))?;
        Ok(Self::derive(&parsed))
    }

    pub fn from_u32(v: u32) -> RomanoId {
        let text = format!("{v:08x}");
        let mut out = [0u8; Self::LEN];
        out.copy_from_slice(text.as_bytes());
        RomanoId(out)
    }

    /// Validates raw wire octets: exactly 8 lowercase hex ASCII characters.
    pub fn from_bytes(bytes: &[u8]) -> Result<RomanoId, CodecError> {
        if bytes.len() != Self::LEN {
            return Err(CodecError::InvalidId(String::from_utf8_lossy(bytes).into_owned()));
        }
        if !bytes.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(CodecError::InvalidId(String::from_utf8_lossy(bytes).into_owned()));
        }
        let mut out = [0u8; Self::LEN];
        out.copy_from_slice(bytes);
        Ok(RomanoId(out))
    }

    pub fn as_bytes(&self) -> &[u8; Self::LEN] {
        &self.0
    }

    pub fn as_str(&self) -> &str {
        // Constructors only admit ASCII hex digits.
        std::str::from_utf8(&self.0).expect("romano id is ascii")
    }

    pub fn to_u32(&self) -> u32 {
        u32::from_str_radix(self.as_str(), 16).expect("romano id is hex")
    }
}

impl FromStr for RomanoId {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RomanoId::from_bytes(s.as_bytes())
    }
}

impl fmt::Display for RomanoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for RomanoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RomanoId({})", self.as_str())
    }
}

impl Serialize for RomanoId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RomanoId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
