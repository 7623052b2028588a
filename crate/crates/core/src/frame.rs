//! Wire-level CAN primitives shared by the simulator, the analysis pipeline and
//! the trace format.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest 29-bit extended identifier.
pub const MAX_EXTENDED_ID: u32 = 0x1FFF_FFFF;
/// Largest 11-bit standard identifier.
pub const MAX_STANDARD_ID: u32 = 0x7FF;
/// Classic CAN payload limit.
pub const MAX_DLC: usize = 8;

/// A CAN arbitration identifier. Lower values win arbitration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct FrameId(u32);

impl FrameId {
    pub fn new(value: u32) -> Result<Self> {
        if value > MAX_EXTENDED_ID {
            return Err(Error::InvalidSpec(format!(
                "frame id {value:#x} exceeds the 29-bit range"
            )));
        }
        Ok(FrameId(value))
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    /// Identifier used by the flooding node of a DoS attack.
    pub const TOP_PRIORITY: FrameId = FrameId(0);
}

impl TryFrom<u32> for FrameId {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        FrameId::new(value)
    }
}

impl From<FrameId> for u32 {
    fn from(id: FrameId) -> u32 {
        id.0
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08X}", self.0)
    }
}

/// Name of a node on the bus ("A", "B", "X", ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EcuLabel(String);

impl EcuLabel {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidSpec("ECU label must be nonempty".into()));
        }
        if name.chars().any(|c| c.is_whitespace() || c == ',' || c == '=') {
            return Err(Error::InvalidSpec(format!(
                "ECU label {name:?} must not contain whitespace, ',' or '='"
            )));
        }
        Ok(EcuLabel(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EcuLabel {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        EcuLabel::new(value)
    }
}

impl From<EcuLabel> for String {
    fn from(label: EcuLabel) -> String {
        label.0
    }
}

impl fmt::Display for EcuLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A data frame as seen on the wire. The sender is not part of the frame;
/// the simulator keeps it in a separate send log.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanFrame {
    id: FrameId,
    extended: bool,
    data: Vec<u8>,
}

impl CanFrame {
    pub fn new(id: FrameId, extended: bool, data: Vec<u8>) -> Result<Self> {
        if data.len() > MAX_DLC {
            return Err(Error::InvalidSpec(format!(
                "payload of {} bytes exceeds dlc {MAX_DLC}",
                data.len()
            )));
        }
        if !extended && id.value() > MAX_STANDARD_ID {
            return Err(Error::InvalidSpec(format!(
                "standard frame id {:#x} exceeds 11 bits",
                id.value()
            )));
        }
        Ok(CanFrame { id, extended, data })
    }

    pub fn id(&self) -> FrameId {
        self.id
    }

    pub fn is_extended(&self) -> bool {
        self.extended
    }

    pub fn dlc(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// A frame together with its receiver-side arrival time in microseconds
/// since the start of the trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimestampedFrame {
    pub arrival_us: u64,
    pub frame: CanFrame,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_id_range() {
        assert!(FrameId::new(0).is_ok());
        assert!(FrameId::new(MAX_EXTENDED_ID).is_ok());
        assert!(FrameId::new(MAX_EXTENDED_ID + 1).is_err());
    }

    #[test]
    fn frame_limits() {
        let id = FrameId::new(0x7FF).unwrap();
        assert!(CanFrame::new(id, false, vec![0; 8]).is_ok());
        assert!(CanFrame::new(id, false, vec![0; 9]).is_err());
        let wide = FrameId::new(0x800).unwrap();
        assert!(CanFrame::new(wide, false, vec![]).is_err());
        assert!(CanFrame::new(wide, true, vec![]).is_ok());
    }

    #[test]
    fn labels() {
        assert!(EcuLabel::new("A").is_ok());
        assert!(EcuLabel::new("").is_err());
        assert!(EcuLabel::new("a b").is_err());
    }
}
