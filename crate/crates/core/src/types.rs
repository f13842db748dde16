//! Identifiers shared by every component.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Time in nanoseconds. Logical time in the deterministic transport, wall-clock
/// time since run start in socket mode.
pub type Nanos = u64;

pub const MICROS: Nanos = 1_000;
pub const MILLIS: Nanos = 1_000_000;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident($inner:ty), $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl From<$inner> for $name {
            fn from(v: $inner) -> Self {
                $name(v)
            }
        }
    };
}

id_newtype!(
    /// Datapath identifier of a switch.
    SwitchId(u64),
    "s"
);
id_newtype!(
    /// Controller replica identifier.
    ControllerId(u32),
    "c"
);
id_newtype!(
    /// Total-order identifier assigned by the master to a switch event.
    EventId(u64),
    "e"
);
id_newtype!(
    /// Leadership epoch handed out by the coordination service. Strictly increasing.
    Epoch(u64),
    "epoch"
);
id_newtype!(
    /// One controller connection instance at a switch. A reconnect gets a fresh id.
    ConnId(u64),
    "conn"
);
id_newtype!(
    /// Coordination-service session.
    SessionId(u64),
    "session"
);

impl EventId {
    pub fn next(self) -> EventId {
        EventId(self.0 + 1)
    }
}

/// 48-bit Ethernet address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub fn from_slice(b: &[u8]) -> Option<MacAddr> {
        let arr: [u8; 6] = b.get(..6)?.try_into().ok()?;
        Some(MacAddr(arr))
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl std::str::FromStr for MacAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for b in out.iter_mut() {
            let p = parts.next().ok_or_else(|| format!("bad mac address {s:?}"))?;
            *b = u8::from_str_radix(p, 16).map_err(|_| format!("bad mac address {s:?}"))?;
        }
        if parts.next().is_some() {
            return Err(format!("bad mac address {s:?}"));
        }
        Ok(MacAddr(out))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
