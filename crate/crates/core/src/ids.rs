//! Identifier newtypes shared by every subsystem.

use serde::{Deserialize, Serialize};
use std::fmt;

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
                Self(v)
            }
        }
    };
}

id_newtype!(
    /// Tenant (one function chain). Two bytes on the wire.
    TenantId(u16),
    "t"
);
id_newtype!(
    /// Function identifier. Two bytes on the wire.
    FnId(u16),
    "f"
);
id_newtype!(NodeId(u16), "n");
id_newtype!(
    /// Pool-local buffer index.
    BufferId(u32),
    "b"
);
id_newtype!(
    /// Work request id, monotonically increasing per node.
    WrId(u64),
    "wr"
);
id_newtype!(QpId(u32), "qp");

/// Virtual or wall time in nanoseconds.
pub type Nanos = u64;

pub const NANOS_PER_SEC: Nanos = 1_000_000_000;
pub const NANOS_PER_MILLI: Nanos = 1_000_000;
pub const NANOS_PER_MICRO: Nanos = 1_000;
