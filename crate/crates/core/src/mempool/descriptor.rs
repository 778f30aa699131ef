//! The 16-byte buffer descriptor. Possession of a descriptor is the right to
//! read, write or recycle exactly one pooled buffer.
//!
//! Wire layout, little-endian:
//!
//! | bytes  | field     |
//! |--------|-----------|
//! | 0..2   | tenant_id |
//! | 2..6   | buffer_id |
//! | 6..10  | length    |
//! | 10..12 | src_fn    |
//! | 12..14 | dst_fn    |
//! | 14..16 | flags     |

use crate::ids::{BufferId, FnId, TenantId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DESCRIPTOR_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DescFlags(pub u16);

impl DescFlags {
    pub const REQUEST: Self = Self(1 << 0);
    pub const RESPONSE: Self = Self(1 << 1);
    /// Payload arrived by one-sided write under a remote lock.
    pub const VIA_OWDL: Self = Self(1 << 2);
    /// Payload arrived by one-sided write and a staging copy.
    pub const VIA_OWRC: Self = Self(1 << 3);
    pub const ALL: Self = Self(0b1111);

    pub const fn empty() -> Self {
        Self(0)
    }

    pub fn contains(self, other: Self) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn with(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn without(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferDescriptor {
    pub tenant: TenantId,
    pub buffer: BufferId,
    pub len: u32,
    pub src_fn: FnId,
    pub dst_fn: FnId,
    pub flags: DescFlags,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DescriptorError {
    #[error("descriptor must be {DESCRIPTOR_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("unknown flag bits {0:#06x}")]
    UnknownFlags(u16),
}

impl BufferDescriptor {
    pub fn new(tenant: TenantId, buffer: BufferId) -> Self {
        Self {
            tenant,
            buffer,
            len: 0,
            src_fn: FnId(0),
            dst_fn: FnId(0),
            flags: DescFlags::empty(),
        }
    }

    pub fn encode(&self) -> [u8; DESCRIPTOR_LEN] {
        let mut out = [0u8; DESCRIPTOR_LEN];
        out[0..2].copy_from_slice(&self.tenant.0.to_le_bytes());
        out[2..6].copy_from_slice(&self.buffer.0.to_le_bytes());
        out[6..10].copy_from_slice(&self.len.to_le_bytes());
        out[10..12].copy_from_slice(&self.src_fn.0.to_le_bytes());
        out[12..14].copy_from_slice(&self.dst_fn.0.to_le_bytes());
        out[14..16].copy_from_slice(&self.flags.0.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DescriptorError> {
        if bytes.len() != DESCRIPTOR_LEN {
            return Err(DescriptorError::BadLength(bytes.len()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at =
            |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let flags = u16_at(14);
        if flags & !DescFlags::ALL.0 != 0 {
            return Err(DescriptorError::UnknownFlags(flags));
        }
        Ok(Self {
            tenant: TenantId(u16_at(0)),
            buffer: BufferId(u32_at(2)),
            len: u32_at(6),
            src_fn: FnId(u16_at(10)),
            dst_fn: FnId(u16_at(12)),
            flags: DescFlags(flags),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian_in_field_order() {
        let d = BufferDescriptor {
            tenant: TenantId(0x0102),
            buffer: BufferId(0x0304_0506),
            len: 0x0708_090a,
            src_fn: FnId(0x0b0c),
            dst_fn: FnId(0x0d0e),
            flags: DescFlags::RESPONSE,
        };
        assert_eq!(
            d.encode(),
            [
                0x02, 0x01, 0x06, 0x05, 0x04, 0x03, 0x0a, 0x09, 0x08, 0x07, 0x0c, 0x0b, 0x0e,
                0x0d, 0x02, 0x00
            ]
        );
    }

    #[test]
    fn rejects_wrong_size_and_flags() {
        assert_eq!(
            BufferDescriptor::decode(&[0u8; 15]),
            Err(DescriptorError::BadLength(15))
        );
        let mut raw = [0u8; 16];
        raw[15] = 0x80;
        assert!(matches!(
            BufferDescriptor::decode(&raw),
            Err(DescriptorError::UnknownFlags(_))
        ));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            tenant: u16, buffer: u32, len: u32, src: u16, dst: u16, flags in 0u16..16
        ) {
            let d = BufferDescriptor {
                tenant: TenantId(tenant),
                buffer: BufferId(buffer),
                len,
                src_fn: FnId(src),
                dst_fn: FnId(dst),
                flags: DescFlags(flags),
            };
            let wire = d.encode();
            prop_assert_eq!(wire.len(), DESCRIPTOR_LEN);
            let back = BufferDescriptor::decode(&wire).unwrap();
            prop_assert_eq!(back, d);
            prop_assert_eq!(back.encode(), wire);
        }
    }
}
