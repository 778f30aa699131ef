//! Link frames and their byte encoding.
//!
//! Every frame starts with a 16-byte little-endian header: 8-byte `wr_id`,
//! 2-byte opcode, 2-byte tenant id, 4-byte payload length. The opcode decides
//! how the payload is laid out.

use super::CompletionStatus;
use crate::ids::{NodeId, QpId, TenantId, WrId};
use crate::mempool::{BufferDescriptor, DescFlags, DESCRIPTOR_LEN};
use crate::ids::FnId;
use std::io::{self, Read, Write};
use thiserror::Error;

pub const FRAME_HEADER_LEN: usize = 16;

/// Upper bound on a single frame payload accepted from the wire.
pub const MAX_FRAME_PAYLOAD: usize = 64 * 1024 * 1024;

pub mod opcode {
    pub const SEND: u16 = 1;
    pub const RECV: u16 = 2;
    pub const WRITE: u16 = 3;
    pub const ACK: u16 = 4;
    pub const ATOMIC: u16 = 6;
    pub const ATOMIC_RESP: u16 = 7;
    pub const HELLO: u16 = 8;
}

/// Routing metadata carried alongside a send, surfaced in the receiver's
/// completion much like immediate data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingHeader {
    pub src_fn: FnId,
    pub dst_fn: FnId,
    pub flags: DescFlags,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameKind {
    Send {
        qp: QpId,
        header: RoutingHeader,
        payload: Vec<u8>,
    },
    Write {
        region: u32,
        offset: u64,
        payload: Vec<u8>,
    },
    Ack {
        status: CompletionStatus,
    },
    Atomic {
        lock_id: u32,
        expect: u64,
        swap: u64,
    },
    AtomicResp {
        old: u64,
    },
    Hello,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: NodeId,
    pub dst: NodeId,
    pub wr_id: WrId,
    pub tenant: TenantId,
    pub kind: FrameKind,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("unknown opcode {0}")]
    UnknownOpcode(u16),
    #[error("payload of {0} bytes is malformed for its opcode")]
    BadPayload(usize),
    #[error("frame payload {0} exceeds limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Frame {
    /// Bytes the frame occupies on the wire, header included.
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload_len()
    }

    fn payload_len(&self) -> usize {
        match &self.kind {
            FrameKind::Send { payload, .. } => DESCRIPTOR_LEN + 4 + payload.len(),
            FrameKind::Write { payload, .. } => 12 + payload.len(),
            FrameKind::Ack { .. } => 1,
            FrameKind::Atomic { .. } => 20,
            FrameKind::AtomicResp { .. } => 8,
            FrameKind::Hello => 0,
        }
    }

    /// Frames without bulk data bypass link serialization.
    pub fn is_control(&self) -> bool {
        !matches!(self.kind, FrameKind::Send { .. } | FrameKind::Write { .. })
    }

    pub fn opcode(&self) -> u16 {
        match self.kind {
            FrameKind::Send { .. } => opcode::SEND,
            FrameKind::Write { .. } => opcode::WRITE,
            FrameKind::Ack { .. } => opcode::ACK,
            FrameKind::Atomic { .. } => opcode::ATOMIC,
            FrameKind::AtomicResp { .. } => opcode::ATOMIC_RESP,
            FrameKind::Hello => opcode::HELLO,
        }
    }

    /// Encodes header and payload. Source and destination nodes are implied
    /// by the connection and are not part of the encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.wr_id.0.to_le_bytes());
        out.extend_from_slice(&self.opcode().to_le_bytes());
        out.extend_from_slice(&self.tenant.0.to_le_bytes());
        out.extend_from_slice(&(self.payload_len() as u32).to_le_bytes());
        match &self.kind {
            FrameKind::Send {
                qp,
                header,
                payload,
            } => {
                let desc = BufferDescriptor {
                    tenant: self.tenant,
                    buffer: Default::default(),
                    len: payload.len() as u32,
                    src_fn: header.src_fn,
                    dst_fn: header.dst_fn,
                    flags: header.flags,
                };
                out.extend_from_slice(&desc.encode());
                out.extend_from_slice(&qp.0.to_le_bytes());
                out.extend_from_slice(payload);
            }
            FrameKind::Write {
                region,
                offset,
                payload,
            } => {
                out.extend_from_slice(&region.to_le_bytes());
                out.extend_from_slice(&offset.to_le_bytes());
                out.extend_from_slice(payload);
            }
            FrameKind::Ack { status } => out.push(status.to_wire()),
            FrameKind::Atomic {
                lock_id,
                expect,
                swap,
            } => {
                out.extend_from_slice(&lock_id.to_le_bytes());
                out.extend_from_slice(&expect.to_le_bytes());
                out.extend_from_slice(&swap.to_le_bytes());
            }
            FrameKind::AtomicResp { old } => out.extend_from_slice(&old.to_le_bytes()),
            FrameKind::Hello => {}
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Reads one frame. Returns `Ok(None)` on a clean end of stream.
    pub fn read_from(r: &mut impl Read, src: NodeId, dst: NodeId) -> Result<Option<Frame>, FrameError> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        match r.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        if len > MAX_FRAME_PAYLOAD {
            return Err(FrameError::TooLarge(len));
        }
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Self::decode_parts(&header, payload, src, dst).map(Some)
    }

    pub fn decode(bytes: &[u8], src: NodeId, dst: NodeId) -> Result<Frame, FrameError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(FrameError::BadPayload(bytes.len()));
        }
        let (header, rest) = bytes.split_at(FRAME_HEADER_LEN);
        let len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        if rest.len() != len {
            return Err(FrameError::BadPayload(rest.len()));
        }
        Self::decode_parts(header.try_into().unwrap(), rest.to_vec(), src, dst)
    }

    fn decode_parts(
        header: &[u8; FRAME_HEADER_LEN],
        mut payload: Vec<u8>,
        src: NodeId,
        dst: NodeId,
    ) -> Result<Frame, FrameError> {
        let wr_id = WrId(u64::from_le_bytes(header[0..8].try_into().unwrap()));
        let op = u16::from_le_bytes([header[8], header[9]]);
        let tenant = TenantId(u16::from_le_bytes([header[10], header[11]]));
        let bad = |p: &Vec<u8>| FrameError::BadPayload(p.len());
        let u64_at = |p: &[u8], i: usize| u64::from_le_bytes(p[i..i + 8].try_into().unwrap());
        let kind = match op {
            opcode::SEND => {
                if payload.len() < DESCRIPTOR_LEN + 4 {
                    return Err(bad(&payload));
                }
                let desc = BufferDescriptor::decode(&payload[..DESCRIPTOR_LEN])
                    .map_err(|_| bad(&payload))?;
                let qp = QpId(u32::from_le_bytes(
                    payload[DESCRIPTOR_LEN..DESCRIPTOR_LEN + 4].try_into().unwrap(),
                ));
                let data = payload.split_off(DESCRIPTOR_LEN + 4);
                if data.len() != desc.len as usize {
                    return Err(FrameError::BadPayload(data.len()));
                }
                FrameKind::Send {
                    qp,
                    header: RoutingHeader {
                        src_fn: desc.src_fn,
                        dst_fn: desc.dst_fn,
                        flags: desc.flags,
                    },
                    payload: data,
                }
            }
            opcode::WRITE => {
                if payload.len() < 12 {
                    return Err(bad(&payload));
                }
                let region = u32::from_le_bytes(payload[0..4].try_into().unwrap());
                let offset = u64_at(&payload, 4);
                FrameKind::Write {
                    region,
                    offset,
                    payload: payload.split_off(12),
                }
            }
            opcode::ACK => {
                if payload.len() != 1 {
                    return Err(bad(&payload));
                }
                FrameKind::Ack {
                    status: CompletionStatus::from_wire(payload[0]).ok_or_else(|| bad(&payload))?,
                }
            }
            opcode::ATOMIC => {
                if payload.len() != 20 {
                    return Err(bad(&payload));
                }
                FrameKind::Atomic {
                    lock_id: u32::from_le_bytes(payload[0..4].try_into().unwrap()),
                    expect: u64_at(&payload, 4),
                    swap: u64_at(&payload, 12),
                }
            }
            opcode::ATOMIC_RESP => {
                if payload.len() != 8 {
                    return Err(bad(&payload));
                }
                FrameKind::AtomicResp {
                    old: u64_at(&payload, 0),
                }
            }
            opcode::HELLO => FrameKind::Hello,
            other => return Err(FrameError::UnknownOpcode(other)),
        };
        Ok(Frame {
            src,
            dst,
            wr_id,
            tenant,
            kind,
        })
    }
}
