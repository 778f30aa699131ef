//! Emulated RDMA verbs for one node: reliable-connected queue pairs, a
//! shared receive queue per tenant, one completion queue for the node, and
//! (for the baselines only) one-sided writes and remote compare-and-swap.
//!
//! A `NodeFabric` is confined to its node's engine loop. Payload movement
//! between nodes is performed by the link backend and counted as DMA, never
//! as a software copy.

mod frame;
mod link;
pub mod socket;
mod trace;

pub use frame::{opcode, Frame, FrameError, FrameKind, RoutingHeader, FRAME_HEADER_LEN};
pub use link::{LinkBackend, LinkParams, SimNetwork, SimPort};
pub use trace::{TraceRecord, Tracer};

use crate::clock::Clock;
use crate::counters::Counters;
use crate::ids::{Nanos, NodeId, QpId, TenantId, WrId, NANOS_PER_MILLI};
use crate::mempool::{BufferDescriptor, CrossMapHandle, MemoryPool, OwnerRef, PoolError, PoolKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FabricMode {
    /// Send/receive only. One-sided verbs are rejected.
    TwoSided,
    /// One-sided write and atomics enabled for the baselines.
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FabricConfig {
    pub connect_delay_ns: Nanos,
    pub rnr_timeout_ns: Nanos,
    pub max_outstanding: u32,
    pub mode: FabricMode,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            connect_delay_ns: 20 * NANOS_PER_MILLI,
            rnr_timeout_ns: 10 * NANOS_PER_MILLI,
            max_outstanding: 64,
            mode: FabricMode::TwoSided,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("memory for {0} ({1:?}) is already registered")]
    DuplicateRegistration(TenantId, PoolKind),
    #[error("pool is not mapped on this node")]
    UnknownPool,
    #[error("{0} has no registered memory on this node")]
    UnknownTenant(TenantId),
    #[error("node {0} is not a valid peer")]
    UnknownNode(NodeId),
    #[error("no queue pair {0}")]
    UnknownQp(QpId),
    #[error("queue pair {0} is still connecting")]
    QpNotReady(QpId),
    #[error("queue pair {0} has reached its outstanding limit")]
    QpFull(QpId),
    #[error("caller does not own the descriptor: {0}")]
    NotOwner(PoolError),
    #[error("descriptor tenant {found} does not match {expected}")]
    TenantMismatch { expected: TenantId, found: TenantId },
    #[error("remote offset {offset} with length {len} is outside the region")]
    OffsetOutOfRange { offset: u64, len: u32 },
    #[error("one-sided verbs are disabled in two-sided mode")]
    ModeDisabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRegionHandle {
    pub region_id: RegionId,
    pub tenant_id: TenantId,
    pub node_id: NodeId,
    pub kind: PoolKind,
    pub extent: u64,
    pub buffer_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QpState {
    Inactive,
    Active,
    Connecting,
}

#[derive(Debug, Clone)]
pub struct QueuePair {
    id: QpId,
    tenant: TenantId,
    local: NodeId,
    remote: NodeId,
    state: QpState,
    /// Posted WRs still waiting to leave the wire, with their departure time.
    send_queue: VecDeque<(WrId, Nanos)>,
    outstanding: u32,
    ready_at: Nanos,
}

impl QueuePair {
    pub fn id(&self) -> QpId {
        self.id
    }
    pub fn tenant(&self) -> TenantId {
        self.tenant
    }
    pub fn local(&self) -> NodeId {
        self.local
    }
    pub fn remote(&self) -> NodeId {
        self.remote
    }
    pub fn state(&self) -> QpState {
        self.state
    }
    pub fn queued(&self) -> usize {
        self.send_queue.len()
    }
    pub fn outstanding(&self) -> u32 {
        self.outstanding
    }
    /// Posted but not yet completed; the congestion metric.
    pub fn in_flight(&self) -> u32 {
        self.send_queue.len() as u32 + self.outstanding
    }
    pub fn is_idle(&self) -> bool {
        self.send_queue.is_empty() && self.outstanding == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Opcode {
    Send,
    Recv,
    Write,
    Atomic,
}

/// A posted work item, kept by the fabric until its completion is raised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkRequest {
    pub wr_id: WrId,
    pub opcode: Opcode,
    pub descriptor: Option<BufferDescriptor>,
    pub remote_offset: u64,
    pub tenant_id: TenantId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    TxDone,
    RxDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompletionStatus {
    Ok,
    RnrTimeout,
    Disconnected,
    /// Payload did not fit the matched buffer or the remote region.
    LengthError,
}

impl CompletionStatus {
    pub(crate) fn to_wire(self) -> u8 {
        match self {
            CompletionStatus::Ok => 0,
            CompletionStatus::RnrTimeout => 1,
            CompletionStatus::Disconnected => 2,
            CompletionStatus::LengthError => 3,
        }
    }

    pub(crate) fn from_wire(b: u8) -> Option<Self> {
        Some(match b {
            0 => CompletionStatus::Ok,
            1 => CompletionStatus::RnrTimeout,
            2 => CompletionStatus::Disconnected,
            3 => CompletionStatus::LengthError,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionEntry {
    pub wr_id: WrId,
    /// Sending QP; for receive completions this is the peer's QP.
    pub qp_id: QpId,
    pub tenant_id: TenantId,
    pub opcode: Opcode,
    pub direction: Direction,
    pub byte_len: u32,
    pub status: CompletionStatus,
    /// Send-side completions return the posted descriptor to its poster.
    pub descriptor: Option<BufferDescriptor>,
    /// Routing header of a received message.
    pub header: Option<RoutingHeader>,
    /// Previous lock word value for atomics.
    pub atomic_old: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct PendingOp {
    qp: QpId,
    tenant: TenantId,
    opcode: Opcode,
    descriptor: Option<BufferDescriptor>,
    poster: OwnerRef,
    byte_len: u32,
}

#[derive(Debug)]
struct StalledSend {
    src: NodeId,
    sender_wr: WrId,
    qp: QpId,
    header: RoutingHeader,
    payload: Vec<u8>,
    deadline: Nanos,
}

#[derive(Debug)]
struct ReceiveQueue {
    posted: VecDeque<(WrId, BufferDescriptor)>,
    stalled: VecDeque<StalledSend>,
}

struct Region {
    handle: MemoryRegionHandle,
    pool: Arc<MemoryPool>,
}

pub struct NodeFabric {
    node: NodeId,
    config: FabricConfig,
    clock: Clock,
    link: Box<dyn LinkBackend>,
    regions: BTreeMap<RegionId, Region>,
    region_keys: BTreeMap<(TenantId, PoolKind), RegionId>,
    qps: BTreeMap<QpId, QueuePair>,
    next_qp: u32,
    rqs: BTreeMap<TenantId, ReceiveQueue>,
    cq: VecDeque<CompletionEntry>,
    next_wr: u64,
    pending: BTreeMap<WrId, PendingOp>,
    locks: BTreeMap<u32, u64>,
    counters: Arc<Counters>,
    tracer: Option<Tracer>,
}

impl fmt::Debug for NodeFabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeFabric")
            .field("node", &self.node)
            .field("qps", &self.qps.len())
            .field("cq", &self.cq.len())
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl NodeFabric {
    pub fn new(
        node: NodeId,
        config: FabricConfig,
        clock: Clock,
        link: Box<dyn LinkBackend>,
        counters: Arc<Counters>,
    ) -> Self {
        Self {
            node,
            config,
            clock,
            link,
            regions: BTreeMap::new(),
            region_keys: BTreeMap::new(),
            qps: BTreeMap::new(),
            next_qp: 1,
            rqs: BTreeMap::new(),
            cq: VecDeque::new(),
            next_wr: 1,
            pending: BTreeMap::new(),
            locks: BTreeMap::new(),
            counters,
            tracer: None,
        }
    }

    pub fn set_tracer(&mut self, tracer: Tracer) {
        self.tracer = Some(tracer);
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn now(&self) -> Nanos {
        self.clock.now()
    }

    fn trace(&self, kind: &'static str, wr_id: WrId) {
        if let Some(t) = &self.tracer {
            t.record(self.clock.now(), self.node, kind, wr_id);
        }
    }

    fn alloc_wr(&mut self) -> WrId {
        let id = WrId(self.next_wr);
        self.next_wr += 1;
        id
    }

    pub fn register_memory(&mut self, mapped: &CrossMapHandle) -> Result<MemoryRegionHandle, FabricError> {
        let pool = mapped.pool();
        if mapped.exported_to() != self.node || pool.node() != self.node || !mapped.access().fabric_delivery {
            return Err(FabricError::UnknownPool);
        }
        let key = (pool.tenant(), pool.kind());
        if self.region_keys.contains_key(&key) {
            return Err(FabricError::DuplicateRegistration(key.0, key.1));
        }
        let region_id = RegionId(self.regions.len() as u32 + 1);
        let handle = MemoryRegionHandle {
            region_id,
            tenant_id: pool.tenant(),
            node_id: self.node,
            kind: pool.kind(),
            extent: pool.extent(),
            buffer_size: pool.buffer_size(),
        };
        self.regions.insert(
            region_id,
            Region {
                handle,
                pool: pool.clone(),
            },
        );
        self.region_keys.insert(key, region_id);
        if pool.kind() == PoolKind::Unified {
            self.rqs.insert(
                pool.tenant(),
                ReceiveQueue {
                    posted: VecDeque::new(),
                    stalled: VecDeque::new(),
                },
            );
        }
        Ok(handle)
    }

    fn unified_pool(&self, tenant: TenantId) -> Option<&Arc<MemoryPool>> {
        self.region_keys
            .get(&(tenant, PoolKind::Unified))
            .map(|r| &self.regions[r].pool)
    }

    pub fn create_qp(&mut self, tenant: TenantId, local: NodeId, remote: NodeId) -> Result<QpId, FabricError> {
        if local != self.node {
            return Err(FabricError::UnknownNode(local));
        }
        if remote == self.node || !self.link.peers().contains(&remote) {
            return Err(FabricError::UnknownNode(remote));
        }
        if !self.rqs.contains_key(&tenant) {
            return Err(FabricError::UnknownTenant(tenant));
        }
        let id = QpId(self.next_qp);
        self.next_qp += 1;
        self.qps.insert(
            id,
            QueuePair {
                id,
                tenant,
                local,
                remote,
                state: QpState::Connecting,
                send_queue: VecDeque::new(),
                outstanding: 0,
                ready_at: self.clock.now() + self.config.connect_delay_ns,
            },
        );
        Ok(id)
    }

    pub fn qp(&self, id: QpId) -> Option<&QueuePair> {
        self.qps.get(&id)
    }

    pub fn qps(&self) -> impl Iterator<Item = &QueuePair> {
        self.qps.values()
    }

    pub fn link_credit(&mut self, remote: NodeId) -> usize {
        let now = self.clock.now();
        self.link.credit(remote, now)
    }

    pub fn peers(&self) -> Vec<NodeId> {
        self.link.peers()
    }

    fn ready_qp(&mut self, id: QpId) -> Result<&mut QueuePair, FabricError> {
        let now = self.clock.now();
        let max = self.config.max_outstanding;
        let qp = self.qps.get_mut(&id).ok_or(FabricError::UnknownQp(id))?;
        if qp.state == QpState::Connecting && qp.ready_at <= now {
            qp.state = QpState::Inactive;
        }
        if qp.state == QpState::Connecting {
            return Err(FabricError::QpNotReady(id));
        }
        if qp.in_flight() >= max {
            return Err(FabricError::QpFull(id));
        }
        Ok(qp)
    }

    fn launch(&mut self, qp: QpId, frame: Frame, op: PendingOp) -> WrId {
        let now = self.clock.now();
        let wr_id = frame.wr_id;
        let departs = self.link.transmit(frame, now);
        let q = self.qps.get_mut(&qp).expect("qp checked by caller");
        q.send_queue.push_back((wr_id, departs));
        q.state = QpState::Active;
        self.pending.insert(wr_id, op);
        wr_id
    }

    /// Posts a two-sided send. Ownership of `desc` moves from `poster` to
    /// the fabric until the send completion hands it back.
    pub fn post_send(&mut self, qp: QpId, desc: BufferDescriptor, poster: OwnerRef) -> Result<WrId, FabricError> {
        let q = self.ready_qp(qp)?;
        let (tenant, remote) = (q.tenant, q.remote);
        if desc.tenant != tenant {
            return Err(FabricError::TenantMismatch {
                expected: tenant,
                found: desc.tenant,
            });
        }
        let pool = self
            .unified_pool(tenant)
            .cloned()
            .ok_or(FabricError::UnknownTenant(tenant))?;
        pool.transfer(&desc, poster, OwnerRef::Fabric)
            .map_err(FabricError::NotOwner)?;
        let payload = pool.dma_read(&desc).expect("fabric owns the buffer");
        let wr_id = self.alloc_wr();
        let frame = Frame {
            src: self.node,
            dst: remote,
            wr_id,
            tenant,
            kind: FrameKind::Send {
                qp,
                header: RoutingHeader {
                    src_fn: desc.src_fn,
                    dst_fn: desc.dst_fn,
                    flags: desc.flags,
                },
                payload,
            },
        };
        Counters::bump(&self.counters.fabric_sends);
        self.trace("post_send", wr_id);
        Ok(self.launch(
            qp,
            frame,
            PendingOp {
                qp,
                tenant,
                opcode: Opcode::Send,
                descriptor: Some(desc),
                poster,
                byte_len: desc.len,
            },
        ))
    }

    /// Posts a receive buffer to the tenant's shared receive queue.
    pub fn post_recv(&mut self, tenant: TenantId, desc: BufferDescriptor, poster: OwnerRef) -> Result<WrId, FabricError> {
        if !self.rqs.contains_key(&tenant) {
            return Err(FabricError::UnknownTenant(tenant));
        }
        if desc.tenant != tenant {
            return Err(FabricError::TenantMismatch {
                expected: tenant,
                found: desc.tenant,
            });
        }
        let pool = self.unified_pool(tenant).cloned().expect("rq implies region");
        pool.transfer(&desc, poster, OwnerRef::Fabric)
            .map_err(FabricError::NotOwner)?;
        let wr_id = self.alloc_wr();
        self.rqs
            .get_mut(&tenant)
            .unwrap()
            .posted
            .push_back((wr_id, desc));
        Counters::bump(&self.counters.recvs_posted);
        self.trace("post_recv", wr_id);
        self.match_stalled(tenant);
        Ok(wr_id)
    }

    /// One-sided write of `desc`'s payload into `remote` at `remote_offset`,
    /// followed by a one-byte completion flag.
    pub fn post_write(
        &mut self,
        qp: QpId,
        desc: BufferDescriptor,
        remote: &MemoryRegionHandle,
        remote_offset: u64,
        poster: OwnerRef,
    ) -> Result<WrId, FabricError> {
        if self.config.mode != FabricMode::OneSided {
            return Err(FabricError::ModeDisabled);
        }
        let q = self.ready_qp(qp)?;
        let tenant = q.tenant;
        if remote.node_id != q.remote {
            return Err(FabricError::UnknownNode(remote.node_id));
        }
        let bs = remote.buffer_size as u64;
        let within = remote_offset % bs;
        if remote_offset >= remote.extent || within + desc.len as u64 + 1 > bs {
            return Err(FabricError::OffsetOutOfRange {
                offset: remote_offset,
                len: desc.len,
            });
        }
        let pool = self
            .regions
            .values()
            .find(|r| r.handle.tenant_id == desc.tenant && r.handle.kind == PoolKind::Unified)
            .map(|r| r.pool.clone())
            .ok_or(FabricError::UnknownTenant(desc.tenant))?;
        pool.transfer(&desc, poster, OwnerRef::Fabric)
            .map_err(FabricError::NotOwner)?;
        let mut payload = pool.dma_read(&desc).expect("fabric owns the buffer");
        payload.push(1);
        let wr_id = self.alloc_wr();
        let frame = Frame {
            src: self.node,
            dst: remote.node_id,
            wr_id,
            tenant: remote.tenant_id,
            kind: FrameKind::Write {
                region: remote.region_id.0,
                offset: remote_offset,
                payload,
            },
        };
        Counters::bump(&self.counters.fabric_writes);
        self.trace("post_write", wr_id);
        Ok(self.launch(
            qp,
            frame,
            PendingOp {
                qp,
                tenant,
                opcode: Opcode::Write,
                descriptor: Some(desc),
                poster,
                byte_len: desc.len,
            },
        ))
    }

    /// Remote compare-and-swap on a lock word held by the peer.
    pub fn post_atomic(&mut self, qp: QpId, lock_id: u32, expect: u64, swap: u64) -> Result<WrId, FabricError> {
        if self.config.mode != FabricMode::OneSided {
            return Err(FabricError::ModeDisabled);
        }
        let q = self.ready_qp(qp)?;
        let (tenant, remote) = (q.tenant, q.remote);
        let wr_id = self.alloc_wr();
        let frame = Frame {
            src: self.node,
            dst: remote,
            wr_id,
            tenant,
            kind: FrameKind::Atomic {
                lock_id,
                expect,
                swap,
            },
        };
        Counters::bump(&self.counters.fabric_atomics);
        self.trace("post_atomic", wr_id);
        Ok(self.launch(
            qp,
            frame,
            PendingOp {
                qp,
                tenant,
                opcode: Opcode::Atomic,
                descriptor: None,
                poster: OwnerRef::Engine(self.node),
                byte_len: 8,
            },
        ))
    }

    /// Advances connection setup, wire departures, frame arrivals and RNR
    /// deadlines up to the current time.
    pub fn progress(&mut self) {
        let now = self.clock.now();
        for qp in self.qps.values_mut() {
            if qp.state == QpState::Connecting && qp.ready_at <= now {
                qp.state = QpState::Inactive;
            }
            while qp.send_queue.front().is_some_and(|(_, t)| *t <= now) {
                qp.send_queue.pop_front();
                qp.outstanding += 1;
            }
        }
        while let Some(frame) = self.link.receive(now) {
            self.handle_frame(frame);
        }
        let expired: Vec<TenantId> = self
            .rqs
            .iter()
            .filter(|(_, rq)| rq.stalled.front().is_some_and(|s| s.deadline <= now))
            .map(|(t, _)| *t)
            .collect();
        for tenant in expired {
            loop {
                let rq = self.rqs.get_mut(&tenant).unwrap();
                if !rq.stalled.front().is_some_and(|s| s.deadline <= now) {
                    break;
                }
                let s = rq.stalled.pop_front().unwrap();
                Counters::bump(&self.counters.rnr_timeouts);
                self.trace("rnr_timeout", s.sender_wr);
                self.reply(s.src, s.sender_wr, tenant, FrameKind::Ack {
                    status: CompletionStatus::RnrTimeout,
                });
            }
        }
    }

    /// Earliest future time at which `progress` has local work to do
    /// (connection setup or an RNR deadline).
    pub fn next_deadline(&self) -> Option<Nanos> {
        let now = self.clock.now();
        let connects = self
            .qps
            .values()
            .filter(|q| q.state == QpState::Connecting)
            .map(|q| q.ready_at);
        let rnr = self
            .rqs
            .values()
            .filter_map(|rq| rq.stalled.front().map(|s| s.deadline));
        let departures = self
            .qps
            .values()
            .filter_map(|q| q.send_queue.front().map(|(_, t)| *t));
        connects.chain(rnr).chain(departures).filter(|t| *t > now).min()
    }

    fn reply(&mut self, to: NodeId, wr_id: WrId, tenant: TenantId, kind: FrameKind) {
        let now = self.clock.now();
        let frame = Frame {
            src: self.node,
            dst: to,
            wr_id,
            tenant,
            kind,
        };
        self.link.transmit(frame, now);
    }

    fn handle_frame(&mut self, frame: Frame) {
        let Frame {
            src,
            wr_id,
            tenant,
            kind,
            ..
        } = frame;
        match kind {
            FrameKind::Send {
                qp,
                header,
                payload,
            } => {
                let Some(rq) = self.rqs.get_mut(&tenant) else {
                    self.reply(src, wr_id, tenant, FrameKind::Ack {
                        status: CompletionStatus::Disconnected,
                    });
                    return;
                };
                let deadline = self.clock.now() + self.config.rnr_timeout_ns;
                rq.stalled.push_back(StalledSend {
                    src,
                    sender_wr: wr_id,
                    qp,
                    header,
                    payload,
                    deadline,
                });
                if rq.posted.is_empty() {
                    self.trace("rnr_stall", wr_id);
                }
                self.match_stalled(tenant);
            }
            FrameKind::Write {
                region,
                offset,
                payload,
            } => {
                let status = match self.regions.get(&RegionId(region)) {
                    Some(r) => {
                        let bs = r.handle.buffer_size as u64;
                        let (buf, within) = (offset / bs, offset % bs);
                        if offset < r.handle.extent && within + payload.len() as u64 <= bs {
                            r.pool.region_write(crate::ids::BufferId(buf as u32), within as usize, &payload);
                            CompletionStatus::Ok
                        } else {
                            CompletionStatus::LengthError
                        }
                    }
                    None => CompletionStatus::Disconnected,
                };
                self.trace("write_landed", wr_id);
                self.reply(src, wr_id, tenant, FrameKind::Ack { status });
            }
            FrameKind::Atomic {
                lock_id,
                expect,
                swap,
            } => {
                let word = self.locks.entry(lock_id).or_insert(0);
                let old = *word;
                if old == expect {
                    *word = swap;
                }
                self.reply(src, wr_id, tenant, FrameKind::AtomicResp { old });
            }
            FrameKind::Ack { status } => self.complete_tx(wr_id, status, None),
            FrameKind::AtomicResp { old } => self.complete_tx(wr_id, CompletionStatus::Ok, Some(old)),
            FrameKind::Hello => {}
        }
    }

    fn match_stalled(&mut self, tenant: TenantId) {
        let pool = match self.unified_pool(tenant) {
            Some(p) => p.clone(),
            None => return,
        };
        let engine = OwnerRef::Engine(self.node);
        loop {
            let rq = self.rqs.get_mut(&tenant).unwrap();
            if rq.stalled.is_empty() || rq.posted.is_empty() {
                break;
            }
            let s = rq.stalled.pop_front().unwrap();
            let (recv_wr, desc) = rq.posted.pop_front().unwrap();
            let (status, byte_len) = match pool.dma_write(&desc, 0, &s.payload) {
                Ok(()) => (CompletionStatus::Ok, s.payload.len() as u32),
                Err(_) => (CompletionStatus::LengthError, 0),
            };
            pool.transfer(&desc, OwnerRef::Fabric, engine)
                .expect("posted receive buffers are owned by the fabric");
            self.cq.push_back(CompletionEntry {
                wr_id: recv_wr,
                qp_id: s.qp,
                tenant_id: tenant,
                opcode: Opcode::Recv,
                direction: Direction::RxDone,
                byte_len,
                status,
                descriptor: None,
                header: Some(s.header),
                atomic_old: None,
            });
            self.trace("rx_done", recv_wr);
            self.reply(s.src, s.sender_wr, tenant, FrameKind::Ack { status });
        }
    }

    fn complete_tx(&mut self, wr_id: WrId, status: CompletionStatus, atomic_old: Option<u64>) {
        let Some(op) = self.pending.remove(&wr_id) else {
            return;
        };
        if let Some(q) = self.qps.get_mut(&op.qp) {
            if let Some(pos) = q.send_queue.iter().position(|(w, _)| *w == wr_id) {
                q.send_queue.remove(pos);
            } else {
                q.outstanding = q.outstanding.saturating_sub(1);
            }
        }
        if let Some(desc) = op.descriptor {
            if let Some(pool) = self
                .regions
                .values()
                .find(|r| r.handle.tenant_id == desc.tenant && r.handle.kind == PoolKind::Unified)
                .map(|r| r.pool.clone())
            {
                pool.transfer(&desc, OwnerRef::Fabric, op.poster)
                    .expect("in-flight buffers are owned by the fabric");
            }
        }
        self.cq.push_back(CompletionEntry {
            wr_id,
            qp_id: op.qp,
            tenant_id: op.tenant,
            opcode: op.opcode,
            direction: Direction::TxDone,
            byte_len: op.byte_len,
            status,
            descriptor: op.descriptor,
            header: None,
            atomic_old,
        });
        self.trace("tx_done", wr_id);
    }

    /// Returns up to `max_entries` completions in generation order.
    pub fn poll_cq(&mut self, max_entries: usize) -> Vec<CompletionEntry> {
        self.progress();
        let n = max_entries.min(self.cq.len());
        self.cq.drain(..n).collect()
    }

    pub fn cq_len(&self) -> usize {
        self.cq.len()
    }

    /// Marks idle ACTIVE queue pairs INACTIVE; returns those that changed.
    pub fn deactivate_idle(&mut self) -> Vec<QpId> {
        let mut changed = Vec::new();
        for qp in self.qps.values_mut() {
            if qp.state == QpState::Active && qp.is_idle() {
                qp.state = QpState::Inactive;
                changed.push(qp.id);
            }
        }
        changed
    }

    pub fn rq_depth(&self, tenant: TenantId) -> usize {
        self.rqs.get(&tenant).map_or(0, |rq| rq.posted.len())
    }

    pub fn stalled(&self, tenant: TenantId) -> usize {
        self.rqs.get(&tenant).map_or(0, |rq| rq.stalled.len())
    }

    pub fn posted_receive_ids(&self, tenant: TenantId) -> Vec<WrId> {
        self.rqs
            .get(&tenant)
            .map(|rq| rq.posted.iter().map(|(w, _)| *w).collect())
            .unwrap_or_default()
    }

    pub fn pending_ops(&self) -> usize {
        self.pending.len()
    }

    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty() && self.cq.is_empty() && self.rqs.values().all(|rq| rq.stalled.is_empty())
    }

    /// Reads the completion flag that trails a one-sided write of `len`
    /// bytes at `offset` in one of this node's regions.
    pub fn write_flag(&self, region: RegionId, offset: u64, len: u32) -> bool {
        let Some(r) = self.regions.get(&region) else {
            return false;
        };
        let bs = r.handle.buffer_size as u64;
        let bytes = r.pool.region_read(
            crate::ids::BufferId((offset / bs) as u32),
            (offset % bs) as usize + len as usize,
            1,
        );
        bytes.first() == Some(&1)
    }

    pub fn clear_write_flag(&self, region: RegionId, offset: u64, len: u32) {
        if let Some(r) = self.regions.get(&region) {
            let bs = r.handle.buffer_size as u64;
            r.pool.region_clear_byte(
                crate::ids::BufferId((offset / bs) as u32),
                (offset % bs) as usize + len as usize,
            );
        }
    }

    pub fn lock_word(&self, lock_id: u32) -> u64 {
        self.locks.get(&lock_id).copied().unwrap_or(0)
    }

    pub fn region(&self, tenant: TenantId, kind: PoolKind) -> Option<MemoryRegionHandle> {
        self.region_keys.get(&(tenant, kind)).map(|r| self.regions[r].handle)
    }
}

#[cfg(test)]
mod tests;
