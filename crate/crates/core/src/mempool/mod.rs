//! Per-tenant pools of equal-size buffers.
//!
//! Every buffer has exactly one owner at any instant. Ownership moves by
//! handing the 16-byte [`BufferDescriptor`] from one party to the next; all
//! payload access goes through the pool and is checked against the owner
//! field, so a stale holder of a descriptor can neither read, write nor
//! recycle the buffer.

mod descriptor;
mod export;

pub use descriptor::{BufferDescriptor, DescFlags, DescriptorError, DESCRIPTOR_LEN};
pub use export::{CrossMapAccess, CrossMapHandle, ExportBlob};

use crate::counters::{CopySite, Counters};
use crate::ids::{BufferId, FnId, NodeId, TenantId};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Default buffer size: one 2 MB hugepage per buffer.
pub const DEFAULT_BUFFER_SIZE: u32 = 2 * 1024 * 1024;

/// Unified pools back functions; staging pools are RDMA-only landing zones
/// used by the one-sided-write-with-copy baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Unified,
    Staging,
}

/// The party currently holding a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OwnerRef {
    Pool,
    Function(FnId),
    Engine(NodeId),
    Fabric,
    IngressWorker(u16),
}

impl fmt::Display for OwnerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OwnerRef::Pool => write!(f, "pool"),
            OwnerRef::Function(id) => write!(f, "function({id})"),
            OwnerRef::Engine(n) => write!(f, "engine({n})"),
            OwnerRef::Fabric => write!(f, "fabric"),
            OwnerRef::IngressWorker(w) => write!(f, "ingress-worker({w})"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("pool for {tenant} on {node} already exists")]
    DuplicatePool { tenant: TenantId, node: NodeId },
    #[error("pool must hold at least one buffer")]
    ZeroCapacity,
    #[error("no free buffers in pool {0}")]
    PoolExhausted(String),
    #[error("descriptor for {found} presented to pool of {expected}")]
    TenantMismatch { expected: TenantId, found: TenantId },
    #[error("{requester} is not bound to the pool of {tenant}")]
    NotMember { requester: OwnerRef, tenant: TenantId },
    #[error("{caller} does not own {buffer} (owner is {owner})")]
    NotOwner {
        buffer: BufferId,
        caller: OwnerRef,
        owner: OwnerRef,
    },
    #[error("{0} is already free")]
    DoubleFree(BufferId),
    #[error("{0} is outside the pool")]
    InvalidBuffer(BufferId),
    #[error("length {len} exceeds buffer capacity {capacity}")]
    LengthOutOfRange { len: u32, capacity: u32 },
    #[error("access by {accessor} to {buffer} owned by {owner}")]
    AccessViolation {
        buffer: BufferId,
        accessor: OwnerRef,
        owner: OwnerRef,
    },
    #[error("no pool for {tenant} on {node}")]
    UnknownPool { tenant: TenantId, node: NodeId },
    #[error("malformed export blob: {0}")]
    MalformedBlob(String),
    #[error("pool already mapped into engine {0}")]
    AlreadyMapped(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
    Recycle,
    Transfer,
}

/// One entry of the optional guarded-access log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub buffer: BufferId,
    pub accessor: OwnerRef,
    pub kind: AccessKind,
    pub allowed: bool,
}

struct PoolMeta {
    owners: Vec<OwnerRef>,
    /// LIFO free list.
    free: Vec<BufferId>,
    members: BTreeSet<OwnerRef>,
    log: Option<Vec<AccessRecord>>,
}

pub struct MemoryPool {
    tenant: TenantId,
    node: NodeId,
    kind: PoolKind,
    buffer_count: u32,
    buffer_size: u32,
    name_prefix: String,
    token: u64,
    meta: Mutex<PoolMeta>,
    payloads: Vec<Mutex<Vec<u8>>>,
    counters: Arc<Counters>,
}

impl fmt::Debug for MemoryPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryPool")
            .field("name", &self.name_prefix)
            .field("buffer_count", &self.buffer_count)
            .field("buffer_size", &self.buffer_size)
            .field("free", &self.free_count())
            .finish()
    }
}

impl MemoryPool {
    fn new(
        tenant: TenantId,
        node: NodeId,
        kind: PoolKind,
        buffer_count: u32,
        buffer_size: u32,
        token: u64,
        counters: Arc<Counters>,
    ) -> Self {
        // Reverse so that the first allocation hands out buffer 0.
        let free = (0..buffer_count).rev().map(BufferId).collect();
        let label = match kind {
            PoolKind::Unified => "pool",
            PoolKind::Staging => "staging",
        };
        Self {
            tenant,
            node,
            kind,
            buffer_count,
            buffer_size,
            name_prefix: format!("{label}-{tenant}-{node}"),
            token,
            meta: Mutex::new(PoolMeta {
                owners: vec![OwnerRef::Pool; buffer_count as usize],
                free,
                members: BTreeSet::new(),
                log: None,
            }),
            payloads: (0..buffer_count).map(|_| Mutex::new(Vec::new())).collect(),
            counters,
        }
    }

    pub fn tenant(&self) -> TenantId {
        self.tenant
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn buffer_count(&self) -> u32 {
        self.buffer_count
    }

    pub fn buffer_size(&self) -> u32 {
        self.buffer_size
    }

    /// Registered-memory extent in bytes.
    pub fn extent(&self) -> u64 {
        self.buffer_count as u64 * self.buffer_size as u64
    }

    pub fn name_prefix(&self) -> &str {
        &self.name_prefix
    }

    pub(crate) fn token(&self) -> u64 {
        self.token
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn free_count(&self) -> usize {
        self.meta.lock().free.len()
    }

    pub fn owner_of(&self, buffer: BufferId) -> Option<OwnerRef> {
        self.meta.lock().owners.get(buffer.0 as usize).copied()
    }

    /// Number of buffers held by anyone other than the pool.
    pub fn in_use(&self) -> usize {
        self.buffer_count as usize - self.free_count()
    }

    /// Owner histogram; `Pool` entries equal the free count.
    pub fn owner_census(&self) -> BTreeMap<OwnerRef, usize> {
        let meta = self.meta.lock();
        let mut out = BTreeMap::new();
        for o in &meta.owners {
            *out.entry(*o).or_insert(0) += 1;
        }
        out
    }

    /// Binds a function or ingress worker to this pool. Engines on the
    /// pool's node are implicitly bound.
    pub fn admit(&self, member: OwnerRef) {
        self.meta.lock().members.insert(member);
    }

    pub fn enable_access_log(&self) {
        self.meta.lock().log.get_or_insert_with(Vec::new);
    }

    pub fn take_access_log(&self) -> Vec<AccessRecord> {
        self.meta
            .lock()
            .log
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    fn may_allocate(&self, meta: &PoolMeta, requester: OwnerRef) -> bool {
        match requester {
            OwnerRef::Engine(n) => n == self.node,
            OwnerRef::Function(_) | OwnerRef::IngressWorker(_) => meta.members.contains(&requester),
            OwnerRef::Pool | OwnerRef::Fabric => false,
        }
    }

    fn check_descriptor(&self, desc: &BufferDescriptor) -> Result<usize, PoolError> {
        if desc.tenant != self.tenant {
            Counters::bump(&self.counters.tenant_mismatch);
            return Err(PoolError::TenantMismatch {
                expected: self.tenant,
                found: desc.tenant,
            });
        }
        if desc.buffer.0 >= self.buffer_count {
            Counters::bump(&self.counters.tenant_mismatch);
            return Err(PoolError::InvalidBuffer(desc.buffer));
        }
        Ok(desc.buffer.0 as usize)
    }

    fn log(meta: &mut PoolMeta, buffer: BufferId, accessor: OwnerRef, kind: AccessKind, allowed: bool) {
        if let Some(log) = meta.log.as_mut() {
            log.push(AccessRecord {
                buffer,
                accessor,
                kind,
                allowed,
            });
        }
    }

    pub fn alloc(&self, requester: OwnerRef) -> Result<BufferDescriptor, PoolError> {
        let mut meta = self.meta.lock();
        if !self.may_allocate(&meta, requester) {
            Counters::bump(&self.counters.tenant_mismatch);
            return Err(PoolError::NotMember {
                requester,
                tenant: self.tenant,
            });
        }
        let id = meta
            .free
            .pop()
            .ok_or_else(|| PoolError::PoolExhausted(self.name_prefix.clone()))?;
        meta.owners[id.0 as usize] = requester;
        Ok(BufferDescriptor::new(self.tenant, id))
    }

    pub fn free(&self, desc: &BufferDescriptor, releaser: OwnerRef) -> Result<(), PoolError> {
        let idx = self.check_descriptor(desc)?;
        let mut meta = self.meta.lock();
        let owner = meta.owners[idx];
        if owner == OwnerRef::Pool {
            Counters::bump(&self.counters.double_free);
            Self::log(&mut meta, desc.buffer, releaser, AccessKind::Recycle, false);
            return Err(PoolError::DoubleFree(desc.buffer));
        }
        if owner != releaser {
            Counters::bump(&self.counters.not_owner);
            Self::log(&mut meta, desc.buffer, releaser, AccessKind::Recycle, false);
            return Err(PoolError::NotOwner {
                buffer: desc.buffer,
                caller: releaser,
                owner,
            });
        }
        meta.owners[idx] = OwnerRef::Pool;
        meta.free.push(desc.buffer);
        Self::log(&mut meta, desc.buffer, releaser, AccessKind::Recycle, true);
        Ok(())
    }

    pub fn transfer(
        &self,
        desc: &BufferDescriptor,
        from: OwnerRef,
        to: OwnerRef,
    ) -> Result<(), PoolError> {
        let idx = self.check_descriptor(desc)?;
        let mut meta = self.meta.lock();
        let owner = meta.owners[idx];
        if owner != from || owner == OwnerRef::Pool || to == OwnerRef::Pool {
            Counters::bump(&self.counters.not_owner);
            Self::log(&mut meta, desc.buffer, from, AccessKind::Transfer, false);
            return Err(PoolError::NotOwner {
                buffer: desc.buffer,
                caller: from,
                owner,
            });
        }
        meta.owners[idx] = to;
        Self::log(&mut meta, desc.buffer, from, AccessKind::Transfer, true);
        Ok(())
    }

    fn guard(
        &self,
        desc: &BufferDescriptor,
        accessor: OwnerRef,
        kind: AccessKind,
    ) -> Result<usize, PoolError> {
        let idx = self.check_descriptor(desc)?;
        let mut meta = self.meta.lock();
        let owner = meta.owners[idx];
        let allowed = owner == accessor && owner != OwnerRef::Pool;
        Self::log(&mut meta, desc.buffer, accessor, kind, allowed);
        if !allowed {
            Counters::bump(&self.counters.access_violations);
            return Err(PoolError::AccessViolation {
                buffer: desc.buffer,
                accessor,
                owner,
            });
        }
        Ok(idx)
    }

    fn check_len(&self, len: u32) -> Result<(), PoolError> {
        if len > self.buffer_size {
            return Err(PoolError::LengthOutOfRange {
                len,
                capacity: self.buffer_size,
            });
        }
        Ok(())
    }

    /// Reads the first `desc.len` payload bytes.
    pub fn read<R>(
        &self,
        desc: &BufferDescriptor,
        accessor: OwnerRef,
        f: impl FnOnce(&[u8]) -> R,
    ) -> Result<R, PoolError> {
        self.check_len(desc.len)?;
        let idx = self.guard(desc, accessor, AccessKind::Read)?;
        let payload = self.payloads[idx].lock();
        let len = (desc.len as usize).min(payload.len());
        Ok(f(&payload[..len]))
    }

    /// Mutates the first `desc.len` payload bytes in place.
    pub fn modify<R>(
        &self,
        desc: &BufferDescriptor,
        accessor: OwnerRef,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> Result<R, PoolError> {
        self.check_len(desc.len)?;
        let idx = self.guard(desc, accessor, AccessKind::Write)?;
        let mut payload = self.payloads[idx].lock();
        let len = desc.len as usize;
        if payload.len() < len {
            payload.resize(len, 0);
        }
        Ok(f(&mut payload[..len]))
    }

    /// Produces `len` fresh bytes in place and sets `desc.len`. Generation
    /// by the owner is not a copy.
    pub fn fill<R>(
        &self,
        desc: &mut BufferDescriptor,
        accessor: OwnerRef,
        len: u32,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> Result<R, PoolError> {
        self.check_len(len)?;
        let idx = self.guard(desc, accessor, AccessKind::Write)?;
        let mut payload = self.payloads[idx].lock();
        payload.resize(len as usize, 0);
        desc.len = len;
        Ok(f(&mut payload[..]))
    }

    /// Copies external bytes into the buffer at `offset`, counting one
    /// software copy at `site`. `desc.len` becomes `offset + data.len()`.
    pub fn copy_in(
        &self,
        desc: &mut BufferDescriptor,
        accessor: OwnerRef,
        offset: usize,
        data: &[u8],
        site: CopySite,
    ) -> Result<(), PoolError> {
        let end = offset + data.len();
        let end32 = u32::try_from(end).unwrap_or(u32::MAX);
        self.check_len(end32)?;
        let idx = self.guard(desc, accessor, AccessKind::Write)?;
        let mut payload = self.payloads[idx].lock();
        payload.resize(end.max(offset), 0);
        payload[offset..end].copy_from_slice(data);
        desc.len = end32;
        self.counters.record_copy(site, data.len());
        Ok(())
    }

    /// Copies `[offset, desc.len)` out of the buffer, counting one software
    /// copy at `site`.
    pub fn copy_out(
        &self,
        desc: &BufferDescriptor,
        accessor: OwnerRef,
        offset: usize,
        out: &mut Vec<u8>,
        site: CopySite,
    ) -> Result<(), PoolError> {
        self.check_len(desc.len)?;
        let idx = self.guard(desc, accessor, AccessKind::Read)?;
        let payload = self.payloads[idx].lock();
        let len = (desc.len as usize).min(payload.len());
        let start = offset.min(len);
        out.extend_from_slice(&payload[start..len]);
        self.counters.record_copy(site, len - start);
        Ok(())
    }

    /// Emulated NIC read of an outgoing buffer. Counted as DMA, not as a
    /// software copy.
    pub(crate) fn dma_read(&self, desc: &BufferDescriptor) -> Result<Vec<u8>, PoolError> {
        self.check_len(desc.len)?;
        let idx = self.guard(desc, OwnerRef::Fabric, AccessKind::Read)?;
        let payload = self.payloads[idx].lock();
        let len = (desc.len as usize).min(payload.len());
        let bytes = payload[..len].to_vec();
        self.counters.record_dma(bytes.len());
        Ok(bytes)
    }

    /// Emulated NIC placement of incoming bytes at `offset`.
    pub(crate) fn dma_write(
        &self,
        desc: &BufferDescriptor,
        offset: usize,
        data: &[u8],
    ) -> Result<(), PoolError> {
        let end = offset + data.len();
        self.check_len(u32::try_from(end).unwrap_or(u32::MAX))?;
        let idx = self.guard(desc, OwnerRef::Fabric, AccessKind::Write)?;
        let mut payload = self.payloads[idx].lock();
        if payload.len() < end {
            payload.resize(end, 0);
        }
        payload[offset..end].copy_from_slice(data);
        self.counters.record_dma(data.len());
        Ok(())
    }

    /// Raw region access for one-sided writes: the remote writer holds no
    /// descriptor, so no ownership check applies. Only the fabric calls this.
    pub(crate) fn region_write(&self, buffer: BufferId, offset: usize, data: &[u8]) {
        let mut payload = self.payloads[buffer.0 as usize].lock();
        let end = offset + data.len();
        if payload.len() < end {
            payload.resize(end, 0);
        }
        payload[offset..end].copy_from_slice(data);
        self.counters.record_dma(data.len());
    }

    pub(crate) fn region_clear_byte(&self, buffer: BufferId, offset: usize) {
        let mut payload = self.payloads[buffer.0 as usize].lock();
        if let Some(b) = payload.get_mut(offset) {
            *b = 0;
        }
    }

    pub(crate) fn region_read(&self, buffer: BufferId, offset: usize, len: usize) -> Vec<u8> {
        let payload = self.payloads[buffer.0 as usize].lock();
        let end = (offset + len).min(payload.len());
        payload[offset.min(end)..end].to_vec()
    }
}

/// Host-side registry of every pool in a deployment, keyed by (tenant, node).
#[derive(Debug)]
pub struct PoolDirectory {
    pools: Mutex<BTreeMap<(TenantId, NodeId, PoolKind), Arc<MemoryPool>>>,
    mapped: Mutex<BTreeSet<(TenantId, NodeId, PoolKind, NodeId)>>,
    next_token: Mutex<u64>,
    counters: Arc<Counters>,
}

impl PoolDirectory {
    pub fn new(counters: Arc<Counters>) -> Self {
        Self {
            pools: Mutex::new(BTreeMap::new()),
            mapped: Mutex::new(BTreeSet::new()),
            next_token: Mutex::new(0x5eed_0001),
            counters,
        }
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn create_pool(
        &self,
        tenant: TenantId,
        node: NodeId,
        buffer_count: u32,
        buffer_size: u32,
    ) -> Result<Arc<MemoryPool>, PoolError> {
        self.create_pool_of_kind(tenant, node, PoolKind::Unified, buffer_count, buffer_size)
    }

    pub fn create_pool_of_kind(
        &self,
        tenant: TenantId,
        node: NodeId,
        kind: PoolKind,
        buffer_count: u32,
        buffer_size: u32,
    ) -> Result<Arc<MemoryPool>, PoolError> {
        if buffer_count == 0 || buffer_size == 0 {
            return Err(PoolError::ZeroCapacity);
        }
        let mut pools = self.pools.lock();
        if pools.contains_key(&(tenant, node, kind)) {
            return Err(PoolError::DuplicatePool { tenant, node });
        }
        let token = {
            let mut t = self.next_token.lock();
            *t += 1;
            *t
        };
        let pool = Arc::new(MemoryPool::new(
            tenant,
            node,
            kind,
            buffer_count,
            buffer_size,
            token,
            self.counters.clone(),
        ));
        pools.insert((tenant, node, kind), pool.clone());
        Ok(pool)
    }

    pub fn get(&self, tenant: TenantId, node: NodeId) -> Option<Arc<MemoryPool>> {
        self.get_kind(tenant, node, PoolKind::Unified)
    }

    pub fn get_kind(&self, tenant: TenantId, node: NodeId, kind: PoolKind) -> Option<Arc<MemoryPool>> {
        self.pools.lock().get(&(tenant, node, kind)).cloned()
    }

    pub fn pools_on(&self, node: NodeId) -> Vec<Arc<MemoryPool>> {
        self.pools
            .lock()
            .iter()
            .filter(|((_, n, k), _)| *n == node && *k == PoolKind::Unified)
            .map(|(_, p)| p.clone())
            .collect()
    }

    pub fn all(&self) -> Vec<Arc<MemoryPool>> {
        self.pools.lock().values().cloned().collect()
    }

    pub fn export_pool(&self, pool: &MemoryPool) -> Result<ExportBlob, PoolError> {
        match self.get_kind(pool.tenant(), pool.node(), pool.kind()) {
            Some(p) if p.token() == pool.token() => Ok(ExportBlob::from_pool(pool)),
            _ => Err(PoolError::UnknownPool {
                tenant: pool.tenant(),
                node: pool.node(),
            }),
        }
    }

    /// Completes the export/import handshake, giving `engine` access to the
    /// pool described by `blob`.
    pub fn import_pool(&self, blob: &ExportBlob, engine: NodeId) -> Result<CrossMapHandle, PoolError> {
        let manifest = blob.parse()?;
        let pool = self
            .get_kind(manifest.tenant, manifest.node, manifest.kind)
            .filter(|p| {
                p.token() == manifest.token
                    && p.buffer_count() == manifest.buffer_count
                    && p.buffer_size() == manifest.buffer_size
                    && p.name_prefix() == manifest.name_prefix
            })
            .ok_or_else(|| PoolError::MalformedBlob("blob does not match any pool".into()))?;
        if !self
            .mapped
            .lock()
            .insert((manifest.tenant, manifest.node, manifest.kind, engine))
        {
            return Err(PoolError::AlreadyMapped(engine));
        }
        Ok(CrossMapHandle::new(pool, engine))
    }
}

/// Read-only view of the pools on one node, keyed by tenant.
#[derive(Debug, Clone, Default)]
pub struct NodePools {
    pools: BTreeMap<TenantId, Arc<MemoryPool>>,
}

impl NodePools {
    pub fn new(pools: impl IntoIterator<Item = Arc<MemoryPool>>) -> Self {
        Self {
            pools: pools.into_iter().map(|p| (p.tenant(), p)).collect(),
        }
    }

    pub fn get(&self, tenant: TenantId) -> Option<&Arc<MemoryPool>> {
        self.pools.get(&tenant)
    }

    /// Resolves a descriptor to the pool of the tenant it names.
    pub fn resolve(&self, desc: &BufferDescriptor) -> Result<&Arc<MemoryPool>, PoolError> {
        self.pools.get(&desc.tenant).ok_or(PoolError::UnknownPool {
            tenant: desc.tenant,
            node: NodeId(u16::MAX),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TenantId, &Arc<MemoryPool>)> {
        self.pools.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn directory() -> PoolDirectory {
        PoolDirectory::new(Arc::new(Counters::new()))
    }

    const F1: OwnerRef = OwnerRef::Function(FnId(1));
    const F2: OwnerRef = OwnerRef::Function(FnId(2));

    #[test]
    fn create_pool_uses_hugepage_sized_buffers() {
        let dir = directory();
        let pool = dir
            .create_pool(TenantId(1), NodeId(0), 1024, DEFAULT_BUFFER_SIZE)
            .unwrap();
        assert_eq!(pool.free_count(), 1024);
        assert_eq!(pool.extent(), 1024 * 2 * 1024 * 1024);
        assert_eq!(
            dir.create_pool(TenantId(1), NodeId(0), 8, 64).unwrap_err(),
            PoolError::DuplicatePool {
                tenant: TenantId(1),
                node: NodeId(0)
            }
        );
        assert_eq!(
            dir.create_pool(TenantId(1), NodeId(1), 0, DEFAULT_BUFFER_SIZE)
                .unwrap_err(),
            PoolError::ZeroCapacity
        );
    }

    #[test]
    fn alloc_exhaustion_and_membership() {
        let dir = directory();
        let pool = dir.create_pool(TenantId(1), NodeId(0), 1, 64).unwrap();
        pool.admit(F1);
        let d = pool.alloc(F1).unwrap();
        assert_eq!(d.len, 0);
        assert!(matches!(pool.alloc(F1), Err(PoolError::PoolExhausted(_))));
        pool.free(&d, F1).unwrap();
        // f2 belongs to another tenant and was never admitted
        assert!(matches!(pool.alloc(F2), Err(PoolError::NotMember { .. })));
        assert!(pool.alloc(OwnerRef::Engine(NodeId(0))).is_ok());
        assert!(pool.alloc(OwnerRef::Engine(NodeId(1))).is_err());
    }

    #[test]
    fn free_paths() {
        let dir = directory();
        let pool = dir.create_pool(TenantId(1), NodeId(0), 4, 64).unwrap();
        pool.admit(F1);
        pool.admit(F2);
        let d = pool.alloc(F1).unwrap();
        assert!(matches!(pool.free(&d, F2), Err(PoolError::NotOwner { .. })));
        pool.free(&d, F1).unwrap();
        assert_eq!(pool.free_count(), 4);
        assert_eq!(pool.free(&d, F1), Err(PoolError::DoubleFree(d.buffer)));
        let snap = pool.counters().snapshot();
        assert_eq!(snap.not_owner, 1);
        assert_eq!(snap.double_free, 1);
    }

    #[test]
    fn free_list_is_lifo() {
        let dir = directory();
        let pool = dir.create_pool(TenantId(1), NodeId(0), 4, 64).unwrap();
        pool.admit(F1);
        let a = pool.alloc(F1).unwrap();
        let b = pool.alloc(F1).unwrap();
        pool.free(&a, F1).unwrap();
        pool.free(&b, F1).unwrap();
        assert_eq!(pool.alloc(F1).unwrap().buffer, b.buffer);
    }

    #[test]
    fn transfer_revokes_old_owner() {
        let dir = directory();
        let pool = dir.create_pool(TenantId(1), NodeId(0), 2, 64).unwrap();
        pool.admit(F1);
        let engine = OwnerRef::Engine(NodeId(0));
        let mut d = pool.alloc(F1).unwrap();
        pool.fill(&mut d, F1, 4, |b| b.copy_from_slice(b"ping")).unwrap();
        pool.transfer(&d, F1, engine).unwrap();
        assert_eq!(pool.read(&d, engine, |b| b.to_vec()).unwrap(), b"ping");
        assert!(matches!(
            pool.modify(&d, F1, |b| b[0] = 0),
            Err(PoolError::AccessViolation { .. })
        ));
        assert!(pool.free(&d, F1).is_err());
        assert!(pool.transfer(&d, F1, F2).is_err());
        assert_eq!(pool.counters().snapshot().access_violations, 1);
    }

    #[test]
    fn forged_descriptors_never_resolve_across_tenants() {
        let dir = directory();
        let p1 = dir.create_pool(TenantId(1), NodeId(0), 2, 64).unwrap();
        let p2 = dir.create_pool(TenantId(2), NodeId(0), 2, 64).unwrap();
        p1.admit(F1);
        let d = p1.alloc(F1).unwrap();
        let mut forged = d;
        forged.tenant = TenantId(2);
        assert!(matches!(
            p1.read(&forged, F1, |_| ()),
            Err(PoolError::TenantMismatch { .. })
        ));
        // The forged descriptor names t2's pool, where f1 owns nothing.
        assert!(p2.read(&forged, F1, |_| ()).is_err());
        let mut oob = d;
        oob.buffer = BufferId(99);
        assert_eq!(p1.free(&oob, F1), Err(PoolError::InvalidBuffer(BufferId(99))));
    }

    #[test]
    fn copy_in_counts_and_bounds() {
        let dir = directory();
        let pool = dir.create_pool(TenantId(1), NodeId(0), 1, 8).unwrap();
        let w = OwnerRef::IngressWorker(0);
        pool.admit(w);
        let mut d = pool.alloc(w).unwrap();
        pool.copy_in(&mut d, w, 0, b"abcd", CopySite::IngressIn).unwrap();
        assert_eq!(d.len, 4);
        assert!(matches!(
            pool.copy_in(&mut d, w, 0, &[0u8; 9], CopySite::IngressIn),
            Err(PoolError::LengthOutOfRange { .. })
        ));
        let mut out = Vec::new();
        pool.copy_out(&d, w, 1, &mut out, CopySite::IngressOut).unwrap();
        assert_eq!(out, b"bcd");
        let s = pool.counters().snapshot();
        assert_eq!((s.copies_ingress_in, s.copies_ingress_out), (1, 1));
    }

    #[test]
    fn access_log_records_denials() {
        let dir = directory();
        let pool = dir.create_pool(TenantId(1), NodeId(0), 1, 8).unwrap();
        pool.admit(F1);
        pool.enable_access_log();
        let d = pool.alloc(F1).unwrap();
        pool.transfer(&d, F1, OwnerRef::Fabric).unwrap();
        let _ = pool.read(&d, F1, |_| ());
        let log = pool.take_access_log();
        assert_eq!(log.len(), 2);
        assert!(log[0].allowed);
        assert!(!log[1].allowed);
        assert_eq!(log[1].kind, AccessKind::Read);
    }
}
