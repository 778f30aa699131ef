//! Function-facing I/O: one send/recv pair regardless of where the peer
//! runs, plus buffer acquire/release.

use crate::counters::Counters;
use crate::ids::{FnId, NodeId, TenantId};
use crate::ipc::{Endpoint, IpcError, Wait};
use crate::mempool::{BufferDescriptor, MemoryPool, OwnerRef, PoolError};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Placement {
    Local,
    Remote,
}

/// Applications correlate requests and responses through an 8-byte
/// little-endian request id at the start of the payload.
pub const REQUEST_HEADER_LEN: usize = 8;

pub fn request_id(payload: &[u8]) -> Option<u64> {
    payload
        .get(..REQUEST_HEADER_LEN)
        .map(|b| u64::from_le_bytes(b.try_into().expect("eight bytes")))
}

/// Read-only placement view shared by all functions of a node.
pub type IntraRoute = Arc<BTreeMap<FnId, Placement>>;

/// Builds the placement view for `node` from a global function→node map.
pub fn intra_route(node: NodeId, placements: &BTreeMap<FnId, NodeId>) -> IntraRoute {
    Arc::new(
        placements
            .iter()
            .map(|(f, n)| (*f, if *n == node { Placement::Local } else { Placement::Remote }))
            .collect(),
    )
}

#[derive(Debug)]
pub struct FunctionContext {
    fn_id: FnId,
    tenant: TenantId,
    node: NodeId,
    pool: Arc<MemoryPool>,
    routes: IntraRoute,
    endpoint: Endpoint,
}

impl FunctionContext {
    /// Binds `endpoint` to `pool` and admits the function as a pool member.
    pub fn new(endpoint: Endpoint, pool: Arc<MemoryPool>, routes: IntraRoute) -> Self {
        let fn_id = endpoint.fn_id();
        pool.admit(OwnerRef::Function(fn_id));
        FunctionContext {
            fn_id,
            tenant: endpoint.tenant(),
            node: endpoint.registry().node(),
            pool,
            routes,
            endpoint,
        }
    }

    pub fn fn_id(&self) -> FnId {
        self.fn_id
    }

    pub fn tenant(&self) -> TenantId {
        self.tenant
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn me(&self) -> OwnerRef {
        OwnerRef::Function(self.fn_id)
    }

    pub fn pool(&self) -> &Arc<MemoryPool> {
        &self.pool
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn placement(&self, dst: FnId) -> Option<Placement> {
        self.routes.get(&dst).copied()
    }

    /// Addresses `desc` to `dst_fn` and hands it off. Local peers get it
    /// straight from shared memory; anything else goes through the engine.
    pub fn io_send(&self, mut desc: BufferDescriptor, dst_fn: FnId) -> Result<(), IpcError> {
        desc.src_fn = self.fn_id;
        desc.dst_fn = dst_fn;
        match self.placement(dst_fn) {
            Some(Placement::Local) => self.endpoint.registry().skmsg_send(&desc, self.me(), &self.pool),
            Some(Placement::Remote) => self.endpoint.comch_send(&desc, &self.pool),
            None => Err(IpcError::NotFound(dst_fn)),
        }?;
        Counters::bump(&self.pool.counters().descriptor_exchanges);
        Ok(())
    }

    pub fn io_recv(&self, wait: Wait) -> Option<BufferDescriptor> {
        self.endpoint.recv(wait)
    }

    pub fn io_get_buffer(&self) -> Result<BufferDescriptor, PoolError> {
        self.pool.alloc(self.me())
    }

    pub fn io_put_buffer(&self, desc: &BufferDescriptor) -> Result<(), PoolError> {
        self.pool.free(desc, self.me())
    }
}
