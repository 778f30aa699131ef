//! Export/import handshake that lets the engine map a host pool. The host
//! serializes a small manifest, the engine validates it against the pool
//! directory and receives a [`CrossMapHandle`].

use super::{MemoryPool, PoolError, PoolKind};
use crate::ids::{NodeId, TenantId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

const DIGEST_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct PoolManifest {
    pub tenant: TenantId,
    pub node: NodeId,
    pub kind: PoolKind,
    pub buffer_count: u32,
    pub buffer_size: u32,
    pub name_prefix: String,
    pub token: u64,
}

/// Opaque export descriptor: a JSON manifest followed by an 8-byte digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportBlob(pub Vec<u8>);

fn digest(body: &[u8]) -> [u8; DIGEST_LEN] {
    let full = Sha256::digest(body);
    let mut out = [0u8; DIGEST_LEN];
    out.copy_from_slice(&full[..DIGEST_LEN]);
    out
}

impl ExportBlob {
    pub(crate) fn from_pool(pool: &MemoryPool) -> Self {
        let manifest = PoolManifest {
            tenant: pool.tenant(),
            node: pool.node(),
            kind: pool.kind(),
            buffer_count: pool.buffer_count(),
            buffer_size: pool.buffer_size(),
            name_prefix: pool.name_prefix().to_string(),
            token: pool.token(),
        };
        let mut bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
        let d = digest(&bytes);
        bytes.extend_from_slice(&d);
        ExportBlob(bytes)
    }

    pub(crate) fn parse(&self) -> Result<PoolManifest, PoolError> {
        if self.0.len() <= DIGEST_LEN {
            return Err(PoolError::MalformedBlob("too short".into()));
        }
        let (body, tail) = self.0.split_at(self.0.len() - DIGEST_LEN);
        if digest(body) != tail {
            return Err(PoolError::MalformedBlob("digest mismatch".into()));
        }
        serde_json::from_slice(body).map_err(|e| PoolError::MalformedBlob(e.to_string()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossMapAccess {
    pub engine_core: bool,
    pub fabric_delivery: bool,
}

/// Engine-side mapping of a host pool, obtained only through
/// [`super::PoolDirectory::import_pool`].
#[derive(Debug, Clone)]
pub struct CrossMapHandle {
    pool: Arc<MemoryPool>,
    exported_to: NodeId,
    access: CrossMapAccess,
}

impl CrossMapHandle {
    pub(crate) fn new(pool: Arc<MemoryPool>, exported_to: NodeId) -> Self {
        Self {
            pool,
            exported_to,
            access: CrossMapAccess {
                engine_core: true,
                fabric_delivery: true,
            },
        }
    }

    pub fn pool(&self) -> &Arc<MemoryPool> {
        &self.pool
    }

    pub fn exported_to(&self) -> NodeId {
        self.exported_to
    }

    pub fn access(&self) -> CrossMapAccess {
        self.access
    }
}

#[cfg(test)]
mod tests {
    use super::super::{OwnerRef, PoolDirectory};
    use super::*;
    use crate::counters::Counters;
    use crate::ids::FnId;

    #[test]
    fn round_trip_gives_engine_the_host_bytes() {
        let dir = PoolDirectory::new(Arc::new(Counters::new()));
        let pool = dir.create_pool(TenantId(3), NodeId(1), 4, 64).unwrap();
        let f = OwnerRef::Function(FnId(7));
        pool.admit(f);
        let mut d = pool.alloc(f).unwrap();
        pool.fill(&mut d, f, 5, |b| b.copy_from_slice(b"hello")).unwrap();

        let blob = dir.export_pool(&pool).unwrap();
        let handle = dir.import_pool(&blob, NodeId(1)).unwrap();
        assert!(handle.access().engine_core && handle.access().fabric_delivery);
        let engine = OwnerRef::Engine(NodeId(1));
        handle.pool().transfer(&d, f, engine).unwrap();
        let seen = handle.pool().read(&d, engine, |b| b.to_vec()).unwrap();
        assert_eq!(seen, b"hello");

        assert_eq!(
            dir.import_pool(&blob, NodeId(1)).unwrap_err(),
            PoolError::AlreadyMapped(NodeId(1))
        );
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = PoolDirectory::new(Arc::new(Counters::new()));
        let pool = dir.create_pool(TenantId(3), NodeId(1), 4, 64).unwrap();
        let mut blob = dir.export_pool(&pool).unwrap();
        blob.0[3] ^= 0x20;
        assert!(matches!(
            dir.import_pool(&blob, NodeId(1)),
            Err(PoolError::MalformedBlob(_))
        ));
        assert!(matches!(
            dir.import_pool(&ExportBlob(vec![1, 2, 3]), NodeId(1)),
            Err(PoolError::MalformedBlob(_))
        ));
    }
}
