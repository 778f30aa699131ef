//! Intra-node descriptor transport.
//!
//! Two kinds of channel share one per-node [`EndpointRegistry`]:
//!
//! * function-to-function messages (`skmsg_send`) go straight into the
//!   destination function's inbound queue;
//! * the engine channel carries descriptors from a function to the node's
//!   engine and back.
//!
//! Only encoded 16-byte descriptors travel; payloads stay in the pool.
//! Arrivals from local peers and from the engine land in the same inbound
//! queue, so a function sees them in arrival order.

use crate::counters::Counters;
use crate::ids::{FnId, NodeId, TenantId};
use crate::mempool::{BufferDescriptor, MemoryPool, OwnerRef, PoolError, DESCRIPTOR_LEN};
use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TryRecvError, TrySendError};
use parking_lot::RwLock;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

pub const DEFAULT_CHANNEL_CAPACITY: usize = 1024;

type Wire = [u8; DESCRIPTOR_LEN];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IpcError {
    #[error("{0} is already registered")]
    DuplicateFn(FnId),
    #[error("{0} has no endpoint on this node")]
    NotFound(FnId),
    #[error("channel of {0} is full")]
    ChannelFull(FnId),
    #[error("channel of {0} is disconnected")]
    Disconnected(FnId),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// How a receiver waits for the next descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wait {
    /// Return immediately.
    Poll,
    /// Block until a descriptor arrives, optionally bounded.
    Event(Option<Duration>),
}

struct Slot {
    tenant: TenantId,
    inbound: Sender<Wire>,
    to_engine: Receiver<Wire>,
    severed: Arc<AtomicBool>,
}

/// Function id to endpoint map for one node. Written at deployment,
/// read-only afterwards.
#[derive(Clone)]
pub struct EndpointRegistry {
    node: NodeId,
    slots: Arc<RwLock<BTreeMap<FnId, Slot>>>,
    counters: Arc<Counters>,
}

impl std::fmt::Debug for EndpointRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointRegistry")
            .field("node", &self.node)
            .field("functions", &self.slots.read().keys().collect::<Vec<_>>())
            .finish()
    }
}

fn push(tx: &Sender<Wire>, desc: &BufferDescriptor, fn_id: FnId) -> Result<(), IpcError> {
    match tx.try_send(desc.encode()) {
        Ok(()) => Ok(()),
        Err(TrySendError::Full(_)) => Err(IpcError::ChannelFull(fn_id)),
        Err(TrySendError::Disconnected(_)) => Err(IpcError::Disconnected(fn_id)),
    }
}

impl EndpointRegistry {
    pub fn new(node: NodeId, counters: Arc<Counters>) -> Self {
        EndpointRegistry {
            node,
            slots: Arc::new(RwLock::new(BTreeMap::new())),
            counters,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Creates the function's endpoint together with its engine channel.
    pub fn register_endpoint(&self, fn_id: FnId, tenant: TenantId, capacity: usize) -> Result<Endpoint, IpcError> {
        let mut slots = self.slots.write();
        if slots.contains_key(&fn_id) {
            return Err(IpcError::DuplicateFn(fn_id));
        }
        let (in_tx, in_rx) = bounded(capacity);
        let (eng_tx, eng_rx) = bounded(capacity);
        let severed = Arc::new(AtomicBool::new(false));
        slots.insert(
            fn_id,
            Slot {
                tenant,
                inbound: in_tx,
                to_engine: eng_rx,
                severed: severed.clone(),
            },
        );
        Ok(Endpoint {
            fn_id,
            tenant,
            inbound: in_rx,
            to_engine: eng_tx,
            severed,
            registry: self.clone(),
        })
    }

    pub fn lookup(&self, fn_id: FnId) -> Result<TenantId, IpcError> {
        self.slots.read().get(&fn_id).map(|s| s.tenant).ok_or(IpcError::NotFound(fn_id))
    }

    pub fn functions(&self) -> Vec<FnId> {
        self.slots.read().keys().copied().collect()
    }

    fn note_message(&self) {
        Counters::bump(&self.counters.ipc_messages);
        Counters::add(&self.counters.ipc_bytes, DESCRIPTOR_LEN as u64);
    }

    /// Hands `desc` to the local function `desc.dst_fn`. Ownership moves
    /// from `sender` to the destination before the descriptor is visible;
    /// a full channel reverts the transfer.
    pub fn skmsg_send(&self, desc: &BufferDescriptor, sender: OwnerRef, pool: &MemoryPool) -> Result<(), IpcError> {
        self.deliver(desc, sender, pool, false)
    }

    /// Engine-side delivery to a local function.
    pub fn engine_deliver(&self, desc: &BufferDescriptor, pool: &MemoryPool) -> Result<(), IpcError> {
        self.deliver(desc, OwnerRef::Engine(self.node), pool, true)
    }

    fn deliver(&self, desc: &BufferDescriptor, sender: OwnerRef, pool: &MemoryPool, via_engine: bool) -> Result<(), IpcError> {
        let dst = desc.dst_fn;
        let slots = self.slots.read();
        let slot = slots.get(&dst).ok_or(IpcError::NotFound(dst))?;
        if via_engine && slot.severed.load(Ordering::Acquire) {
            return Err(IpcError::Disconnected(dst));
        }
        if slot.inbound.is_full() {
            return Err(IpcError::ChannelFull(dst));
        }
        let to = OwnerRef::Function(dst);
        pool.transfer(desc, sender, to)?;
        if let Err(e) = push(&slot.inbound, desc, dst) {
            pool.transfer(desc, to, sender).expect("revert of a fresh transfer");
            return Err(e);
        }
        self.note_message();
        Ok(())
    }

    /// Non-blocking engine poll: drains up to `max` descriptors from the
    /// function channels, visiting functions in id order.
    pub fn engine_poll(&self, max: usize) -> Vec<(FnId, TenantId, BufferDescriptor)> {
        let slots = self.slots.read();
        let mut out = Vec::new();
        for (fn_id, slot) in slots.iter() {
            while out.len() < max {
                match slot.to_engine.try_recv() {
                    Ok(wire) => match BufferDescriptor::decode(&wire) {
                        Ok(d) => out.push((*fn_id, slot.tenant, d)),
                        Err(_) => Counters::bump(&self.counters.invariant_failures),
                    },
                    Err(_) => break,
                }
            }
        }
        out
    }

    /// Number of descriptors waiting for the engine.
    pub fn engine_backlog(&self) -> usize {
        self.slots.read().values().map(|s| s.to_engine.len()).sum()
    }

    /// Disconnects a misbehaving function from the engine.
    pub fn sever(&self, fn_id: FnId) -> Result<(), IpcError> {
        let slots = self.slots.read();
        let slot = slots.get(&fn_id).ok_or(IpcError::NotFound(fn_id))?;
        slot.severed.store(true, Ordering::Release);
        Ok(())
    }
}

/// The function side of its inbound queue and engine channel.
pub struct Endpoint {
    fn_id: FnId,
    tenant: TenantId,
    inbound: Receiver<Wire>,
    to_engine: Sender<Wire>,
    severed: Arc<AtomicBool>,
    registry: EndpointRegistry,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("fn_id", &self.fn_id)
            .field("tenant", &self.tenant)
            .field("pending", &self.inbound.len())
            .finish()
    }
}

impl Endpoint {
    pub fn fn_id(&self) -> FnId {
        self.fn_id
    }

    pub fn tenant(&self) -> TenantId {
        self.tenant
    }

    pub fn registry(&self) -> &EndpointRegistry {
        &self.registry
    }

    /// Descriptors waiting to be received; non-zero means ready.
    pub fn pending(&self) -> usize {
        self.inbound.len()
    }

    pub fn is_severed(&self) -> bool {
        self.severed.load(Ordering::Acquire)
    }

    pub fn recv(&self, wait: Wait) -> Option<BufferDescriptor> {
        let wire = match wait {
            Wait::Poll => match self.inbound.try_recv() {
                Ok(w) => w,
                Err(TryRecvError::Empty | TryRecvError::Disconnected) => return None,
            },
            Wait::Event(None) => self.inbound.recv().ok()?,
            Wait::Event(Some(t)) => match self.inbound.recv_timeout(t) {
                Ok(w) => w,
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => return None,
            },
        };
        match BufferDescriptor::decode(&wire) {
            Ok(d) => Some(d),
            Err(_) => {
                Counters::bump(&self.registry.counters.invariant_failures);
                None
            }
        }
    }

    /// Passes `desc` to the node's engine. Ownership moves to the engine.
    pub fn comch_send(&self, desc: &BufferDescriptor, pool: &MemoryPool) -> Result<(), IpcError> {
        if self.is_severed() {
            return Err(IpcError::Disconnected(self.fn_id));
        }
        if self.to_engine.is_full() {
            return Err(IpcError::ChannelFull(self.fn_id));
        }
        let me = OwnerRef::Function(self.fn_id);
        let engine = OwnerRef::Engine(self.registry.node);
        pool.transfer(desc, me, engine)?;
        if let Err(e) = push(&self.to_engine, desc, self.fn_id) {
            pool.transfer(desc, engine, me).expect("revert of a fresh transfer");
            return Err(e);
        }
        self.registry.note_message();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mempool::{AccessKind, PoolDirectory};

    const N: NodeId = NodeId(0);
    const T: TenantId = TenantId(1);

    fn setup() -> (EndpointRegistry, Arc<MemoryPool>, Arc<Counters>) {
        let counters = Arc::new(Counters::new());
        let dir = PoolDirectory::new(counters.clone());
        let pool = dir.create_pool(T, N, 128, 256).unwrap();
        (EndpointRegistry::new(N, counters.clone()), pool, counters)
    }

    #[test]
    fn registration_and_lookup() {
        let (reg, _, _) = setup();
        reg.register_endpoint(FnId(1), T, 8).unwrap();
        assert_eq!(reg.lookup(FnId(1)), Ok(T));
        assert_eq!(reg.register_endpoint(FnId(1), T, 8).unwrap_err(), IpcError::DuplicateFn(FnId(1)));
        assert_eq!(reg.lookup(FnId(9)), Err(IpcError::NotFound(FnId(9))));
    }

    #[test]
    fn local_send_moves_only_the_descriptor() {
        let (reg, pool, counters) = setup();
        let _f1 = reg.register_endpoint(FnId(1), T, 8).unwrap();
        let f2 = reg.register_endpoint(FnId(2), T, 8).unwrap();
        pool.admit(OwnerRef::Function(FnId(1)));
        let mut d = pool.alloc(OwnerRef::Function(FnId(1))).unwrap();
        pool.fill(&mut d, OwnerRef::Function(FnId(1)), 100, |b| b.fill(3)).unwrap();
        d.dst_fn = FnId(2);
        let before = counters.snapshot();
        reg.skmsg_send(&d, OwnerRef::Function(FnId(1)), &pool).unwrap();
        assert_eq!(f2.pending(), 1);
        assert_eq!(f2.recv(Wait::Poll), Some(d));
        let delta = counters.snapshot().delta(&before);
        assert_eq!(delta.software_copies(), 0);
        assert_eq!((delta.ipc_messages, delta.ipc_bytes), (1, 16));
        assert_eq!(pool.owner_of(d.buffer), Some(OwnerRef::Function(FnId(2))));

        d.dst_fn = FnId(7);
        assert_eq!(
            reg.skmsg_send(&d, OwnerRef::Function(FnId(2)), &pool),
            Err(IpcError::NotFound(FnId(7)))
        );
    }

    #[test]
    fn full_channel_pushes_back_and_keeps_ownership() {
        let (reg, pool, _) = setup();
        let f2 = reg.register_endpoint(FnId(2), T, 64).unwrap();
        let sender = OwnerRef::Function(FnId(1));
        pool.admit(sender);
        for i in 0..65 {
            let mut d = pool.alloc(sender).unwrap();
            d.dst_fn = FnId(2);
            let r = reg.skmsg_send(&d, sender, &pool);
            if i < 64 {
                r.unwrap();
            } else {
                assert_eq!(r, Err(IpcError::ChannelFull(FnId(2))));
                assert_eq!(pool.owner_of(d.buffer), Some(sender));
            }
        }
        assert_eq!(f2.pending(), 64);
    }

    #[test]
    fn engine_channel_round_trip_and_sever() {
        let (reg, pool, _) = setup();
        let f = reg.register_endpoint(FnId(3), T, 8).unwrap();
        let me = OwnerRef::Function(FnId(3));
        pool.admit(me);
        let d = pool.alloc(me).unwrap();
        f.comch_send(&d, &pool).unwrap();
        assert_eq!(pool.owner_of(d.buffer), Some(OwnerRef::Engine(N)));
        assert_eq!(reg.engine_poll(16), vec![(FnId(3), T, d)]);
        assert!(reg.engine_poll(16).is_empty());

        let mut back = d;
        back.dst_fn = FnId(3);
        reg.engine_deliver(&back, &pool).unwrap();
        assert_eq!(f.recv(Wait::Event(Some(Duration::from_millis(10)))), Some(back));

        reg.sever(FnId(3)).unwrap();
        assert_eq!(f.comch_send(&back, &pool), Err(IpcError::Disconnected(FnId(3))));
        assert_eq!(pool.owner_of(back.buffer), Some(me));
    }

    #[test]
    fn event_wait_unblocks_on_later_arrival() {
        let (reg, pool, _) = setup();
        let f = reg.register_endpoint(FnId(4), T, 8).unwrap();
        pool.admit(OwnerRef::Function(FnId(5)));
        let mut d = pool.alloc(OwnerRef::Function(FnId(5))).unwrap();
        d.dst_fn = FnId(4);
        let reg2 = reg.clone();
        let pool2 = pool.clone();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            reg2.skmsg_send(&d, OwnerRef::Function(FnId(5)), &pool2).unwrap();
        });
        assert_eq!(f.recv(Wait::Event(None)), Some(d));
        h.join().unwrap();
    }

    #[test]
    fn sender_access_after_send_is_a_violation() {
        let (reg, pool, counters) = setup();
        let _f2 = reg.register_endpoint(FnId(2), T, 8).unwrap();
        let f1 = OwnerRef::Function(FnId(1));
        pool.admit(f1);
        pool.enable_access_log();
        let mut d = pool.alloc(f1).unwrap();
        d.dst_fn = FnId(2);
        reg.skmsg_send(&d, f1, &pool).unwrap();
        assert!(pool.read(&d, f1, |_| ()).is_err());
        let log = pool.take_access_log();
        let last = log.last().unwrap();
        assert_eq!((last.accessor, last.kind, last.allowed), (f1, AccessKind::Read, false));
        assert_eq!(counters.snapshot().access_violations, 1);
    }

    #[test]
    fn ten_thousand_descriptors_arrive_in_order() {
        let (reg, pool, counters) = setup();
        let f = reg.register_endpoint(FnId(1), T, 16).unwrap();
        let me = OwnerRef::Function(FnId(1));
        pool.admit(me);
        let mut received = Vec::new();
        for seq in 0..10_000u32 {
            let mut d = pool.alloc(me).unwrap();
            d.len = seq % 256;
            f.comch_send(&d, &pool).unwrap();
            if seq % 7 == 6 {
                for (_, _, got) in reg.engine_poll(usize::MAX) {
                    received.push(got.len);
                    pool.free(&got, OwnerRef::Engine(N)).unwrap();
                }
            }
        }
        for (_, _, got) in reg.engine_poll(usize::MAX) {
            received.push(got.len);
        }
        let expected: Vec<u32> = (0..10_000u32).map(|s| s % 256).collect();
        assert_eq!(received, expected);
        assert_eq!(counters.snapshot().ipc_bytes, 16 * 10_000);
    }
}
