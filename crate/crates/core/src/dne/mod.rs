//! Node-local network engine.
//!
//! One run-to-completion loop per node owns every fabric resource and
//! proxies transfers for the functions on that node. Each call to
//! [`Engine::iterate`] makes one non-blocking pass:
//!
//! 1. drain the function channels into per-tenant pending queues;
//! 2. emit sends, tenant order chosen by the scheduler, on the least
//!    congested queue pair towards the destination node;
//! 3. poll the completion queue, free sent buffers, and dispatch received
//!    descriptors to their destination functions via the receive-buffer
//!    registry;
//! 4. repost one receive buffer per consumed completion;
//! 5. deactivate queue pairs that have drained.

mod sched;

pub use sched::{Dwrr, SchedulingMode, DEFAULT_QUANTUM_BASE};

use crate::counters::Counters;
use crate::fabric::{
    CompletionEntry, CompletionStatus, Direction, FabricError, NodeFabric, Opcode, QpState,
};
use crate::ids::{BufferId, FnId, Nanos, NodeId, QpId, TenantId, WrId};
use crate::ipc::{EndpointRegistry, IpcError};
use crate::mempool::{BufferDescriptor, CrossMapHandle, MemoryPool, OwnerRef, PoolKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub scheduler: SchedulingMode,
    pub quantum_base: u32,
    /// Maximum simultaneously ACTIVE queue pairs towards one peer node.
    pub active_cap: usize,
    /// Queue pairs pre-established per tenant and peer.
    pub qps_per_peer: usize,
    /// Receive buffers posted per tenant at start.
    pub initial_rq_depth: usize,
    pub cq_batch: usize,
    pub max_tx_per_iteration: usize,
    pub check_invariants: bool,
    /// Iterations between full scans of the receive registry and QP table.
    /// Counter-level checks run every iteration.
    pub invariant_scan_interval: u64,
    pub record_emissions: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            scheduler: SchedulingMode::Dwrr,
            quantum_base: DEFAULT_QUANTUM_BASE,
            active_cap: 32,
            qps_per_peer: 4,
            initial_rq_depth: 64,
            cq_batch: 256,
            max_tx_per_iteration: 1024,
            check_invariants: true,
            invariant_scan_interval: 64,
            record_emissions: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("no route to {0}")]
    NoRoute(FnId),
    #[error("{0} is not deployed on this node")]
    UnknownDstFn(FnId),
    #[error("completion {0} has no registered receive buffer")]
    RbrMiss(WrId),
    #[error("tenant {0} is not served by this engine")]
    UnknownTenant(TenantId),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Ipc(#[from] IpcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeadLetterReason {
    NoRoute,
    UnknownDstFn,
    Disconnected,
    TenantMismatch,
    RnrTimeout,
    TransferFailed,
}

/// Metadata of an undeliverable descriptor. The buffer itself goes back to
/// its pool so conservation still holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeadLetter {
    pub descriptor: BufferDescriptor,
    pub reason: DeadLetterReason,
    pub at: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emission {
    pub tenant: TenantId,
    pub buffer: BufferId,
    pub len: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IterationReport {
    pub drained: usize,
    pub tx_emitted: usize,
    pub tx_bytes: u64,
    pub tx_completed: usize,
    pub rx_dispatched: usize,
    pub reposted: usize,
    pub dead_lettered: usize,
    pub deactivated: usize,
    /// Emission attempts that found every candidate QP saturated at the cap.
    pub cap_stalls: usize,
    pub errors: Vec<EngineError>,
}

impl IterationReport {
    pub fn did_work(&self) -> bool {
        self.drained + self.tx_emitted + self.tx_completed + self.rx_dispatched + self.reposted + self.dead_lettered + self.deactivated
            > 0
    }
}

#[derive(Debug)]
pub struct TenantState {
    pub weight: u32,
    pub pending_tx: VecDeque<BufferDescriptor>,
    pub cqe_consumed: u64,
    pub reposted: u64,
    pub initial_rq_depth: usize,
    pub emitted: u64,
    pub emitted_bytes: u64,
    pool: Arc<MemoryPool>,
}

impl TenantState {
    pub fn pool(&self) -> &Arc<MemoryPool> {
        &self.pool
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TenantMetrics {
    pub emitted: u64,
    pub bytes: u64,
    pub rq_depth: usize,
    pub deficit: u64,
    pub pending: usize,
}

/// One line of the engine metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct EngineMetrics {
    pub virtual_time: Nanos,
    pub node: NodeId,
    pub tenants: BTreeMap<TenantId, TenantMetrics>,
    pub active_qps: usize,
}

pub struct Engine {
    node: NodeId,
    config: EngineConfig,
    fabric: NodeFabric,
    registry: EndpointRegistry,
    counters: Arc<Counters>,
    tenants: BTreeMap<TenantId, TenantState>,
    dwrr: Dwrr,
    fcfs: VecDeque<TenantId>,
    routes: BTreeMap<FnId, NodeId>,
    conns: BTreeMap<(TenantId, NodeId), Vec<QpId>>,
    rbr: HashMap<WrId, BufferDescriptor>,
    recvs_posted: u64,
    rx_processed: u64,
    rx_backlog: VecDeque<BufferDescriptor>,
    dead_letters: Vec<DeadLetter>,
    emissions: Vec<Emission>,
    iterations: u64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("node", &self.node)
            .field("tenants", &self.tenants.keys().collect::<Vec<_>>())
            .field("rbr", &self.rbr.len())
            .field("iterations", &self.iterations)
            .finish()
    }
}

/// Least-congested usable QP among `candidates`: fewest posted-but-incomplete
/// WRs, ties to the lowest id. INACTIVE ones qualify only while the peer is
/// under the active cap.
fn least_congested(fabric: &NodeFabric, candidates: &[QpId], remote: NodeId, active_cap: usize) -> Option<QpId> {
    let max = fabric.config().max_outstanding;
    let active = fabric
        .qps()
        .filter(|q| q.remote() == remote && q.state() == QpState::Active)
        .count();
    candidates
        .iter()
        .filter_map(|id| fabric.qp(*id))
        .filter(|q| match q.state() {
            QpState::Active => q.in_flight() < max,
            QpState::Inactive => active < active_cap,
            QpState::Connecting => false,
        })
        .min_by_key(|q| (q.in_flight(), q.id()))
        .map(|q| q.id())
}

impl Engine {
    pub fn new(config: EngineConfig, fabric: NodeFabric, registry: EndpointRegistry, counters: Arc<Counters>) -> Self {
        Engine {
            node: fabric.node(),
            config,
            fabric,
            registry,
            counters,
            tenants: BTreeMap::new(),
            dwrr: Dwrr::new(config.quantum_base),
            fcfs: VecDeque::new(),
            routes: BTreeMap::new(),
            conns: BTreeMap::new(),
            rbr: HashMap::new(),
            recvs_posted: 0,
            rx_processed: 0,
            rx_backlog: VecDeque::new(),
            dead_letters: Vec::new(),
            emissions: Vec::new(),
            iterations: 0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn fabric(&self) -> &NodeFabric {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut NodeFabric {
        &mut self.fabric
    }

    pub fn registry(&self) -> &EndpointRegistry {
        &self.registry
    }

    /// Registers a mapped tenant pool with the fabric and posts the initial
    /// receive buffers.
    pub fn add_tenant(&mut self, mapped: &CrossMapHandle, weight: u32) -> Result<(), EngineError> {
        let pool = mapped.pool().clone();
        let tenant = pool.tenant();
        self.fabric.register_memory(mapped)?;
        if pool.kind() != PoolKind::Unified {
            return Ok(());
        }
        self.dwrr.set_weight(tenant, weight);
        self.tenants.insert(
            tenant,
            TenantState {
                weight: weight.max(1),
                pending_tx: VecDeque::new(),
                cqe_consumed: 0,
                reposted: 0,
                initial_rq_depth: 0,
                emitted: 0,
                emitted_bytes: 0,
                pool,
            },
        );
        let mut posted = 0;
        for _ in 0..self.config.initial_rq_depth {
            if self.post_one_recv(tenant).is_err() {
                break;
            }
            posted += 1;
        }
        self.tenants.get_mut(&tenant).unwrap().initial_rq_depth = posted;
        Ok(())
    }

    /// Pre-establishes the shadow queue pairs of every tenant to `peer`.
    pub fn connect_peer(&mut self, peer: NodeId) -> Result<(), EngineError> {
        let tenants: Vec<TenantId> = self.tenants.keys().copied().collect();
        for t in tenants {
            for _ in 0..self.config.qps_per_peer.max(1) {
                let qp = self.fabric.create_qp(t, self.node, peer)?;
                self.conns.entry((t, peer)).or_default().push(qp);
            }
        }
        Ok(())
    }

    /// Installs the inter-node routing table. Control plane only.
    pub fn set_routes(&mut self, routes: BTreeMap<FnId, NodeId>) {
        self.routes = routes;
    }

    pub fn routes(&self) -> &BTreeMap<FnId, NodeId> {
        &self.routes
    }

    pub fn tenant(&self, t: TenantId) -> Option<&TenantState> {
        self.tenants.get(&t)
    }

    pub fn tenants(&self) -> impl Iterator<Item = (&TenantId, &TenantState)> {
        self.tenants.iter()
    }

    pub fn deficit(&self, t: TenantId) -> u64 {
        self.dwrr.deficit(t)
    }

    pub fn rbr_len(&self) -> usize {
        self.rbr.len()
    }

    pub fn recvs_posted(&self) -> u64 {
        self.recvs_posted
    }

    pub fn rx_processed(&self) -> u64 {
        self.rx_processed
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead_letters
    }

    pub fn emissions(&self) -> &[Emission] {
        &self.emissions
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn qps_to(&self, tenant: TenantId, peer: NodeId) -> &[QpId] {
        self.conns.get(&(tenant, peer)).map_or(&[], |v| v.as_slice())
    }

    pub fn active_qps(&self) -> usize {
        self.fabric.qps().filter(|q| q.state() == QpState::Active).count()
    }

    pub fn active_qps_to(&self, peer: NodeId) -> usize {
        self.fabric
            .qps()
            .filter(|q| q.remote() == peer && q.state() == QpState::Active)
            .count()
    }

    /// Cuts a misbehaving function off from the engine.
    pub fn sever(&self, f: FnId) -> Result<(), EngineError> {
        Ok(self.registry.sever(f)?)
    }

    pub fn pending_tx(&self) -> usize {
        self.tenants.values().map(|t| t.pending_tx.len()).sum()
    }

    /// True when no work is queued anywhere in the engine or its fabric.
    pub fn is_quiescent(&self) -> bool {
        self.pending_tx() == 0
            && self.rx_backlog.is_empty()
            && self.registry.engine_backlog() == 0
            && self.fabric.is_quiescent()
            && self.tenants.values().all(|t| t.cqe_consumed == t.reposted)
    }

    /// Whether the next iteration would find something to do right now.
    pub fn has_immediate_work(&self) -> bool {
        self.registry.engine_backlog() > 0
            || self.fabric.cq_len() > 0
            || !self.rx_backlog.is_empty()
            || self.pending_tx() > 0
            || self.tenants.values().any(|t| t.cqe_consumed > t.reposted)
            || self
                .fabric
                .qps()
                .any(|q| q.state() == QpState::Active && q.is_idle())
    }

    pub fn next_deadline(&self) -> Option<Nanos> {
        self.fabric.next_deadline()
    }

    pub fn metrics(&self) -> EngineMetrics {
        EngineMetrics {
            virtual_time: self.fabric.now(),
            node: self.node,
            tenants: self
                .tenants
                .iter()
                .map(|(t, s)| {
                    (
                        *t,
                        TenantMetrics {
                            emitted: s.emitted,
                            bytes: s.emitted_bytes,
                            rq_depth: self.fabric.rq_depth(*t),
                            deficit: self.dwrr.deficit(*t),
                            pending: s.pending_tx.len(),
                        },
                    )
                })
                .collect(),
            active_qps: self.active_qps(),
        }
    }

    fn post_one_recv(&mut self, tenant: TenantId) -> Result<(), EngineError> {
        let me = OwnerRef::Engine(self.node);
        let pool = self.tenants.get(&tenant).ok_or(EngineError::UnknownTenant(tenant))?.pool.clone();
        let desc = pool
            .alloc(me)
            .map_err(|e| EngineError::Fabric(FabricError::NotOwner(e)))?;
        match self.fabric.post_recv(tenant, desc, me) {
            Ok(wr) => {
                self.rbr.insert(wr, desc);
                self.recvs_posted += 1;
                Ok(())
            }
            Err(e) => {
                let _ = pool.free(&desc, me);
                Err(e.into())
            }
        }
    }

    fn dead_letter(&mut self, desc: BufferDescriptor, reason: DeadLetterReason, report: &mut IterationReport) {
        Counters::bump(&self.counters.dead_letters);
        if let Some(t) = self.tenants.get(&desc.tenant) {
            let _ = t.pool.free(&desc, OwnerRef::Engine(self.node));
        }
        self.dead_letters.push(DeadLetter {
            descriptor: desc,
            reason,
            at: self.fabric.now(),
        });
        report.dead_lettered += 1;
    }

    /// Queues a descriptor the engine already owns for transmission.
    pub fn enqueue(&mut self, desc: BufferDescriptor) -> Result<(), EngineError> {
        let t = desc.tenant;
        let state = self.tenants.get_mut(&t).ok_or(EngineError::UnknownTenant(t))?;
        state.pending_tx.push_back(desc);
        match self.config.scheduler {
            SchedulingMode::Dwrr => self.dwrr.activate(t),
            SchedulingMode::Fcfs => self.fcfs.push_back(t),
        }
        Ok(())
    }

    /// One pass of the run-to-completion loop. Never blocks.
    pub fn iterate(&mut self) -> IterationReport {
        let mut report = IterationReport::default();
        self.fabric.progress();
        self.drain_functions(&mut report);
        self.tx_stage(&mut report);
        self.rx_stage(&mut report);
        self.repost(&mut report);
        report.deactivated = self.fabric.deactivate_idle().len();
        if self.config.check_invariants {
            self.check_invariants();
        }
        self.iterations += 1;
        report
    }

    fn drain_functions(&mut self, report: &mut IterationReport) {
        for (_, tenant, desc) in self.registry.engine_poll(usize::MAX) {
            report.drained += 1;
            if desc.tenant != tenant || !self.tenants.contains_key(&desc.tenant) {
                Counters::bump(&self.counters.tenant_mismatch);
                self.dead_letter(desc, DeadLetterReason::TenantMismatch, report);
                continue;
            }
            self.enqueue(desc).expect("tenant checked above");
        }
    }

    fn tx_stage(&mut self, report: &mut IterationReport) {
        let node = self.node;
        let cap = self.config.active_cap;
        while report.tx_emitted + report.dead_lettered < self.config.max_tx_per_iteration {
            let tenants = &self.tenants;
            let routes = &self.routes;
            let conns = &self.conns;
            let fabric = &mut self.fabric;
            let mut stalls = 0;
            let mut eligible = |t: TenantId| -> bool {
                let Some(head) = tenants.get(&t).and_then(|s| s.pending_tx.front()) else {
                    return false;
                };
                match routes.get(&head.dst_fn) {
                    None => true,
                    Some(n) if *n == node => true,
                    Some(remote) => {
                        let cands = conns.get(&(t, *remote)).map_or(&[][..], |v| v.as_slice());
                        if least_congested(fabric, cands, *remote, cap).is_none() {
                            stalls += 1;
                            return false;
                        }
                        fabric.link_credit(*remote) > 0
                    }
                }
            };
            let pick = match self.config.scheduler {
                SchedulingMode::Dwrr => self.dwrr.next(
                    |t| tenants.get(&t).and_then(|s| s.pending_tx.front()).map(|d| d.len),
                    &mut eligible,
                ),
                SchedulingMode::Fcfs => match self.fcfs.front() {
                    Some(t) if eligible(*t) => Some(*t),
                    _ => None,
                },
            };
            report.cap_stalls += stalls;
            let Some(t) = pick else { break };
            if self.config.scheduler == SchedulingMode::Fcfs {
                self.fcfs.pop_front();
            }
            let state = self.tenants.get_mut(&t).expect("picked tenant exists");
            let desc = state.pending_tx.pop_front().expect("picked tenant is backlogged");
            if state.pending_tx.is_empty() {
                self.dwrr.deactivate(t);
            }
            self.transmit(desc, report);
        }
    }

    fn transmit(&mut self, desc: BufferDescriptor, report: &mut IterationReport) {
        let me = OwnerRef::Engine(self.node);
        let t = desc.tenant;
        match self.routes.get(&desc.dst_fn).copied() {
            None => {
                report.errors.push(EngineError::NoRoute(desc.dst_fn));
                self.dead_letter(desc, DeadLetterReason::NoRoute, report);
            }
            Some(n) if n == self.node => {
                self.rx_backlog.push_back(desc);
            }
            Some(remote) => {
                let cands = self.conns.get(&(t, remote)).map_or(&[][..], |v| v.as_slice());
                let qp = least_congested(&self.fabric, cands, remote, self.config.active_cap)
                    .expect("eligibility checked a usable qp");
                match self.fabric.post_send(qp, desc, me) {
                    Ok(_) => {
                        let s = self.tenants.get_mut(&t).unwrap();
                        s.emitted += 1;
                        s.emitted_bytes += desc.len as u64;
                        report.tx_emitted += 1;
                        report.tx_bytes += desc.len as u64;
                        if self.config.record_emissions {
                            self.emissions.push(Emission {
                                tenant: t,
                                buffer: desc.buffer,
                                len: desc.len,
                            });
                        }
                    }
                    Err(e) => {
                        report.errors.push(e.into());
                        self.dead_letter(desc, DeadLetterReason::TransferFailed, report);
                    }
                }
            }
        }
    }

    fn rx_stage(&mut self, report: &mut IterationReport) {
        let batch = self.fabric.poll_cq(self.config.cq_batch);
        for c in batch {
            match c.direction {
                Direction::TxDone => self.on_tx_done(c, report),
                Direction::RxDone => self.on_rx_done(c, report),
            }
        }
        self.flush_backlog(report);
    }

    fn on_tx_done(&mut self, c: CompletionEntry, report: &mut IterationReport) {
        report.tx_completed += 1;
        if c.opcode != Opcode::Send {
            return;
        }
        let Some(desc) = c.descriptor else { return };
        if c.status == CompletionStatus::Ok {
            if let Some(s) = self.tenants.get(&desc.tenant) {
                let _ = s.pool.free(&desc, OwnerRef::Engine(self.node));
            }
        } else {
            let reason = match c.status {
                CompletionStatus::RnrTimeout => DeadLetterReason::RnrTimeout,
                CompletionStatus::Disconnected => DeadLetterReason::Disconnected,
                _ => DeadLetterReason::TransferFailed,
            };
            self.dead_letter(desc, reason, report);
        }
    }

    fn on_rx_done(&mut self, c: CompletionEntry, report: &mut IterationReport) {
        let Some(mut desc) = self.rbr.remove(&c.wr_id) else {
            Counters::bump(&self.counters.rbr_miss);
            report.errors.push(EngineError::RbrMiss(c.wr_id));
            return;
        };
        self.rx_processed += 1;
        if let Some(s) = self.tenants.get_mut(&c.tenant_id) {
            s.cqe_consumed += 1;
        }
        desc.len = c.byte_len;
        if let Some(h) = c.header {
            desc.src_fn = h.src_fn;
            desc.dst_fn = h.dst_fn;
            desc.flags = h.flags;
        }
        if c.status != CompletionStatus::Ok {
            self.dead_letter(desc, DeadLetterReason::TransferFailed, report);
            return;
        }
        self.rx_backlog.push_back(desc);
    }

    /// Hands received (or locally routed) descriptors to their functions.
    /// A full function channel leaves the rest queued, in order, for the
    /// next iteration.
    fn flush_backlog(&mut self, report: &mut IterationReport) {
        while let Some(desc) = self.rx_backlog.front().copied() {
            let Some(state) = self.tenants.get(&desc.tenant) else {
                self.rx_backlog.pop_front();
                continue;
            };
            let pool = state.pool.clone();
            match self.registry.lookup(desc.dst_fn) {
                Err(_) => {
                    self.rx_backlog.pop_front();
                    report.errors.push(EngineError::UnknownDstFn(desc.dst_fn));
                    self.dead_letter(desc, DeadLetterReason::UnknownDstFn, report);
                    continue;
                }
                Ok(t) if t != desc.tenant => {
                    self.rx_backlog.pop_front();
                    Counters::bump(&self.counters.tenant_mismatch);
                    self.dead_letter(desc, DeadLetterReason::TenantMismatch, report);
                    continue;
                }
                Ok(_) => {}
            }
            match self.registry.engine_deliver(&desc, &pool) {
                Ok(()) => {
                    self.rx_backlog.pop_front();
                    report.rx_dispatched += 1;
                }
                Err(IpcError::ChannelFull(_)) => break,
                Err(e) => {
                    self.rx_backlog.pop_front();
                    report.errors.push(e.into());
                    self.dead_letter(desc, DeadLetterReason::Disconnected, report);
                }
            }
        }
    }

    fn repost(&mut self, report: &mut IterationReport) {
        let tenants: Vec<TenantId> = self.tenants.keys().copied().collect();
        for t in tenants {
            loop {
                let s = &self.tenants[&t];
                if s.reposted >= s.cqe_consumed {
                    break;
                }
                if self.post_one_recv(t).is_err() {
                    break;
                }
                self.tenants.get_mut(&t).unwrap().reposted += 1;
                report.reposted += 1;
            }
        }
    }

    fn check_invariants(&self) {
        let mut ok = self.rbr.len() as u64 == self.recvs_posted - self.rx_processed;
        for s in self.tenants.values() {
            ok &= s.reposted <= s.cqe_consumed + s.initial_rq_depth as u64;
        }
        let interval = self.config.invariant_scan_interval.max(1);
        if self.iterations % interval == 0 {
            ok &= self.full_scan();
        }
        if !ok {
            Counters::bump(&self.counters.invariant_failures);
        }
    }

    fn full_scan(&self) -> bool {
        let mut ok = true;
        for t in self.tenants.keys() {
            ok &= self.fabric.posted_receive_ids(*t).iter().all(|w| self.rbr.contains_key(w));
        }
        for peer in self.fabric.peers() {
            ok &= self.active_qps_to(peer) <= self.config.active_cap;
        }
        ok &= self
            .fabric
            .qps()
            .filter(|q| q.state() == QpState::Active)
            .all(|q| !q.is_idle());
        ok
    }
}

#[cfg(test)]
mod tests;
