use super::*;
use crate::clock::VirtualClock;
use crate::ids::{BufferId, FnId};
use crate::mempool::{PoolDirectory, DEFAULT_BUFFER_SIZE};
use proptest::prelude::*;

const A: NodeId = NodeId(0);
const B: NodeId = NodeId(1);
const T1: TenantId = TenantId(1);
const T2: TenantId = TenantId(2);

struct Rig {
    clock: VirtualClock,
    net: SimNetwork,
    dir: PoolDirectory,
    a: NodeFabric,
    b: NodeFabric,
    counters: Arc<Counters>,
}

fn rig_with(config: FabricConfig, params: LinkParams) -> Rig {
    let counters = Arc::new(Counters::new());
    let clock = VirtualClock::new();
    let net = SimNetwork::new(&[A, B], params);
    let dir = PoolDirectory::new(counters.clone());
    let mut a = NodeFabric::new(A, config, Clock::Virtual(clock.clone()), Box::new(net.port(A)), counters.clone());
    let mut b = NodeFabric::new(B, config, Clock::Virtual(clock.clone()), Box::new(net.port(B)), counters.clone());
    for t in [T1, T2] {
        for (node, fab) in [(A, &mut a), (B, &mut b)] {
            let pool = dir.create_pool(t, node, 16, 4096).unwrap();
            let handle = dir.import_pool(&dir.export_pool(&pool).unwrap(), node).unwrap();
            fab.register_memory(&handle).unwrap();
        }
    }
    Rig {
        clock,
        net,
        dir,
        a,
        b,
        counters,
    }
}

fn rig() -> Rig {
    rig_with(FabricConfig::default(), LinkParams::default())
}

impl Rig {
    fn engine(node: NodeId) -> OwnerRef {
        OwnerRef::Engine(node)
    }

    fn ready_qp(&mut self, tenant: TenantId) -> QpId {
        let qp = self.a.create_qp(tenant, A, B).unwrap();
        self.advance(self.clock.now() + self.a.config().connect_delay_ns);
        qp
    }

    fn advance(&mut self, t: Nanos) {
        self.clock.advance_to(t);
        self.a.progress();
        self.b.progress();
    }

    /// Runs the event loop until nothing is scheduled.
    fn drain(&mut self) {
        loop {
            let now = self.clock.now();
            let next = [
                self.net.next_event(now),
                self.a.next_deadline(),
                self.b.next_deadline(),
            ]
            .into_iter()
            .flatten()
            .min();
            match next {
                Some(t) => self.advance(t),
                None => break,
            }
        }
    }

    fn buffer(&self, tenant: TenantId, node: NodeId, payload: &[u8]) -> BufferDescriptor {
        let pool = self.dir.get(tenant, node).unwrap();
        let mut d = pool.alloc(Self::engine(node)).unwrap();
        pool.fill(&mut d, Self::engine(node), payload.len() as u32, |b| b.copy_from_slice(payload))
            .unwrap();
        d
    }

    fn post_recv(&mut self, tenant: TenantId) -> (WrId, BufferDescriptor) {
        let d = self.buffer(tenant, B, &[]);
        (self.b.post_recv(tenant, d, Self::engine(B)).unwrap(), d)
    }
}

#[test]
fn register_memory_rejects_duplicates_and_reports_extent() {
    let counters = Arc::new(Counters::new());
    let clock = VirtualClock::new();
    let net = SimNetwork::new(&[A, B], LinkParams::default());
    let dir = PoolDirectory::new(counters.clone());
    let mut b = NodeFabric::new(B, FabricConfig::default(), Clock::Virtual(clock), Box::new(net.port(B)), counters);
    let pool = dir.create_pool(T2, B, 64, DEFAULT_BUFFER_SIZE).unwrap();
    let handle = dir.import_pool(&dir.export_pool(&pool).unwrap(), B).unwrap();
    let mr = b.register_memory(&handle).unwrap();
    assert_eq!((mr.tenant_id, mr.node_id), (T2, B));
    assert_eq!(mr.extent, 128 * 1024 * 1024);
    assert_eq!(
        b.register_memory(&handle),
        Err(FabricError::DuplicateRegistration(T2, PoolKind::Unified))
    );
    // A pool mapped into another engine cannot be registered here.
    let other = dir.create_pool(T1, A, 4, 64).unwrap();
    let foreign = dir.import_pool(&dir.export_pool(&other).unwrap(), A).unwrap();
    assert_eq!(b.register_memory(&foreign), Err(FabricError::UnknownPool));
}

#[test]
fn create_qp_connects_after_delay() {
    let mut r = rig();
    let qp = r.a.create_qp(T1, A, B).unwrap();
    assert_eq!(r.a.qp(qp).unwrap().state(), QpState::Connecting);
    let d = r.buffer(T1, A, b"x");
    assert_eq!(r.a.post_send(qp, d, Rig::engine(A)), Err(FabricError::QpNotReady(qp)));
    r.advance(19 * NANOS_PER_MILLI);
    assert_eq!(r.a.qp(qp).unwrap().state(), QpState::Connecting);
    r.advance(20 * NANOS_PER_MILLI);
    assert_eq!(r.a.qp(qp).unwrap().state(), QpState::Inactive);

    assert_eq!(r.a.create_qp(T1, A, A), Err(FabricError::UnknownNode(A)));
    assert_eq!(r.a.create_qp(T1, A, NodeId(9)), Err(FabricError::UnknownNode(NodeId(9))));
    assert_eq!(r.a.create_qp(TenantId(7), A, B), Err(FabricError::UnknownTenant(TenantId(7))));
}

#[test]
fn queue_pairs_of_a_tenant_share_one_receive_queue() {
    let mut r = rig();
    let qps: Vec<QpId> = (0..8).map(|_| r.a.create_qp(T1, A, B).unwrap()).collect();
    r.advance(r.a.config().connect_delay_ns);
    let posted: Vec<WrId> = (0..8).map(|_| r.post_recv(T1).0).collect();
    for qp in &qps {
        let d = r.buffer(T1, A, b"hi");
        r.a.post_send(*qp, d, Rig::engine(A)).unwrap();
    }
    r.drain();
    let rx: Vec<CompletionEntry> = r
        .b
        .poll_cq(64)
        .into_iter()
        .filter(|c| c.direction == Direction::RxDone)
        .collect();
    assert_eq!(rx.len(), 8);
    // All eight QPs consumed the single RQ in FIFO order.
    assert_eq!(rx.iter().map(|c| c.wr_id).collect::<Vec<_>>(), posted);
    assert_eq!(r.b.rq_depth(T1), 0);
}

#[test]
fn matched_send_delivers_without_software_copy() {
    let mut r = rig();
    let qp = r.ready_qp(T1);
    let (recv_wr, recv_desc) = r.post_recv(T1);
    let payload = vec![0xabu8; 1024];
    let mut d = r.buffer(T1, A, &payload);
    d.dst_fn = FnId(4);
    let wr = r.a.post_send(qp, d, Rig::engine(A)).unwrap();
    assert_eq!(r.a.qp(qp).unwrap().state(), QpState::Active);
    assert_eq!(r.dir.get(T1, A).unwrap().owner_of(d.buffer), Some(OwnerRef::Fabric));
    r.drain();

    let rx = r.b.poll_cq(8);
    assert_eq!(rx.len(), 1);
    assert_eq!(rx[0].direction, Direction::RxDone);
    assert_eq!(rx[0].wr_id, recv_wr);
    assert_eq!(rx[0].byte_len, 1024);
    assert_eq!(rx[0].header.unwrap().dst_fn, FnId(4));
    let pool_b = r.dir.get(T1, B).unwrap();
    assert_eq!(pool_b.owner_of(recv_desc.buffer), Some(Rig::engine(B)));
    let mut got = recv_desc;
    got.len = 1024;
    assert_eq!(pool_b.read(&got, Rig::engine(B), |b| b.to_vec()).unwrap(), payload);

    let tx = r.a.poll_cq(8);
    assert_eq!(tx.len(), 1);
    assert_eq!((tx[0].wr_id, tx[0].direction, tx[0].status), (wr, Direction::TxDone, CompletionStatus::Ok));
    assert_eq!(tx[0].descriptor, Some(d));
    assert_eq!(r.dir.get(T1, A).unwrap().owner_of(d.buffer), Some(Rig::engine(A)));

    let s = r.counters.snapshot();
    assert_eq!(s.software_copies(), 0);
    assert_eq!(s.fabric_sends, 1);
    assert_eq!(s.dma_bytes, 2048);
}

#[test]
fn send_requires_ownership() {
    let mut r = rig();
    let qp = r.ready_qp(T1);
    let d = r.buffer(T1, A, b"abc");
    let stranger = OwnerRef::Function(FnId(3));
    assert!(matches!(r.a.post_send(qp, d, stranger), Err(FabricError::NotOwner(_))));
    let wrong = r.buffer(T2, A, b"abc");
    assert!(matches!(
        r.a.post_send(qp, wrong, Rig::engine(A)),
        Err(FabricError::TenantMismatch { .. })
    ));
}

#[test]
fn empty_receive_queue_times_out() {
    let params = LinkParams::default();
    let config = FabricConfig {
        rnr_timeout_ns: 10 * NANOS_PER_MILLI,
        ..Default::default()
    };
    let mut r = rig_with(config, params);
    let qp = r.ready_qp(T1);
    let t0 = r.clock.now();
    let d = r.buffer(T1, A, &[7u8; 100]);
    r.a.post_send(qp, d, Rig::engine(A)).unwrap();
    r.drain();

    // Single-step oracle: departure after serialization, arrival one base
    // latency later, NAK after the timeout, completion one base latency on.
    let wire = FRAME_HEADER_LEN + 16 + 4 + 100;
    let arrival = t0 + params.serialization_ns(wire) + params.base_latency_ns;
    let nak_at = arrival + config.rnr_timeout_ns + params.base_latency_ns;
    assert_eq!(r.clock.now(), nak_at);
    let tx = r.a.poll_cq(8);
    assert_eq!(tx.len(), 1);
    assert_eq!(tx[0].status, CompletionStatus::RnrTimeout);
    assert!(r.b.poll_cq(8).is_empty());
    assert_eq!(r.counters.snapshot().rnr_timeouts, 1);
}

#[test]
fn late_repost_rescues_a_stalled_send() {
    let mut r = rig();
    let qp = r.ready_qp(T1);
    let d = r.buffer(T1, A, b"late");
    r.a.post_send(qp, d, Rig::engine(A)).unwrap();
    let now = r.clock.now();
    r.advance(now + NANOS_PER_MILLI);
    assert_eq!(r.b.stalled(T1), 1);
    r.post_recv(T1);
    r.drain();
    assert_eq!(r.b.poll_cq(8)[0].status, CompletionStatus::Ok);
    assert_eq!(r.a.poll_cq(8)[0].status, CompletionStatus::Ok);
}

#[test]
fn post_recv_checks_tenant_and_keeps_fifo() {
    let mut r = rig();
    let foreign = r.buffer(T2, B, &[]);
    assert!(matches!(
        r.b.post_recv(T1, foreign, Rig::engine(B)),
        Err(FabricError::TenantMismatch { .. })
    ));
    let qp = r.ready_qp(T1);
    let posted: Vec<BufferDescriptor> = (0..3).map(|_| r.post_recv(T1).1).collect();
    assert_eq!(r.b.rq_depth(T1), 3);
    for i in 0..3u8 {
        let d = r.buffer(T1, A, &[i]);
        r.a.post_send(qp, d, Rig::engine(A)).unwrap();
    }
    r.drain();
    let pool = r.dir.get(T1, B).unwrap();
    // FIFO oracle: the i-th posted buffer receives the i-th send.
    for (i, desc) in posted.iter().enumerate() {
        let mut d = *desc;
        d.len = 1;
        assert_eq!(pool.read(&d, Rig::engine(B), |b| b[0]).unwrap(), i as u8);
    }
}

#[test]
fn one_sided_write_lands_without_receiver_completion() {
    let config = FabricConfig {
        mode: FabricMode::OneSided,
        ..Default::default()
    };
    let mut r = rig_with(config, LinkParams::default());
    let qp = r.ready_qp(T1);
    let remote = r.b.region(T1, PoolKind::Unified).unwrap();
    let bytes: Vec<u8> = (0..64).collect();
    let d = r.buffer(T1, A, &bytes);
    r.a.post_write(qp, d, &remote, 0, Rig::engine(A)).unwrap();
    r.drain();
    assert!(r.b.poll_cq(8).is_empty());
    assert!(r.b.write_flag(remote.region_id, 0, 64));
    let landed = r.dir.get(T1, B).unwrap().region_read(BufferId(0), 0, 64);
    assert_eq!(landed, bytes);
    let tx = r.a.poll_cq(8);
    assert_eq!((tx.len(), tx[0].opcode), (1, Opcode::Write));

    let d2 = r.buffer(T1, A, b"zz");
    assert!(matches!(
        r.a.post_write(qp, d2, &remote, remote.extent + 10, Rig::engine(A)),
        Err(FabricError::OffsetOutOfRange { .. })
    ));
}

#[test]
fn one_sided_write_disabled_in_two_sided_mode() {
    let mut r = rig();
    let qp = r.ready_qp(T1);
    let remote = r.b.region(T1, PoolKind::Unified).unwrap();
    let d = r.buffer(T1, A, b"x");
    assert_eq!(r.a.post_write(qp, d, &remote, 0, Rig::engine(A)), Err(FabricError::ModeDisabled));
    assert_eq!(r.a.post_atomic(qp, 0, 0, 1), Err(FabricError::ModeDisabled));
}

#[test]
fn remote_compare_and_swap() {
    let config = FabricConfig {
        mode: FabricMode::OneSided,
        ..Default::default()
    };
    let mut r = rig_with(config, LinkParams::default());
    let qp = r.ready_qp(T1);
    r.a.post_atomic(qp, 5, 0, 11).unwrap();
    r.a.post_atomic(qp, 5, 0, 12).unwrap();
    r.drain();
    let olds: Vec<u64> = r.a.poll_cq(8).iter().map(|c| c.atomic_old.unwrap()).collect();
    assert_eq!(olds, vec![0, 11]);
    assert_eq!(r.b.lock_word(5), 11);
}

#[test]
fn poll_cq_batches_in_generation_order() {
    let mut r = rig();
    assert!(r.b.poll_cq(4).is_empty());
    let q1 = r.a.create_qp(T1, A, B).unwrap();
    let q2 = r.a.create_qp(T2, A, B).unwrap();
    r.advance(r.a.config().connect_delay_ns);
    let mut posted = Vec::new();
    for i in 0..5 {
        let t = if i % 2 == 0 { T1 } else { T2 };
        posted.push(r.post_recv(t).0);
        let d = r.buffer(t, A, &[i as u8]);
        r.a.post_send(if t == T1 { q1 } else { q2 }, d, Rig::engine(A)).unwrap();
    }
    r.drain();
    let first = r.b.poll_cq(3);
    assert_eq!(first.len(), 3);
    let rest = r.b.poll_cq(3);
    assert_eq!(rest.len(), 2);
    let tenants: Vec<TenantId> = first.iter().chain(&rest).map(|c| c.tenant_id).collect();
    assert_eq!(tenants, vec![T1, T2, T1, T2, T1]);
    let ids: Vec<WrId> = first.iter().chain(&rest).map(|c| c.wr_id).collect();
    assert_eq!(ids, posted);
}

#[test]
fn idle_queue_pairs_deactivate() {
    let mut r = rig();
    let qp = r.ready_qp(T1);
    r.post_recv(T1);
    let d = r.buffer(T1, A, b"x");
    r.a.post_send(qp, d, Rig::engine(A)).unwrap();
    assert!(r.a.deactivate_idle().is_empty());
    r.drain();
    r.a.poll_cq(8);
    assert_eq!(r.a.deactivate_idle(), vec![qp]);
    assert_eq!(r.a.qp(qp).unwrap().state(), QpState::Inactive);
}

#[test]
fn tracer_records_events() {
    let mut r = rig();
    let tracer = Tracer::new();
    r.a.set_tracer(tracer.clone());
    r.b.set_tracer(tracer.clone());
    let qp = r.ready_qp(T1);
    r.post_recv(T1);
    let d = r.buffer(T1, A, b"x");
    r.a.post_send(qp, d, Rig::engine(A)).unwrap();
    r.drain();
    let kinds: Vec<String> = tracer.records().into_iter().map(|t| t.event_kind).collect();
    assert_eq!(kinds, vec!["post_recv", "post_send", "rx_done", "tx_done"]);
    let mut out = Vec::new();
    tracer.write_jsonl(&mut out).unwrap();
    assert_eq!(out.iter().filter(|b| **b == b'\n').count(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Per-QP FIFO, matching conservation and completion totality on
    /// randomized small traces, checked against a sequence oracle.
    #[test]
    fn per_qp_fifo_and_matching_conservation(
        plan in proptest::collection::vec((0usize..3, 1usize..300), 1..12),
    ) {
        let mut r = rig();
        let qps: Vec<QpId> = (0..3).map(|_| r.a.create_qp(T1, A, B).unwrap()).collect();
        r.advance(r.a.config().connect_delay_ns);
        let mut expected: BTreeMap<QpId, Vec<u8>> = BTreeMap::new();
        let mut recv = Vec::new();
        for (seq, (q, len)) in plan.iter().enumerate() {
            recv.push(r.post_recv(T1));
            let mut payload = vec![seq as u8; *len];
            payload[0] = seq as u8;
            let d = r.buffer(T1, A, &payload);
            r.a.post_send(qps[*q], d, Rig::engine(A)).unwrap();
            expected.entry(qps[*q]).or_default().push(seq as u8);
        }
        r.drain();
        let rx = r.b.poll_cq(1000);
        let tx = r.a.poll_cq(1000);
        prop_assert_eq!(rx.len(), plan.len());
        prop_assert_eq!(tx.len(), plan.len());
        prop_assert_eq!(r.b.rq_depth(T1), 0);
        let pool = r.dir.get(T1, B).unwrap();
        let by_wr: BTreeMap<WrId, BufferDescriptor> = recv.into_iter().collect();
        let mut seen: BTreeMap<QpId, Vec<u8>> = BTreeMap::new();
        let mut buffers = std::collections::BTreeSet::new();
        for c in &rx {
            let mut d = by_wr[&c.wr_id];
            prop_assert!(buffers.insert(d.buffer));
            d.len = c.byte_len;
            let tag = pool.read(&d, Rig::engine(B), |b| b[0]).unwrap();
            seen.entry(c.qp_id).or_default().push(tag);
        }
        prop_assert_eq!(seen, expected);
        prop_assert!(r.a.is_quiescent() && r.b.is_quiescent());
    }
}
