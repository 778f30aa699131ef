use super::*;
use crate::clock::{Clock, VirtualClock};
use crate::fabric::{FabricConfig, LinkParams, SimNetwork};
use crate::iolib::{intra_route, FunctionContext};
use crate::ipc::{Wait, DEFAULT_CHANNEL_CAPACITY};
use crate::mempool::PoolDirectory;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const A: NodeId = NodeId(0);
const B: NodeId = NodeId(1);

struct Cluster {
    clock: VirtualClock,
    net: SimNetwork,
    engines: Vec<Engine>,
    fns: BTreeMap<FnId, FunctionContext>,
    counters: Arc<Counters>,
    dir: PoolDirectory,
}

/// `tenants`: (tenant, weight); `fns`: (fn, tenant, node).
fn cluster(
    tenants: &[(u16, u32)],
    fns: &[(u16, u16, u16)],
    config: EngineConfig,
    fabric: FabricConfig,
    link: LinkParams,
    buffers: u32,
) -> Cluster {
    let config = EngineConfig {
        invariant_scan_interval: 1,
        ..config
    };
    let counters = Arc::new(Counters::new());
    let clock = VirtualClock::new();
    let nodes = [A, B];
    let net = SimNetwork::new(&nodes, link);
    let dir = PoolDirectory::new(counters.clone());
    let placements: BTreeMap<FnId, NodeId> = fns.iter().map(|(f, _, n)| (FnId(*f), NodeId(*n))).collect();
    let mut engines = Vec::new();
    let mut ctxs = BTreeMap::new();
    for node in nodes {
        let fab = NodeFabric::new(node, fabric, Clock::Virtual(clock.clone()), Box::new(net.port(node)), counters.clone());
        let reg = EndpointRegistry::new(node, counters.clone());
        let mut e = Engine::new(config, fab, reg.clone(), counters.clone());
        for (t, w) in tenants {
            let pool = dir.create_pool(TenantId(*t), node, buffers, 4096).unwrap();
            let h = dir.import_pool(&dir.export_pool(&pool).unwrap(), node).unwrap();
            e.add_tenant(&h, *w).unwrap();
        }
        for peer in nodes.iter().filter(|p| **p != node) {
            e.connect_peer(*peer).unwrap();
        }
        e.set_routes(placements.clone());
        let routes = intra_route(node, &placements);
        for (f, t, _) in fns.iter().filter(|x| NodeId(x.2) == node) {
            let ep = reg.register_endpoint(FnId(*f), TenantId(*t), DEFAULT_CHANNEL_CAPACITY).unwrap();
            ctxs.insert(
                FnId(*f),
                FunctionContext::new(ep, dir.get(TenantId(*t), node).unwrap(), routes.clone()),
            );
        }
        engines.push(e);
    }
    let mut c = Cluster {
        clock,
        net,
        engines,
        fns: ctxs,
        counters,
        dir,
    };
    c.advance(fabric.connect_delay_ns);
    c
}

fn simple(tenants: &[(u16, u32)], fns: &[(u16, u16, u16)]) -> Cluster {
    cluster(tenants, fns, EngineConfig::default(), FabricConfig::default(), LinkParams::default(), 256)
}

impl Cluster {
    fn advance(&mut self, t: Nanos) {
        self.clock.advance_to(t);
        for e in &mut self.engines {
            e.fabric_mut().progress();
        }
    }

    fn iterate_all(&mut self) -> bool {
        let mut any = false;
        for e in &mut self.engines {
            any |= e.iterate().did_work();
        }
        any
    }

    /// Runs engines and the clock until nothing is scheduled, consuming
    /// arrivals at functions with `sink`.
    fn run(&mut self, mut sink: impl FnMut(&FunctionContext, BufferDescriptor)) {
        loop {
            while self.iterate_all() {
                for ctx in self.fns.values() {
                    while let Some(d) = ctx.io_recv(Wait::Poll) {
                        sink(ctx, d);
                    }
                }
            }
            let now = self.clock.now();
            let next = std::iter::once(self.net.next_event(now))
                .chain(self.engines.iter().map(|e| e.next_deadline()))
                .flatten()
                .min();
            match next {
                Some(t) => self.advance(t),
                None => break,
            }
        }
    }

    fn send(&self, from: u16, to: u16, len: u32, tag: u8) {
        let ctx = &self.fns[&FnId(from)];
        let mut d = ctx.io_get_buffer().unwrap();
        ctx.pool().fill(&mut d, ctx.me(), len, |b| b.fill(tag)).unwrap();
        ctx.io_send(d, FnId(to)).unwrap();
    }
}

fn free_sink(ctx: &FunctionContext, d: BufferDescriptor) {
    ctx.io_put_buffer(&d).unwrap();
}

#[test]
fn idle_iteration_reports_nothing() {
    let mut c = simple(&[(1, 1)], &[(1, 1, 0), (2, 1, 1)]);
    c.iterate_all();
    let r = c.engines[0].iterate();
    assert_eq!(r, IterationReport::default());
}

#[test]
fn remote_descriptor_activates_a_queue_pair() {
    let mut c = simple(&[(1, 1)], &[(1, 1, 0), (2, 1, 1)]);
    c.iterate_all();
    c.send(1, 2, 100, 7);
    let qps = c.engines[0].qps_to(TenantId(1), B).to_vec();
    assert!(qps.iter().all(|q| c.engines[0].fabric().qp(*q).unwrap().state() == QpState::Inactive));
    let r = c.engines[0].iterate();
    assert_eq!((r.drained, r.tx_emitted), (1, 1));
    assert_eq!(c.engines[0].active_qps_to(B), 1);
    let mut got = Vec::new();
    c.run(|ctx, d| {
        got.push((ctx.fn_id(), ctx.pool().read(&d, ctx.me(), |b| b.to_vec()).unwrap()));
        ctx.io_put_buffer(&d).unwrap();
    });
    assert_eq!(got, vec![(FnId(2), vec![7u8; 100])]);
    // Drained QPs went back to INACTIVE.
    assert_eq!(c.engines[0].active_qps_to(B), 0);
    assert_eq!(c.counters.snapshot().software_copies(), 0);
}

#[test]
fn least_congested_prefers_fewer_in_flight() {
    let mut c = simple(&[(1, 1)], &[(1, 1, 0), (2, 1, 1)]);
    let qps = c.engines[0].qps_to(TenantId(1), B).to_vec();
    let pool = c.dir.get(TenantId(1), A).unwrap();
    let me = OwnerRef::Engine(A);
    for (qp, n) in [(qps[0], 5), (qps[1], 2), (qps[2], 7), (qps[3], 9)] {
        for _ in 0..n {
            let d = pool.alloc(me).unwrap();
            c.engines[0].fabric_mut().post_send(qp, d, me).unwrap();
        }
    }
    assert_eq!(least_congested(c.engines[0].fabric(), &qps[..2], B, 32), Some(qps[1]));
    assert_eq!(least_congested(c.engines[0].fabric(), &qps, B, 32), Some(qps[1]));
}

#[test]
fn unknown_destination_is_dead_lettered() {
    let mut c = simple(&[(1, 1)], &[(1, 1, 0), (2, 1, 1)]);
    let ctx = &c.fns[&FnId(1)];
    let d = ctx.io_get_buffer().unwrap();
    // Bypass the function-side route check to reach the engine.
    let mut d2 = d;
    d2.dst_fn = FnId(99);
    ctx.endpoint().comch_send(&d2, ctx.pool()).unwrap();
    let r = c.engines[0].iterate();
    assert_eq!(r.errors, vec![EngineError::NoRoute(FnId(99))]);
    assert_eq!(c.engines[0].dead_letters()[0].reason, DeadLetterReason::NoRoute);
    assert_eq!(c.dir.get(TenantId(1), A).unwrap().owner_of(d.buffer), Some(OwnerRef::Pool));
}

#[test]
fn saturated_queue_pair_at_cap_keeps_descriptor_queued() {
    let config = EngineConfig {
        active_cap: 1,
        qps_per_peer: 2,
        ..Default::default()
    };
    let fabric = FabricConfig {
        max_outstanding: 1,
        ..Default::default()
    };
    let mut c = cluster(&[(1, 1)], &[(1, 1, 0), (2, 1, 1)], config, fabric, LinkParams::default(), 128);
    c.iterate_all();
    c.send(1, 2, 10, 1);
    c.send(1, 2, 10, 2);
    let r = c.engines[0].iterate();
    assert_eq!(r.tx_emitted, 1);
    assert!(r.cap_stalls > 0);
    assert_eq!(c.engines[0].pending_tx(), 1);
    assert_eq!(c.engines[0].active_qps_to(B), 1);
    let mut n = 0;
    c.run(|ctx, d| {
        n += 1;
        free_sink(ctx, d)
    });
    assert_eq!(n, 2);
}

#[test]
fn burst_activates_up_to_the_cap() {
    let config = EngineConfig {
        active_cap: 4,
        qps_per_peer: 6,
        ..Default::default()
    };
    let fabric = FabricConfig {
        max_outstanding: 1,
        ..Default::default()
    };
    let link = LinkParams {
        tx_depth: 64,
        ..Default::default()
    };
    let mut c = cluster(&[(1, 1)], &[(1, 1, 0), (2, 1, 1)], config, fabric, link, 128);
    c.iterate_all();
    c.send(1, 2, 10, 0);
    c.send(1, 2, 10, 0);
    c.engines[0].iterate();
    assert_eq!(c.engines[0].active_qps_to(B), 2);
    for _ in 0..10 {
        c.send(1, 2, 10, 0);
    }
    let r = c.engines[0].iterate();
    assert_eq!(r.tx_emitted, 2);
    assert_eq!(c.engines[0].active_qps_to(B), 4);
    c.run(free_sink);
    assert_eq!(c.engines[0].active_qps_to(B), 0);
}

#[test]
fn duplicate_completion_is_an_rbr_miss() {
    let mut c = simple(&[(1, 1)], &[(1, 1, 0), (2, 1, 1)]);
    c.iterate_all();
    c.send(1, 2, 8, 0);
    // Capture the receive completion before the engine sees it.
    c.engines[0].iterate();
    let mut rx = None;
    for _ in 0..100 {
        let now = c.clock.now();
        let t = c.net.next_event(now).unwrap_or(now + 1000);
        c.advance(t);
        let got = c.engines[1].fabric_mut().poll_cq(8);
        if let Some(e) = got.into_iter().find(|e| e.direction == Direction::RxDone) {
            rx = Some(e);
            break;
        }
    }
    let rx = rx.unwrap();
    let before = c.engines[1].rbr_len();
    let mut report = IterationReport::default();
    c.engines[1].on_rx_done(rx, &mut report);
    assert_eq!(c.engines[1].rbr_len(), before - 1);
    c.engines[1].on_rx_done(rx, &mut report);
    assert_eq!(report.errors, vec![EngineError::RbrMiss(rx.wr_id)]);
    assert_eq!(c.counters.snapshot().rbr_miss, 1);
}

#[test]
fn repost_balances_consumed_completions() {
    let mut c = simple(&[(1, 1)], &[(1, 1, 0)]);
    let e = &mut c.engines[0];
    let depth = e.fabric().rq_depth(TenantId(1));
    {
        let s = e.tenants.get_mut(&TenantId(1)).unwrap();
        s.cqe_consumed = 7;
        s.reposted = 4;
    }
    let mut r = IterationReport::default();
    e.repost(&mut r);
    assert_eq!(r.reposted, 3);
    assert_eq!(e.fabric().rq_depth(TenantId(1)), depth + 3);

    // Empty pool: nothing posted, the balance persists.
    let pool = c.dir.get(TenantId(1), A).unwrap();
    let me = OwnerRef::Engine(A);
    let mut held = Vec::new();
    while let Ok(d) = pool.alloc(me) {
        held.push(d);
    }
    let e = &mut c.engines[0];
    e.tenants.get_mut(&TenantId(1)).unwrap().cqe_consumed = 9;
    let mut r = IterationReport::default();
    e.repost(&mut r);
    assert_eq!(r.reposted, 0);
    for d in &held {
        pool.free(d, me).unwrap();
    }
    let mut r = IterationReport::default();
    e.repost(&mut r);
    assert_eq!(r.reposted, 2);
}

#[test]
fn severed_function_cannot_reach_engine() {
    let c = simple(&[(1, 1)], &[(1, 1, 0), (2, 1, 1)]);
    c.engines[0].sever(FnId(1)).unwrap();
    let ctx = &c.fns[&FnId(1)];
    let d = ctx.io_get_buffer().unwrap();
    assert_eq!(ctx.io_send(d, FnId(2)), Err(IpcError::Disconnected(FnId(1))));
}

#[test]
fn fcfs_emits_in_arrival_order() {
    let config = EngineConfig {
        scheduler: SchedulingMode::Fcfs,
        record_emissions: true,
        ..Default::default()
    };
    let mut c = cluster(
        &[(1, 6), (2, 1)],
        &[(1, 1, 0), (2, 2, 0), (3, 1, 1), (4, 2, 1)],
        config,
        FabricConfig::default(),
        LinkParams::default(),
        256,
    );
    c.iterate_all();
    let mut expected = Vec::new();
    for i in 0..40u32 {
        let (from, to, t) = if i % 3 == 0 { (2, 4, 2) } else { (1, 3, 1) };
        c.send(from, to, 100 + i, 0);
        expected.push((TenantId(t), 100 + i));
        // Drain each arrival separately so the engine sees true arrival order.
        c.engines[0].drain_functions(&mut IterationReport::default());
    }
    c.run(free_sink);
    let got: Vec<(TenantId, u32)> = c.engines[0].emissions().iter().map(|e| (e.tenant, e.len)).collect();
    assert_eq!(got, expected);
}

/// End-to-end routing oracle: every message lands at the function named in
/// its descriptor with the payload it was sent with.
#[test]
fn random_messages_reach_their_named_destination() {
    let fns = [(1, 1, 0), (2, 1, 0), (3, 1, 1), (4, 1, 1)];
    let mut c = cluster(&[(1, 1)], &fns, EngineConfig::default(), FabricConfig::default(), LinkParams::default(), 512);
    c.iterate_all();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut expected: BTreeMap<FnId, Vec<u8>> = BTreeMap::new();
    let mut got: BTreeMap<FnId, Vec<u8>> = BTreeMap::new();
    let mut sent = 0;
    while sent < 10_000 {
        for _ in 0..100 {
            let from = rng.gen_range(1..=4u16);
            let to = rng.gen_range(1..=4u16);
            let tag = (sent % 251) as u8;
            c.send(from, to, 16, tag);
            expected.entry(FnId(to)).or_default().push(tag);
            sent += 1;
        }
        c.run(|ctx, d| {
            let tag = ctx.pool().read(&d, ctx.me(), |b| b[0]).unwrap();
            assert_eq!(d.dst_fn, ctx.fn_id());
            got.entry(ctx.fn_id()).or_default().push(tag);
            ctx.io_put_buffer(&d).unwrap();
        });
    }
    let sort = |m: &mut BTreeMap<FnId, Vec<u8>>| m.values_mut().for_each(|v| v.sort());
    sort(&mut expected);
    sort(&mut got);
    assert_eq!(got, expected);
    let s = c.counters.snapshot();
    assert_eq!(s.violations(), 0);
    assert_eq!(s.software_copies(), 0);
    for e in &c.engines {
        assert!(e.is_quiescent());
        for (t, st) in e.tenants() {
            assert_eq!(e.fabric().rq_depth(*t), st.initial_rq_depth);
        }
        assert_eq!(e.rbr_len() as u64, e.recvs_posted() - e.rx_processed());
    }
    // At drain only the posted receive buffers are out of the pools.
    for pool in c.dir.all() {
        let census = pool.owner_census();
        let posted = c.engines[pool.node().0 as usize].fabric().rq_depth(pool.tenant());
        assert_eq!(pool.in_use(), posted);
        assert_eq!(census.get(&OwnerRef::Fabric).copied().unwrap_or(0), posted);
    }
}

// --- scheduler ---------------------------------------------------------

/// Independent round-based DWRR over static queues: every round visits the
/// tenants in order, grants a quantum, emits while credit lasts and zeroes
/// the credit of a tenant that empties.
fn dwrr_reference(queues: &[(TenantId, u32, Vec<u32>)], quantum_base: u32) -> Vec<(TenantId, u32)> {
    let mut qs: Vec<(TenantId, u64, VecDeque<u32>, u64)> = queues
        .iter()
        .map(|(t, w, q)| (*t, *w as u64 * quantum_base as u64, q.iter().copied().collect(), 0))
        .collect();
    let mut out = Vec::new();
    while qs.iter().any(|q| !q.2.is_empty()) {
        for (t, quantum, q, deficit) in qs.iter_mut() {
            if q.is_empty() {
                continue;
            }
            *deficit += *quantum;
            while let Some(&head) = q.front() {
                if head as u64 > *deficit {
                    break;
                }
                *deficit -= head as u64;
                q.pop_front();
                out.push((*t, head));
            }
            if q.is_empty() {
                *deficit = 0;
            }
        }
    }
    out
}

fn run_dwrr(queues: &[(TenantId, u32, Vec<u32>)], quantum_base: u32) -> Vec<(TenantId, u32)> {
    let mut d = Dwrr::new(quantum_base);
    let mut qs: BTreeMap<TenantId, VecDeque<u32>> = BTreeMap::new();
    for (t, w, q) in queues {
        d.set_weight(*t, *w);
        qs.insert(*t, q.iter().copied().collect());
        if !q.is_empty() {
            d.activate(*t);
        }
    }
    let mut out = Vec::new();
    while let Some(t) = d.next(|t| qs[&t].front().copied(), |_| true) {
        let len = qs.get_mut(&t).unwrap().pop_front().unwrap();
        if qs[&t].is_empty() {
            d.deactivate(t);
        }
        out.push((t, len));
    }
    out
}

#[test]
fn single_tenant_gets_everything() {
    let q = vec![(TenantId(1), 3, vec![500; 50])];
    assert_eq!(run_dwrr(&q, 2048).len(), 50);
}

#[test]
fn dwrr_weighted_shares() {
    let n = 200_000;
    let q = vec![
        (TenantId(1), 6, vec![1024; n]),
        (TenantId(2), 1, vec![1024; n]),
        (TenantId(3), 2, vec![1024; n]),
    ];
    // 10^4 rounds at (12 + 2 + 4) emissions per round.
    let out = run_dwrr(&q, 2048);
    let window = &out[..180_000];
    assert_eq!(window, &dwrr_reference(&q, 2048)[..180_000]);
    let share = |t: u16| window.iter().filter(|e| e.0 == TenantId(t)).count() as f64 / window.len() as f64;
    for (t, want) in [(1, 6.0 / 9.0), (2, 1.0 / 9.0), (3, 2.0 / 9.0)] {
        assert!((share(t) - want).abs() / want < 0.01, "tenant {t}: {}", share(t));
    }
}

#[test]
fn ineligible_tenant_is_skipped_without_credit() {
    let mut d = Dwrr::new(100);
    for t in [1, 2] {
        d.set_weight(TenantId(t), 1);
        d.activate(TenantId(t));
    }
    let blocked = TenantId(1);
    let got = d.next(|_| Some(100), |t| t != blocked);
    assert_eq!(got, Some(TenantId(2)));
    assert_eq!(d.deficit(blocked), 0);
    assert_eq!(d.next(|_| Some(100), |_| false), None);
}

#[test]
fn deficit_resets_when_idle() {
    let mut d = Dwrr::new(1000);
    d.set_weight(TenantId(1), 1);
    d.activate(TenantId(1));
    assert_eq!(d.next(|_| Some(300), |_| true), Some(TenantId(1)));
    assert_eq!(d.deficit(TenantId(1)), 700);
    d.deactivate(TenantId(1));
    assert_eq!(d.deficit(TenantId(1)), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dwrr_matches_reference(
        weights in proptest::collection::vec(1u32..8, 1..5),
        sizes in proptest::collection::vec(proptest::collection::vec(1u32..6000, 0..80), 5),
        quantum in 256u32..4096,
    ) {
        let queues: Vec<(TenantId, u32, Vec<u32>)> = weights
            .iter()
            .enumerate()
            .map(|(i, w)| (TenantId(i as u16 + 1), *w, sizes[i].clone()))
            .collect();
        prop_assert_eq!(run_dwrr(&queues, quantum), dwrr_reference(&queues, quantum));
    }

    /// Starvation freedom: a backlogged tenant's head leaves within
    /// Σweights × max_msg / quantum_base rounds.
    #[test]
    fn no_starvation(
        weights in proptest::collection::vec(1u32..8, 2..5),
        max_msg in 512u32..8192,
    ) {
        let quantum = 1024;
        let queues: Vec<(TenantId, u32, Vec<u32>)> = weights
            .iter()
            .enumerate()
            .map(|(i, w)| (TenantId(i as u16 + 1), *w, vec![max_msg; 50]))
            .collect();
        let out = run_dwrr(&queues, quantum);
        let total_w: u32 = weights.iter().sum();
        let rounds = (total_w * max_msg).div_ceil(quantum) as usize;
        // Upper bound on emissions per round.
        let per_round: usize = weights.iter().map(|w| (*w as usize * quantum as usize).div_ceil(max_msg as usize) + 1).sum();
        for (t, _, _) in &queues {
            let first = out.iter().position(|e| e.0 == *t).unwrap();
            prop_assert!(first <= rounds * per_round);
        }
    }

    /// Randomized load against the engine: the active cap holds and every
    /// ACTIVE QP has work at iteration boundaries.
    #[test]
    fn active_cap_never_exceeded(seed in any::<u64>(), cap in 1usize..4) {
        let config = EngineConfig { active_cap: cap, qps_per_peer: 3, ..Default::default() };
        let fabric = FabricConfig { max_outstanding: 2, ..Default::default() };
        let link = LinkParams { tx_depth: 16, ..Default::default() };
        let mut c = cluster(&[(1, 1), (2, 3)], &[(1, 1, 0), (2, 2, 0), (3, 1, 1), (4, 2, 1)], config, fabric, link, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..30 {
            for _ in 0..rng.gen_range(0..12) {
                let (f, t) = if rng.gen_bool(0.5) { (1, 3) } else { (2, 4) };
                c.send(f, t, rng.gen_range(1..4000), 0);
            }
            for _ in 0..rng.gen_range(1..4) {
                for e in &mut c.engines {
                    e.iterate();
                    prop_assert!(e.active_qps_to(B) <= cap && e.active_qps_to(A) <= cap);
                    prop_assert!(e.fabric().qps().filter(|q| q.state() == QpState::Active).all(|q| !q.is_idle()));
                }
                for ctx in c.fns.values() {
                    while let Some(d) = ctx.io_recv(Wait::Poll) {
                        ctx.io_put_buffer(&d).unwrap();
                    }
                }
                let now = c.clock.now();
                if let Some(t) = c.net.next_event(now) {
                    c.advance(t);
                }
            }
        }
        c.run(free_sink);
        prop_assert_eq!(c.counters.snapshot().violations(), 0);
        prop_assert_eq!(c.counters.snapshot().dead_letters, 0);
    }
}
