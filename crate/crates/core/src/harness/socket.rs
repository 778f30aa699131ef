//! Wall-clock runner: one thread per node over loopback TCP links, plus a
//! real HTTP listener and load connections when the scenario has ingress.

use super::apps::{payload_byte, App, AppCx, CallGraph};
use super::deploy::{deploy, Hosted};
use super::manifest::{secs, IngressSpec, ScenarioConfig};
use super::metrics::Recorder;
use super::{HarnessError, HttpOutcome, RunState};
use crate::clock::Clock;
use crate::dne::Engine;
use crate::fabric::socket::SocketPort;
use crate::fabric::LinkBackend;
use crate::ids::{FnId, Nanos, NodeId, NANOS_PER_MILLI};
use crate::ingress::{parse_response, serve, write_request, Gateway, Method};
use crate::iolib::REQUEST_HEADER_LEN;
use crate::ipc::Wait;
use parking_lot::Mutex;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

struct NodeResult {
    rec: Recorder,
    outstanding: usize,
    quiescent: bool,
    dead_letters: u64,
}

fn node_loop(
    mut engine: Engine,
    mut fns: BTreeMap<FnId, Hosted>,
    clock: Clock,
    window_ns: Nanos,
    end: Nanos,
    idle: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
) -> NodeResult {
    let mut rec = Recorder::new(window_ns);
    let mut timers: BinaryHeap<Reverse<(Nanos, u64, FnId, u64)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut pending = Vec::new();
    let dispatch = |f: FnId,
                    h: &mut Hosted,
                    rec: &mut Recorder,
                    pending: &mut Vec<(Nanos, FnId, u64)>,
                    call: &mut dyn FnMut(&mut dyn App, &mut AppCx)| {
        let mut t = Vec::new();
        let mut cx = AppCx::new(&h.ctx, clock.now(), &mut h.rng, rec, &mut t);
        call(h.app.as_mut(), &mut cx);
        pending.extend(t.into_iter().map(|(at, tok)| (at, f, tok)));
    };
    for (f, h) in fns.iter_mut() {
        dispatch(*f, h, &mut rec, &mut pending, &mut |app, cx| app.start(cx));
    }
    while !stop.load(Ordering::Acquire) {
        for (at, f, tok) in pending.drain(..) {
            seq += 1;
            timers.push(Reverse((at, seq, f, tok)));
        }
        let mut work = engine.iterate().did_work();
        for (f, h) in fns.iter_mut() {
            while let Some(d) = h.ctx.io_recv(Wait::Poll) {
                work = true;
                dispatch(*f, h, &mut rec, &mut pending, &mut |app, cx| app.on_message(cx, d));
            }
        }
        let now = clock.now();
        while let Some(Reverse((at, _, f, tok))) = timers.peek().copied() {
            if at > now {
                break;
            }
            timers.pop();
            work = true;
            if let Some(h) = fns.get_mut(&f) {
                dispatch(f, h, &mut rec, &mut pending, &mut |app, cx| app.on_timer(cx, tok));
            }
        }
        let done = now >= end && engine.is_quiescent() && fns.values().all(|h| h.app.outstanding() == 0);
        idle.store(done, Ordering::Release);
        if !work {
            std::thread::yield_now();
        }
    }
    NodeResult {
        rec,
        outstanding: fns.values().map(|h| h.app.outstanding()).sum(),
        quiescent: engine.is_quiescent(),
        dead_letters: engine.dead_letters().len() as u64,
    }
}

struct HttpShared {
    rec: Mutex<Recorder>,
    statuses: Mutex<BTreeMap<u16, u64>>,
    aborted: Mutex<u64>,
}

/// One keep-alive client connection issuing requests back to back until
/// `stop_at`, reconnecting when the server closes it.
fn http_client(addr: SocketAddr, spec: IngressSpec, graph: Arc<CallGraph>, clock: Clock, stop_at: Nanos, id: u64, shared: Arc<HttpShared>) {
    let (path, target) = spec.gateway.routes.iter().next().map(|(p, f)| (p.clone(), *f)).expect("validated");
    let mut seq = 0u64;
    'conn: while clock.now() < stop_at {
        let Ok(mut s) = TcpStream::connect(addr) else { return };
        let _ = s.set_nodelay(true);
        let _ = s.set_read_timeout(Some(Duration::from_secs(5)));
        let mut buf = Vec::new();
        while clock.now() < stop_at {
            let tag = (1 << 62) | (id << 32) | seq;
            seq += 1;
            let body: Vec<u8> = (0..spec.load.body_size as usize).map(|i| payload_byte(tag, i)).collect();
            let mut want = body.clone();
            graph.expected(target, &mut want);
            let sent = clock.now();
            shared.rec.lock().issued(spec.tenant);
            if s.write_all(&write_request(Method::Post, &path, &body, true)).is_err() {
                *shared.aborted.lock() += 1;
                continue 'conn;
            }
            let (status, got) = loop {
                if let Ok(Some((status, got, n))) = parse_response(&buf) {
                    buf.drain(..n);
                    break (status, got);
                }
                let mut chunk = [0u8; 16 * 1024];
                match s.read(&mut chunk) {
                    Ok(0) | Err(_) => {
                        *shared.aborted.lock() += 1;
                        continue 'conn;
                    }
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                }
            };
            *shared.statuses.lock().entry(status).or_default() += 1;
            if status == 200 {
                let mut rec = shared.rec.lock();
                if got != want {
                    rec.mismatches += 1;
                }
                let now = clock.now();
                rec.complete(spec.tenant, now, (got.len() + REQUEST_HEADER_LEN) as u64, now - sent);
            }
            if spec.load.think_us > 0.0 {
                std::thread::sleep(Duration::from_nanos((spec.load.think_us * 1e3) as u64));
            }
        }
    }
}

pub(crate) fn run(cfg: &ScenarioConfig) -> Result<RunState, HarnessError> {
    let ports = SocketPort::local_mesh(&cfg.nodes)?;
    let backends: BTreeMap<NodeId, Box<dyn LinkBackend>> = cfg
        .nodes
        .iter()
        .zip(ports)
        .map(|(n, p)| (*n, Box::new(p) as Box<dyn LinkBackend>))
        .collect();
    let clock = Clock::wall();
    let mut dep = deploy(cfg, &clock, backends, None)?;
    let end = cfg.duration_ns();
    let hard_end = end + secs(cfg.drain_s);
    let stop = Arc::new(AtomicBool::new(false));

    let mut gateway: Option<Arc<Mutex<Gateway>>> = None;
    let mut nodes = Vec::new();
    for (_, setup) in std::mem::take(&mut dep.nodes) {
        if let Some(g) = setup.gateway {
            gateway = Some(Arc::new(Mutex::new(g)));
        }
        let idle = Arc::new(AtomicBool::new(false));
        let (clock, stop, idle2) = (clock.clone(), stop.clone(), idle.clone());
        let window = cfg.window_ns();
        let (engine, fns) = (setup.engine, setup.fns);
        let h = std::thread::spawn(move || node_loop(engine, fns, clock, window, end, idle2, stop));
        nodes.push((idle, h));
    }

    let http_shared = Arc::new(HttpShared {
        rec: Mutex::new(Recorder::new(cfg.window_ns())),
        statuses: Mutex::new(BTreeMap::new()),
        aborted: Mutex::new(0),
    });
    let mut server = None;
    let mut clients = Vec::new();
    if let (Some(gw), Some(spec)) = (&gateway, &cfg.ingress) {
        let listen: SocketAddr = spec
            .listen
            .as_deref()
            .unwrap_or("127.0.0.1:0")
            .parse()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("ingress.listen: {e}")))?;
        let handle = serve(listen, gw.clone())?;
        let addr = handle.addr();
        server = Some(handle);
        let mut id = 0;
        for ph in &spec.load.phases {
            let (start, stop_at) = (secs(ph.start_s), secs(ph.stop_s).min(end));
            for _ in 0..ph.connections {
                let (spec, graph, clock, shared) = (spec.clone(), dep.graph.clone(), clock.clone(), http_shared.clone());
                id += 1;
                let my_id = id;
                clients.push(std::thread::spawn(move || {
                    let now = clock.now();
                    if start > now {
                        std::thread::sleep(Duration::from_nanos(start - now));
                    }
                    http_client(addr, spec, graph, clock, stop_at, my_id, shared);
                }));
            }
        }
    }

    // Sample worker counts once per window while the run lasts.
    let mut workers = Vec::new();
    let windows = end / cfg.window_ns();
    for w in 1..=windows {
        let at = w * cfg.window_ns();
        let now = clock.now();
        if at > now {
            std::thread::sleep(Duration::from_nanos(at - now));
        }
        workers.push(gateway.as_ref().map_or(0, |g| g.lock().live_workers()));
    }
    for c in clients {
        let _ = c.join();
    }
    // Drain: wait until every node has been idle across two samples.
    let mut drained = false;
    let mut streak = 0;
    while clock.now() < hard_end.max(end) {
        let gw_idle = gateway.as_ref().is_none_or(|g| g.lock().in_flight() == 0);
        if gw_idle && nodes.iter().all(|(idle, _)| idle.load(Ordering::Acquire)) {
            streak += 1;
            if streak >= 3 {
                drained = true;
                break;
            }
        } else {
            streak = 0;
        }
        std::thread::sleep(Duration::from_nanos(5 * NANOS_PER_MILLI));
    }
    stop.store(true, Ordering::Release);
    let mut rec = Recorder::new(cfg.window_ns());
    let (mut outstanding, mut quiescent, mut dead_letters) = (0, true, 0);
    for (_, h) in nodes {
        let r = h.join().expect("node thread panicked");
        rec.merge(r.rec);
        outstanding += r.outstanding;
        quiescent &= r.quiescent;
        dead_letters += r.dead_letters;
    }
    if let Some(s) = server {
        s.shutdown();
    }
    let shared = Arc::try_unwrap(http_shared).ok().expect("client threads joined");
    rec.merge(shared.rec.into_inner());
    let http = gateway.map(|g| {
        let g = g.lock();
        outstanding += g.in_flight();
        HttpOutcome {
            stats: g.stats(),
            statuses: shared.statuses.into_inner(),
            aborted: shared.aborted.into_inner(),
            autoscale: g.autoscale_log().to_vec(),
        }
    });
    Ok(RunState {
        rec,
        counters: dep.counters.snapshot(),
        pools: dep.dir.all(),
        drained: drained && quiescent,
        outstanding,
        dead_letters,
        end_time: clock.now(),
        workers,
        engine_log: Vec::new(),
        trace: None,
        http,
    })
}
