//! Single-context discrete-event runner over the simulated fabric.

use super::apps::{payload_byte, AppCx, CallGraph};
use super::deploy::{deploy, fn_rng, Deployment, Hosted};
use super::manifest::{secs, IngressSpec, ScenarioConfig};
use super::metrics::Recorder;
use super::{HarnessError, RunState};
use crate::clock::{Clock, VirtualClock};
use crate::dne::Engine;
use crate::fabric::{LinkBackend, SimNetwork, Tracer};
use crate::ids::{FnId, Nanos, NodeId, TenantId};
use crate::ingress::{parse_request, parse_response, write_request, ConnId, FourTuple, Gateway, HttpReply, Method, Request};
use crate::iolib::REQUEST_HEADER_LEN;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Window(u64),
    Autoscale,
    PhaseStart(usize),
    PhaseStop(usize),
    Think(ConnId),
    /// The connection's worker gets to its queued request.
    Dispatch(ConnId),
    /// A rendered reply leaves the worker.
    Deliver(u64),
    /// The gateway closed the connection.
    Closed(ConnId),
    App(FnId, u64),
}

struct HttpConn {
    phase: usize,
    worker: u16,
    sent: u32,
    queued: Option<Request>,
    outstanding: Option<(Nanos, Vec<u8>)>,
    closing: bool,
}

type Events = Vec<(Nanos, Event)>;

/// Closed-loop HTTP connections driving the gateway in virtual time. Each
/// worker serves its requests and responses one at a time, so a busy worker
/// delays its connections.
struct SimHttp {
    gw: Gateway,
    spec: IngressSpec,
    tenant: TenantId,
    path: String,
    target: FnId,
    max_body: usize,
    conns: BTreeMap<ConnId, HttpConn>,
    next_conn: ConnId,
    seq: u64,
    /// When each worker finishes the work queued on it.
    free_at: BTreeMap<u16, Nanos>,
    replies: BTreeMap<u64, HttpReply>,
    next_reply: u64,
    rng: ChaCha8Rng,
    run_end: Nanos,
    statuses: BTreeMap<u16, u64>,
    aborted: u64,
}

impl SimHttp {
    fn phase_live(&self, phase: usize, now: Nanos) -> bool {
        now < secs(self.spec.load.phases[phase].stop_s).min(self.run_end)
    }

    /// Reserves `cost` of the worker's time, returning when it starts.
    fn reserve(&mut self, w: u16, now: Nanos, cost: Nanos) -> Nanos {
        let free = self.free_at.entry(w).or_insert(0);
        let start = (*free).max(now);
        *free = start + cost;
        start
    }

    fn open(&mut self, phase: usize, now: Nanos, rec: &mut Recorder, graph: &CallGraph, ev: &mut Events) {
        let conn = self.next_conn;
        self.next_conn += 1;
        let tuple = FourTuple {
            src_ip: self.rng.gen(),
            src_port: self.rng.gen_range(1024..=u16::MAX),
            dst_ip: 0x0a00_0001,
            dst_port: 80,
        };
        let worker = self.gw.open_connection(conn, &tuple);
        self.conns.insert(
            conn,
            HttpConn {
                phase,
                worker,
                sent: 0,
                queued: None,
                outstanding: None,
                closing: false,
            },
        );
        self.send(conn, now, rec, graph, ev);
    }

    fn send(&mut self, conn: ConnId, now: Nanos, rec: &mut Recorder, graph: &CallGraph, ev: &mut Events) {
        let seq = self.seq | 1 << 63;
        self.seq += 1;
        let body: Vec<u8> = (0..self.spec.load.body_size as usize).map(|i| payload_byte(seq, i)).collect();
        let c = self.conns.get_mut(&conn).expect("sending on an open connection");
        c.sent += 1;
        let keep_alive = self.spec.load.requests_per_connection.is_none_or(|n| c.sent < n);
        let wire = write_request(Method::Post, &self.path, &body, keep_alive);
        let (req, _) = parse_request(&wire, self.max_body)
            .ok()
            .flatten()
            .expect("generated requests parse");
        let mut expected = body;
        graph.expected(self.target, &mut expected);
        rec.issued(self.tenant);
        c.outstanding = Some((now, expected));
        c.queued = Some(req);
        let w = c.worker;
        let cost = self.spec.gateway.request_cost_ns;
        let at = self.reserve(w, now, cost) + cost;
        if at > now {
            ev.push((at, Event::Dispatch(conn)));
        } else {
            self.dispatch(conn, now, rec, graph, ev);
        }
    }

    fn dispatch(&mut self, conn: ConnId, now: Nanos, rec: &mut Recorder, graph: &CallGraph, ev: &mut Events) {
        let Some(req) = self.conns.get_mut(&conn).and_then(|c| c.queued.take()) else {
            return;
        };
        if self.gw.worker_of(conn).is_none() {
            // Closed under us by a retirement.
            self.on_closed(conn, now, rec, graph, ev);
            return;
        }
        if let Err(reply) = self.gw.handle_request(conn, &req) {
            self.on_reply(reply, now, rec, graph, ev);
        }
    }

    /// Queues replies from the gateway behind their worker's pending work.
    fn take_replies(&mut self, now: Nanos, ev: &mut Events) -> bool {
        let replies = self.gw.poll_responses();
        let any = !replies.is_empty();
        for r in replies {
            let w = self.conns.get(&r.conn).map(|c| c.worker);
            let at = match w {
                Some(w) => self.reserve(w, now, self.spec.gateway.response_cost_ns) + self.spec.gateway.response_cost_ns,
                None => now,
            };
            let key = self.next_reply;
            self.next_reply += 1;
            self.replies.insert(key, r);
            ev.push((at, Event::Deliver(key)));
        }
        for c in self.gw.take_closed() {
            // After anything already queued on the worker.
            let at = self.conns.get(&c).map_or(now, |x| self.free_at.get(&x.worker).copied().unwrap_or(0).max(now));
            ev.push((at, Event::Closed(c)));
        }
        any
    }

    fn deliver(&mut self, key: u64, now: Nanos, rec: &mut Recorder, graph: &CallGraph, ev: &mut Events) {
        if let Some(r) = self.replies.remove(&key) {
            self.on_reply(r, now, rec, graph, ev);
        }
    }

    fn on_reply(&mut self, reply: HttpReply, now: Nanos, rec: &mut Recorder, graph: &CallGraph, ev: &mut Events) {
        let Some(c) = self.conns.get_mut(&reply.conn) else {
            rec.unexpected += 1;
            return;
        };
        let Some((sent, expected)) = c.outstanding.take() else {
            rec.unexpected += 1;
            return;
        };
        let (status, body, _) = parse_response(&reply.bytes)
            .ok()
            .flatten()
            .expect("gateway writes complete responses");
        *self.statuses.entry(status).or_default() += 1;
        if status == 200 {
            if body != expected {
                rec.mismatches += 1;
            }
            rec.complete(self.tenant, now, (body.len() + REQUEST_HEADER_LEN) as u64, now - sent);
        }
        let (phase, closing) = (c.phase, c.closing);
        if reply.close {
            self.conns.remove(&reply.conn);
            self.gw.close_connection(reply.conn);
            if !closing && self.phase_live(phase, now) {
                self.open(phase, now, rec, graph, ev);
            }
            return;
        }
        if closing || !self.phase_live(phase, now) {
            self.conns.remove(&reply.conn);
            self.gw.close_connection(reply.conn);
            return;
        }
        self.next(reply.conn, now, rec, graph, ev);
    }

    fn next(&mut self, conn: ConnId, now: Nanos, rec: &mut Recorder, graph: &CallGraph, ev: &mut Events) {
        let mean = self.spec.load.think_us;
        if mean <= 0.0 {
            self.send(conn, now, rec, graph, ev);
        } else {
            let u: f64 = self.rng.gen_range(f64::EPSILON..1.0);
            ev.push((now + (-u.ln() * mean * 1e3).max(1.0) as Nanos, Event::Think(conn)));
        }
    }

    fn on_closed(&mut self, conn: ConnId, now: Nanos, rec: &mut Recorder, graph: &CallGraph, ev: &mut Events) {
        if let Some(c) = self.conns.remove(&conn) {
            self.gw.close_connection(conn);
            if c.outstanding.is_some() {
                self.aborted += 1;
            }
            if !c.closing && self.phase_live(c.phase, now) {
                self.open(c.phase, now, rec, graph, ev);
            }
        }
    }

    fn stop_phase(&mut self, phase: usize) {
        let idle: Vec<ConnId> = self
            .conns
            .iter_mut()
            .filter(|(_, c)| c.phase == phase)
            .filter_map(|(id, c)| {
                c.closing = true;
                c.outstanding.is_none().then_some(*id)
            })
            .collect();
        for id in idle {
            self.conns.remove(&id);
            self.gw.close_connection(id);
        }
    }
}

pub struct SimWorld {
    cfg: ScenarioConfig,
    clock: VirtualClock,
    net: SimNetwork,
    engines: BTreeMap<NodeId, Engine>,
    fns: BTreeMap<FnId, Hosted>,
    http: Option<SimHttp>,
    graph: std::sync::Arc<CallGraph>,
    events: BinaryHeap<Reverse<(Nanos, u64, Event)>>,
    seq: u64,
    rec: Recorder,
    tracer: Option<Tracer>,
    dep: Deployment,
    engine_log: Vec<String>,
    workers: Vec<usize>,
}

impl SimWorld {
    pub fn new(cfg: &ScenarioConfig, trace: bool) -> Result<Self, HarnessError> {
        let clock = VirtualClock::new();
        let net = SimNetwork::new(&cfg.nodes, cfg.link);
        let backends: BTreeMap<NodeId, Box<dyn LinkBackend>> = cfg
            .nodes
            .iter()
            .map(|n| (*n, Box::new(net.port(*n)) as Box<dyn LinkBackend>))
            .collect();
        let tracer = trace.then(Tracer::new);
        let mut dep = deploy(cfg, &Clock::Virtual(clock.clone()), backends, tracer.as_ref())?;
        let mut engines = BTreeMap::new();
        let mut fns = BTreeMap::new();
        let mut http = None;
        for (node, setup) in std::mem::take(&mut dep.nodes) {
            engines.insert(node, setup.engine);
            fns.extend(setup.fns);
            if let (Some(gw), Some(spec)) = (setup.gateway, &cfg.ingress) {
                let (path, target) = spec.gateway.routes.iter().next().map(|(p, f)| (p.clone(), *f)).expect("validated");
                let max_body = cfg.tenant(spec.tenant).expect("validated").buffer_size as usize;
                http = Some(SimHttp {
                    gw,
                    spec: spec.clone(),
                    tenant: spec.tenant,
                    path,
                    target,
                    max_body,
                    conns: BTreeMap::new(),
                    next_conn: 1,
                    seq: 0,
                    free_at: BTreeMap::new(),
                    replies: BTreeMap::new(),
                    next_reply: 0,
                    rng: fn_rng(cfg.seed, spec.gateway.fn_id),
                    run_end: cfg.duration_ns(),
                    statuses: BTreeMap::new(),
                    aborted: 0,
                });
            }
        }
        Ok(SimWorld {
            cfg: cfg.clone(),
            clock,
            net,
            engines,
            fns,
            http,
            graph: dep.graph.clone(),
            events: BinaryHeap::new(),
            seq: 0,
            rec: Recorder::new(cfg.window_ns()),
            tracer,
            dep,
            engine_log: Vec::new(),
            workers: Vec::new(),
        })
    }

    fn schedule(&mut self, at: Nanos, e: Event) {
        self.seq += 1;
        self.events.push(Reverse((at, self.seq, e)));
    }

    fn with_app(&mut self, f: FnId, call: impl FnOnce(&mut dyn super::apps::App, &mut AppCx)) {
        let now = self.clock.now();
        let mut timers = Vec::new();
        if let Some(h) = self.fns.get_mut(&f) {
            let mut cx = AppCx::new(&h.ctx, now, &mut h.rng, &mut self.rec, &mut timers);
            call(h.app.as_mut(), &mut cx);
        }
        for (at, token) in timers {
            self.schedule(at, Event::App(f, token));
        }
    }

    /// Runs engines, applications and the gateway until none makes progress
    /// at the current instant.
    fn settle(&mut self) {
        let now = self.clock.now();
        loop {
            let mut progressed = false;
            for e in self.engines.values_mut() {
                progressed |= e.iterate().did_work();
            }
            let ids: Vec<FnId> = self.fns.keys().copied().collect();
            for f in ids {
                loop {
                    let Some(d) = self.fns[&f].ctx.io_recv(crate::ipc::Wait::Poll) else { break };
                    progressed = true;
                    self.with_app(f, |app, cx| app.on_message(cx, d));
                }
            }
            if let Some(mut h) = self.http.take() {
                let mut ev = Vec::new();
                progressed |= h.take_replies(now, &mut ev);
                self.http = Some(h);
                for (at, e) in ev {
                    self.schedule(at, e);
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn fire(&mut self, e: Event) {
        let now = self.clock.now();
        match e {
            Event::App(f, token) => self.with_app(f, |app, cx| app.on_timer(cx, token)),
            Event::Window(w) => {
                self.workers.push(self.http.as_ref().map_or(0, |h| h.gw.live_workers()));
                if self.tracer.is_some() {
                    for e in self.engines.values() {
                        self.engine_log.push(serde_json::to_string(&e.metrics()).expect("metrics serialize"));
                    }
                }
                let next = (w + 2) * self.cfg.window_ns();
                if next <= self.cfg.duration_ns() {
                    self.schedule(next, Event::Window(w + 1));
                }
            }
            Event::Autoscale => {
                let h = self.http.as_mut().expect("autoscale needs ingress");
                h.gw.autoscale_tick(now);
                let period = h.spec.gateway.autoscaler.window_ns;
                if now + period <= self.cfg.duration_ns() {
                    self.schedule(now + period, Event::Autoscale);
                }
            }
            Event::PhaseStart(_)
            | Event::PhaseStop(_)
            | Event::Think(_)
            | Event::Dispatch(_)
            | Event::Deliver(_)
            | Event::Closed(_) => {
                let mut h = self.http.take().expect("http events need ingress");
                let mut ev = Vec::new();
                match e {
                    Event::PhaseStart(j) => {
                        for _ in 0..h.spec.load.phases[j].connections {
                            h.open(j, now, &mut self.rec, &self.graph, &mut ev);
                        }
                    }
                    Event::PhaseStop(j) => h.stop_phase(j),
                    Event::Dispatch(conn) => h.dispatch(conn, now, &mut self.rec, &self.graph, &mut ev),
                    Event::Deliver(key) => h.deliver(key, now, &mut self.rec, &self.graph, &mut ev),
                    Event::Closed(conn) => h.on_closed(conn, now, &mut self.rec, &self.graph, &mut ev),
                    Event::Think(conn) => {
                        let live = h.conns.get(&conn).map(|c| (c.closing, c.phase));
                        match live {
                            Some((false, p)) if h.phase_live(p, now) => h.send(conn, now, &mut self.rec, &self.graph, &mut ev),
                            Some(_) => {
                                h.conns.remove(&conn);
                                h.gw.close_connection(conn);
                            }
                            None => {}
                        }
                    }
                    _ => unreachable!(),
                }
                self.http = Some(h);
                for (at, e) in ev {
                    self.schedule(at, e);
                }
            }
        }
    }

    pub fn run(mut self) -> Result<RunState, HarnessError> {
        let end = self.cfg.duration_ns();
        let hard_end = end + secs(self.cfg.drain_s);
        let ids: Vec<FnId> = self.fns.keys().copied().collect();
        for f in ids {
            self.with_app(f, |app, cx| app.start(cx));
        }
        if self.cfg.window_ns() <= end {
            self.schedule(self.cfg.window_ns(), Event::Window(0));
        }
        if let Some(h) = &self.http {
            let period = h.spec.gateway.autoscaler.window_ns;
            let phases: Vec<(Nanos, Nanos)> =
                h.spec.load.phases.iter().map(|p| (secs(p.start_s), secs(p.stop_s))).collect();
            if period <= end {
                self.schedule(period, Event::Autoscale);
            }
            for (j, (a, b)) in phases.into_iter().enumerate() {
                if a < end {
                    self.schedule(a, Event::PhaseStart(j));
                    self.schedule(b.min(end), Event::PhaseStop(j));
                }
            }
        }
        let mut drained = false;
        loop {
            self.settle();
            let now = self.clock.now();
            let next = [
                self.net.next_event(now),
                self.events.peek().map(|Reverse((t, _, _))| *t),
            ]
            .into_iter()
            .chain(self.engines.values().map(|e| e.next_deadline()))
            .flatten()
            .min();
            let Some(next) = next else {
                drained = true;
                break;
            };
            if next > hard_end {
                break;
            }
            if next > now {
                self.clock.advance_to(next);
            }
            let t = self.clock.now();
            let mut fired = false;
            while self.events.peek().is_some_and(|Reverse((at, _, _))| *at <= t) {
                let Reverse((_, _, e)) = self.events.pop().unwrap();
                self.fire(e);
                fired = true;
            }
            if !fired && next <= now {
                // A deadline that is due but produced no work: step past it.
                self.clock.advance_to(now + 1);
            }
        }
        let outstanding: usize = self.fns.values().map(|h| h.app.outstanding()).sum::<usize>()
            + self.http.as_ref().map_or(0, |h| h.gw.in_flight());
        let quiescent = self.engines.values().all(|e| e.is_quiescent());
        let trace = self.tracer.as_ref().map(|t| {
            let mut buf = Vec::new();
            t.write_jsonl(&mut buf).expect("in-memory write");
            String::from_utf8(buf).expect("json is utf-8")
        });
        let dead_letters = self.engines.values().map(|e| e.dead_letters().len() as u64).sum();
        let http = self.http.map(|h| super::HttpOutcome {
            stats: h.gw.stats(),
            statuses: h.statuses,
            aborted: h.aborted,
            autoscale: h.gw.autoscale_log().to_vec(),
        });
        Ok(RunState {
            rec: self.rec,
            counters: self.dep.counters.snapshot(),
            pools: self.dep.dir.all(),
            drained: drained && quiescent,
            outstanding,
            dead_letters,
            end_time: self.clock.now(),
            workers: self.workers,
            engine_log: self.engine_log,
            trace,
            http,
        })
    }
}
