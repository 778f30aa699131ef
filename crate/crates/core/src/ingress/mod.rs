//! Cluster-edge gateway.
//!
//! External HTTP requests are terminated here and converted into fabric
//! buffers addressed to a frontend function: the body is copied once into
//! a pooled buffer behind an 8-byte request id, then only the descriptor
//! moves. Responses come back to the gateway's function endpoint, are
//! matched to their connection by request id, and the body is copied once
//! into the HTTP response.
//!
//! Connections are spread over workers by hashing the 4-tuple and stay
//! pinned to the worker that first saw them. An autoscaler adds a worker
//! when average utilization reaches 60% and retires one below 30%.

pub mod http;
mod server;

pub use http::{parse_request, parse_response, write_request, write_response, HttpError, Method, Request};
pub use server::{serve, ServerHandle};

use crate::counters::{CopySite, Counters};
use crate::ids::{FnId, Nanos, NANOS_PER_SEC};
use crate::iolib::{request_id, FunctionContext, REQUEST_HEADER_LEN};
use crate::ipc::Wait;
use crate::mempool::{DescFlags, OwnerRef, PoolError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

pub type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FourTuple {
    pub src_ip: u32,
    pub src_port: u16,
    pub dst_ip: u32,
    pub dst_port: u16,
}

/// FNV-1a over the tuple bytes, finished with the murmur3 64-bit mixer so
/// the low bits used for worker selection depend on every input byte.
pub fn rss_hash(t: &FourTuple) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = t
        .src_ip
        .to_be_bytes()
        .into_iter()
        .chain(t.src_port.to_be_bytes())
        .chain(t.dst_ip.to_be_bytes())
        .chain(t.dst_port.to_be_bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

/// Maps new connections onto live workers and keeps them pinned.
#[derive(Debug, Clone, Default)]
pub struct Dispatcher {
    live: Vec<u16>,
    pinned: HashMap<ConnId, u16>,
}

impl Dispatcher {
    pub fn new(workers: impl IntoIterator<Item = u16>) -> Self {
        let mut live: Vec<u16> = workers.into_iter().collect();
        live.sort_unstable();
        Dispatcher {
            live,
            pinned: HashMap::new(),
        }
    }

    pub fn live(&self) -> &[u16] {
        &self.live
    }

    pub fn add_worker(&mut self, w: u16) {
        if let Err(i) = self.live.binary_search(&w) {
            self.live.insert(i, w);
        }
    }

    /// Stops sending new connections to `w`. Pinned ones stay.
    pub fn remove_worker(&mut self, w: u16) {
        self.live.retain(|x| *x != w);
    }

    pub fn dispatch(&mut self, conn: ConnId, tuple: &FourTuple) -> u16 {
        if let Some(w) = self.pinned.get(&conn) {
            return *w;
        }
        assert!(!self.live.is_empty(), "dispatch needs a live worker");
        let w = self.live[(rss_hash(tuple) % self.live.len() as u64) as usize];
        self.pinned.insert(conn, w);
        w
    }

    pub fn worker_of(&self, conn: ConnId) -> Option<u16> {
        self.pinned.get(&conn).copied()
    }

    pub fn release(&mut self, conn: ConnId) {
        self.pinned.remove(&conn);
    }

    pub fn connections_of(&self, w: u16) -> Vec<ConnId> {
        let mut v: Vec<ConnId> = self.pinned.iter().filter(|(_, x)| **x == w).map(|(c, _)| *c).collect();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoscalerConfig {
    pub min_workers: usize,
    pub max_workers: usize,
    pub initial_workers: usize,
    pub window_ns: Nanos,
    pub up_threshold: f64,
    pub down_threshold: f64,
}

impl Default for AutoscalerConfig {
    fn default() -> Self {
        AutoscalerConfig {
            min_workers: 1,
            max_workers: 8,
            initial_workers: 1,
            window_ns: NANOS_PER_SEC,
            up_threshold: 0.60,
            down_threshold: 0.30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleAction {
    None,
    Spawn,
    Retire,
}

/// Hysteresis policy: one worker up at or above the upper threshold, one
/// down strictly below the lower one, nothing in between.
#[derive(Debug, Clone)]
pub struct Autoscaler {
    cfg: AutoscalerConfig,
    workers: usize,
}

impl Autoscaler {
    pub fn new(cfg: AutoscalerConfig) -> Self {
        let workers = cfg.initial_workers.clamp(cfg.min_workers.max(1), cfg.max_workers.max(1));
        Autoscaler { cfg, workers }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn config(&self) -> &AutoscalerConfig {
        &self.cfg
    }

    pub fn decide(&self, avg_utilization: f64) -> ScaleAction {
        if avg_utilization >= self.cfg.up_threshold && self.workers < self.cfg.max_workers {
            ScaleAction::Spawn
        } else if avg_utilization < self.cfg.down_threshold && self.workers > self.cfg.min_workers.max(1) {
            ScaleAction::Retire
        } else {
            ScaleAction::None
        }
    }

    pub fn tick(&mut self, avg_utilization: f64) -> ScaleAction {
        let a = self.decide(avg_utilization);
        match a {
            ScaleAction::Spawn => self.workers += 1,
            ScaleAction::Retire => self.workers -= 1,
            ScaleAction::None => {}
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngressConfig {
    /// Function id of the gateway's own endpoint.
    pub fn_id: FnId,
    /// Request path to frontend function.
    pub routes: BTreeMap<String, FnId>,
    pub autoscaler: AutoscalerConfig,
    /// Busy time charged per request and per response in virtual time.
    pub request_cost_ns: Nanos,
    pub response_cost_ns: Nanos,
    pub abrupt_retire: bool,
}

impl Default for IngressConfig {
    fn default() -> Self {
        IngressConfig {
            fn_id: FnId(0),
            routes: BTreeMap::new(),
            autoscaler: AutoscalerConfig::default(),
            request_cost_ns: 20_000,
            response_cost_ns: 10_000,
            abrupt_retire: false,
        }
    }
}

/// One autoscaler metrics line.
#[derive(Debug, Clone, Serialize)]
pub struct AutoscaleRecord {
    pub time: f64,
    pub worker_count: usize,
    pub avg_utilization: f64,
    pub rps: f64,
    pub action: ScaleAction,
}

/// Bytes for the transport to write on a connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub conn: ConnId,
    pub status: u16,
    pub bytes: Vec<u8>,
    /// Close the connection after writing.
    pub close: bool,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    conn: ConnId,
    keep_alive: bool,
}

#[derive(Debug, Default)]
struct Worker {
    busy_ns: Nanos,
    next_seq: u64,
    entries: HashMap<u64, Entry>,
    retiring: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngressStats {
    pub connections_opened: u64,
    pub requests: u64,
    pub rejected: u64,
    pub entries_created: u64,
    pub responses_written: u64,
    pub stale_responses: u64,
    pub pinning_violations: u64,
    pub spawned: u64,
    pub retired: u64,
    pub max_workers: usize,
}

pub struct Gateway {
    cfg: IngressConfig,
    ctx: FunctionContext,
    counters: Arc<Counters>,
    workers: BTreeMap<u16, Worker>,
    next_worker: u16,
    dispatcher: Dispatcher,
    autoscaler: Autoscaler,
    open: BTreeSet<ConnId>,
    /// First worker ever assigned to each connection, for the pinning check.
    history: HashMap<ConnId, u16>,
    to_close: Vec<ConnId>,
    window_requests: u64,
    log: Vec<AutoscaleRecord>,
    stats: IngressStats,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("workers", &self.workers.keys().collect::<Vec<_>>())
            .field("open", &self.open.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Gateway {
    pub fn new(cfg: IngressConfig, ctx: FunctionContext) -> Self {
        let counters = ctx.pool().counters().clone();
        let autoscaler = Autoscaler::new(cfg.autoscaler);
        let mut g = Gateway {
            cfg,
            ctx,
            counters,
            workers: BTreeMap::new(),
            next_worker: 0,
            dispatcher: Dispatcher::default(),
            autoscaler,
            open: BTreeSet::new(),
            history: HashMap::new(),
            to_close: Vec::new(),
            window_requests: 0,
            log: Vec::new(),
            stats: IngressStats::default(),
        };
        for _ in 0..g.autoscaler.workers() {
            g.spawn_worker();
        }
        g
    }

    fn spawn_worker(&mut self) -> u16 {
        let w = self.next_worker;
        self.next_worker += 1;
        self.ctx.pool().admit(OwnerRef::IngressWorker(w));
        self.workers.insert(w, Worker::default());
        self.dispatcher.add_worker(w);
        self.stats.max_workers = self.stats.max_workers.max(self.live_workers());
        w
    }

    pub fn config(&self) -> &IngressConfig {
        &self.cfg
    }

    pub fn stats(&self) -> IngressStats {
        self.stats
    }

    pub fn live_workers(&self) -> usize {
        self.dispatcher.live().len()
    }

    pub fn worker_ids(&self) -> Vec<u16> {
        self.workers.keys().copied().collect()
    }

    pub fn in_flight(&self) -> usize {
        self.workers.values().map(|w| w.entries.len()).sum()
    }

    pub fn autoscale_log(&self) -> &[AutoscaleRecord] {
        &self.log
    }

    pub fn context(&self) -> &FunctionContext {
        &self.ctx
    }

    pub fn worker_of(&self, conn: ConnId) -> Option<u16> {
        self.dispatcher.worker_of(conn)
    }

    /// Connections the transport must close, e.g. after a retirement.
    pub fn take_closed(&mut self) -> Vec<ConnId> {
        std::mem::take(&mut self.to_close)
    }

    pub fn open_connection(&mut self, conn: ConnId, tuple: &FourTuple) -> u16 {
        self.open.insert(conn);
        self.stats.connections_opened += 1;
        let w = self.dispatcher.dispatch(conn, tuple);
        if *self.history.entry(conn).or_insert(w) != w {
            self.stats.pinning_violations += 1;
        }
        w
    }

    pub fn close_connection(&mut self, conn: ConnId) {
        self.open.remove(&conn);
        self.dispatcher.release(conn);
    }

    /// Adds measured busy time (socket mode).
    pub fn charge(&mut self, worker: u16, ns: Nanos) {
        if let Some(w) = self.workers.get_mut(&worker) {
            w.busy_ns += ns;
        }
    }

    fn reject(status: u16, reason: &str, keep_alive: bool) -> (u16, Vec<u8>, bool) {
        (status, reason.as_bytes().to_vec(), keep_alive)
    }

    /// Converts one parsed request into a fabric message. On rejection the
    /// returned reply must be written by the transport.
    pub fn handle_request(&mut self, conn: ConnId, req: &Request) -> Result<u64, HttpReply> {
        self.stats.requests += 1;
        self.window_requests += 1;
        let Some(w) = self.dispatcher.worker_of(conn) else {
            return Err(self.reply_err(conn, Self::reject(400, "connection not open", false)));
        };
        let cost = self.cfg.request_cost_ns;
        self.charge(w, cost);
        let Some(&dst) = self.cfg.routes.get(&req.path) else {
            return Err(self.reply_err(conn, Self::reject(404, "no such path", req.keep_alive)));
        };
        let pool = self.ctx.pool().clone();
        let max_body = pool.buffer_size() as usize - REQUEST_HEADER_LEN;
        if req.body.len() > max_body {
            return Err(self.reply_err(conn, Self::reject(400, "body exceeds buffer size", req.keep_alive)));
        }
        let me = OwnerRef::IngressWorker(w);
        let mut desc = match pool.alloc(me) {
            Ok(d) => d,
            Err(PoolError::PoolExhausted(_)) => {
                return Err(self.reply_err(conn, Self::reject(503, "pool exhausted", req.keep_alive)))
            }
            Err(_) => return Err(self.reply_err(conn, Self::reject(503, "pool unavailable", req.keep_alive))),
        };
        let rid = {
            let worker = self.workers.get_mut(&w).expect("pinned worker exists");
            worker.next_seq += 1;
            ((w as u64) << 48) | (worker.next_seq - 1)
        };
        pool.fill(&mut desc, me, REQUEST_HEADER_LEN as u32, |b| b.copy_from_slice(&rid.to_le_bytes()))
            .expect("worker owns the fresh buffer");
        pool.copy_in(&mut desc, me, REQUEST_HEADER_LEN, &req.body, CopySite::IngressIn)
            .expect("body fits the buffer");
        desc.flags = DescFlags::REQUEST;
        pool.transfer(&desc, me, self.ctx.me()).expect("worker owns the buffer");
        // Register before sending so a co-located frontend can answer at once.
        self.workers.get_mut(&w).unwrap().entries.insert(
            rid,
            Entry {
                conn,
                keep_alive: req.keep_alive,
            },
        );
        if let Err(e) = self.ctx.io_send(desc, dst) {
            self.workers.get_mut(&w).unwrap().entries.remove(&rid);
            let _ = pool.free(&desc, self.ctx.me());
            let reason = format!("frontend unreachable: {e}");
            return Err(self.reply_err(conn, Self::reject(503, &reason, req.keep_alive)));
        }
        self.stats.entries_created += 1;
        Ok(rid)
    }

    fn reply_err(&mut self, conn: ConnId, (status, body, keep_alive): (u16, Vec<u8>, bool)) -> HttpReply {
        self.stats.rejected += 1;
        HttpReply {
            conn,
            status,
            bytes: write_response(status, &body, keep_alive),
            close: !keep_alive,
        }
    }

    /// Drains responses from the gateway endpoint and renders them.
    pub fn poll_responses(&mut self) -> Vec<HttpReply> {
        let mut out = Vec::new();
        let pool = self.ctx.pool().clone();
        while let Some(desc) = self.ctx.io_recv(Wait::Poll) {
            let rid = pool
                .read(&desc, self.ctx.me(), request_id)
                .ok()
                .flatten()
                .filter(|_| desc.flags.contains(DescFlags::RESPONSE));
            let worker = rid.map(|r| (r >> 48) as u16).filter(|w| self.workers.contains_key(w));
            let (Some(rid), Some(w)) = (rid, worker) else {
                self.stale(&desc, self.ctx.me());
                continue;
            };
            let me = OwnerRef::IngressWorker(w);
            pool.transfer(&desc, self.ctx.me(), me).expect("gateway owns delivered buffers");
            let cost = self.cfg.response_cost_ns;
            let wk = self.workers.get_mut(&w).unwrap();
            wk.busy_ns += cost;
            let entry = wk.entries.remove(&rid);
            let retiring = wk.retiring;
            match entry {
                Some(e) if self.open.contains(&e.conn) => {
                    let mut body = Vec::with_capacity(desc.len as usize);
                    pool.copy_out(&desc, me, REQUEST_HEADER_LEN, &mut body, CopySite::IngressOut)
                        .expect("worker owns the response");
                    pool.free(&desc, me).expect("worker owns the response");
                    let close = !e.keep_alive || retiring;
                    out.push(HttpReply {
                        conn: e.conn,
                        status: 200,
                        bytes: write_response(200, &body, !close),
                        close,
                    });
                    self.stats.responses_written += 1;
                    if close {
                        self.close_connection(e.conn);
                    }
                }
                _ => self.stale(&desc, me),
            }
            self.finish_retirement(w);
        }
        out
    }

    fn stale(&mut self, desc: &crate::mempool::BufferDescriptor, holder: OwnerRef) {
        Counters::bump(&self.counters.stale_responses);
        self.stats.stale_responses += 1;
        let _ = self.ctx.pool().free(desc, holder);
    }

    fn finish_retirement(&mut self, w: u16) {
        let done = self.workers.get(&w).is_some_and(|wk| wk.retiring && wk.entries.is_empty());
        if done {
            self.workers.remove(&w);
            for c in self.dispatcher.connections_of(w) {
                self.close_connection(c);
                self.to_close.push(c);
            }
        }
    }

    /// Samples utilization over the elapsed window and applies one scaling
    /// step. `now` only labels the metrics line.
    pub fn autoscale_tick(&mut self, now: Nanos) -> ScaleAction {
        let window = self.cfg.autoscaler.window_ns.max(1);
        let live: Vec<u16> = self.dispatcher.live().to_vec();
        let avg = if live.is_empty() {
            0.0
        } else {
            live.iter()
                .map(|w| (self.workers[w].busy_ns as f64 / window as f64).min(1.0))
                .sum::<f64>()
                / live.len() as f64
        };
        for wk in self.workers.values_mut() {
            wk.busy_ns = 0;
        }
        let action = self.autoscaler.tick(avg);
        match action {
            ScaleAction::Spawn => {
                self.spawn_worker();
                self.stats.spawned += 1;
            }
            ScaleAction::Retire => {
                let w = *live.last().expect("retire keeps at least one worker");
                self.dispatcher.remove_worker(w);
                self.stats.retired += 1;
                if self.cfg.abrupt_retire {
                    // In-flight requests are abandoned; their responses
                    // will arrive stale.
                    self.workers.get_mut(&w).unwrap().entries.clear();
                }
                self.workers.get_mut(&w).unwrap().retiring = true;
                self.finish_retirement(w);
            }
            ScaleAction::None => {}
        }
        self.log.push(AutoscaleRecord {
            time: now as f64 / NANOS_PER_SEC as f64,
            worker_count: self.live_workers(),
            avg_utilization: avg,
            rps: self.window_requests as f64 * NANOS_PER_SEC as f64 / window as f64,
            action,
        });
        self.window_requests = 0;
        action
    }
}
