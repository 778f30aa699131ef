//! Workload applications hosted on function endpoints.

use super::manifest::{AppSpec, ClientSpec, Load, ScenarioConfig};
use super::metrics::Recorder;
use crate::ids::{FnId, Nanos, NANOS_PER_SEC};
use crate::iolib::{request_id, FunctionContext, REQUEST_HEADER_LEN};
use crate::mempool::{BufferDescriptor, DescFlags};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// What an application sees while handling one event.
pub struct AppCx<'a> {
    pub ctx: &'a FunctionContext,
    pub now: Nanos,
    pub rng: &'a mut ChaCha8Rng,
    pub rec: &'a mut Recorder,
    timers: &'a mut Vec<(Nanos, u64)>,
}

impl<'a> AppCx<'a> {
    pub fn new(
        ctx: &'a FunctionContext,
        now: Nanos,
        rng: &'a mut ChaCha8Rng,
        rec: &'a mut Recorder,
        timers: &'a mut Vec<(Nanos, u64)>,
    ) -> Self {
        AppCx {
            ctx,
            now,
            rng,
            rec,
            timers,
        }
    }

    pub fn set_timer(&mut self, at: Nanos, token: u64) {
        self.timers.push((at, token));
    }

    /// Sends or, if the hand-off fails, frees the buffer and counts it.
    fn send(&mut self, desc: BufferDescriptor, dst: FnId) -> bool {
        match self.ctx.io_send(desc, dst) {
            Ok(()) => true,
            Err(_) => {
                self.rec.send_failures += 1;
                let _ = self.ctx.io_put_buffer(&desc);
                false
            }
        }
    }
}

pub trait App: Send {
    fn start(&mut self, _cx: &mut AppCx) {}
    fn on_message(&mut self, cx: &mut AppCx, desc: BufferDescriptor);
    fn on_timer(&mut self, _cx: &mut AppCx, _token: u64) {}
    /// Requests still waiting for a response.
    fn outstanding(&self) -> usize {
        0
    }
}

/// In-place transform applied by a chain function to the request body.
pub fn transform(f: FnId, body: &mut [u8]) {
    let k = (f.0 as u8) ^ ((f.0 >> 8) as u8);
    for b in body {
        *b = b.rotate_left(1) ^ k;
    }
}

/// Static call graph of the deployed functions, used both by chain
/// functions and, independently, to compute expected responses.
#[derive(Debug, Clone, Default)]
pub struct CallGraph {
    calls: BTreeMap<FnId, Vec<FnId>>,
}

impl CallGraph {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        CallGraph {
            calls: cfg
                .functions
                .iter()
                .filter_map(|f| match &f.app {
                    AppSpec::Chain { calls } => Some((f.id, calls.clone())),
                    _ => None,
                })
                .collect(),
        }
    }

    /// The body a request to `f` comes back with.
    pub fn expected(&self, f: FnId, body: &mut [u8]) {
        if let Some(calls) = self.calls.get(&f) {
            for c in calls {
                self.expected(*c, body);
            }
            transform(f, body);
        }
    }

    /// Descriptor hand-offs one request to `f` causes, counting the
    /// caller's request and the final response.
    pub fn exchanges(&self, f: FnId) -> u64 {
        2 + self.calls.get(&f).map_or(0, |cs| cs.iter().map(|c| self.exchanges(*c)).sum())
    }
}

pub fn payload_byte(rid: u64, i: usize) -> u8 {
    (rid.wrapping_mul(0x9e37_79b9) as usize).wrapping_add(i.wrapping_mul(7)) as u8
}

pub fn make_app(spec: &AppSpec, fn_id: FnId, graph: &Arc<CallGraph>, run_end: Nanos) -> Box<dyn App> {
    match spec {
        AppSpec::Echo => Box::new(Echo),
        AppSpec::Chain { calls } => Box::new(Chain {
            me: fn_id,
            calls: calls.clone(),
            active: HashMap::new(),
        }),
        AppSpec::Client(c) => Box::new(Client::new(fn_id, c.clone(), graph.clone(), run_end)),
    }
}

pub struct Echo;

impl App for Echo {
    fn on_message(&mut self, cx: &mut AppCx, mut desc: BufferDescriptor) {
        if !desc.flags.contains(DescFlags::REQUEST) {
            cx.rec.unexpected += 1;
            let _ = cx.ctx.io_put_buffer(&desc);
            return;
        }
        desc.flags = DescFlags::RESPONSE;
        cx.send(desc, desc.src_fn);
    }
}

pub struct Chain {
    me: FnId,
    calls: Vec<FnId>,
    /// request id -> (caller, index of the call in progress)
    active: HashMap<u64, (FnId, usize)>,
}

impl App for Chain {
    fn on_message(&mut self, cx: &mut AppCx, mut desc: BufferDescriptor) {
        let rid = cx.ctx.pool().read(&desc, cx.ctx.me(), request_id).ok().flatten();
        let Some(rid) = rid else {
            cx.rec.unexpected += 1;
            let _ = cx.ctx.io_put_buffer(&desc);
            return;
        };
        let state = if desc.flags.contains(DescFlags::REQUEST) {
            Some((desc.src_fn, 0))
        } else {
            self.active.remove(&rid).map(|(caller, i)| (caller, i + 1))
        };
        let Some((caller, next)) = state else {
            cx.rec.unexpected += 1;
            let _ = cx.ctx.io_put_buffer(&desc);
            return;
        };
        if let Some(callee) = self.calls.get(next) {
            self.active.insert(rid, (caller, next));
            desc.flags = DescFlags::REQUEST;
            if !cx.send(desc, *callee) {
                self.active.remove(&rid);
            }
            return;
        }
        let me = self.me;
        cx.ctx
            .pool()
            .modify(&desc, cx.ctx.me(), |b| {
                let start = REQUEST_HEADER_LEN.min(b.len());
                transform(me, &mut b[start..])
            })
            .expect("function owns the delivered buffer");
        desc.flags = DescFlags::RESPONSE;
        cx.send(desc, caller);
    }

    fn outstanding(&self) -> usize {
        self.active.len()
    }
}

const START: u64 = 0;
const ARRIVAL: u64 = 1;

pub struct Client {
    me: FnId,
    spec: ClientSpec,
    graph: Arc<CallGraph>,
    start: Nanos,
    stop: Nanos,
    seq: u64,
    issued: u64,
    outstanding: HashMap<u64, Nanos>,
}

impl Client {
    pub fn new(me: FnId, spec: ClientSpec, graph: Arc<CallGraph>, run_end: Nanos) -> Self {
        let start = super::manifest::secs(spec.start_s);
        let stop = spec.stop_s.map_or(run_end, super::manifest::secs).min(run_end);
        Client {
            me,
            spec,
            graph,
            start,
            stop,
            seq: 0,
            issued: 0,
            outstanding: HashMap::new(),
        }
    }

    fn may_issue(&self, now: Nanos) -> bool {
        now >= self.start && now < self.stop && self.spec.requests.is_none_or(|n| self.issued < n)
    }

    fn issue(&mut self, cx: &mut AppCx) {
        if !self.may_issue(cx.now) {
            return;
        }
        let Ok(mut desc) = cx.ctx.io_get_buffer() else {
            cx.rec.send_failures += 1;
            return;
        };
        let rid = ((self.me.0 as u64) << 32) | self.seq;
        self.seq += 1;
        let len = self.spec.message_size;
        cx.ctx
            .pool()
            .fill(&mut desc, cx.ctx.me(), len, |b| {
                b[..REQUEST_HEADER_LEN].copy_from_slice(&rid.to_le_bytes());
                for (i, x) in b[REQUEST_HEADER_LEN..].iter_mut().enumerate() {
                    *x = payload_byte(rid, i);
                }
            })
            .expect("client owns the fresh buffer");
        desc.flags = DescFlags::REQUEST;
        self.issued += 1;
        cx.rec.issued(cx.ctx.tenant());
        if cx.send(desc, self.spec.target) {
            self.outstanding.insert(rid, cx.now);
        }
    }

    fn schedule_arrival(&mut self, cx: &mut AppCx, rate: f64) {
        let u: f64 = cx.rng.gen_range(f64::EPSILON..1.0);
        let gap = (-u.ln() / rate * NANOS_PER_SEC as f64).max(1.0) as Nanos;
        let at = cx.now + gap;
        if at < self.stop {
            cx.set_timer(at, ARRIVAL);
        }
    }
}

impl App for Client {
    fn start(&mut self, cx: &mut AppCx) {
        if self.start < self.stop {
            cx.set_timer(self.start, START);
        }
    }

    fn on_timer(&mut self, cx: &mut AppCx, token: u64) {
        match (token, &self.spec.load) {
            (START, Load::Closed { concurrency }) => {
                for _ in 0..*concurrency {
                    self.issue(cx);
                }
            }
            (START, Load::Open { rate }) => {
                let rate = *rate;
                self.issue(cx);
                self.schedule_arrival(cx, rate);
            }
            (ARRIVAL, Load::Open { rate }) => {
                let rate = *rate;
                self.issue(cx);
                self.schedule_arrival(cx, rate);
            }
            _ => {}
        }
    }

    fn on_message(&mut self, cx: &mut AppCx, desc: BufferDescriptor) {
        let me = cx.ctx.me();
        let pool = cx.ctx.pool().clone();
        let checked = pool
            .read(&desc, me, |b| {
                let rid = request_id(b)?;
                let body = &b[REQUEST_HEADER_LEN..];
                let mut want: Vec<u8> = (0..body.len()).map(|i| payload_byte(rid, i)).collect();
                self.graph.expected(self.spec.target, &mut want);
                let digest = self.spec.digest.then(|| {
                    let mut h = Sha256::new();
                    h.update(b);
                    <[u8; 32]>::from(h.finalize())
                });
                Some((rid, want == body, digest))
            })
            .ok()
            .flatten();
        let _ = cx.ctx.io_put_buffer(&desc);
        let Some((rid, ok, digest)) = checked else {
            cx.rec.unexpected += 1;
            return;
        };
        let Some(sent) = self.outstanding.remove(&rid) else {
            cx.rec.unexpected += 1;
            return;
        };
        if !ok || !desc.flags.contains(DescFlags::RESPONSE) || desc.len != self.spec.message_size {
            cx.rec.mismatches += 1;
        }
        cx.rec.complete(cx.ctx.tenant(), cx.now, desc.len as u64, cx.now - sent);
        if let Some(d) = digest {
            cx.rec.digests.insert((self.me, rid), d);
        }
        if matches!(self.spec.load, Load::Closed { .. }) {
            self.issue(cx);
        }
    }

    fn outstanding(&self) -> usize {
        self.outstanding.len()
    }
}
