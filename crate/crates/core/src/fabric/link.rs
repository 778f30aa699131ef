//! Link backends move frames between node fabrics.
//!
//! The simulation backend models each directed node pair as a FIFO wire with
//! a serialization cost of `per_byte_ns` per byte and a propagation delay of
//! `base_latency_ns`, driven by a shared virtual clock. Frames without bulk
//! data (acks, atomics) only pay the propagation delay.

use super::frame::Frame;
use crate::ids::{Nanos, NodeId};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkParams {
    pub base_latency_ns: Nanos,
    pub per_byte_ns: f64,
    /// Frames that may wait for serialization on one directed link before
    /// the sender sees back-pressure.
    pub tx_depth: usize,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            base_latency_ns: 2_000,
            per_byte_ns: 5.0,
            tx_depth: 4,
        }
    }
}

impl LinkParams {
    pub fn serialization_ns(&self, bytes: usize) -> Nanos {
        (self.per_byte_ns * bytes as f64).round() as Nanos
    }
}

pub trait LinkBackend: Send {
    /// Hands `frame` to the wire. Returns the time at which the frame has
    /// left the sender (end of serialization).
    fn transmit(&mut self, frame: Frame, now: Nanos) -> Nanos;

    /// How many more bulk frames toward `to` can be queued without waiting.
    fn credit(&mut self, to: NodeId, now: Nanos) -> usize;

    /// Next frame addressed to this node that has arrived by `now`.
    fn receive(&mut self, now: Nanos) -> Option<Frame>;

    fn peers(&self) -> Vec<NodeId>;
}

#[derive(Debug, Default)]
struct WireState {
    busy_until: Nanos,
    /// Serialization end times of frames not yet fully sent.
    queued_ends: VecDeque<Nanos>,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct InFlight {
    arrival: Nanos,
    seq: u64,
}

#[derive(Debug, Default)]
struct NetworkInner {
    params: LinkParams,
    nodes: Vec<NodeId>,
    wires: BTreeMap<(NodeId, NodeId), WireState>,
    inboxes: BTreeMap<NodeId, BinaryHeap<Reverse<InFlight>>>,
    frames: BTreeMap<u64, Frame>,
    next_seq: u64,
    transmitted: u64,
}

/// Shared state of the simulated network. Clone to hand out ports.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    inner: Arc<Mutex<NetworkInner>>,
}

impl SimNetwork {
    pub fn new(nodes: &[NodeId], params: LinkParams) -> Self {
        let inner = NetworkInner {
            params,
            nodes: nodes.to_vec(),
            inboxes: nodes.iter().map(|n| (*n, BinaryHeap::new())).collect(),
            ..Default::default()
        };
        Self {
            inner: Arc::new(Mutex::new(inner)),
        }
    }

    pub fn port(&self, node: NodeId) -> SimPort {
        SimPort {
            node,
            net: self.clone(),
        }
    }

    pub fn params(&self) -> LinkParams {
        self.inner.lock().params
    }

    /// Earliest future instant at which something observable happens: a
    /// frame arrival or a wire freeing up.
    pub fn next_event(&self, now: Nanos) -> Option<Nanos> {
        let inner = self.inner.lock();
        let arrivals = inner
            .inboxes
            .values()
            .filter_map(|h| h.peek().map(|Reverse(f)| f.arrival));
        let frees = inner
            .wires
            .values()
            .filter_map(|w| w.queued_ends.iter().find(|t| **t > now).copied());
        arrivals.chain(frees).min()
    }

    /// Frames handed to the wire so far.
    pub fn transmitted(&self) -> u64 {
        self.inner.lock().transmitted
    }

    pub fn in_flight(&self) -> usize {
        self.inner.lock().frames.len()
    }
}

pub struct SimPort {
    node: NodeId,
    net: SimNetwork,
}

impl LinkBackend for SimPort {
    fn transmit(&mut self, frame: Frame, now: Nanos) -> Nanos {
        let mut inner = self.net.inner.lock();
        let params = inner.params;
        let dst = frame.dst;
        let (left_at, arrival) = if frame.is_control() {
            (now, now + params.base_latency_ns)
        } else {
            let ser = params.serialization_ns(frame.wire_len());
            let wire = inner.wires.entry((self.node, dst)).or_default();
            let start = wire.busy_until.max(now);
            let end = start + ser;
            wire.busy_until = end;
            wire.queued_ends.push_back(end);
            (end, end + params.base_latency_ns)
        };
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.transmitted += 1;
        inner.frames.insert(seq, frame);
        inner
            .inboxes
            .entry(dst)
            .or_default()
            .push(Reverse(InFlight { arrival, seq }));
        left_at
    }

    fn credit(&mut self, to: NodeId, now: Nanos) -> usize {
        let mut inner = self.net.inner.lock();
        let depth = inner.params.tx_depth;
        let wire = inner.wires.entry((self.node, to)).or_default();
        while wire.queued_ends.front().is_some_and(|t| *t <= now) {
            wire.queued_ends.pop_front();
        }
        depth.saturating_sub(wire.queued_ends.len())
    }

    fn receive(&mut self, now: Nanos) -> Option<Frame> {
        let mut inner = self.net.inner.lock();
        let inbox = inner.inboxes.get_mut(&self.node)?;
        match inbox.peek() {
            Some(Reverse(f)) if f.arrival <= now => {
                let Reverse(f) = inbox.pop().unwrap();
                inner.frames.remove(&f.seq)
            }
            _ => None,
        }
    }

    fn peers(&self) -> Vec<NodeId> {
        let inner = self.net.inner.lock();
        inner.nodes.iter().copied().filter(|n| *n != self.node).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::frame::FrameKind;
    use super::*;
    use crate::ids::{TenantId, WrId};

    fn write_frame(len: usize) -> Frame {
        Frame {
            src: NodeId(0),
            dst: NodeId(1),
            wr_id: WrId(0),
            tenant: TenantId(1),
            kind: FrameKind::Write {
                region: 0,
                offset: 0,
                payload: vec![0; len],
            },
        }
    }

    #[test]
    fn serialization_queues_fifo_and_limits_credit() {
        let params = LinkParams {
            base_latency_ns: 100,
            per_byte_ns: 1.0,
            tx_depth: 2,
        };
        let net = SimNetwork::new(&[NodeId(0), NodeId(1)], params);
        let mut a = net.port(NodeId(0));
        let mut b = net.port(NodeId(1));
        let f = write_frame(72); // 16 header + 12 region/offset + 72 = 100 bytes
        assert_eq!(f.wire_len(), 100);
        assert_eq!(a.transmit(f.clone(), 0), 100);
        assert_eq!(a.transmit(f, 0), 200);
        assert_eq!(a.credit(NodeId(1), 0), 0);
        assert_eq!(a.credit(NodeId(1), 100), 1);
        assert_eq!(net.next_event(100), Some(200));
        assert!(b.receive(199).is_none());
        assert!(b.receive(200).is_some());
        assert!(b.receive(299).is_none());
        assert!(b.receive(300).is_some());
        assert_eq!(a.peers(), vec![NodeId(1)]);
    }

    #[test]
    fn control_frames_skip_serialization() {
        let net = SimNetwork::new(&[NodeId(0), NodeId(1)], LinkParams::default());
        let mut a = net.port(NodeId(0));
        a.transmit(write_frame(10_000), 0);
        let ack = Frame {
            kind: FrameKind::Hello,
            ..write_frame(0)
        };
        assert_eq!(a.transmit(ack, 0), 0);
        let mut b = net.port(NodeId(1));
        let first = b.receive(2_000).unwrap();
        assert!(matches!(first.kind, FrameKind::Hello));
    }
}
