//! TCP link backend. Each node keeps one stream per peer; a reader thread per
//! stream decodes frames into a channel that the engine loop drains.

use super::frame::{Frame, FrameKind};
use super::link::LinkBackend;
use crate::ids::{Nanos, NodeId, TenantId, WrId};
use crossbeam_channel::{unbounded, Receiver, Sender};
use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

/// Credit reported by the socket backend; the kernel provides back-pressure.
const SOCKET_CREDIT: usize = 1024;

pub struct SocketPort {
    node: NodeId,
    writers: BTreeMap<NodeId, BufWriter<TcpStream>>,
    inbox: Receiver<Frame>,
}

fn spawn_reader(stream: TcpStream, src: NodeId, dst: NodeId, tx: Sender<Frame>) {
    thread::Builder::new()
        .name(format!("link-{src}-{dst}"))
        .spawn(move || {
            let mut r = BufReader::new(stream);
            while let Ok(Some(frame)) = Frame::read_from(&mut r, src, dst) {
                if matches!(frame.kind, FrameKind::Hello) {
                    continue;
                }
                if tx.send(frame).is_err() {
                    break;
                }
            }
        })
        .expect("spawn link reader");
}

fn hello(node: NodeId) -> Frame {
    Frame {
        src: node,
        dst: node,
        wr_id: WrId(0),
        tenant: TenantId(node.0),
        kind: FrameKind::Hello,
    }
}

impl SocketPort {
    /// Wraps already-connected streams, one per peer.
    pub fn from_streams(node: NodeId, streams: BTreeMap<NodeId, TcpStream>) -> io::Result<Self> {
        let (tx, rx) = unbounded();
        let mut writers = BTreeMap::new();
        for (peer, stream) in streams {
            stream.set_nodelay(true)?;
            spawn_reader(stream.try_clone()?, peer, node, tx.clone());
            writers.insert(peer, BufWriter::new(stream));
        }
        Ok(Self {
            node,
            writers,
            inbox: rx,
        })
    }

    /// Builds a full mesh of loopback TCP connections between `nodes`.
    /// Every pair exchanges a hello frame carrying the connecting node's id.
    pub fn local_mesh(nodes: &[NodeId]) -> io::Result<Vec<SocketPort>> {
        let listeners: Vec<TcpListener> = nodes
            .iter()
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<io::Result<_>>()?;
        let mut streams: Vec<BTreeMap<NodeId, TcpStream>> = nodes.iter().map(|_| BTreeMap::new()).collect();
        for i in 0..nodes.len() {
            for j in (i + 1)..nodes.len() {
                let mut out = TcpStream::connect(listeners[j].local_addr()?)?;
                hello(nodes[i]).write_to(&mut out)?;
                let (mut inc, _) = listeners[j].accept()?;
                let greeting = Frame::read_from(&mut inc, nodes[i], nodes[j])
                    .map_err(|e| io::Error::other(e.to_string()))?;
                match greeting {
                    Some(f) if f.tenant.0 == nodes[i].0 => {}
                    _ => return Err(io::Error::other("bad hello")),
                }
                streams[i].insert(nodes[j], out);
                streams[j].insert(nodes[i], inc);
            }
        }
        nodes
            .iter()
            .zip(streams)
            .map(|(n, s)| SocketPort::from_streams(*n, s))
            .collect()
    }
}

impl LinkBackend for SocketPort {
    fn transmit(&mut self, frame: Frame, now: Nanos) -> Nanos {
        if let Some(w) = self.writers.get_mut(&frame.dst) {
            // A broken peer shows up as missing completions; the engine's
            // accounting reports it at drain time.
            let _ = frame.write_to(w).and_then(|_| w.flush());
        }
        now
    }

    fn credit(&mut self, to: NodeId, _now: Nanos) -> usize {
        if self.writers.contains_key(&to) {
            SOCKET_CREDIT
        } else {
            0
        }
    }

    fn receive(&mut self, _now: Nanos) -> Option<Frame> {
        self.inbox.try_recv().ok()
    }

    fn peers(&self) -> Vec<NodeId> {
        self.writers.keys().copied().filter(|n| *n != self.node).collect()
    }
}
