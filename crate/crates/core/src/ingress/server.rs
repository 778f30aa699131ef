//! TCP front end for a [`Gateway`]: one reader thread per connection, one
//! responder thread draining the gateway endpoint, one autoscaler thread.

use super::{parse_request, write_response, ConnId, FourTuple, Gateway};
use parking_lot::Mutex;
use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

type Conns = Arc<Mutex<HashMap<ConnId, TcpStream>>>;

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    conns: Conns,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        for (_, s) in self.conns.lock().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn ip_u32(ip: IpAddr) -> u32 {
    match ip {
        IpAddr::V4(v4) => u32::from(v4),
        IpAddr::V6(v6) => v6.octets()[12..].iter().fold(0, |a, b| (a << 8) | *b as u32),
    }
}

fn tuple_of(s: &TcpStream) -> io::Result<FourTuple> {
    let (p, l) = (s.peer_addr()?, s.local_addr()?);
    Ok(FourTuple {
        src_ip: ip_u32(p.ip()),
        src_port: p.port(),
        dst_ip: ip_u32(l.ip()),
        dst_port: l.port(),
    })
}

/// Starts serving on `addr` (use port 0 for an ephemeral port). The engine
/// that moves the gateway's messages must be driven elsewhere.
pub fn serve(addr: SocketAddr, gateway: Arc<Mutex<Gateway>>) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Conns = Arc::new(Mutex::new(HashMap::new()));
    let start = Instant::now();
    let mut threads = Vec::new();

    {
        let (gw, conns, stop) = (gateway.clone(), conns.clone(), stop.clone());
        threads.push(std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                let (replies, closed) = {
                    let mut g = gw.lock();
                    (g.poll_responses(), g.take_closed())
                };
                if replies.is_empty() && closed.is_empty() {
                    std::thread::sleep(Duration::from_micros(50));
                    continue;
                }
                let mut map = conns.lock();
                for r in replies {
                    if let Some(s) = map.get_mut(&r.conn) {
                        let _ = s.write_all(&r.bytes);
                        if r.close {
                            let _ = s.shutdown(Shutdown::Both);
                            map.remove(&r.conn);
                        }
                    }
                }
                for c in closed {
                    if let Some(s) = map.remove(&c) {
                        let _ = s.shutdown(Shutdown::Both);
                    }
                }
            }
        }));
    }

    {
        let (gw, stop) = (gateway.clone(), stop.clone());
        let window = Duration::from_nanos(gateway.lock().config().autoscaler.window_ns.max(1));
        threads.push(std::thread::spawn(move || {
            let mut next = Instant::now() + window;
            while !stop.load(Ordering::SeqCst) {
                let now = Instant::now();
                if now >= next {
                    gw.lock().autoscale_tick(start.elapsed().as_nanos() as u64);
                    next += window;
                }
                std::thread::sleep(Duration::from_millis(5).min(window));
            }
        }));
    }

    {
        let (gw, conns, stop) = (gateway, conns.clone(), stop.clone());
        threads.push(std::thread::spawn(move || {
            let next_id = AtomicU64::new(1);
            let mut readers = Vec::new();
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let Ok(tuple) = tuple_of(&stream) else { continue };
                let Ok(writer) = stream.try_clone() else { continue };
                let conn = next_id.fetch_add(1, Ordering::Relaxed);
                conns.lock().insert(conn, writer);
                gw.lock().open_connection(conn, &tuple);
                let (gw, conns) = (gw.clone(), conns.clone());
                readers.push(std::thread::spawn(move || read_loop(conn, stream, gw, conns)));
            }
            for r in readers {
                let _ = r.join();
            }
        }));
    }

    Ok(ServerHandle {
        addr,
        stop,
        threads,
        conns,
    })
}

fn read_loop(conn: ConnId, mut stream: TcpStream, gw: Arc<Mutex<Gateway>>, conns: Conns) {
    let max_body = gw.lock().context().pool().buffer_size() as usize;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 16 * 1024];
    'outer: loop {
        match stream.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
        }
        loop {
            match parse_request(&buf, max_body) {
                Ok(None) => break,
                Ok(Some((req, used))) => {
                    buf.drain(..used);
                    let res = gw.lock().handle_request(conn, &req);
                    if let Err(reply) = res {
                        if let Some(s) = conns.lock().get_mut(&conn) {
                            let _ = s.write_all(&reply.bytes);
                        }
                        if reply.close {
                            break 'outer;
                        }
                    }
                }
                Err(e) => {
                    if let Some(s) = conns.lock().get_mut(&conn) {
                        let _ = s.write_all(&write_response(e.status(), e.to_string().as_bytes(), false));
                    }
                    break 'outer;
                }
            }
        }
    }
    gw.lock().close_connection(conn);
    if let Some(s) = conns.lock().remove(&conn) {
        let _ = s.shutdown(Shutdown::Both);
    }
}
