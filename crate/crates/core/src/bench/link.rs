//! Per-hop link emulation: a TCP relay that adds latency, caps bandwidth with a
//! token bucket and counts every byte it forwards.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::wire::ByteCounter;

/// Link parameters applied to the forward direction of one hop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkShape {
    #[serde(default)]
    pub latency_ms: f64,
    /// `None` or a non-positive value means unlimited.
    #[serde(default)]
    pub bandwidth_mbps: Option<f64>,
}

impl LinkShape {
    pub fn new(latency_ms: f64, bandwidth_mbps: Option<f64>) -> Self {
        LinkShape {
            latency_ms,
            bandwidth_mbps,
        }
    }

    pub fn latency(&self) -> Duration {
        Duration::from_secs_f64(self.latency_ms.max(0.0) / 1000.0)
    }

    /// Bytes per second, if limited.
    pub fn rate(&self) -> Option<f64> {
        self.bandwidth_mbps.filter(|b| *b > 0.0).map(|b| b * 1e6 / 8.0)
    }

    pub fn is_passthrough(&self) -> bool {
        self.latency().is_zero() && self.rate().is_none()
    }
}

/// Classic token bucket. Tokens are bytes; [`TokenBucket::acquire`] blocks
/// until the requested amount is available.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    /// Starts full. `capacity` bounds the burst size.
    pub fn new(rate_bytes_per_sec: f64, capacity: f64) -> Self {
        TokenBucket {
            rate: rate_bytes_per_sec,
            capacity,
            tokens: capacity,
            last: Instant::now(),
        }
    }

    fn refill(&mut self, now: Instant) {
        let dt = now.duration_since(self.last).as_secs_f64();
        self.tokens = (self.tokens + dt * self.rate).min(self.capacity);
        self.last = now;
    }

    /// Time to wait before `n` bytes (at most `capacity`) may pass; consumes
    /// them.
    pub fn reserve(&mut self, n: usize, now: Instant) -> Duration {
        self.refill(now);
        self.tokens -= n as f64;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.rate)
        }
    }

    pub fn acquire(&mut self, n: usize) {
        let wait = self.reserve(n, Instant::now());
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// Largest single write while rate limited; also the bucket burst size.
const SHAPED_PIECE: usize = 16 * 1024;

/// Writer side of a shaped hop: delays each read batch by the latency and
/// meters it through the bucket.
fn shaped_pump(mut from: TcpStream, mut to: TcpStream, shape: LinkShape, counter: ByteCounter) {
    let latency = shape.latency();
    let mut bucket = shape.rate().map(|r| TokenBucket::new(r, SHAPED_PIECE as f64));
    let (tx, rx) = mpsc::channel::<(Instant, Vec<u8>)>();
    let reader = thread::spawn(move || {
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            match from.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if tx.send((Instant::now(), buf[..n].to_vec())).is_err() {
                        break;
                    }
                }
            }
        }
    });
    'outer: for (at, bytes) in rx {
        let due = at + latency;
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        for piece in bytes.chunks(SHAPED_PIECE) {
            if let Some(b) = bucket.as_mut() {
                b.acquire(piece.len());
            }
            if to.write_all(piece).is_err() {
                break 'outer;
            }
            counter.add(piece.len() as u64);
        }
    }
    let _ = to.shutdown(Shutdown::Write);
    let _ = reader.join();
}

fn plain_pump(mut from: TcpStream, mut to: TcpStream, counter: ByteCounter) {
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if to.write_all(&buf[..n]).is_err() {
                    break;
                }
                counter.add(n as u64);
            }
        }
    }
    let _ = to.shutdown(Shutdown::Write);
}

/// A relay in front of `target`. Connections accepted on [`Proxy::addr`] are
/// forwarded to `target`; the forward direction is shaped and both directions
/// are counted.
pub struct Proxy {
    addr: SocketAddr,
    target: SocketAddr,
    forward: ByteCounter,
    backward: ByteCounter,
    stop: Arc<AtomicBool>,
    acceptor: Option<thread::JoinHandle<()>>,
    pumps: Arc<Mutex<Vec<thread::JoinHandle<()>>>>,
}

impl Proxy {
    pub fn spawn(target: SocketAddr, shape: LinkShape) -> io::Result<Proxy> {
        let listener = TcpListener::bind((target.ip(), 0))?;
        let addr = listener.local_addr()?;
        let forward = ByteCounter::new();
        let backward = ByteCounter::new();
        let stop = Arc::new(AtomicBool::new(false));
        let pumps = Arc::new(Mutex::new(Vec::new()));
        let (fwd, bwd, stop2, pumps2) = (forward.clone(), backward.clone(), stop.clone(), pumps.clone());
        let acceptor = thread::Builder::new()
            .name(format!("proxy-{}", addr.port()))
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop2.load(Ordering::SeqCst) {
                        break;
                    }
                    let client = match conn {
                        Ok(c) => c,
                        Err(e) => {
                            warn!("proxy accept: {e}");
                            continue;
                        }
                    };
                    let server = match TcpStream::connect(target) {
                        Ok(s) => s,
                        Err(e) => {
                            debug!("proxy {addr} cannot reach {target}: {e}");
                            continue; // dropping the client reports the failure
                        }
                    };
                    let _ = client.set_nodelay(true);
                    let _ = server.set_nodelay(true);
                    let (c2, s2) = match (client.try_clone(), server.try_clone()) {
                        (Ok(c), Ok(s)) => (c, s),
                        _ => continue,
                    };
                    let f = fwd.clone();
                    let there = thread::spawn(move || {
                        if shape.is_passthrough() {
                            plain_pump(client, server, f)
                        } else {
                            shaped_pump(client, server, shape, f)
                        }
                    });
                    let b = bwd.clone();
                    let back = thread::spawn(move || plain_pump(s2, c2, b));
                    pumps2.lock().unwrap().extend([there, back]);
                }
            })?;
        Ok(Proxy {
            addr,
            target,
            forward,
            backward,
            stop,
            acceptor: Some(acceptor),
            pumps,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn target(&self) -> SocketAddr {
        self.target
    }

    /// Bytes delivered to the target.
    pub fn forward_bytes(&self) -> u64 {
        self.forward.get()
    }

    /// Bytes delivered back to the client.
    pub fn backward_bytes(&self) -> u64 {
        self.backward.get()
    }

    /// Stops accepting and waits until every relayed connection has closed in
    /// both directions. Returns the final (forward, backward) counts.
    pub fn finish(mut self) -> (u64, u64) {
        self.stop_accepting();
        let pumps = std::mem::take(&mut *self.pumps.lock().unwrap());
        for p in pumps {
            let _ = p.join();
        }
        (self.forward.get(), self.backward.get())
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.acceptor.take() {
            // wake the acceptor
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}

impl Drop for Proxy {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}
