//! In-memory duplex byte streams and a listener that hands them out.
//!
//! Behaves like a TCP socket pair: bounded send buffers, blocking writes,
//! EOF after the peer closes, read timeouts. Every channel counts the bytes
//! written into it so tests can check accounting against what actually moved.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{Closer, Dialer, Listener, Stream, TransportError};

pub const DEFAULT_PIPE_CAPACITY: usize = 1 << 20;

#[derive(Debug)]
struct ChannelState {
    buf: VecDeque<u8>,
    closed: bool,
}

#[derive(Debug)]
struct Channel {
    state: Mutex<ChannelState>,
    readable: Condvar,
    writable: Condvar,
    capacity: usize,
    written: AtomicU64,
}

impl Channel {
    fn new(capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(ChannelState {
                buf: VecDeque::new(),
                closed: false,
            }),
            readable: Condvar::new(),
            writable: Condvar::new(),
            capacity,
            written: AtomicU64::new(0),
        })
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.readable.notify_all();
        self.writable.notify_all();
    }
}

/// One end of an in-memory duplex stream.
#[derive(Debug)]
pub struct PipeStream {
    rx: Arc<Channel>,
    tx: Arc<Channel>,
    read_timeout: Option<Duration>,
    name: String,
}

/// Byte counters of one pipe end, readable after the stream has moved away.
#[derive(Debug, Clone)]
pub struct PipeStats {
    rx: Arc<Channel>,
    tx: Arc<Channel>,
}

impl PipeStats {
    /// Bytes this end has written.
    pub fn sent(&self) -> u64 {
        self.tx.written.load(Ordering::SeqCst)
    }

    /// Bytes the peer has written towards this end.
    pub fn received(&self) -> u64 {
        self.rx.written.load(Ordering::SeqCst)
    }
}

/// Connected pair of pipe ends, each with `capacity` bytes of send buffer.
pub fn duplex(capacity: usize) -> (PipeStream, PipeStream) {
    let a_to_b = Channel::new(capacity);
    let b_to_a = Channel::new(capacity);
    let a = PipeStream {
        rx: Arc::clone(&b_to_a),
        tx: Arc::clone(&a_to_b),
        read_timeout: None,
        name: "pipe:a".into(),
    };
    let b = PipeStream {
        rx: a_to_b,
        tx: b_to_a,
        read_timeout: None,
        name: "pipe:b".into(),
    };
    (a, b)
}

impl PipeStream {
    pub fn stats(&self) -> PipeStats {
        PipeStats {
            rx: Arc::clone(&self.rx),
            tx: Arc::clone(&self.tx),
        }
    }

    fn close_both(&self) {
        self.rx.close();
        self.tx.close();
    }
}

impl Read for PipeStream {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        let deadline = self.read_timeout.map(|t| Instant::now() + t);
        let mut state = self.rx.state.lock().unwrap();
        loop {
            if !state.buf.is_empty() {
                let n = out.len().min(state.buf.len());
                let (front, back) = state.buf.as_slices();
                if n <= front.len() {
                    out[..n].copy_from_slice(&front[..n]);
                } else {
                    let k = front.len();
                    out[..k].copy_from_slice(front);
                    out[k..n].copy_from_slice(&back[..n - k]);
                }
                state.buf.drain(..n);
                drop(state);
                self.rx.writable.notify_all();
                return Ok(n);
            }
            if state.closed {
                return Ok(0);
            }
            state = match deadline {
                None => self.rx.readable.wait(state).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(io::Error::new(io::ErrorKind::TimedOut, "read timed out"));
                    }
                    self.rx.readable.wait_timeout(state, d - now).unwrap().0
                }
            };
        }
    }
}

impl Write for PipeStream {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        if data.is_empty() {
            return Ok(0);
        }
        let mut state = self.tx.state.lock().unwrap();
        loop {
            if state.closed {
                return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe closed"));
            }
            let space = self.tx.capacity.saturating_sub(state.buf.len());
            if space > 0 {
                let n = space.min(data.len());
                state.buf.extend(&data[..n]);
                self.tx.written.fetch_add(n as u64, Ordering::SeqCst);
                drop(state);
                self.tx.readable.notify_all();
                return Ok(n);
            }
            state = self.tx.writable.wait(state).unwrap();
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeStream {
    fn drop(&mut self) {
        self.close_both();
    }
}

impl Stream for PipeStream {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.read_timeout = timeout;
        Ok(())
    }

    fn closer(&self) -> io::Result<Closer> {
        let rx = Arc::clone(&self.rx);
        let tx = Arc::clone(&self.tx);
        Ok(Arc::new(move || {
            rx.close();
            tx.close();
        }))
    }

    fn peer(&self) -> String {
        self.name.clone()
    }
}

#[derive(Debug, Default)]
struct Backlog {
    pending: VecDeque<PipeStream>,
    listening: bool,
    next_id: u64,
}

/// In-process stand-in for a network address: clients `connect`, the server
/// side `accept`s from [`LoopbackListener`].
#[derive(Debug, Clone)]
pub struct LoopbackNetwork {
    backlog: Arc<(Mutex<Backlog>, Condvar)>,
    capacity: usize,
}

impl Default for LoopbackNetwork {
    fn default() -> Self {
        Self::new()
    }
}

impl LoopbackNetwork {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_PIPE_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            backlog: Arc::new((Mutex::new(Backlog::default()), Condvar::new())),
            capacity,
        }
    }

    /// Starts accepting. Connections attempted before this are refused.
    pub fn listen(&self) -> LoopbackListener {
        self.backlog.0.lock().unwrap().listening = true;
        LoopbackListener {
            network: self.clone(),
        }
    }

    pub fn connect(&self) -> io::Result<PipeStream> {
        let (lock, cvar) = &*self.backlog;
        let mut backlog = lock.lock().unwrap();
        if !backlog.listening {
            return Err(io::Error::new(
                io::ErrorKind::ConnectionRefused,
                "loopback network is not listening",
            ));
        }
        let id = backlog.next_id;
        backlog.next_id += 1;
        let (mut client, mut server) = duplex(self.capacity);
        client.name = format!("loopback:server#{id}");
        server.name = format!("loopback:client#{id}");
        backlog.pending.push_back(server);
        cvar.notify_all();
        Ok(client)
    }
}

impl Dialer for LoopbackNetwork {
    fn dial(&self) -> Result<Box<dyn Stream>, TransportError> {
        self.connect()
            .map(|s| Box::new(s) as Box<dyn Stream>)
            .map_err(|source| TransportError::Connect {
                address: "loopback".into(),
                source,
            })
    }

    fn address(&self) -> String {
        "loopback".into()
    }
}

pub struct LoopbackListener {
    network: LoopbackNetwork,
}

impl Listener for LoopbackListener {
    fn accept_timeout(&mut self, timeout: Duration) -> io::Result<Option<Box<dyn Stream>>> {
        let (lock, cvar) = &*self.network.backlog;
        let mut backlog = lock.lock().unwrap();
        if backlog.pending.is_empty() {
            backlog = cvar.wait_timeout(backlog, timeout).unwrap().0;
        }
        Ok(backlog
            .pending
            .pop_front()
            .map(|s| Box::new(s) as Box<dyn Stream>))
    }

    fn local_addr(&self) -> String {
        "loopback".into()
    }
}

impl Drop for LoopbackListener {
    fn drop(&mut self) {
        let (lock, _) = &*self.network.backlog;
        let mut backlog = lock.lock().unwrap();
        backlog.listening = false;
        backlog.pending.clear();
    }
}
