//! Connection handling over reliable byte streams.
//!
//! A client dials, sends `ClientHello`, then serves instructions until told
//! to go away. The server accepts many such connections and hands each one,
//! after a valid hello, to a callback. Exactly one instruction is outstanding
//! per connection at any time, so replies need no request ids.

pub mod loopback;

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use thiserror::Error;

use crate::protocol::{
    encode_message, ConfigMap, DisconnectReason, FrameDecoder, Message, MessageType,
    ProtocolError,
};

pub use loopback::{duplex, LoopbackNetwork, PipeStats, PipeStream};

const READ_CHUNK: usize = 64 * 1024;
const ACCEPT_POLL: Duration = Duration::from_millis(20);
const SHUTDOWN_REPLY_WAIT: Duration = Duration::from_secs(1);

/// Closes a stream from any thread, waking a blocked reader.
pub type Closer = Arc<dyn Fn() + Send + Sync>;

/// A reliable, in-order byte stream.
pub trait Stream: Read + Write + Send {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
    fn closer(&self) -> io::Result<Closer>;
    fn peer(&self) -> String;
}

impl Stream for TcpStream {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        TcpStream::set_read_timeout(self, timeout.map(|t| t.max(Duration::from_millis(1))))
    }

    fn closer(&self) -> io::Result<Closer> {
        let handle = self.try_clone()?;
        Ok(Arc::new(move || {
            let _ = handle.shutdown(Shutdown::Both);
        }))
    }

    fn peer(&self) -> String {
        self.peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "tcp:?".into())
    }
}

impl<S: Stream + ?Sized> Stream for Box<S> {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        (**self).set_read_timeout(timeout)
    }

    fn closer(&self) -> io::Result<Closer> {
        (**self).closer()
    }

    fn peer(&self) -> String {
        (**self).peer()
    }
}

/// Opens client-side streams.
pub trait Dialer: Send + Sync {
    fn dial(&self) -> Result<Box<dyn Stream>, TransportError>;
    fn address(&self) -> String;
}

/// Accepts server-side streams.
pub trait Listener: Send {
    /// `Ok(None)` when nothing arrived within `timeout`.
    fn accept_timeout(&mut self, timeout: Duration) -> io::Result<Option<Box<dyn Stream>>>;
    fn local_addr(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct TcpDialer {
    pub address: String,
    pub connect_timeout: Duration,
}

impl TcpDialer {
    pub fn new(address: impl Into<String>) -> Self {
        Self {
            address: address.into(),
            connect_timeout: Duration::from_secs(10),
        }
    }
}

impl Dialer for TcpDialer {
    fn dial(&self) -> Result<Box<dyn Stream>, TransportError> {
        let connect_err = |source| TransportError::Connect {
            address: self.address.clone(),
            source,
        };
        let addrs = self.address.to_socket_addrs().map_err(connect_err)?;
        let mut last = io::Error::new(io::ErrorKind::InvalidInput, "no addresses resolved");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.connect_timeout) {
                Ok(stream) => {
                    let _ = stream.set_nodelay(true);
                    return Ok(Box::new(stream));
                }
                Err(e) => last = e,
            }
        }
        Err(connect_err(last))
    }

    fn address(&self) -> String {
        self.address.clone()
    }
}

impl Listener for TcpListener {
    fn accept_timeout(&mut self, timeout: Duration) -> io::Result<Option<Box<dyn Stream>>> {
        self.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        loop {
            match self.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let _ = stream.set_nodelay(true);
                    return Ok(Some(Box::new(stream)));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Ok(None);
                    }
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn local_addr(&self) -> String {
        TcpListener::local_addr(self)
            .map(|a| a.to_string())
            .unwrap_or_default()
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot connect to {address}: {source}")]
    Connect { address: String, source: io::Error },
    #[error("cannot bind {address}: {source}")]
    Bind { address: String, source: io::Error },
    #[error("connection closed")]
    Closed,
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("client reported error {code}: {detail}")]
    ClientError { code: u16, detail: String },
    #[error("client disconnected ({0:?})")]
    Disconnected(DisconnectReason),
    #[error("expected {expected:?}, got {got:?}")]
    UnexpectedReply {
        expected: MessageType,
        got: MessageType,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
}

impl TransportError {
    /// Worth redialing (connection refused, reset, and the like).
    pub fn is_retriable(&self) -> bool {
        matches!(self, TransportError::Connect { .. })
    }

    /// The peer is too slow rather than broken.
    pub fn is_laggard(&self) -> bool {
        matches!(self, TransportError::Timeout(_))
    }
}

struct ConnIo {
    stream: Box<dyn Stream>,
    decoder: FrameDecoder,
    scratch: Vec<u8>,
}

struct ConnInner {
    peer: String,
    io: Mutex<ConnIo>,
    closer: Closer,
    closed: AtomicBool,
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
}

impl Drop for ConnInner {
    fn drop(&mut self) {
        (self.closer)();
    }
}

/// Message-level view of a stream. Cloning shares the same underlying stream.
#[derive(Clone)]
pub struct Connection {
    inner: Arc<ConnInner>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("peer", &self.inner.peer)
            .field("closed", &self.is_closed())
            .finish()
    }
}

/// Frame bytes moved by one request/reply exchange, seen from the server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExchangeBytes {
    /// Server to client.
    pub down: u64,
    /// Client to server.
    pub up: u64,
}

impl ExchangeBytes {
    pub fn total(&self) -> u64 {
        self.down + self.up
    }
}

impl Connection {
    pub fn new(stream: Box<dyn Stream>) -> io::Result<Self> {
        let closer = stream.closer()?;
        Ok(Self {
            inner: Arc::new(ConnInner {
                peer: stream.peer(),
                io: Mutex::new(ConnIo {
                    stream,
                    decoder: FrameDecoder::new(),
                    scratch: vec![0; READ_CHUNK],
                }),
                closer,
                closed: AtomicBool::new(false),
                bytes_sent: AtomicU64::new(0),
                bytes_received: AtomicU64::new(0),
            }),
        })
    }

    pub fn peer(&self) -> &str {
        &self.inner.peer
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    /// Closes the stream; a blocked `recv` on another thread returns `Closed`.
    pub fn close(&self) {
        if !self.inner.closed.swap(true, Ordering::SeqCst) {
            (self.inner.closer)();
        }
    }

    pub fn bytes_sent(&self) -> u64 {
        self.inner.bytes_sent.load(Ordering::SeqCst)
    }

    pub fn bytes_received(&self) -> u64 {
        self.inner.bytes_received.load(Ordering::SeqCst)
    }

    /// Writes one frame; returns its length.
    pub fn send(&self, message: &Message) -> Result<u64, TransportError> {
        let frame = encode_message(message)?;
        self.send_frame(&frame)
    }

    /// Writes pre-encoded frame bytes; returns their length.
    pub fn send_frame(&self, frame: &[u8]) -> Result<u64, TransportError> {
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let mut io = self.inner.io.lock().unwrap();
        let result = io.stream.write_all(frame).and_then(|_| io.stream.flush());
        drop(io);
        match result {
            Ok(()) => {
                self.inner
                    .bytes_sent
                    .fetch_add(frame.len() as u64, Ordering::SeqCst);
                Ok(frame.len() as u64)
            }
            Err(e) => {
                self.close();
                Err(if is_disconnect(&e) {
                    TransportError::Closed
                } else {
                    TransportError::Io(e)
                })
            }
        }
    }

    /// Reads one message; returns it with its frame length.
    ///
    /// A timeout leaves any partially received frame buffered, but callers
    /// on the server treat the peer as failed and close the connection.
    pub fn recv(&self, timeout: Option<Duration>) -> Result<(Message, u64), TransportError> {
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut guard = self.inner.io.lock().unwrap();
        let io = &mut *guard;
        loop {
            let before = io.decoder.pending();
            match io.decoder.next_message() {
                Ok(Some(message)) => {
                    let consumed = (before - io.decoder.pending()) as u64;
                    self.inner
                        .bytes_received
                        .fetch_add(consumed, Ordering::SeqCst);
                    return Ok((message, consumed));
                }
                Ok(None) => {}
                Err(e) => {
                    drop(guard);
                    self.close();
                    return Err(e.into());
                }
            }
            let remaining = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(TransportError::Timeout(timeout.unwrap_or_default()));
                    }
                    Some(d - now)
                }
                None => None,
            };
            io.stream.set_read_timeout(remaining)?;
            match io.stream.read(&mut io.scratch) {
                Ok(0) => {
                    drop(guard);
                    self.close();
                    return Err(TransportError::Closed);
                }
                Ok(n) => io.decoder.push(&io.scratch[..n]),
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) => {}
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    drop(guard);
                    let closed_locally = self.is_closed();
                    self.close();
                    return Err(if closed_locally || is_disconnect(&e) {
                        TransportError::Closed
                    } else {
                        TransportError::Io(e)
                    });
                }
            }
        }
    }

    /// Sends an instruction and waits for its result.
    ///
    /// `ErrorRes` surfaces as [`TransportError::ClientError`] and leaves the
    /// connection open. A timeout, a `DisconnectRes`, or an out-of-place reply
    /// closes it.
    pub fn request(&self, ins: &Message, timeout: Duration) -> Result<Message, TransportError> {
        self.exchange(ins, timeout).1
    }

    /// Like [`request`](Self::request), also reporting the frame bytes moved
    /// in each direction (including on failure).
    pub fn exchange(
        &self,
        ins: &Message,
        timeout: Duration,
    ) -> (ExchangeBytes, Result<Message, TransportError>) {
        let mut bytes = ExchangeBytes::default();
        let expected = match ins.expected_reply() {
            Some(t) => t,
            None => {
                return (
                    bytes,
                    Err(TransportError::Protocol(ProtocolError::InvalidMessage {
                        kind: ins.message_type(),
                        reason: "not an instruction".into(),
                    })),
                )
            }
        };
        match self.send(ins) {
            Ok(n) => bytes.down = n,
            Err(e) => return (bytes, Err(e)),
        }
        let result = match self.recv(Some(timeout)) {
            Ok((reply, n)) => {
                bytes.up = n;
                let got = reply.message_type();
                match reply {
                    _ if got == expected => Ok(reply),
                    Message::ErrorRes { code, detail } => {
                        Err(TransportError::ClientError { code, detail })
                    }
                    Message::DisconnectRes { reason } => {
                        self.close();
                        Err(TransportError::Disconnected(reason))
                    }
                    _ => {
                        self.close();
                        Err(TransportError::UnexpectedReply { expected, got })
                    }
                }
            }
            Err(e) => {
                if e.is_laggard() {
                    self.close();
                }
                Err(e)
            }
        };
        (bytes, result)
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::NotConnected
            | io::ErrorKind::UnexpectedEof
    )
}

/// Opens a stream through `dialer` and announces the client.
pub fn dial(
    dialer: &dyn Dialer,
    client_name: &str,
    capabilities: ConfigMap,
) -> Result<Connection, TransportError> {
    let stream = dialer.dial()?;
    let conn = Connection::new(stream)?;
    conn.send(&Message::ClientHello {
        client_name: client_name.to_owned(),
        capabilities,
    })?;
    Ok(conn)
}

#[derive(Debug, Clone)]
pub struct ServerEndpoint {
    pub bind_address: String,
    pub max_clients: usize,
    /// Also bounds how long a fresh connection may take to send its hello.
    pub read_timeout: Duration,
}

impl Default for ServerEndpoint {
    fn default() -> Self {
        Self {
            bind_address: "[::]:8080".into(),
            max_clients: 1024,
            read_timeout: Duration::from_secs(600),
        }
    }
}

/// A client that has connected and said hello.
#[derive(Debug, Clone)]
pub struct AcceptedClient {
    pub name: String,
    pub capabilities: ConfigMap,
    pub connection: Connection,
}

pub type OnConnect = Arc<dyn Fn(AcceptedClient) + Send + Sync>;

/// Running accept loop. Dropping it without [`shutdown`](Self::shutdown)
/// stops accepting but leaves established connections alone.
pub struct ServerHandle {
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
    live: Arc<Mutex<Vec<Connection>>>,
    local_addr: String,
}

impl ServerHandle {
    pub fn local_addr(&self) -> &str {
        &self.local_addr
    }

    /// Connections that completed the hello and are still open.
    pub fn connected(&self) -> usize {
        let mut live = self.live.lock().unwrap();
        live.retain(|c| !c.is_closed());
        live.len()
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }

    /// Stops accepting, asks every connected client to go away permanently
    /// (`ReconnectIns{0}`), then closes all connections.
    pub fn shutdown(mut self) {
        self.stop_accepting();
        let live: Vec<Connection> = std::mem::take(&mut *self.live.lock().unwrap());
        thread::scope(|s| {
            for conn in live.iter().filter(|c| !c.is_closed()) {
                s.spawn(move || {
                    if conn.send(&Message::ReconnectIns { seconds: 0 }).is_ok() {
                        let _ = conn.recv(Some(SHUTDOWN_REPLY_WAIT));
                    }
                    conn.close();
                });
            }
        });
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

/// Binds a TCP listener at `endpoint.bind_address` and serves it.
pub fn serve(endpoint: ServerEndpoint, on_connect: OnConnect) -> Result<ServerHandle, TransportError> {
    let listener =
        TcpListener::bind(&endpoint.bind_address).map_err(|source| TransportError::Bind {
            address: endpoint.bind_address.clone(),
            source,
        })?;
    Ok(serve_listener(Box::new(listener), endpoint, on_connect))
}

/// Serves connections from an arbitrary listener (TCP or loopback).
pub fn serve_listener(
    mut listener: Box<dyn Listener>,
    endpoint: ServerEndpoint,
    on_connect: OnConnect,
) -> ServerHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let live: Arc<Mutex<Vec<Connection>>> = Arc::new(Mutex::new(Vec::new()));
    let local_addr = listener.local_addr();
    let max_clients = endpoint.max_clients.max(1);
    let hello_timeout = endpoint.read_timeout;

    let accept_thread = {
        let stop = Arc::clone(&stop);
        let live = Arc::clone(&live);
        thread::Builder::new()
            .name("accept".into())
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let stream = match listener.accept_timeout(ACCEPT_POLL) {
                        Ok(Some(s)) => s,
                        Ok(None) => continue,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            thread::sleep(ACCEPT_POLL);
                            continue;
                        }
                    };
                    let occupied = {
                        let mut live = live.lock().unwrap();
                        live.retain(|c| !c.is_closed());
                        live.len()
                    };
                    if occupied >= max_clients {
                        debug!("rejecting {}: {max_clients} clients connected", stream.peer());
                        continue;
                    }
                    let live = Arc::clone(&live);
                    let on_connect = Arc::clone(&on_connect);
                    thread::spawn(move || {
                        match handshake(stream, hello_timeout) {
                            Ok(client) => {
                                live.lock().unwrap().push(client.connection.clone());
                                on_connect(client);
                            }
                            Err(e) => debug!("dropping connection: {e}"),
                        }
                    });
                }
            })
            .expect("spawn accept thread")
    };

    ServerHandle {
        stop,
        accept_thread: Some(accept_thread),
        live,
        local_addr,
    }
}

fn handshake(stream: Box<dyn Stream>, timeout: Duration) -> Result<AcceptedClient, TransportError> {
    let connection = Connection::new(stream)?;
    match connection.recv(Some(timeout)) {
        Ok((
            Message::ClientHello {
                client_name,
                capabilities,
            },
            _,
        )) => Ok(AcceptedClient {
            name: client_name,
            capabilities,
            connection,
        }),
        Ok((other, _)) => {
            connection.close();
            Err(TransportError::Handshake(format!(
                "expected ClientHello, got {:?}",
                other.message_type()
            )))
        }
        Err(e) => {
            connection.close();
            Err(e)
        }
    }
}
