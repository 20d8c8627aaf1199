//! Frame delivery: synchronous byte transports beneath the protocol codec.
//!
//! A transport moves whole frames (header included) and never interprets
//! them beyond the length prefix. Two backends exist: real TCP sockets and
//! in-process channels. Both enforce the same frame-size limit, so a run
//! behaves identically over either.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::MAX_FRAME;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection closed by peer")]
    Closed,
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("frame of {0} bytes exceeds the {max} byte limit", max = MAX_FRAME)]
    FrameTooLarge(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait FrameSink: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
}

pub trait FrameSource: Send {
    /// Block until a whole frame arrives.
    fn recv(&mut self) -> Result<Vec<u8>, TransportError>;
    /// Like [`recv`](FrameSource::recv) but gives up after `timeout`.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError>;
}

/// One duplex link: where to write frames and where to read them from.
pub struct Connection {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

impl Connection {
    pub fn split(self) -> (Box<dyn FrameSink>, Box<dyn FrameSource>) {
        (self.sink, self.source)
    }
}

/// Something a server can accept inbound connections from.
pub trait Listener: Send {
    /// Wait up to `timeout` for the next connection; `None` means nothing
    /// arrived in time.
    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<Connection>, TransportError>;
}

fn frame_len(header: &[u8; 4]) -> Result<usize, TransportError> {
    let len = u32::from_be_bytes(*header);
    if len > MAX_FRAME {
        return Err(TransportError::FrameTooLarge(len as u64));
    }
    Ok(len as usize)
}

// ---- in-process backend ----

struct ChannelSink {
    tx: mpsc::Sender<Vec<u8>>,
}

impl FrameSink for ChannelSink {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| TransportError::Closed)
    }
}

struct ChannelSource {
    rx: mpsc::Receiver<Vec<u8>>,
}

impl ChannelSource {
    fn check(frame: Vec<u8>) -> Result<Vec<u8>, TransportError> {
        if frame.len() < 4 {
            return Err(TransportError::Io(std::io::Error::new(
                ErrorKind::InvalidData,
                "frame shorter than its header",
            )));
        }
        let declared = frame_len(&frame[..4].try_into().unwrap())?;
        if frame.len() != 4 + declared {
            return Err(TransportError::Io(std::io::Error::new(
                ErrorKind::InvalidData,
                "frame length disagrees with header",
            )));
        }
        Ok(frame)
    }
}

impl FrameSource for ChannelSource {
    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        let frame = self.rx.recv().map_err(|_| TransportError::Closed)?;
        Self::check(frame)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        let frame = self.rx.recv_timeout(timeout).map_err(|e| match e {
            mpsc::RecvTimeoutError::Timeout => TransportError::Timeout,
            mpsc::RecvTimeoutError::Disconnected => TransportError::Closed,
        })?;
        Self::check(frame)
    }
}

/// A pair of connected in-process endpoints.
pub fn inproc_pair() -> (Connection, Connection) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    let a = Connection {
        sink: Box::new(ChannelSink { tx: a_tx }),
        source: Box::new(ChannelSource { rx: a_rx }),
    };
    let b = Connection {
        sink: Box::new(ChannelSink { tx: b_tx }),
        source: Box::new(ChannelSource { rx: b_rx }),
    };
    (a, b)
}

pub struct InProcAcceptor {
    rx: mpsc::Receiver<Connection>,
}

/// Client-side handle for opening connections to an [`InProcAcceptor`].
#[derive(Clone)]
pub struct InProcConnector {
    tx: mpsc::Sender<Connection>,
}

impl InProcConnector {
    pub fn connect(&self) -> Result<Connection, TransportError> {
        let (mine, theirs) = inproc_pair();
        self.tx.send(theirs).map_err(|_| TransportError::Closed)?;
        Ok(mine)
    }
}

/// An in-process "network": an acceptor and the connector that reaches it.
pub fn inproc_network() -> (InProcAcceptor, InProcConnector) {
    let (tx, rx) = mpsc::channel();
    (InProcAcceptor { rx }, InProcConnector { tx })
}

impl Listener for InProcAcceptor {
    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<Connection>, TransportError> {
        match self.rx.recv_timeout(timeout) {
            Ok(conn) => Ok(Some(conn)),
            Err(mpsc::RecvTimeoutError::Timeout) => Ok(None),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

// ---- TCP backend ----

struct TcpFrameSink {
    stream: TcpStream,
}

impl FrameSink for TcpFrameSink {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(frame)?;
        Ok(())
    }
}

struct TcpFrameSource {
    stream: TcpStream,
    /// Last read timeout applied to the socket, to skip redundant syscalls.
    current_timeout: Option<Option<Duration>>,
}

impl TcpFrameSource {
    fn set_timeout(&mut self, t: Option<Duration>) -> Result<(), TransportError> {
        if self.current_timeout != Some(t) {
            self.stream.set_read_timeout(t)?;
            self.current_timeout = Some(t);
        }
        Ok(())
    }

    fn read_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut header = [0u8; 4];
        match self.stream.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Err(TransportError::Closed),
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
                return Err(TransportError::Timeout)
            }
            Err(e) => return Err(e.into()),
        }
        let len = frame_len(&header)?;
        let mut frame = vec![0u8; 4 + len];
        frame[..4].copy_from_slice(&header);
        match self.stream.read_exact(&mut frame[4..]) {
            Ok(()) => Ok(frame),
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(TransportError::Closed),
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
                Err(TransportError::Timeout)
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl FrameSource for TcpFrameSource {
    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        self.set_timeout(None)?;
        self.read_frame()
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        // zero duration is rejected by the socket API; round up
        self.set_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        self.read_frame()
    }
}

/// Wrap an established socket as a connection. The socket is cloned so the
/// two directions can live on different threads.
pub fn tcp_connection(stream: TcpStream) -> Result<Connection, TransportError> {
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    Ok(Connection {
        sink: Box::new(TcpFrameSink { stream }),
        source: Box::new(TcpFrameSource {
            stream: reader,
            current_timeout: None,
        }),
    })
}

pub fn tcp_connect(addr: SocketAddr) -> Result<Connection, TransportError> {
    tcp_connection(TcpStream::connect(addr)?)
}

pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    /// Bind and return the actual local address (useful with port 0).
    pub fn bind(addr: &str) -> Result<(Self, SocketAddr), TransportError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        Ok((TcpAcceptor { listener }, local))
    }
}

impl Listener for TcpAcceptor {
    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<Connection>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return Ok(Some(tcp_connection(stream)?));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Ok(None);
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

// ---- byte accounting ----

/// Sink wrapper that adds every successfully sent frame's length to a
/// shared counter.
pub struct CountingSink {
    inner: Box<dyn FrameSink>,
    bytes: Arc<AtomicU64>,
}

impl CountingSink {
    pub fn new(inner: Box<dyn FrameSink>, bytes: Arc<AtomicU64>) -> Self {
        CountingSink { inner, bytes }
    }
}

impl FrameSink for CountingSink {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.inner.send(frame)?;
        self.bytes.fetch_add(frame.len() as u64, Ordering::Relaxed);
        Ok(())
    }
}

/// Source wrapper that adds every received frame's length to a shared
/// counter.
pub struct CountingSource {
    inner: Box<dyn FrameSource>,
    bytes: Arc<AtomicU64>,
}

impl CountingSource {
    pub fn new(inner: Box<dyn FrameSource>, bytes: Arc<AtomicU64>) -> Self {
        CountingSource { inner, bytes }
    }
}

impl FrameSource for CountingSource {
    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        let frame = self.inner.recv()?;
        self.bytes.fetch_add(frame.len() as u64, Ordering::Relaxed);
        Ok(frame)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        let frame = self.inner.recv_timeout(timeout)?;
        self.bytes.fetch_add(frame.len() as u64, Ordering::Relaxed);
        Ok(frame)
    }
}
