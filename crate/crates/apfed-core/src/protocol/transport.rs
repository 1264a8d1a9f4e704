//! Message transports.
//!
//! Both transports move the same encoded frames, so a training run is
//! bit-identical whether peers sit on channels in one process or on TCP
//! sockets, and the byte counters agree between the two. Counters tally
//! encoded frame bytes in each direction.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::Duration;

use super::message::{payload_len, Message, WireError, HEADER_LEN};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer did not answer within {0:?}")]
    Timeout(Duration),
    #[error("peer closed the connection")]
    Closed,
    #[error("undecodable frame: {0}")]
    Wire(#[from] WireError),
}

pub trait Transport: Send {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Message, TransportError>;
    fn bytes_sent(&self) -> u64;
    fn bytes_received(&self) -> u64;
}

/// Channel-backed transport. Frames are encoded exactly as on the socket
/// path; only the carrier differs.
pub struct InProcTransport {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    timeout: Duration,
    sent: u64,
    received: u64,
}

impl InProcTransport {
    /// Two connected endpoints.
    pub fn pair() -> (InProcTransport, InProcTransport) {
        Self::pair_with_timeout(DEFAULT_TIMEOUT)
    }

    pub fn pair_with_timeout(timeout: Duration) -> (InProcTransport, InProcTransport) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        (
            InProcTransport {
                tx: tx_a,
                rx: rx_a,
                timeout,
                sent: 0,
                received: 0,
            },
            InProcTransport {
                tx: tx_b,
                rx: rx_b,
                timeout,
                sent: 0,
                received: 0,
            },
        )
    }
}

impl Transport for InProcTransport {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        let frame = msg.encode();
        self.sent += frame.len() as u64;
        self.tx.send(frame).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        let frame = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            mpsc::RecvTimeoutError::Timeout => TransportError::Timeout(self.timeout),
            mpsc::RecvTimeoutError::Disconnected => TransportError::Closed,
        })?;
        self.received += frame.len() as u64;
        Ok(Message::decode(&frame)?)
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }

    fn bytes_received(&self) -> u64 {
        self.received
    }
}

pub struct TcpTransport {
    stream: TcpStream,
    timeout: Duration,
    sent: u64,
    received: u64,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, TransportError> {
        let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
        let last = addrs.len().saturating_sub(1);
        for (i, a) in addrs.iter().enumerate() {
            match TcpStream::connect_timeout(a, timeout) {
                Ok(stream) => return Self::from_stream(stream, timeout),
                Err(e) if i == last => return Err(e.into()),
                Err(_) => continue,
            }
        }
        Err(std::io::Error::new(ErrorKind::AddrNotAvailable, "no addresses resolved").into())
    }

    pub fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(TcpTransport {
            stream,
            timeout,
            sent: 0,
            received: 0,
        })
    }

    fn read_exact_timed(&mut self, buf: &mut [u8]) -> Result<(), TransportError> {
        match self.stream.read_exact(buf) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
                Err(TransportError::Timeout(self.timeout))
            }
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(TransportError::Closed),
            Err(e) => Err(e.into()),
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        let frame = msg.encode();
        self.stream.write_all(&frame)?;
        self.sent += frame.len() as u64;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        let mut header = [0u8; HEADER_LEN];
        self.read_exact_timed(&mut header)?;
        let len = payload_len(&header)? as usize;
        let mut frame = vec![0u8; HEADER_LEN + len];
        frame[..HEADER_LEN].copy_from_slice(&header);
        self.read_exact_timed(&mut frame[HEADER_LEN..])?;
        self.received += frame.len() as u64;
        Ok(Message::decode(&frame)?)
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }

    fn bytes_received(&self) -> u64 {
        self.received
    }
}
