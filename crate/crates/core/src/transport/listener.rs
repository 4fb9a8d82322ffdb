use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::codec::{BinaryDecoder, Record};
use crate::event::Event;

use super::{Endpoint, TransportError};

/// Accepts `x-netlog` connections.
pub struct Listener {
    inner: TcpListener,
}

impl Listener {
    pub fn bind(endpoint: &Endpoint) -> Result<Listener, TransportError> {
        match endpoint {
            Endpoint::Net { host, port } => Listener::bind_addr((host.as_str(), *port)),
            Endpoint::File { .. } => Err(TransportError::NotListenable(endpoint.to_string())),
        }
    }

    pub fn bind_addr(addr: impl ToSocketAddrs) -> Result<Listener, TransportError> {
        Ok(Listener {
            inner: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.inner.local_addr()
    }

    pub fn set_nonblocking(&self, on: bool) -> io::Result<()> {
        self.inner.set_nonblocking(on)
    }

    /// Waits for the next sender. In non-blocking mode returns `WouldBlock`.
    pub fn accept(&self) -> io::Result<Inbound> {
        let (stream, peer) = self.inner.accept()?;
        stream.set_nonblocking(false)?;
        Inbound::new(stream, peer.to_string())
    }
}

/// Sends cumulative acknowledgements for one connection. Cloneable, so a
/// different thread can acknowledge once events are safely delivered.
#[derive(Clone)]
pub struct Acker {
    stream: Arc<Mutex<TcpStream>>,
    processed: Arc<AtomicU64>,
    acked: Arc<AtomicU64>,
}

impl Acker {
    /// Records that `n` more events have been handed on.
    pub fn mark(&self, n: u64) {
        self.processed.fetch_add(n, Ordering::AcqRel);
    }

    /// Events handed on so far.
    pub fn processed(&self) -> u64 {
        self.processed.load(Ordering::Acquire)
    }

    pub fn acked(&self) -> u64 {
        self.acked.load(Ordering::Acquire)
    }

    /// Acknowledges the first `count` events of the connection.
    pub fn ack(&self, count: u64) -> io::Result<()> {
        if count <= self.acked.load(Ordering::Acquire) {
            return Ok(());
        }
        let mut s = self.stream.lock();
        if count <= self.acked.load(Ordering::Acquire) {
            return Ok(());
        }
        s.write_all(&count.to_le_bytes())?;
        self.acked.store(count, Ordering::Release);
        Ok(())
    }

    pub fn same_connection(&self, other: &Acker) -> bool {
        Arc::ptr_eq(&self.processed, &other.processed)
    }

    /// Acknowledges everything marked as processed.
    pub fn ack_processed(&self) -> io::Result<()> {
        self.ack(self.processed())
    }
}

/// One inbound sender connection.
pub struct Inbound {
    stream: TcpStream,
    peer: String,
    decoder: BinaryDecoder,
    buf: Vec<u8>,
    start: usize,
    received: u64,
    acker: Acker,
    eof: bool,
}

impl Inbound {
    fn new(stream: TcpStream, peer: String) -> io::Result<Inbound> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Inbound {
            stream,
            peer,
            decoder: BinaryDecoder::new(),
            buf: Vec::with_capacity(64 * 1024),
            start: 0,
            received: 0,
            acker: Acker {
                stream: Arc::new(Mutex::new(writer)),
                processed: Arc::new(AtomicU64::new(0)),
                acked: Arc::new(AtomicU64::new(0)),
            },
            eof: false,
        })
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn acker(&self) -> Acker {
        self.acker.clone()
    }

    /// Event records decoded so far.
    pub fn received(&self) -> u64 {
        self.received
    }

    /// Bounds how long `next_batch` blocks waiting for data.
    pub fn set_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }

    fn protocol(&self, e: crate::codec::CodecError) -> TransportError {
        TransportError::Protocol {
            peer: self.peer.clone(),
            source: e,
        }
    }

    fn decode_buffered(&mut self, max: usize, out: &mut Vec<Event>) -> Result<(), TransportError> {
        while out.len() < max && self.start < self.buf.len() {
            match self.decoder.next_record(&self.buf[self.start..]) {
                Ok(Some((record, used))) => {
                    self.start += used;
                    if let Record::Event(e) = record {
                        self.received += 1;
                        out.push(e);
                    }
                }
                Ok(None) => break,
                Err(f) => {
                    let _ = self.stream.shutdown(std::net::Shutdown::Both);
                    self.eof = true;
                    return Err(self.protocol(f.error.at_offset(self.start)));
                }
            }
        }
        if self.start > 0 && (self.start == self.buf.len() || self.start > 1 << 20) {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        Ok(())
    }

    /// Returns up to `max` decoded events. `Ok(None)` means the sender closed
    /// the connection; an empty batch means the read timed out.
    pub fn next_batch(&mut self, max: usize) -> Result<Option<Vec<Event>>, TransportError> {
        let mut out = Vec::new();
        self.decode_buffered(max, &mut out)?;
        if !out.is_empty() {
            return Ok(Some(out));
        }
        if self.eof {
            return self.finish();
        }
        let mut chunk = [0u8; 64 * 1024];
        loop {
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    self.eof = true;
                    return self.finish();
                }
                Ok(n) => {
                    self.buf.extend_from_slice(&chunk[..n]);
                    self.decode_buffered(max, &mut out)?;
                    if !out.is_empty() {
                        return Ok(Some(out));
                    }
                }
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    return Ok(Some(out));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    self.eof = true;
                    return Err(e.into());
                }
            }
        }
    }

    fn finish(&mut self) -> Result<Option<Vec<Event>>, TransportError> {
        if self.start < self.buf.len() {
            let at = self.start;
            self.buf.clear();
            self.start = 0;
            return Err(self.protocol(crate::codec::CodecError::Truncated(at)));
        }
        Ok(None)
    }
}
