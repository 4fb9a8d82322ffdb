use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use tracing::{debug, warn};

use crate::codec::{self, binary, BinaryEncoder, Format};
use crate::event::{Event, Value};

use super::{Endpoint, TransportError, WriterConfig};

/// Counters describing what a writer has done with its events.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriterStats {
    /// Accepted by `write`.
    pub written: u64,
    /// Handed to the destination (file write or socket write), including resends.
    pub delivered: u64,
    /// Durably handed off: written to the file, acknowledged by the peer, or stored in the backup.
    pub settled: u64,
    pub backed_up: u64,
    pub resent: u64,
    pub bytes: u64,
    pub connects: u64,
    pub failures: u64,
    /// Events that could not be encoded and were skipped.
    pub dropped: u64,
    /// Events held in memory because there was neither a connection nor a backup.
    pub retained: u64,
}

/// Buffered event writer. `write` never waits on I/O; a background thread
/// flushes when 64 KiB accumulate, when the oldest buffered event is one
/// flush interval old, or on `flush`/`close`.
pub struct Writer {
    shared: Arc<Shared>,
    flusher: Mutex<Option<JoinHandle<()>>>,
}

struct Shared {
    endpoint: Endpoint,
    config: WriterConfig,
    state: Mutex<State>,
    wake: Condvar,
    progress: Condvar,
}

#[derive(Default)]
struct State {
    pending: Vec<Arc<Event>>,
    pending_bytes: usize,
    oldest: Option<Instant>,
    next_seq: u64,
    closed: bool,
    finished: bool,
    flush_requests: u64,
    flushes_done: u64,
    nudged: bool,
    fatal: Option<String>,
    cycle_error: Option<String>,
    stats: WriterStats,
}

fn estimate_size(e: &Event) -> usize {
    let fields: usize = e
        .fields
        .iter()
        .map(|(_, v)| {
            3 + match v {
                Value::Text(t) => 2 + t.len(),
                _ => 8,
            }
        })
        .sum();
    5 + binary::EVENT_FIXED_LEN + fields + if e.seq.is_some() { 11 } else { 0 }
}

impl Writer {
    /// Opens a writer. Files and connections are opened lazily on first flush.
    pub fn open(endpoint: Endpoint, config: WriterConfig) -> Result<Writer, TransportError> {
        if let Some(path) = &config.backup_path {
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(path)
                .map_err(|e| TransportError::Backup(path.clone(), e))?;
        }
        let dest = match &endpoint {
            Endpoint::File { path } => Dest::File(FileDest::new(path.clone(), &config)),
            Endpoint::Net { host, port } => Dest::Net(NetDest::new(host.clone(), *port, &config)),
        };
        let shared = Arc::new(Shared {
            endpoint,
            config,
            state: Mutex::new(State::default()),
            wake: Condvar::new(),
            progress: Condvar::new(),
        });
        let worker = shared.clone();
        let handle = std::thread::Builder::new()
            .name("nl-writer".into())
            .spawn(move || run(worker, dest))?;
        Ok(Writer {
            shared,
            flusher: Mutex::new(Some(handle)),
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.shared.endpoint
    }

    /// Buffers `event`, assigning the next sequence number when it has none.
    /// Returns the event's sequence number.
    pub fn write(&self, event: Event) -> Result<u64, TransportError> {
        self.write_shared(Arc::new(event))
    }

    /// Like [`write`](Self::write) but shares the event instead of copying it.
    pub fn write_shared(&self, event: Arc<Event>) -> Result<u64, TransportError> {
        let mut st = self.shared.state.lock();
        self.admit(&st)?;
        let (seq, wake) = self.enqueue(&mut st, event);
        if wake {
            self.shared.wake.notify_one();
        }
        Ok(seq)
    }

    /// Buffers a batch under one lock. Events without a sequence number get
    /// consecutive ones.
    pub fn write_batch(&self, events: &[Arc<Event>]) -> Result<(), TransportError> {
        let mut st = self.shared.state.lock();
        self.admit(&st)?;
        let mut wake = false;
        for e in events {
            wake |= self.enqueue(&mut st, e.clone()).1;
        }
        if wake {
            self.shared.wake.notify_one();
        }
        Ok(())
    }

    fn admit(&self, st: &State) -> Result<(), TransportError> {
        if st.closed {
            return Err(TransportError::Closed);
        }
        if let Some(e) = &st.fatal {
            return Err(TransportError::Failed(e.clone()));
        }
        Ok(())
    }

    /// Returns the event's sequence number and whether the flusher should wake.
    fn enqueue(&self, st: &mut State, mut event: Arc<Event>) -> (u64, bool) {
        let seq = match event.seq {
            Some(s) => s,
            None => {
                let s = st.next_seq;
                Arc::make_mut(&mut event).seq = Some(s);
                st.next_seq += 1;
                s
            }
        };
        st.pending_bytes += estimate_size(&event);
        st.pending.push(event);
        st.stats.written += 1;
        let first = st.oldest.is_none();
        if first {
            st.oldest = Some(Instant::now());
        }
        (
            seq,
            first || st.pending_bytes >= self.shared.config.flush_bytes,
        )
    }

    /// Forces buffered events to the destination (or backup). Reports any
    /// destination failure seen during this flush; the writer stays usable.
    pub fn flush(&self) -> Result<(), TransportError> {
        let mut st = self.shared.state.lock();
        if st.finished {
            return Ok(());
        }
        st.flush_requests += 1;
        let target = st.flush_requests;
        st.cycle_error = None;
        self.shared.wake.notify_one();
        while st.flushes_done < target && !st.finished {
            self.shared.progress.wait(&mut st);
        }
        if let Some(e) = st.fatal.clone() {
            return Err(TransportError::Failed(e));
        }
        match st.cycle_error.take() {
            Some(e) => Err(TransportError::Failed(e)),
            None => Ok(()),
        }
    }

    /// Flushes and releases the destination. Idempotent.
    pub fn close(&self) -> Result<(), TransportError> {
        {
            let mut st = self.shared.state.lock();
            st.closed = true;
            self.shared.wake.notify_one();
        }
        if let Some(h) = self.flusher.lock().take() {
            let _ = h.join();
        }
        let st = self.shared.state.lock();
        match &st.fatal {
            Some(e) => Err(TransportError::Failed(e.clone())),
            None => Ok(()),
        }
    }

    pub fn stats(&self) -> WriterStats {
        self.shared.state.lock().stats
    }

    pub fn is_closed(&self) -> bool {
        self.shared.state.lock().closed
    }

    /// Sequence number the next unsequenced event will get.
    pub fn next_seq(&self) -> u64 {
        self.shared.state.lock().next_seq
    }
}

impl Drop for Writer {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

impl std::fmt::Debug for Writer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Writer")
            .field("endpoint", &self.shared.endpoint)
            .finish()
    }
}

fn nudge(shared: &Shared) {
    let mut st = shared.state.lock();
    st.nudged = true;
    shared.wake.notify_one();
}

fn run(shared: Arc<Shared>, mut dest: Dest) {
    let interval = shared.config.flush_interval;
    let flush_bytes = shared.config.flush_bytes;
    loop {
        let (batch, target, closing) = {
            let mut st = shared.state.lock();
            loop {
                let now = Instant::now();
                let due = st.oldest.is_some_and(|t| now >= t + interval);
                if st.closed
                    || st.flush_requests > st.flushes_done
                    || due
                    || st.pending_bytes >= flush_bytes
                    || st.nudged
                    || dest.service_due(now)
                {
                    break;
                }
                let deadline = [st.oldest.map(|t| t + interval), dest.next_service()]
                    .into_iter()
                    .flatten()
                    .min();
                match deadline {
                    Some(d) => {
                        shared.wake.wait_until(&mut st, d);
                    }
                    None => shared.wake.wait(&mut st),
                }
            }
            st.nudged = false;
            st.pending_bytes = 0;
            st.oldest = None;
            (
                std::mem::take(&mut st.pending),
                st.flush_requests,
                st.closed,
            )
        };

        let result = dest.deliver(&shared, batch);
        if closing {
            dest.shutdown(&shared);
        }
        let mut st = shared.state.lock();
        let written = st.stats.written;
        st.stats = dest.counters();
        st.stats.written = written;
        match result {
            Ok(()) => {}
            Err(Failure::Transient(e)) => st.cycle_error = Some(e),
            Err(Failure::Fatal(e)) => {
                st.cycle_error = Some(e.clone());
                st.fatal = Some(e);
            }
        }
        st.flushes_done = target;
        if closing {
            st.finished = true;
        }
        shared.progress.notify_all();
        if closing {
            return;
        }
    }
}

enum Failure {
    /// Destination trouble absorbed by the backup or memory retention.
    Transient(String),
    /// The backup itself failed.
    Fatal(String),
}

#[allow(clippy::large_enum_variant)]
enum Dest {
    File(FileDest),
    Net(NetDest),
}

impl Dest {
    fn deliver(&mut self, shared: &Arc<Shared>, batch: Vec<Arc<Event>>) -> Result<(), Failure> {
        match self {
            Dest::File(d) => d.deliver(batch),
            Dest::Net(d) => d.deliver(shared, batch),
        }
    }

    fn service_due(&self, now: Instant) -> bool {
        match self {
            Dest::File(d) => d.fallback.has_backlog() && d.next_retry <= now,
            Dest::Net(d) => d.service_due(now),
        }
    }

    fn next_service(&self) -> Option<Instant> {
        match self {
            Dest::File(d) => d.fallback.has_backlog().then_some(d.next_retry),
            Dest::Net(d) => d.next_service(),
        }
    }

    fn shutdown(&mut self, shared: &Arc<Shared>) {
        match self {
            Dest::File(d) => d.file = None,
            Dest::Net(d) => d.shutdown(shared),
        }
    }

    fn counters(&self) -> WriterStats {
        let (mut c, fb) = match self {
            Dest::File(d) => (d.counters, &d.fallback),
            Dest::Net(d) => (d.counters, &d.fallback),
        };
        c.retained = fb.retained.len() as u64;
        c
    }
}

/// Encodes events for one output stream in the endpoint's format.
struct StreamEncoder {
    format: Format,
    binary: BinaryEncoder,
    line: String,
}

impl StreamEncoder {
    fn new(format: Format) -> Self {
        StreamEncoder {
            format,
            binary: BinaryEncoder::new(),
            line: String::new(),
        }
    }

    fn header(&self, out: &mut Vec<u8>) {
        if self.format == Format::Binary {
            binary::write_header(out);
        }
    }

    fn encode(&mut self, e: &Event, out: &mut Vec<u8>) -> Result<(), codec::CodecError> {
        match self.format {
            Format::Binary => self.binary.encode(e, out),
            Format::Ascii => {
                self.line.clear();
                codec::ascii::encode_into(e, &mut self.line)?;
                self.line.push('\n');
                out.extend_from_slice(self.line.as_bytes());
                Ok(())
            }
        }
    }
}

/// Encodes `events` into `out`, skipping (and counting) unencodable ones.
fn encode_all<'a>(
    enc: &mut StreamEncoder,
    events: impl Iterator<Item = &'a Arc<Event>>,
    out: &mut Vec<u8>,
    counters: &mut WriterStats,
) -> usize {
    let mut n = 0;
    for e in events {
        match enc.encode(e, out) {
            Ok(()) => n += 1,
            Err(err) => {
                counters.dropped += 1;
                warn!("dropping unencodable event {}: {err}", e.name);
            }
        }
    }
    n
}

fn open_append(path: &PathBuf) -> std::io::Result<(File, bool)> {
    let f = OpenOptions::new().append(true).create(true).open(path)?;
    let empty = f.metadata()?.len() == 0;
    Ok((f, empty))
}

/// Backup file plus in-memory retention for when no backup is configured.
struct Fallback {
    backup: Option<Backup>,
    retained: VecDeque<Arc<Event>>,
}

struct Backup {
    path: PathBuf,
    file: Option<File>,
    enc: StreamEncoder,
    has_data: bool,
    buf: Vec<u8>,
}

impl Backup {
    fn new(path: PathBuf) -> Backup {
        let has_data = std::fs::metadata(&path)
            .map(|m| m.len() > 0)
            .unwrap_or(false);
        Backup {
            path,
            file: None,
            enc: StreamEncoder::new(Format::Binary),
            has_data,
            buf: Vec::new(),
        }
    }

    fn append<'a>(
        &mut self,
        events: impl Iterator<Item = &'a Arc<Event>>,
        counters: &mut WriterStats,
    ) -> std::io::Result<usize> {
        if self.file.is_none() {
            let (f, empty) = open_append(&self.path)?;
            self.enc = StreamEncoder::new(Format::Binary);
            if empty {
                self.enc.header(&mut self.buf);
            }
            self.file = Some(f);
        }
        let n = encode_all(&mut self.enc, events, &mut self.buf, counters);
        let res = self.file.as_mut().expect("opened").write_all(&self.buf);
        self.buf.clear();
        if let Err(e) = res {
            self.file = None;
            return Err(e);
        }
        if n > 0 {
            self.has_data = true;
        }
        Ok(n)
    }

    /// Reads back every complete event in the backup.
    fn load(&mut self) -> std::io::Result<Vec<Event>> {
        let mut bytes = Vec::new();
        File::open(&self.path)?.read_to_end(&mut bytes)?;
        if bytes.is_empty() {
            return Ok(Vec::new());
        }
        match codec::decode_binary(&bytes) {
            Ok(d) => Ok(d.events),
            Err(e) => {
                warn!(
                    "backup {} is corrupt, resending what decodes: {e}",
                    self.path.display()
                );
                Ok(super::spool::decode_lenient(&bytes))
            }
        }
    }

    fn clear(&mut self) -> std::io::Result<()> {
        self.file = None;
        OpenOptions::new()
            .write(true)
            .truncate(true)
            .open(&self.path)?;
        self.has_data = false;
        Ok(())
    }
}

impl Fallback {
    fn new(config: &WriterConfig) -> Fallback {
        Fallback {
            backup: config.backup_path.clone().map(Backup::new),
            retained: VecDeque::new(),
        }
    }

    fn has_backlog(&self) -> bool {
        !self.retained.is_empty() || self.backup.as_ref().is_some_and(|b| b.has_data)
    }

    /// Stores events that could not be delivered. `settled` flags events already
    /// counted as settled.
    fn store(
        &mut self,
        events: Vec<(Arc<Event>, bool)>,
        counters: &mut WriterStats,
    ) -> Result<(), Failure> {
        if events.is_empty() {
            return Ok(());
        }
        if let Some(b) = &mut self.backup {
            let newly = events.iter().filter(|(_, s)| !*s).count() as u64;
            match b.append(events.iter().map(|(e, _)| e), counters) {
                Ok(n) => {
                    counters.backed_up += n as u64;
                    counters.settled += newly;
                    return Ok(());
                }
                Err(e) => {
                    let msg = format!("backup {} failed: {e}", b.path.display());
                    self.retained.extend(events.into_iter().map(|(e, _)| e));
                    return Err(Failure::Fatal(msg));
                }
            }
        }
        self.retained.extend(events.into_iter().map(|(e, _)| e));
        Ok(())
    }
}

struct FileDest {
    path: PathBuf,
    file: Option<File>,
    enc: StreamEncoder,
    buf: Vec<u8>,
    fallback: Fallback,
    next_retry: Instant,
    retry_delay: Duration,
    counters: WriterStats,
}

impl FileDest {
    fn new(path: PathBuf, config: &WriterConfig) -> FileDest {
        FileDest {
            enc: StreamEncoder::new(Format::from_path(&path)),
            path,
            file: None,
            buf: Vec::with_capacity(64 * 1024),
            fallback: Fallback::new(config),
            next_retry: Instant::now(),
            retry_delay: config.reconnect_initial,
            counters: WriterStats::default(),
        }
    }

    fn deliver(&mut self, batch: Vec<Arc<Event>>) -> Result<(), Failure> {
        if batch.is_empty() && !(self.fallback.has_backlog() && self.next_retry <= Instant::now()) {
            return Ok(());
        }
        let mut backlog: Vec<Arc<Event>> = self.fallback.retained.drain(..).collect();
        if let Some(b) = &mut self.fallback.backup {
            if b.has_data {
                match b.load() {
                    Ok(events) => {
                        self.counters.resent += events.len() as u64;
                        let mut from_backup: Vec<Arc<Event>> =
                            events.into_iter().map(Arc::new).collect();
                        from_backup.append(&mut backlog);
                        backlog = from_backup;
                    }
                    Err(e) => warn!("cannot read backup {}: {e}", b.path.display()),
                }
            }
        }
        let backlog_len = backlog.len();
        match self.write_events(backlog.iter().chain(batch.iter())) {
            Ok(n) => {
                if let Some(b) = &mut self.fallback.backup {
                    if b.has_data {
                        let _ = b.clear();
                    }
                }
                self.counters.delivered += n as u64;
                self.counters.settled += n.saturating_sub(backlog_len) as u64;
                self.retry_delay = Duration::from_millis(500);
                Ok(())
            }
            Err(e) => {
                self.file = None;
                self.counters.failures += 1;
                self.next_retry = Instant::now() + self.retry_delay;
                self.retry_delay = (self.retry_delay * 2).min(Duration::from_secs(30));
                let msg = format!("write to {} failed: {e}", self.path.display());
                // Backlog entries are already in the backup or retained; only the new batch moves.
                let had_backup = self.fallback.backup.as_ref().is_some_and(|b| b.has_data);
                if had_backup {
                    self.fallback.store(
                        batch.into_iter().map(|e| (e, false)).collect(),
                        &mut self.counters,
                    )?;
                } else {
                    let mut all: Vec<(Arc<Event>, bool)> =
                        backlog.into_iter().map(|e| (e, false)).collect();
                    all.extend(batch.into_iter().map(|e| (e, false)));
                    self.fallback.store(all, &mut self.counters)?;
                }
                Err(Failure::Transient(msg))
            }
        }
    }

    fn write_events<'a>(
        &mut self,
        events: impl Iterator<Item = &'a Arc<Event>>,
    ) -> std::io::Result<usize> {
        if self.file.is_none() {
            let (f, empty) = open_append(&self.path)?;
            self.enc = StreamEncoder::new(self.enc.format);
            if empty {
                self.enc.header(&mut self.buf);
            }
            self.file = Some(f);
        }
        let n = encode_all(&mut self.enc, events, &mut self.buf, &mut self.counters);
        let res = self.file.as_mut().expect("opened").write_all(&self.buf);
        self.counters.bytes += self.buf.len() as u64;
        self.buf.clear();
        res.map(|_| n)
    }
}

struct Conn {
    stream: TcpStream,
    enc: StreamEncoder,
    buf: Vec<u8>,
    popped: u64,
    acked: Arc<AtomicU64>,
    broken: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
}

impl Conn {
    fn close(mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

struct NetDest {
    host: String,
    port: u16,
    config: WriterConfig,
    conn: Option<Conn>,
    next_attempt: Instant,
    backoff: Duration,
    unacked: VecDeque<(Arc<Event>, bool)>,
    fallback: Fallback,
    counters: WriterStats,
}

fn ack_reader(
    mut stream: TcpStream,
    acked: Arc<AtomicU64>,
    broken: Arc<AtomicBool>,
    shared: Arc<Shared>,
) {
    let mut buf = [0u8; 8];
    loop {
        match stream.read_exact(&mut buf) {
            Ok(()) => {
                acked.fetch_max(u64::from_le_bytes(buf), Ordering::AcqRel);
                nudge(&shared);
            }
            Err(_) => {
                broken.store(true, Ordering::Release);
                nudge(&shared);
                return;
            }
        }
    }
}

impl NetDest {
    fn new(host: String, port: u16, config: &WriterConfig) -> NetDest {
        NetDest {
            host,
            port,
            config: config.clone(),
            conn: None,
            next_attempt: Instant::now(),
            backoff: config.reconnect_initial,
            unacked: VecDeque::new(),
            fallback: Fallback::new(config),
            counters: WriterStats::default(),
        }
    }

    fn wants_connection(&self) -> bool {
        self.conn.is_none()
            && (self.fallback.has_backlog()
                && (self.config.resend || !self.fallback.retained.is_empty()))
    }

    fn service_due(&self, now: Instant) -> bool {
        self.wants_connection() && now >= self.next_attempt
    }

    fn next_service(&self) -> Option<Instant> {
        self.wants_connection().then_some(self.next_attempt)
    }

    fn process_acks(&mut self) {
        let Some(conn) = &mut self.conn else { return };
        let acked = conn.acked.load(Ordering::Acquire);
        while conn.popped < acked {
            match self.unacked.pop_front() {
                Some((_, settled)) => {
                    if !settled {
                        self.counters.settled += 1;
                    }
                    conn.popped += 1;
                }
                None => break,
            }
        }
    }

    fn fail_conn(&mut self, why: &str) -> Result<(), Failure> {
        self.process_acks();
        if let Some(conn) = self.conn.take() {
            conn.close();
        }
        self.counters.failures += 1;
        self.next_attempt = Instant::now() + self.backoff;
        self.backoff = (self.backoff * 2).min(self.config.reconnect_max);
        warn!("connection to {}:{} failed: {why}", self.host, self.port);
        let unacked: Vec<_> = self.unacked.drain(..).collect();
        self.fallback.store(unacked, &mut self.counters)
    }

    fn connect(&mut self, shared: &Arc<Shared>) -> std::io::Result<()> {
        let addrs: Vec<_> = (self.host.as_str(), self.port).to_socket_addrs()?.collect();
        let mut last = std::io::Error::new(std::io::ErrorKind::NotFound, "no address");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.config.connect_timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    let acked = Arc::new(AtomicU64::new(0));
                    let broken = Arc::new(AtomicBool::new(false));
                    let reader_stream = stream.try_clone()?;
                    let (a, b, s) = (acked.clone(), broken.clone(), shared.clone());
                    let reader = std::thread::Builder::new()
                        .name("nl-acks".into())
                        .spawn(move || ack_reader(reader_stream, a, b, s))?;
                    let enc = StreamEncoder::new(Format::Binary);
                    let mut buf = Vec::with_capacity(64 * 1024);
                    enc.header(&mut buf);
                    self.conn = Some(Conn {
                        stream,
                        enc,
                        buf,
                        popped: 0,
                        acked,
                        broken,
                        reader: Some(reader),
                    });
                    self.counters.connects += 1;
                    self.backoff = self.config.reconnect_initial;
                    debug!("connected to {addr}");
                    return Ok(());
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    /// Sends `events` on the open connection. Events join the unacknowledged queue first.
    fn send(&mut self, events: Vec<(Arc<Event>, bool)>) -> std::io::Result<()> {
        let conn = self.conn.as_mut().expect("connected");
        let start = self.unacked.len();
        self.unacked.extend(events);
        let n = encode_all(
            &mut conn.enc,
            self.unacked.range(start..).map(|(e, _)| e),
            &mut conn.buf,
            &mut self.counters,
        );
        let res = conn.stream.write_all(&conn.buf);
        self.counters.bytes += conn.buf.len() as u64;
        conn.buf.clear();
        res?;
        self.counters.delivered += n as u64;
        Ok(())
    }

    /// Sends the backup, then retained events, on a fresh connection.
    fn drain_backlog(&mut self) -> Result<(), Failure> {
        if self.config.resend {
            if let Some(b) = &mut self.fallback.backup {
                if b.has_data {
                    let events = b.load().map_err(|e| Failure::Transient(e.to_string()))?;
                    let n = events.len() as u64;
                    let items = events.into_iter().map(|e| (Arc::new(e), true)).collect();
                    if let Err(e) = self.send(items) {
                        return self
                            .fail_conn(&e.to_string())
                            .and(Err(Failure::Transient(e.to_string())));
                    }
                    self.counters.resent += n;
                    if let Some(b) = &mut self.fallback.backup {
                        if let Err(e) = b.clear() {
                            return Err(Failure::Fatal(format!("cannot truncate backup: {e}")));
                        }
                    }
                }
            }
        }
        if !self.fallback.retained.is_empty() {
            let items = self
                .fallback
                .retained
                .drain(..)
                .map(|e| (e, false))
                .collect();
            if let Err(e) = self.send(items) {
                return self
                    .fail_conn(&e.to_string())
                    .and(Err(Failure::Transient(e.to_string())));
            }
        }
        Ok(())
    }

    fn deliver(&mut self, shared: &Arc<Shared>, batch: Vec<Arc<Event>>) -> Result<(), Failure> {
        let mut outcome = Ok(());
        self.process_acks();
        if self
            .conn
            .as_ref()
            .is_some_and(|c| c.broken.load(Ordering::Acquire))
        {
            outcome = self.fail_conn("peer closed the connection");
        }
        let now = Instant::now();
        let have_work = !batch.is_empty() || self.wants_connection();
        if self.conn.is_none() && have_work && now >= self.next_attempt {
            match self.connect(shared) {
                Ok(()) => {
                    if let Err(f) = self.drain_backlog() {
                        outcome = Err(f);
                    }
                }
                Err(e) => {
                    self.counters.failures += 1;
                    self.next_attempt = now + self.backoff;
                    self.backoff = (self.backoff * 2).min(self.config.reconnect_max);
                    if !batch.is_empty() {
                        outcome = Err(Failure::Transient(format!(
                            "connect {}:{}: {e}",
                            self.host, self.port
                        )));
                    }
                }
            }
        }
        if batch.is_empty() {
            return outcome;
        }
        let items: Vec<_> = batch.into_iter().map(|e| (e, false)).collect();
        if self.conn.is_some() {
            if let Err(e) = self.send(items) {
                self.fail_conn(&e.to_string())?;
                return Err(Failure::Transient(e.to_string()));
            }
            outcome
        } else {
            self.fallback.store(items, &mut self.counters)?;
            outcome
        }
    }

    fn shutdown(&mut self, shared: &Arc<Shared>) {
        if self.conn.is_none()
            && self.fallback.has_backlog()
            && Instant::now() >= self.next_attempt
            && self.connect(shared).is_ok()
        {
            let _ = self.drain_backlog();
        }
        if let Some(conn) = &self.conn {
            let _ = conn.stream.shutdown(Shutdown::Write);
            let deadline = Instant::now() + self.config.close_timeout;
            loop {
                self.process_acks();
                let conn = self.conn.as_ref().expect("connected");
                if self.unacked.is_empty()
                    || conn.broken.load(Ordering::Acquire)
                    || Instant::now() >= deadline
                {
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            self.process_acks();
        }
        if let Some(conn) = self.conn.take() {
            conn.close();
        }
        let unacked: Vec<_> = self.unacked.drain(..).collect();
        if !unacked.is_empty() {
            warn!("{} events unacknowledged at close", unacked.len());
            let _ = self.fallback.store(unacked, &mut self.counters);
        }
    }
}
