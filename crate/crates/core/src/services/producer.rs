use std::collections::VecDeque;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tiny_http::{Method, Request};
use tracing::{info, warn};

use crate::codec::encode_ascii;
use crate::control::{
    query_pairs, read_json, HttpServer, QueryResult, Reply, SubscribeRequest, SubscribeResponse,
    Subscription, SubscriptionList, SubscriptionState, UnsubscribeResponse,
};
use crate::event::{Event, Timestamp};
use crate::filter::pipe::{ChannelSink, WriterSink};
use crate::filter::{parse_filter, Filter, Pipe, SinkId};
use crate::transport::{write_atomically, Acker, Endpoint, Listener, WriterConfig};

use super::ServiceError;

const INGEST_BATCH: usize = 4096;
const STREAM_QUEUE: usize = 10_000;
const HEARTBEAT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone)]
pub struct ProducerConfig {
    /// Address receiving `x-netlog` event streams.
    pub listen: String,
    /// Address of the control API.
    pub control: String,
    /// Holds the subscription table and per-subscription backup files.
    pub data_dir: PathBuf,
    pub ring_size: usize,
    /// How often received events are flushed to sinks and acknowledged.
    pub ack_interval: Duration,
    pub sink_flush_interval: Duration,
    pub threads: usize,
}

impl Default for ProducerConfig {
    fn default() -> Self {
        ProducerConfig {
            listen: format!("0.0.0.0:{}", crate::transport::DEFAULT_PORT),
            control: format!("127.0.0.1:{}", crate::control::DEFAULT_PRODUCER_PORT),
            data_dir: std::env::temp_dir().join("nlact-producer"),
            ring_size: 10_000,
            ack_interval: Duration::from_secs(1),
            sink_flush_interval: Duration::from_secs(1),
            threads: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProducerStats {
    pub received: u64,
    pub connections: u64,
    pub protocol_errors: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedSubscription {
    id: String,
    filter: String,
    endpoint: String,
    created_at: String,
}

struct SubEntry {
    saved: SavedSubscription,
    sink: SinkId,
}

struct Inner {
    config: ProducerConfig,
    pipe: Pipe,
    subs: Mutex<Vec<SubEntry>>,
    next_sub: AtomicU64,
    ring: Mutex<VecDeque<Arc<Event>>>,
    ackers: Mutex<Vec<(Acker, Arc<AtomicBool>)>>,
    stop: AtomicBool,
    received: AtomicU64,
    connections: AtomicU64,
    protocol_errors: AtomicU64,
}

/// Receives event streams, fans them out to subscriptions, and serves the
/// subscription and query routes.
pub struct Producer {
    inner: Arc<Inner>,
    server: Option<HttpServer>,
    threads: Vec<JoinHandle<()>>,
    events_addr: SocketAddr,
}

impl Producer {
    pub fn start(config: ProducerConfig) -> Result<Producer, ServiceError> {
        std::fs::create_dir_all(&config.data_dir).map_err(|e| ServiceError::Path {
            path: config.data_dir.clone(),
            message: e.to_string(),
        })?;
        let listener =
            Listener::bind_addr(config.listen.as_str()).map_err(|e| ServiceError::Bind {
                addr: config.listen.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
        listener.set_nonblocking(true)?;
        let events_addr = listener.local_addr()?;
        let inner = Arc::new(Inner {
            pipe: Pipe::new(),
            subs: Mutex::new(Vec::new()),
            next_sub: AtomicU64::new(1),
            ring: Mutex::new(VecDeque::with_capacity(config.ring_size.min(100_000))),
            ackers: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
            received: AtomicU64::new(0),
            connections: AtomicU64::new(0),
            protocol_errors: AtomicU64::new(0),
            config,
        });
        inner.restore_subscriptions();

        let handler = inner.clone();
        let server = HttpServer::start(
            inner.config.control.as_str(),
            inner.config.threads,
            move |req| handle(&handler, req),
        )
        .map_err(|source| ServiceError::Bind {
            addr: inner.config.control.clone(),
            source,
        })?;

        let mut threads = Vec::new();
        let i = inner.clone();
        threads.push(
            std::thread::Builder::new()
                .name("nl-producer-accept".into())
                .spawn(move || accept_loop(i, listener))?,
        );
        let i = inner.clone();
        threads.push(
            std::thread::Builder::new()
                .name("nl-producer-ack".into())
                .spawn(move || ack_loop(i))?,
        );
        info!(
            "producer receiving on {events_addr}, control on {}",
            server.local_addr()
        );
        Ok(Producer {
            inner,
            server: Some(server),
            threads,
            events_addr,
        })
    }

    pub fn events_addr(&self) -> SocketAddr {
        self.events_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.server.as_ref().expect("running").local_addr()
    }

    pub fn pipe(&self) -> &Pipe {
        &self.inner.pipe
    }

    pub fn stats(&self) -> ProducerStats {
        ProducerStats {
            received: self.inner.received.load(Ordering::Relaxed),
            connections: self.inner.connections.load(Ordering::Relaxed),
            protocol_errors: self.inner.protocol_errors.load(Ordering::Relaxed),
        }
    }

    /// Pushes events as if they had arrived over the network.
    pub fn ingest(&self, events: Vec<Event>) {
        self.inner.ingest(events);
    }

    /// Stops accepting, flushes and acknowledges what was received, and
    /// closes every subscription writer.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.inner.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Some(s) = self.server.take() {
            s.shutdown();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        acknowledge(&self.inner);
        self.inner.pipe.close();
    }
}

impl Drop for Producer {
    fn drop(&mut self) {
        self.stop();
    }
}

impl Inner {
    fn ingest(&self, events: Vec<Event>) -> usize {
        let n = events.len();
        if n == 0 {
            return 0;
        }
        let events: Vec<Arc<Event>> = events.into_iter().map(Arc::new).collect();
        self.pipe.push_batch(&events);
        {
            let mut ring = self.ring.lock();
            let cap = self.config.ring_size;
            if cap > 0 {
                let keep = &events[events.len().saturating_sub(cap)..];
                let overflow = (ring.len() + keep.len()).saturating_sub(cap);
                ring.drain(..overflow);
                ring.extend(keep.iter().cloned());
            }
        }
        self.received.fetch_add(n as u64, Ordering::Relaxed);
        n
    }

    fn table_path(&self) -> PathBuf {
        self.config.data_dir.join("subscriptions.json")
    }

    fn backup_path(&self, id: &str) -> PathBuf {
        self.config.data_dir.join(format!("{id}.backup.nlog"))
    }

    fn save_subscriptions(&self, subs: &[SubEntry]) {
        let saved: Vec<&SavedSubscription> = subs.iter().map(|s| &s.saved).collect();
        let json = serde_json::to_vec_pretty(&saved).expect("table serializes");
        if let Err(e) = write_atomically(&self.table_path(), &json) {
            warn!("saving subscriptions: {e}");
        }
    }

    fn restore_subscriptions(&self) {
        let Ok(bytes) = std::fs::read(self.table_path()) else {
            return;
        };
        let saved: Vec<SavedSubscription> = match serde_json::from_slice(&bytes) {
            Ok(s) => s,
            Err(e) => {
                warn!("ignoring subscription table: {e}");
                return;
            }
        };
        let mut subs = self.subs.lock();
        for s in saved {
            let n: u64 = s.id.trim_start_matches("sub-").parse().unwrap_or(0);
            self.next_sub.fetch_max(n + 1, Ordering::Relaxed);
            match self.install(&s) {
                Ok(sink) => subs.push(SubEntry { saved: s, sink }),
                Err(e) => warn!("cannot restore subscription {}: {e}", s.id),
            }
        }
    }

    fn install(&self, s: &SavedSubscription) -> Result<SinkId, String> {
        let filter = parse_filter(&s.filter).map_err(|e| e.to_string())?;
        let endpoint = Endpoint::parse(&s.endpoint).map_err(|e| e.to_string())?;
        let config = WriterConfig::default()
            .with_flush_interval(self.config.sink_flush_interval)
            .with_backup(self.backup_path(&s.id));
        let writer = crate::transport::Writer::open(endpoint, config).map_err(|e| e.to_string())?;
        Ok(self
            .pipe
            .add_labeled_sink(s.id.clone(), filter, Box::new(WriterSink(writer))))
    }

    fn subscribe(&self, req: SubscribeRequest) -> Reply {
        if let Err(e) = parse_filter(&req.filter) {
            return Reply::error(400, format!("filter: {e}"), Some(e.position()));
        }
        if let Err(e) = Endpoint::parse(&req.endpoint) {
            return Reply::error(400, e.to_string(), None);
        }
        let id = format!("sub-{}", self.next_sub.fetch_add(1, Ordering::Relaxed));
        let saved = SavedSubscription {
            id: id.clone(),
            filter: req.filter,
            endpoint: req.endpoint,
            created_at: Timestamp::now().render(),
        };
        match self.install(&saved) {
            Ok(sink) => {
                let mut subs = self.subs.lock();
                subs.push(SubEntry { saved, sink });
                self.save_subscriptions(&subs);
                Reply::json(200, &SubscribeResponse { id })
            }
            Err(e) => Reply::error(400, e, None),
        }
    }

    fn unsubscribe(&self, id: &str) -> Reply {
        let removed = {
            let mut subs = self.subs.lock();
            let entry = subs
                .iter()
                .position(|s| s.saved.id == id)
                .map(|i| subs.remove(i));
            if entry.is_some() {
                self.save_subscriptions(&subs);
            }
            entry
        };
        if let Some(entry) = &removed {
            self.pipe.remove_sink(entry.sink);
            let _ = std::fs::remove_file(self.backup_path(id));
        }
        Reply::json(
            200,
            &UnsubscribeResponse {
                removed: removed.is_some(),
            },
        )
    }

    fn list(&self) -> Reply {
        let stats = self.pipe.stats();
        let subs = self.subs.lock();
        let subscriptions = subs
            .iter()
            .map(|s| {
                let st = stats.sinks.iter().find(|x| x.id == s.sink);
                Subscription {
                    id: s.saved.id.clone(),
                    filter: s.saved.filter.clone(),
                    endpoint: s.saved.endpoint.clone(),
                    created_at: s.saved.created_at.clone(),
                    state: if st.is_some_and(|x| x.failures > 0) {
                        SubscriptionState::Failed
                    } else {
                        SubscriptionState::Active
                    },
                    delivered: st.map_or(0, |x| x.delivered),
                }
            })
            .collect();
        Reply::json(200, &SubscriptionList { subscriptions })
    }

    fn query(&self, query: &[(String, String)]) -> Reply {
        let text = param(query, "filter").unwrap_or("");
        let filter = match parse_filter(text) {
            Ok(f) => f,
            Err(e) => return Reply::error(400, format!("filter: {e}"), Some(e.position())),
        };
        let max = match param(query, "max").map(str::parse::<usize>) {
            None => 100,
            Some(Ok(m)) => m,
            Some(Err(_)) => return Reply::error(400, "`max` must be a non-negative integer", None),
        };
        let ring: Vec<Arc<Event>> = self.ring.lock().iter().cloned().collect();
        let mut events: Vec<String> = ring
            .iter()
            .rev()
            .filter(|e| filter.matches(e))
            .take(max)
            .filter_map(|e| encode_ascii(e).ok())
            .collect();
        events.reverse();
        Reply::json(200, &QueryResult { events })
    }
}

fn param<'a>(query: &'a [(String, String)], key: &str) -> Option<&'a str> {
    query
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

fn handle(inner: &Arc<Inner>, mut request: Request) {
    let (path, query) = query_pairs(request.url());
    let method = request.method().clone();
    let reply = match (method, path.as_str()) {
        (Method::Post, "/subscriptions") => match read_json::<SubscribeRequest>(&mut request) {
            Ok(r) => inner.subscribe(r),
            Err(reply) => reply,
        },
        (Method::Get, "/subscriptions") => inner.list(),
        (Method::Delete, p) if p.starts_with("/subscriptions/") => {
            let id = url::form_urlencoded::parse(&p.as_bytes()["/subscriptions/".len()..])
                .next()
                .map(|(k, _)| k.into_owned())
                .unwrap_or_default();
            inner.unsubscribe(&id)
        }
        (Method::Get, "/events") => inner.query(&query),
        (Method::Get, "/stream") => {
            let text = param(&query, "filter").unwrap_or("").to_string();
            match parse_filter(&text) {
                Ok(filter) => {
                    let i = inner.clone();
                    let spawned = std::thread::Builder::new()
                        .name("nl-stream".into())
                        .spawn(move || stream(i, filter, request));
                    if let Err(e) = spawned {
                        warn!("stream thread: {e}");
                    }
                    return;
                }
                Err(e) => Reply::error(400, format!("filter: {e}"), Some(e.position())),
            }
        }
        _ => Reply::not_found(),
    };
    reply.send(request);
}

/// Streams matching events as server-sent events until the client leaves.
fn stream(inner: Arc<Inner>, filter: Filter, request: Request) {
    let (tx, rx) = crossbeam_channel::bounded(STREAM_QUEUE);
    let sink = inner
        .pipe
        .add_labeled_sink("stream", filter, Box::new(ChannelSink(tx)));
    let mut out = request.into_writer();
    let head = "HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nCache-Control: no-cache\r\nConnection: close\r\n\r\n: attached\n\n";
    let mut ok = out
        .write_all(head.as_bytes())
        .and_then(|_| out.flush())
        .is_ok();
    while ok && !inner.stop.load(Ordering::Relaxed) {
        let chunk = match rx.recv_timeout(HEARTBEAT) {
            Ok(e) => {
                let mut text = String::new();
                let mut push = |e: &Event| {
                    if let Ok(line) = encode_ascii(e) {
                        text.push_str("data: ");
                        text.push_str(&line);
                        text.push_str("\n\n");
                    }
                };
                push(&e);
                while let Ok(more) = rx.try_recv() {
                    push(&more);
                }
                text
            }
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => ": heartbeat\n\n".to_string(),
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => break,
        };
        ok = out
            .write_all(chunk.as_bytes())
            .and_then(|_| out.flush())
            .is_ok();
    }
    inner.pipe.remove_sink(sink);
}

fn accept_loop(inner: Arc<Inner>, listener: Listener) {
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    while !inner.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok(inbound) => {
                inner.connections.fetch_add(1, Ordering::Relaxed);
                let i = inner.clone();
                match std::thread::Builder::new()
                    .name("nl-producer-conn".into())
                    .spawn(move || connection(i, inbound))
                {
                    Ok(h) => conns.push(h),
                    Err(e) => warn!("connection thread: {e}"),
                }
                conns.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(20))
            }
            Err(e) => {
                warn!("accept: {e}");
                std::thread::sleep(Duration::from_millis(100));
            }
        }
    }
    for h in conns {
        let _ = h.join();
    }
}

fn connection(inner: Arc<Inner>, mut inbound: crate::transport::Inbound) {
    let _ = inbound.set_timeout(Some(Duration::from_millis(200)));
    let acker = inbound.acker();
    let done = Arc::new(AtomicBool::new(false));
    inner.ackers.lock().push((acker.clone(), done.clone()));
    while !inner.stop.load(Ordering::Relaxed) {
        match inbound.next_batch(INGEST_BATCH) {
            Ok(Some(events)) => {
                let n = inner.ingest(events);
                acker.mark(n as u64);
            }
            Ok(None) => break,
            Err(e) => {
                inner.protocol_errors.fetch_add(1, Ordering::Relaxed);
                warn!("{e}");
                break;
            }
        }
    }
    done.store(true, Ordering::Release);
}

/// Makes received events durable at the sinks, then acknowledges them, once
/// the oldest unacknowledged event has waited `ack_interval`. Timing from the
/// first pending event (not a free-running tick) keeps the delay the same for
/// every burst a node forwards.
fn ack_loop(inner: Arc<Inner>) {
    let tick = Duration::from_millis(20);
    let mut pending_since: Option<Instant> = None;
    // Idle passes still drop finished connections.
    let mut last = Instant::now();
    loop {
        let stopping = inner.stop.load(Ordering::Relaxed);
        if pending_since.is_none() && has_unacked(&inner) {
            pending_since = Some(Instant::now());
        }
        let due = match pending_since {
            Some(t) => t.elapsed() >= inner.config.ack_interval,
            None => last.elapsed() >= inner.config.ack_interval,
        };
        if due || stopping {
            pending_since = None;
            last = Instant::now();
            acknowledge(&inner);
        }
        if stopping {
            return;
        }
        std::thread::sleep(tick);
    }
}

fn has_unacked(inner: &Inner) -> bool {
    inner
        .ackers
        .lock()
        .iter()
        .any(|(a, _)| a.processed() > a.acked())
}

fn acknowledge(inner: &Inner) {
    // Read `done` before `processed`, so a finished connection's count is final.
    let ackers: Vec<(Acker, bool, u64)> = inner
        .ackers
        .lock()
        .iter()
        .map(|(a, d)| {
            let done = d.load(Ordering::Acquire);
            (a.clone(), done, a.processed())
        })
        .collect();
    if ackers.iter().any(|(a, _, n)| *n > a.acked()) {
        for (id, e) in inner.pipe.sync() {
            warn!("flushing subscription sink {id}: {e}");
        }
        for (a, _, n) in &ackers {
            if let Err(e) = a.ack(*n) {
                tracing::debug!("ack: {e}");
            }
        }
    }
    let finished: Vec<&Acker> = ackers
        .iter()
        .filter(|(_, done, _)| *done)
        .map(|(a, _, _)| a)
        .collect();
    if !finished.is_empty() {
        inner
            .ackers
            .lock()
            .retain(|(a, _)| !finished.iter().any(|f| f.same_connection(a)));
    }
}
