use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::Rng;
use tracing::info;

use crate::control::ControlClient;
use crate::event::Timestamp;
use crate::filter::{parse_filter, Filter};
use crate::services::{Manager, ManagerConfig, Node, NodeConfig, Producer, ProducerConfig};
use crate::transport::{Endpoint, SpoolReader, WriterConfig};

use super::{
    event_key, quantile, read_ledger, EventKey, GenConfig, HarnessError, GEN_DETAIL_LEVEL, GEN_PROG,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    /// Four comparisons.
    Simple,
    /// Twenty comparisons in four conjunctions.
    Complex,
}

impl FilterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::Simple => "simple",
            FilterKind::Complex => "complex",
        }
    }

    pub fn parse(s: &str) -> Option<FilterKind> {
        match s {
            "simple" => Some(FilterKind::Simple),
            "complex" => Some(FilterKind::Complex),
            _ => None,
        }
    }

    /// Both kinds pass every generated event, so output rate is input rate
    /// times the number of consumers.
    pub fn text(self) -> &'static str {
        match self {
            FilterKind::Simple => r#"PROG = "Athena" and LVL <= 2 and JOB >= 0 and K >= 0"#,
            FilterKind::Complex => concat!(
                r#"NL.EVNT = "Start" and PROG = "Athena" and LVL <= 2 and JOB >= 0 and K < 100"#,
                r#" or NL.EVNT = "Middle" and PROG = "Athena" and LVL <= 2 and SIZE > 0 and CPU >= 0.0"#,
                r#" or NL.EVNT = "End" and PROG = "Athena" and LVL <= 2 and EVT.NUM >= 0 and ALG != """#,
                r#" or PROG = "Athena" and LVL <= 2 and JOB >= 0 and K >= 0 and SIZE > 0"#,
            ),
        }
    }

    pub fn filter(self) -> Filter {
        parse_filter(self.text()).expect("built-in filter parses")
    }
}

/// Batching intervals along the path from generator to consumer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intervals {
    /// Generator writer flush into its spool file.
    pub app_flush: Duration,
    /// Node forwarding bursts.
    pub forward: Duration,
    /// Node writer flush toward the producer.
    pub node_flush: Duration,
    /// Producer sink flush (and acknowledgement) toward consumer files.
    pub sink_flush: Duration,
    /// How often consumers read their files.
    pub consumer_poll: Duration,
    /// Node polling of the manager.
    pub node_poll: Duration,
    /// Trigger file checks inside generators.
    pub check: Duration,
}

impl Intervals {
    /// One-second buffers, five-second forwarding and polling.
    pub fn standard() -> Intervals {
        let s = Duration::from_secs(1);
        Intervals {
            app_flush: s,
            forward: 5 * s,
            node_flush: s,
            sink_flush: s,
            consumer_poll: s,
            node_poll: 5 * s,
            check: s,
        }
    }

    /// Short intervals for quick runs.
    pub fn compressed() -> Intervals {
        let b = Duration::from_millis(100);
        Intervals {
            app_flush: b,
            forward: Duration::from_millis(500),
            node_flush: b,
            sink_flush: b,
            consumer_poll: b,
            node_poll: Duration::from_millis(250),
            check: b,
        }
    }

    pub fn expected_latency(&self) -> f64 {
        super::expected_fixed_latency(
            self.forward.as_secs_f64(),
            &[
                self.app_flush.as_secs_f64(),
                self.node_flush.as_secs_f64(),
                self.sink_flush.as_secs_f64(),
                self.consumer_poll.as_secs_f64(),
            ],
        )
    }
}

#[derive(Debug, Clone)]
pub struct ScaleConfig {
    pub producers: usize,
    pub consumers: usize,
    /// Events per second per generator.
    pub rate: f64,
    pub filter_kind: FilterKind,
    pub duration: Duration,
    pub intervals: Intervals,
    /// Executable providing the `gen` subcommand.
    pub gen_exe: PathBuf,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleRow {
    pub producers: usize,
    pub consumers: usize,
    pub filter_kind: FilterKind,
    pub median_s: f64,
    pub p90_s: f64,
    /// Distinct matching events delivered across all consumers per second
    /// of generation.
    pub agg_out_eps: f64,
}

#[derive(Debug, Clone)]
pub struct ScaleRun {
    pub row: ScaleRow,
    pub expected_latency: f64,
    pub consumer_medians: Vec<f64>,
    pub min_latency: f64,
    /// Events the generators emitted.
    pub ledger_events: usize,
    /// Sum over consumers of oracle-matching ledger events.
    pub expected: usize,
    /// Sum over consumers of distinct expected events that arrived.
    pub delivered: usize,
    /// Repeated arrivals of an already-seen event.
    pub duplicates: u64,
    /// Arrivals that the oracle did not expect.
    pub unexpected: usize,
}

impl ScaleRun {
    pub fn missing(&self) -> usize {
        self.expected - self.delivered
    }
}

#[derive(Default)]
struct Received {
    first: HashMap<EventKey, f64>,
    duplicates: u64,
    keyless: u64,
}

struct Consumer {
    path: PathBuf,
    received: Arc<Mutex<Received>>,
    thread: Option<JoinHandle<()>>,
}

fn read_available(reader: &mut SpoolReader, received: &Mutex<Received>) {
    loop {
        let batch = match reader.read_batch(8192) {
            Ok(b) => b,
            Err(e) => {
                tracing::warn!("consumer {}: {e}", reader.path().display());
                return;
            }
        };
        if batch.events.is_empty() {
            return;
        }
        let now = Timestamp::now().as_micros();
        let mut r = received.lock();
        for e in batch.events {
            let latency = (now - e.timestamp.as_micros()) as f64 / 1e6;
            match event_key(&e) {
                Some(k) => {
                    if let std::collections::hash_map::Entry::Vacant(e) = r.first.entry(k) {
                        e.insert(latency);
                    } else {
                        r.duplicates += 1;
                    }
                }
                None => r.keyless += 1,
            }
        }
    }
}

/// Each wait is drawn from [poll/2, 3·poll/2]. A fixed period would hold one
/// phase against the producer's flush tick for the whole run, so a single
/// consumer would measure one arbitrary offset instead of the average.
fn start_consumer(path: PathBuf, poll: Duration, stop: Arc<AtomicBool>) -> Consumer {
    let received = Arc::new(Mutex::new(Received::default()));
    let r = received.clone();
    let p = path.clone();
    let thread = std::thread::spawn(move || {
        let mut reader = SpoolReader::from_start(p);
        let mut rng = rand::thread_rng();
        while !stop.load(Ordering::Relaxed) {
            std::thread::sleep(poll.mul_f64(rng.gen_range(0.5..1.5)));
            read_available(&mut reader, &r);
        }
        read_available(&mut reader, &r);
    });
    Consumer {
        path,
        received,
        thread: Some(thread),
    }
}

fn spawn_generator(exe: &Path, cfg: &GenConfig, log: &Path) -> Result<Child, HarnessError> {
    let err = std::fs::File::create(log)?;
    Command::new(exe)
        .args(cfg.to_args())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(err)
        .spawn()
        .map_err(|e| HarnessError::Path {
            path: exe.to_path_buf(),
            message: e.to_string(),
        })
}

fn wait_children(children: &mut [Child], limit: Duration) -> Result<(), HarnessError> {
    let start = Instant::now();
    let mut failed = Vec::new();
    for (i, c) in children.iter_mut().enumerate() {
        loop {
            if let Some(status) = c.try_wait()? {
                if !status.success() {
                    failed.push(format!("generator {i}: {status}"));
                }
                break;
            }
            if start.elapsed() > limit {
                let _ = c.kill();
                let _ = c.wait();
                failed.push(format!("generator {i}: timed out"));
                break;
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Run(failed.join("; ")))
    }
}

/// Runs the whole stack on loopback: a manager, a producer, a node, and
/// `producers` generator processes, with `consumers` file subscriptions.
/// Latency is measured per event as arrival at a consumer minus the event's
/// own timestamp, on this host's clock.
pub fn bench_scale(cfg: &ScaleConfig) -> Result<ScaleRun, HarnessError> {
    if cfg.producers == 0 || cfg.consumers == 0 {
        return Err(HarnessError::Run(
            "need at least one producer and one consumer".into(),
        ));
    }
    let iv = cfg.intervals;
    let spool = cfg.work_dir.join("spool");
    let ledgers = cfg.work_dir.join("ledgers");
    let consumers_dir = cfg.work_dir.join("consumers");
    for d in [&spool, &ledgers, &consumers_dir] {
        std::fs::create_dir_all(d)?;
    }

    let manager = Manager::start(ManagerConfig {
        listen: "127.0.0.1:0".into(),
        state_path: None,
        threads: 2,
    })?;
    let producer = Producer::start(ProducerConfig {
        listen: "127.0.0.1:0".into(),
        control: "127.0.0.1:0".into(),
        data_dir: cfg.work_dir.join("producer"),
        ack_interval: iv.sink_flush,
        sink_flush_interval: iv.sink_flush,
        ..ProducerConfig::default()
    })?;
    let pclient = ControlClient::new(&producer.control_addr().to_string());
    let stop = Arc::new(AtomicBool::new(false));
    let mut consumers = Vec::new();
    for i in 0..cfg.consumers {
        let path = consumers_dir.join(format!("consumer-{i}.nlog"));
        pclient.subscribe(
            cfg.filter_kind.text(),
            &format!("file://{}", path.display()),
        )?;
        consumers.push(start_consumer(path, iv.consumer_poll, stop.clone()));
    }

    let mut ncfg = NodeConfig::new(&spool);
    ncfg.manager = Some(manager.local_addr().to_string());
    ncfg.producer = Some(Endpoint::net("127.0.0.1", producer.events_addr().port()));
    ncfg.poll_interval = iv.node_poll;
    ncfg.forward_interval = iv.forward;
    ncfg.writer = WriterConfig::default().with_flush_interval(iv.node_flush);
    let node = Node::start(ncfg)?;

    ControlClient::new(&manager.local_addr().to_string()).set_activation(
        GEN_PROG,
        "*",
        GEN_DETAIL_LEVEL,
        None,
    )?;

    let wait_active = iv.node_poll + iv.check + Duration::from_secs(30);
    let mut gens = Vec::new();
    let mut children = Vec::new();
    for j in 0..cfg.producers {
        let mut g = GenConfig::new(j as u32, &spool, ledgers.join(format!("gen-{j}.log")));
        g.rate = cfg.rate;
        g.duration = cfg.duration;
        g.check_interval = iv.check;
        g.flush_interval = iv.app_flush;
        g.wait_active = Some(wait_active);
        children.push(spawn_generator(
            &cfg.gen_exe,
            &g,
            &ledgers.join(format!("gen-{j}.err")),
        )?);
        gens.push(g);
    }
    info!(
        "{} generators running for {:?}",
        cfg.producers, cfg.duration
    );
    let gen_result = wait_children(
        &mut children,
        cfg.duration + wait_active + Duration::from_secs(60),
    );

    let filter = cfg.filter_kind.filter();
    let mut expected_keys = HashSet::new();
    let mut ledger_events = 0;
    if gen_result.is_ok() {
        for g in &gens {
            for e in read_ledger(&g.ledger)? {
                ledger_events += 1;
                if filter.matches(&e) {
                    expected_keys.extend(event_key(&e));
                }
            }
        }
    }

    // Drain: every stage holds events for at most its interval.
    let drain = iv.forward + iv.app_flush + iv.node_flush + iv.sink_flush + iv.consumer_poll;
    let deadline = Instant::now() + 3 * drain + Duration::from_secs(15);
    while gen_result.is_ok() && Instant::now() < deadline {
        let done = consumers.iter().all(|c| {
            let r = c.received.lock();
            r.first.len() >= expected_keys.len()
                && expected_keys.iter().all(|k| r.first.contains_key(k))
        });
        if done {
            break;
        }
        std::thread::sleep(Duration::from_millis(200));
    }
    stop.store(true, Ordering::Relaxed);
    for c in &mut consumers {
        if let Some(t) = c.thread.take() {
            let _ = t.join();
        }
    }
    node.shutdown();
    producer.shutdown();
    manager.shutdown();
    gen_result?;

    let mut all = Vec::new();
    let mut consumer_medians = Vec::new();
    let mut delivered = 0;
    let mut duplicates = 0;
    let mut unexpected = 0;
    for c in &consumers {
        let r = c.received.lock();
        duplicates += r.duplicates;
        unexpected += r.keyless as usize;
        let mut mine = Vec::with_capacity(r.first.len());
        for (k, lat) in &r.first {
            if expected_keys.contains(k) {
                delivered += 1;
                mine.push(*lat);
            } else {
                unexpected += 1;
            }
        }
        mine.sort_by(f64::total_cmp);
        consumer_medians.push(quantile(&mine, 0.5));
        all.extend(mine);
        tracing::debug!("{}: {} events", c.path.display(), r.first.len());
    }
    all.sort_by(f64::total_cmp);
    Ok(ScaleRun {
        row: ScaleRow {
            producers: cfg.producers,
            consumers: cfg.consumers,
            filter_kind: cfg.filter_kind,
            median_s: quantile(&all, 0.5),
            p90_s: quantile(&all, 0.9),
            agg_out_eps: delivered as f64 / cfg.duration.as_secs_f64(),
        },
        expected_latency: iv.expected_latency(),
        consumer_medians,
        min_latency: all.first().copied().unwrap_or(f64::NAN),
        ledger_events,
        expected: expected_keys.len() * cfg.consumers,
        delivered,
        duplicates,
        unexpected,
    })
}
