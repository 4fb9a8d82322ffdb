use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use tracing::{debug, info, warn};

use crate::control::ControlClient;
use crate::event::Level;
use crate::transport::{cursor_path, Endpoint, SpoolReader, Writer, WriterConfig};
use crate::trigger::{AppDescriptor, TriggerFile};

use super::ServiceError;

const FORWARD_BATCH: usize = 8192;

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub spool_dir: PathBuf,
    /// Manager control address; without one the node never changes levels.
    pub manager: Option<String>,
    /// Producer event endpoint; without one spooled events stay on disk.
    pub producer: Option<Endpoint>,
    pub poll_interval: Duration,
    pub forward_interval: Duration,
    /// Host name used when asking the manager for levels.
    pub host: String,
    /// Spool files larger than this start a new epoch.
    pub rotate_bytes: u64,
    pub writer: WriterConfig,
}

impl NodeConfig {
    pub fn new(spool_dir: impl Into<PathBuf>) -> NodeConfig {
        NodeConfig {
            spool_dir: spool_dir.into(),
            manager: None,
            producer: None,
            poll_interval: Duration::from_secs(5),
            forward_interval: Duration::from_secs(5),
            host: crate::event::local_host().to_string(),
            rotate_bytes: 64 << 20,
            writer: WriterConfig::default(),
        }
    }

    /// Directory for the node's own files (forward backup).
    pub fn state_dir(&self) -> PathBuf {
        self.spool_dir.join("node")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub apps: usize,
    pub syncs: u64,
    pub sync_failures: u64,
    pub trigger_writes: u64,
    pub forwarded: u64,
    pub pruned_files: u64,
    pub stale_descriptors: u64,
}

/// Whether a process with this pid exists.
pub fn pid_alive(pid: u32) -> bool {
    let Ok(pid) = libc::pid_t::try_from(pid) else {
        return false;
    };
    if pid <= 0 {
        return false;
    }
    // SAFETY: signal 0 performs the permission and existence check only.
    let r = unsafe { libc::kill(pid, 0) };
    r == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

/// Live application descriptors in `spool_dir`. Descriptors of dead
/// processes are deleted along with their trigger files.
pub fn scan(spool_dir: &Path) -> std::io::Result<Vec<AppDescriptor>> {
    let mut live = Vec::new();
    for entry in std::fs::read_dir(spool_dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("desc") {
            continue;
        }
        let desc = match AppDescriptor::load(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => {
                warn!("unreadable descriptor {}: {e}", path.display());
                continue;
            }
        };
        if pid_alive(desc.pid) {
            live.push(desc);
        } else {
            info!(
                "pruning stale descriptor {} (pid {} is gone)",
                path.display(),
                desc.pid
            );
            let _ = std::fs::remove_file(&path);
            let _ = std::fs::remove_file(&desc.trigger_path);
        }
    }
    live.sort_by(|a, b| (&a.prog, a.pid).cmp(&(&b.prog, b.pid)));
    Ok(live)
}

/// `<prog>.<pid>.<epoch>.nlog` parts of a spool file name.
fn parse_spool_name(path: &Path) -> Option<(String, u32, u64)> {
    let name = path.file_name()?.to_str()?.strip_suffix(".nlog")?;
    let mut parts = name.rsplitn(3, '.');
    let epoch = parts.next()?.parse().ok()?;
    let pid = parts.next()?.parse().ok()?;
    let prog = parts.next()?.to_string();
    Some((prog, pid, epoch))
}

fn spool_file(spool_dir: &Path, prog: &str, pid: u32, epoch: u64) -> PathBuf {
    spool_dir.join(format!("{prog}.{pid}.{epoch}.nlog"))
}

struct App {
    desc: AppDescriptor,
    epoch: u64,
    written: Option<TriggerFile>,
}

struct Stop {
    stopped: Mutex<bool>,
    cond: Condvar,
}

impl Stop {
    /// Sleeps up to `d`; returns true once stop was requested.
    fn sleep(&self, d: Duration) -> bool {
        let mut s = self.stopped.lock();
        if !*s {
            self.cond.wait_for(&mut s, d);
        }
        *s
    }

    fn is_set(&self) -> bool {
        *self.stopped.lock()
    }
}

struct Shared {
    config: NodeConfig,
    stop: Stop,
    apps: Mutex<BTreeMap<(String, u32), App>>,
    stats: Mutex<NodeStats>,
}

/// Per-host daemon: discovers instrumented processes, steers their trigger
/// files from manager activations, and forwards their spool files.
pub struct Node {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Node {
    pub fn start(config: NodeConfig) -> Result<Node, ServiceError> {
        std::fs::create_dir_all(config.state_dir()).map_err(|e| ServiceError::Path {
            path: config.spool_dir.clone(),
            message: e.to_string(),
        })?;
        let mut writer = None;
        if let Some(producer) = &config.producer {
            let wc = WriterConfig {
                backup_path: Some(config.state_dir().join("forward-backup.nlog")),
                ..config.writer.clone()
            };
            writer = Some(Writer::open(producer.clone(), wc)?);
        }
        let shared = Arc::new(Shared {
            config,
            stop: Stop {
                stopped: Mutex::new(false),
                cond: Condvar::new(),
            },
            apps: Mutex::new(BTreeMap::new()),
            stats: Mutex::new(NodeStats::default()),
        });
        let mut threads = Vec::new();
        let s = shared.clone();
        threads.push(
            std::thread::Builder::new()
                .name("nl-node-sync".into())
                .spawn(move || loop {
                    sync_once(&s);
                    if s.stop.sleep(s.config.poll_interval) {
                        return;
                    }
                })?,
        );
        if let Some(writer) = writer {
            let s = shared.clone();
            threads.push(
                std::thread::Builder::new()
                    .name("nl-node-forward".into())
                    .spawn(move || forward_loop(&s, writer))?,
            );
        }
        Ok(Node { shared, threads })
    }

    pub fn stats(&self) -> NodeStats {
        let mut s = *self.shared.stats.lock();
        s.apps = self.shared.apps.lock().len();
        s
    }

    /// Stops both loops; the forwarder flushes and commits what was accepted.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        *self.shared.stop.stopped.lock() = true;
        self.shared.stop.cond.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Epoch and trigger contents left by an earlier node run, if any.
fn recover(spool_dir: &Path, desc: &AppDescriptor) -> (u64, Option<TriggerFile>) {
    if let Ok(Some(t)) = TriggerFile::load(&desc.trigger_path) {
        let epoch = t
            .destination
            .as_ref()
            .and_then(|d| d.file_path())
            .and_then(parse_spool_name)
            .filter(|(prog, pid, _)| *prog == desc.prog && *pid == desc.pid)
            .map(|(_, _, e)| e);
        if let Some(e) = epoch {
            return (e, Some(t));
        }
    }
    let next = std::fs::read_dir(spool_dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| parse_spool_name(&e.path()))
        .filter(|(prog, pid, _)| *prog == desc.prog && *pid == desc.pid)
        .map(|(_, _, e)| e + 1)
        .max()
        .unwrap_or(0);
    (next, None)
}

fn sync_once(s: &Shared) {
    let spool = &s.config.spool_dir;
    let live = match scan(spool) {
        Ok(l) => l,
        Err(e) => {
            warn!("scanning {}: {e}", spool.display());
            return;
        }
    };
    {
        let mut apps = s.apps.lock();
        let before = apps.len();
        apps.retain(|k, _| {
            live.iter()
                .any(|d| (d.prog.as_str(), d.pid) == (k.0.as_str(), k.1))
        });
        s.stats.lock().stale_descriptors += (before - apps.len()) as u64;
        for d in &live {
            apps.entry((d.prog.clone(), d.pid)).or_insert_with(|| {
                let (epoch, written) = recover(spool, d);
                debug!("tracking {} pid {} at epoch {epoch}", d.prog, d.pid);
                App {
                    desc: d.clone(),
                    epoch,
                    written,
                }
            });
        }
    }
    let Some(manager) = &s.config.manager else {
        return;
    };
    let mut progs: Vec<String> = live.iter().map(|d| d.prog.clone()).collect();
    progs.dedup();
    if progs.is_empty() {
        return;
    }
    let client =
        ControlClient::with_timeout(manager, s.config.poll_interval.max(Duration::from_secs(1)));
    let refs: Vec<&str> = progs.iter().map(String::as_str).collect();
    let levels = match client.resolve(&s.config.host, &refs) {
        Ok(l) => l,
        Err(e) => {
            s.stats.lock().sync_failures += 1;
            warn!("manager poll failed, keeping current levels: {e}");
            return;
        }
    };
    let mut writes = 0;
    let mut apps = s.apps.lock();
    for app in apps.values_mut() {
        let level = levels
            .iter()
            .find(|l| l.prog == app.desc.prog)
            .and_then(|l| Level::new(l.level as i64).ok())
            .unwrap_or(Level::OFF);
        let current = spool_file(spool, &app.desc.prog, app.desc.pid, app.epoch);
        if std::fs::metadata(&current).is_ok_and(|m| m.len() >= s.config.rotate_bytes) {
            app.epoch += 1;
        }
        let desired = TriggerFile {
            level: Some(level),
            destination: Some(Endpoint::file(spool_file(
                spool,
                &app.desc.prog,
                app.desc.pid,
                app.epoch,
            ))),
        };
        if app.written.as_ref() != Some(&desired) {
            match desired.store(&app.desc.trigger_path) {
                Ok(()) => {
                    debug!("{}: level {level}", app.desc.trigger_path.display());
                    app.written = Some(desired);
                    writes += 1;
                }
                Err(e) => warn!("writing {}: {e}", app.desc.trigger_path.display()),
            }
        }
    }
    let mut stats = s.stats.lock();
    stats.syncs += 1;
    stats.trigger_writes += writes;
}

struct Forwarded {
    reader: SpoolReader,
    /// (forward count after a batch, file offset after it), oldest first.
    pending: VecDeque<(u64, u64)>,
}

fn forward_loop(s: &Shared, writer: Writer) {
    let mut files: HashMap<PathBuf, Forwarded> = HashMap::new();
    let mut sent: u64 = 0;
    loop {
        forward_once(s, &writer, &mut files, &mut sent);
        if s.stop.sleep(s.config.forward_interval) {
            break;
        }
    }
    forward_once(s, &writer, &mut files, &mut sent);
    if let Err(e) = writer.close() {
        warn!("closing forward writer: {e}");
    }
    commit_settled(&writer, &mut files);
}

fn commit_settled(writer: &Writer, files: &mut HashMap<PathBuf, Forwarded>) {
    let stats = writer.stats();
    let settled = stats.settled + stats.dropped;
    for f in files.values_mut() {
        let mut offset = None;
        while let Some(&(mark, end)) = f.pending.front() {
            if mark > settled {
                break;
            }
            offset = Some(end);
            f.pending.pop_front();
        }
        if let Some(o) = offset {
            if let Err(e) = f.reader.commit_to(o) {
                warn!("committing {}: {e}", f.reader.path().display());
            }
        }
    }
}

fn forward_once(
    s: &Shared,
    writer: &Writer,
    files: &mut HashMap<PathBuf, Forwarded>,
    sent: &mut u64,
) {
    commit_settled(writer, files);
    let spool = &s.config.spool_dir;
    let mut paths: Vec<(String, u32, u64, PathBuf)> = match std::fs::read_dir(spool) {
        Ok(rd) => rd
            .flatten()
            .filter_map(|e| {
                let p = e.path();
                parse_spool_name(&p).map(|(prog, pid, epoch)| (prog, pid, epoch, p))
            })
            .collect(),
        Err(e) => {
            warn!("listing {}: {e}", spool.display());
            return;
        }
    };
    paths.sort();
    let mut forwarded = 0;
    for (_, _, _, path) in &paths {
        if !files.contains_key(path) {
            match SpoolReader::open(path.clone()) {
                Ok(reader) => {
                    files.insert(
                        path.clone(),
                        Forwarded {
                            reader,
                            pending: VecDeque::new(),
                        },
                    );
                }
                Err(e) => {
                    warn!("opening {}: {e}", path.display());
                    continue;
                }
            }
        }
        let f = files.get_mut(path).expect("inserted");
        loop {
            if s.stop.is_set() && forwarded > 0 && f.reader.backlog() == 0 {
                break;
            }
            let batch = match f.reader.read_batch(FORWARD_BATCH) {
                Ok(b) => b,
                Err(e) => {
                    warn!("reading {}: {e}", path.display());
                    break;
                }
            };
            for n in &batch.notices {
                warn!("{n}");
            }
            if batch.events.is_empty() {
                if !batch.notices.is_empty() {
                    f.pending.push_back((*sent, batch.end_offset));
                    continue;
                }
                break;
            }
            for e in batch.events {
                if let Err(err) = writer.write(e) {
                    warn!("forward writer: {err}");
                    break;
                }
                *sent += 1;
                forwarded += 1;
            }
            f.pending.push_back((*sent, batch.end_offset));
        }
    }
    s.stats.lock().forwarded += forwarded;
    prune(s, files, &paths);
}

/// Deletes spool files that are fully forwarded and will not grow again.
fn prune(
    s: &Shared,
    files: &mut HashMap<PathBuf, Forwarded>,
    paths: &[(String, u32, u64, PathBuf)],
) {
    let apps = s.apps.lock();
    let mut removed = 0;
    for (prog, pid, epoch, path) in paths {
        let finished = match apps.get(&(prog.clone(), *pid)) {
            None => true,
            Some(app) => *epoch < app.epoch,
        };
        if !finished {
            continue;
        }
        let Some(f) = files.get(path) else { continue };
        let len = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        if f.reader.position() == len && f.reader.committed() == len && f.pending.is_empty() {
            let _ = std::fs::remove_file(path);
            let _ = std::fs::remove_file(cursor_path(path));
            files.remove(path);
            removed += 1;
        }
    }
    s.stats.lock().pruned_files += removed;
}
