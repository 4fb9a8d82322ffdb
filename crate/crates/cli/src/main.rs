mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand};

use nlact::control::{ControlClient, DEFAULT_MANAGER_PORT, DEFAULT_PRODUCER_PORT};
use nlact::harness::{self, FilterBenchConfig, FilterKind, GenConfig, Intervals, ScaleConfig};
use nlact::services::{Manager, ManagerConfig, Node, NodeConfig, Producer, ProducerConfig};
use nlact::transport::{Endpoint, WriterConfig};

use config::{pick, FileConfig};

#[derive(Parser)]
#[command(
    name = "nlact",
    version,
    about = "Remote activation and collection of program instrumentation"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "NL_CONFIG")]
    config: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-host node: discovers instrumented programs, applies levels, forwards spool files.
    Node {
        #[command(subcommand)]
        run: NodeRun,
    },
    /// Event producer: receives events and serves subscriptions.
    Producer {
        #[command(subcommand)]
        run: ProducerRun,
    },
    /// Activation manager: stores requested levels.
    Manager {
        #[command(subcommand)]
        run: ManagerRun,
    },
    /// Sets the level for programs matching a pattern.
    SetLevel {
        prog: String,
        /// -1 (off) to 255, or a name such as `info`.
        #[arg(allow_hyphen_values = true)]
        level: String,
        #[arg(long, default_value = "*")]
        host: String,
        /// Fail unless the activation set is at this version.
        #[arg(long)]
        if_version: Option<u64>,
        #[command(flatten)]
        manager: ManagerAddr,
    },
    /// Removes an activation entry.
    ClearLevel {
        prog: String,
        #[arg(long, default_value = "*")]
        host: String,
        #[command(flatten)]
        manager: ManagerAddr,
    },
    /// Lists activation entries.
    Activations {
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        manager: ManagerAddr,
    },
    /// Subscribes an endpoint to events matching a filter; prints the id.
    Subscribe {
        filter: String,
        endpoint: String,
        #[command(flatten)]
        producer: ProducerAddr,
    },
    Unsubscribe {
        id: String,
        #[command(flatten)]
        producer: ProducerAddr,
    },
    /// Lists subscriptions.
    Subscriptions {
        #[command(flatten)]
        producer: ProducerAddr,
    },
    /// Prints matching events as they arrive at the producer.
    Tail {
        filter: String,
        #[command(flatten)]
        producer: ProducerAddr,
    },
    /// Prints the most recent matching events held by the producer.
    Query {
        filter: String,
        #[arg(long, default_value_t = 100)]
        max: usize,
        #[command(flatten)]
        producer: ProducerAddr,
    },
    /// Converts between `.log` (ASCII) and `.nlog` (binary) files.
    Convert { input: PathBuf, output: PathBuf },
    /// Filter throughput over a complexity × pass-rate grid.
    BenchFilter(BenchFilterArgs),
    /// End-to-end latency and rate with many generators and consumers.
    BenchScale(BenchScaleArgs),
    #[command(hide = true)]
    Gen(GenArgs),
}

#[derive(Args)]
struct ManagerAddr {
    /// Manager address (`host:port` or URL).
    #[arg(long, env = "NL_MANAGER")]
    manager: Option<String>,
}

#[derive(Args)]
struct ProducerAddr {
    /// Producer control address (`host:port` or URL).
    #[arg(long, env = "NL_PRODUCER")]
    producer: Option<String>,
}

#[derive(Subcommand)]
enum NodeRun {
    Run(NodeArgs),
}

#[derive(Subcommand)]
enum ProducerRun {
    Run(ProducerArgs),
}

#[derive(Subcommand)]
enum ManagerRun {
    Run(ManagerArgs),
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long, env = "NL_SPOOL_DIR")]
    spool_dir: Option<PathBuf>,
    #[command(flatten)]
    manager: ManagerAddr,
    /// Producer event endpoint, e.g. `x-netlog://host:14380`.
    #[arg(long)]
    forward_to: Option<String>,
    /// Seconds between manager polls.
    #[arg(long, value_parser = parse_secs)]
    poll_interval: Option<f64>,
    /// Seconds between forwarding bursts.
    #[arg(long, value_parser = parse_secs)]
    forward_interval: Option<f64>,
    /// Seconds the forwarder buffers before sending.
    #[arg(long, value_parser = parse_secs)]
    flush_interval: Option<f64>,
    /// Host name reported to the manager.
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    rotate_bytes: Option<u64>,
}

#[derive(Args)]
struct ProducerArgs {
    /// Event listener address.
    #[arg(long)]
    listen: Option<String>,
    /// Control API address.
    #[arg(long)]
    control: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_secs)]
    ack_interval: Option<f64>,
    #[arg(long, value_parser = parse_secs)]
    sink_flush_interval: Option<f64>,
    #[arg(long)]
    ring_size: Option<usize>,
}

#[derive(Args)]
struct ManagerArgs {
    #[arg(long)]
    listen: Option<String>,
    /// Activation state file.
    #[arg(long)]
    state: Option<PathBuf>,
}

#[derive(Args)]
struct BenchFilterArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,4,8,12,16,20,24,28,32,36,40"
    )]
    complexities: Vec<usize>,
    /// Percentages.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,10,20,30,40,50,60,70,80,90,100"
    )]
    pass_rates: Vec<u32>,
    #[arg(long, default_value_t = 100_000)]
    events: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchScaleArgs {
    #[arg(long, value_delimiter = ',', default_value = "5")]
    producers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    consumers: Vec<usize>,
    /// Events per second per generator.
    #[arg(long, default_value_t = 40.0)]
    rate: f64,
    #[arg(long, default_value = "complex", value_parser = ["simple", "complex"])]
    filter: String,
    /// Seconds of generation per run.
    #[arg(long, default_value_t = 60.0, value_parser = parse_secs)]
    duration: f64,
    /// `standard` (1 s buffers, 5 s forwarding) or `compressed`.
    #[arg(long, default_value = "standard", value_parser = ["standard", "compressed"])]
    profile: String,
    #[arg(long, value_parser = parse_secs)]
    forward_interval: Option<f64>,
    /// Overrides every one-hop buffer interval.
    #[arg(long, value_parser = parse_secs)]
    buffer_interval: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    job: u32,
    #[arg(long)]
    rate: f64,
    #[arg(long, value_parser = parse_secs)]
    duration: f64,
    #[arg(long, env = "NL_SPOOL_DIR")]
    spool_dir: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long, value_parser = parse_secs, default_value_t = 1.0)]
    check_interval: f64,
    #[arg(long, value_parser = parse_secs, default_value_t = 1.0)]
    flush_interval: f64,
    #[arg(long, value_parser = parse_secs)]
    wait_active: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_secs(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("`{s}` is not a non-negative number of seconds")),
    }
}

fn secs(v: f64) -> Duration {
    Duration::from_secs_f64(v)
}

fn init_logging(verbose: u8, daemon: bool) {
    let default = match (verbose, daemon) {
        (0, false) => "warn",
        (0, true) | (1, _) => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

/// Blocks until SIGTERM, SIGINT or SIGHUP.
fn wait_for_signal() -> anyhow::Result<()> {
    let term = Arc::new(AtomicBool::new(false));
    for sig in [
        signal_hook::consts::SIGTERM,
        signal_hook::consts::SIGINT,
        signal_hook::consts::SIGHUP,
    ] {
        signal_hook::flag::register(sig, term.clone())?;
    }
    while !term.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(100));
    }
    Ok(())
}

fn announce(line: std::fmt::Arguments) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn manager_client(addr: &ManagerAddr, file: &FileConfig) -> ControlClient {
    let base = pick(addr.manager.clone(), file.manager_url.clone(), || {
        format!("127.0.0.1:{DEFAULT_MANAGER_PORT}")
    });
    ControlClient::new(&base)
}

fn producer_client(addr: &ProducerAddr, file: &FileConfig) -> ControlClient {
    let base = pick(addr.producer.clone(), file.producer_url.clone(), || {
        format!("127.0.0.1:{DEFAULT_PRODUCER_PORT}")
    });
    ControlClient::new(&base)
}

fn run_node(a: NodeArgs, f: &FileConfig) -> anyhow::Result<()> {
    let spool = pick(
        a.spool_dir,
        f.spool_dir.clone(),
        nlact::trigger::default_spool_dir,
    );
    let mut cfg = NodeConfig::new(spool);
    cfg.manager = Some(pick(a.manager.manager, f.manager_url.clone(), || {
        format!("127.0.0.1:{DEFAULT_MANAGER_PORT}")
    }));
    if let Some(to) = a.forward_to.or(f.node.forward_to.clone()) {
        cfg.producer = Some(Endpoint::parse(&to).with_context(|| format!("--forward-to {to}"))?);
    }
    if let Some(v) = a.poll_interval.or(f.node.poll_interval) {
        cfg.poll_interval = secs(v);
    }
    if let Some(v) = a.forward_interval.or(f.node.forward_interval) {
        cfg.forward_interval = secs(v);
    }
    if let Some(v) = a.flush_interval.or(f.node.flush_interval) {
        cfg.writer = WriterConfig::default().with_flush_interval(secs(v));
    }
    if let Some(h) = a.host.or(f.node.host.clone()) {
        cfg.host = h;
    }
    if let Some(b) = a.rotate_bytes.or(f.node.rotate_bytes) {
        cfg.rotate_bytes = b;
    }
    let spool = cfg.spool_dir.clone();
    let node = Node::start(cfg)?;
    announce(format_args!("node watching {}", spool.display()));
    wait_for_signal()?;
    node.shutdown();
    Ok(())
}

fn run_producer(a: ProducerArgs, f: &FileConfig) -> anyhow::Result<()> {
    let d = ProducerConfig::default();
    let p = &f.producer;
    let cfg = ProducerConfig {
        listen: pick(a.listen, p.listen.clone(), || d.listen.clone()),
        control: pick(a.control, p.control.clone(), || d.control.clone()),
        data_dir: pick(a.data_dir, p.data_dir.clone(), || d.data_dir.clone()),
        ring_size: pick(a.ring_size, p.ring_size, || d.ring_size),
        ack_interval: a
            .ack_interval
            .or(p.ack_interval)
            .map_or(d.ack_interval, secs),
        sink_flush_interval: a
            .sink_flush_interval
            .or(p.sink_flush_interval)
            .map_or(d.sink_flush_interval, secs),
        threads: d.threads,
    };
    let producer = Producer::start(cfg)?;
    announce(format_args!(
        "producer events {} control {}",
        producer.events_addr(),
        producer.control_addr()
    ));
    wait_for_signal()?;
    producer.shutdown();
    Ok(())
}

fn run_manager(a: ManagerArgs, f: &FileConfig) -> anyhow::Result<()> {
    let d = ManagerConfig::default();
    let cfg = ManagerConfig {
        listen: pick(a.listen, f.manager.listen.clone(), || d.listen.clone()),
        state_path: a.state.or(f.manager.state.clone()),
        threads: d.threads,
    };
    let manager = Manager::start(cfg)?;
    announce(format_args!("manager listening {}", manager.local_addr()));
    wait_for_signal()?;
    manager.shutdown();
    Ok(())
}

fn convert(input: &Path, output: &Path) -> anyhow::Result<()> {
    use nlact::codec::{convert, Format};
    let from = Format::from_path(input);
    let to = Format::from_path(output);
    let r = std::fs::File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let w =
        std::fs::File::create(output).with_context(|| format!("creating {}", output.display()))?;
    let stats = convert(
        std::io::BufReader::new(r),
        from,
        std::io::BufWriter::new(w),
        to,
    )
    .with_context(|| format!("converting {}", input.display()))?;
    eprintln!("{} events", stats.events);
    Ok(())
}

fn work_dir(given: Option<PathBuf>, tag: &str) -> anyhow::Result<PathBuf> {
    let dir = given.unwrap_or_else(|| {
        std::env::temp_dir().join(format!("nlact-{tag}-{}", std::process::id()))
    });
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn bench_filter(a: BenchFilterArgs) -> anyhow::Result<()> {
    let cfg = FilterBenchConfig {
        complexities: a.complexities,
        pass_rates: a.pass_rates,
        n_events: a.events,
        out_dir: work_dir(a.work_dir, "bench")?,
        repeats: a.repeats,
        ..FilterBenchConfig::default()
    };
    if let Some(p) = cfg.pass_rates.iter().find(|p| **p > 100) {
        bail!("pass rate {p} is over 100");
    }
    let rows = harness::bench_filter(&cfg)?;
    match a.out {
        Some(path) => harness::write_grid_csv(&rows, &path)?,
        None => {
            let tmp = cfg.out_dir.join("grid.csv");
            harness::write_grid_csv(&rows, &tmp)?;
            print!("{}", std::fs::read_to_string(&tmp)?);
        }
    }
    Ok(())
}

fn bench_scale(a: BenchScaleArgs) -> anyhow::Result<()> {
    let mut iv = if a.profile == "standard" {
        Intervals::standard()
    } else {
        Intervals::compressed()
    };
    if let Some(f) = a.forward_interval {
        iv.forward = secs(f);
    }
    if let Some(b) = a.buffer_interval {
        let b = secs(b);
        iv.app_flush = b;
        iv.node_flush = b;
        iv.sink_flush = b;
        iv.consumer_poll = b;
    }
    let kind = FilterKind::parse(&a.filter).expect("validated by clap");
    let base = work_dir(a.work_dir, "scale")?;
    let exe = std::env::current_exe()?;
    let mut rows = Vec::new();
    for &p in &a.producers {
        for &c in &a.consumers {
            let cfg = ScaleConfig {
                producers: p,
                consumers: c,
                rate: a.rate,
                filter_kind: kind,
                duration: secs(a.duration),
                intervals: iv,
                gen_exe: exe.clone(),
                work_dir: base.join(format!("p{p}-c{c}")),
            };
            let run = harness::bench_scale(&cfg)?;
            eprintln!(
                "producers={p} consumers={c}: median {:.3}s p90 {:.3}s, {:.1} ev/s out, {} missing, {} duplicates (expected {:.2}s)",
                run.row.median_s,
                run.row.p90_s,
                run.row.agg_out_eps,
                run.missing(),
                run.duplicates,
                run.expected_latency
            );
            rows.push(run.row);
        }
    }
    let out = a.out.unwrap_or_else(|| base.join("scale.csv"));
    harness::write_scale_csv(&rows, &out)?;
    print!("{}", std::fs::read_to_string(&out)?);
    Ok(())
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let stop = Arc::new(AtomicBool::new(false));
    signal_hook::flag::register(signal_hook::consts::SIGTERM, stop.clone())?;
    let mut cfg = GenConfig::new(a.job, a.spool_dir, a.ledger);
    cfg.rate = a.rate;
    cfg.duration = secs(a.duration);
    cfg.check_interval = secs(a.check_interval);
    cfg.flush_interval = secs(a.flush_interval);
    cfg.wait_active = a.wait_active.map(secs);
    cfg.seed = a.seed;
    let s = harness::run_generator(&cfg, &stop)?;
    announce(format_args!(
        "attempted {} emitted {}",
        s.attempted, s.emitted
    ));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Node {
            run: NodeRun::Run(a),
        } => run_node(a, &file),
        Command::Producer {
            run: ProducerRun::Run(a),
        } => run_producer(a, &file),
        Command::Manager {
            run: ManagerRun::Run(a),
        } => run_manager(a, &file),
        Command::SetLevel {
            prog,
            level,
            host,
            if_version,
            manager,
        } => {
            let level = nlact::Level::from_token(&level)
                .map_err(|e| anyhow::anyhow!("level `{level}`: {e}"))?;
            let a = manager_client(&manager, &file).set_activation(
                &prog,
                &host,
                level.value(),
                if_version,
            )?;
            println!("{}\t{}\t{}\t{}", a.prog, a.host, a.level, a.seq);
            Ok(())
        }
        Command::ClearLevel {
            prog,
            host,
            manager,
        } => {
            if !manager_client(&manager, &file).clear_activation(&prog, &host)? {
                bail!("no activation for {prog} on {host}");
            }
            Ok(())
        }
        Command::Activations { json, manager } => {
            let list = manager_client(&manager, &file).activations()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&list)?);
            } else {
                for a in list.activations {
                    println!("{}\t{}\t{}\t{}", a.prog, a.host, a.level, a.seq);
                }
            }
            Ok(())
        }
        Command::Subscribe {
            filter,
            endpoint,
            producer,
        } => {
            println!(
                "{}",
                producer_client(&producer, &file).subscribe(&filter, &endpoint)?
            );
            Ok(())
        }
        Command::Unsubscribe { id, producer } => {
            if !producer_client(&producer, &file).unsubscribe(&id)? {
                bail!("no subscription {id}");
            }
            Ok(())
        }
        Command::Subscriptions { producer } => {
            for s in producer_client(&producer, &file).subscriptions()? {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    s.id,
                    serde_json::to_string(&s.state)?.trim_matches('"'),
                    s.delivered,
                    s.endpoint,
                    s.filter
                );
            }
            Ok(())
        }
        Command::Tail { filter, producer } => {
            let stream = producer_client(&producer, &file).stream(&filter)?;
            let mut out = std::io::stdout().lock();
            for line in stream {
                let line = line.context("reading stream")?;
                if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
                    break;
                }
            }
            Ok(())
        }
        Command::Query {
            filter,
            max,
            producer,
        } => {
            for line in producer_client(&producer, &file).query(&filter, max)? {
                println!("{line}");
            }
            Ok(())
        }
        Command::Convert { input, output } => convert(&input, &output),
        Command::BenchFilter(a) => bench_filter(a),
        Command::BenchScale(a) => bench_scale(a),
        Command::Gen(a) => gen(a),
    }
}

fn main() {
    let cli = Cli::parse();
    let daemon = matches!(
        cli.command,
        Command::Node { .. } | Command::Producer { .. } | Command::Manager { .. }
    );
    init_logging(cli.verbose, daemon);
    if let Err(e) = run(cli) {
        eprintln!("nlact: {e:#}");
        std::process::exit(1);
    }
}
