use std::path::Path;
use std::time::{Duration, Instant};

use nlact::codec::{read_all, Format};
use nlact::control::{ClientError, ControlClient};
use nlact::services::{Manager, ManagerConfig, Node, NodeConfig, Producer, ProducerConfig};
use nlact::transport::{Endpoint, Writer, WriterConfig};
use nlact::trigger::{TriggerConfig, TriggerFile, TriggeredHandle};
use nlact::{Event, Level, Timestamp, Value};

fn wait_for(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    f()
}

fn manager(state: Option<&Path>) -> Manager {
    Manager::start(ManagerConfig {
        listen: "127.0.0.1:0".into(),
        state_path: state.map(Path::to_path_buf),
        threads: 2,
    })
    .unwrap()
}

fn producer(data_dir: &Path) -> Producer {
    Producer::start(ProducerConfig {
        listen: "127.0.0.1:0".into(),
        control: "127.0.0.1:0".into(),
        data_dir: data_dir.to_path_buf(),
        ack_interval: Duration::from_millis(50),
        sink_flush_interval: Duration::from_millis(50),
        ..ProducerConfig::default()
    })
    .unwrap()
}

fn ev(prog: &str, n: i64) -> Event {
    Event::with_parts(
        Timestamp::from_micros(1_000_000 + n),
        "h1",
        prog,
        "Tick",
        Level::new(3).unwrap(),
        vec![("N".to_string(), Value::Int(n))],
    )
    .unwrap()
}

fn read_file(path: &Path) -> Vec<Event> {
    match std::fs::File::open(path) {
        Ok(f) => read_all(f, Format::from_path(path)).unwrap(),
        Err(_) => Vec::new(),
    }
}

#[test]
fn manager_routes() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("activations.json");
    let m = manager(Some(&state));
    let c = ControlClient::new(&m.local_addr().to_string());

    let a = c.set_activation("Ath*", "*", 4, None).unwrap();
    assert_eq!(a.level, 4);
    c.set_activation("Athena", "node7", 6, None).unwrap();
    let list = c.activations().unwrap();
    assert_eq!(list.activations.len(), 2);

    let levels = c.resolve("node7", &["Athena", "Athos", "Zeus"]).unwrap();
    let got: Vec<i16> = levels.iter().map(|l| l.level).collect();
    assert_eq!(got, vec![6, 4, -1]);

    match c.set_activation("Athena", "*", 1, Some(list.version - 1)) {
        Err(ClientError::Http { status: 409, .. }) => {}
        other => panic!("expected conflict, got {other:?}"),
    }
    match c.set_activation("[", "*", 1, None) {
        Err(ClientError::Http { status: 400, .. }) => {}
        other => panic!("expected bad request, got {other:?}"),
    }
    match c.set_activation("Athena", "*", 300, None) {
        Err(ClientError::Http { status: 400, .. }) => {}
        other => panic!("expected bad request, got {other:?}"),
    }
    match c.query("", 1) {
        Err(ClientError::Http { status: 404, .. }) => {}
        other => panic!("manager has no /events, got {other:?}"),
    }

    assert!(c.clear_activation("Ath*", "*").unwrap());
    assert!(!c.clear_activation("Ath*", "*").unwrap());
    m.shutdown();

    let m = manager(Some(&state));
    let c = ControlClient::new(&m.local_addr().to_string());
    let list = c.activations().unwrap();
    assert_eq!(list.activations.len(), 1);
    assert_eq!(c.resolve("node7", &["Athena"]).unwrap()[0].level, 6);
}

#[test]
fn producer_subscriptions_and_query() {
    let dir = tempfile::tempdir().unwrap();
    let p = producer(&dir.path().join("producer"));
    let c = ControlClient::new(&p.control_addr().to_string());
    let out = dir.path().join("even.log");

    match c.subscribe("N % 2", "file:///tmp/x.log") {
        Err(ClientError::Http {
            status: 400,
            position,
            ..
        }) => assert!(position.is_some()),
        other => panic!("expected a filter error, got {other:?}"),
    }
    let id = c
        .subscribe(
            "N < 10 and PROG = \"A\"",
            &format!("file://{}", out.display()),
        )
        .unwrap();
    assert_eq!(c.subscriptions().unwrap().len(), 1);

    let w = Writer::open(
        Endpoint::net("127.0.0.1", p.events_addr().port()),
        WriterConfig::default(),
    )
    .unwrap();
    for n in 0..20 {
        w.write(ev(if n % 2 == 0 { "A" } else { "B" }, n)).unwrap();
    }
    w.close().unwrap();
    assert_eq!(w.stats().settled, 20);

    assert!(wait_for(Duration::from_secs(5), || read_file(&out).len() == 5));
    let got: Vec<i64> = read_file(&out)
        .iter()
        .map(|e| match e.field("N") {
            Some(Value::Int(n)) => *n,
            other => panic!("{other:?}"),
        })
        .collect();
    assert_eq!(got, vec![0, 2, 4, 6, 8]);

    let recent = c.query("PROG = \"B\"", 3).unwrap();
    assert_eq!(recent.len(), 3);
    assert!(
        recent[0].contains("N=15") && recent[2].contains("N=19"),
        "{recent:?}"
    );

    assert!(c.unsubscribe(&id).unwrap());
    assert!(!c.unsubscribe(&id).unwrap());
    assert!(c.subscriptions().unwrap().is_empty());
    p.shutdown();
}

#[test]
fn subscriptions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("producer");
    let out = dir.path().join("all.log");
    let p = producer(&data);
    let c = ControlClient::new(&p.control_addr().to_string());
    let id = c
        .subscribe("", &format!("file://{}", out.display()))
        .unwrap();
    p.ingest(vec![ev("A", 1)]);
    p.shutdown();

    let p = producer(&data);
    let c = ControlClient::new(&p.control_addr().to_string());
    let subs = c.subscriptions().unwrap();
    assert_eq!(subs.len(), 1);
    assert_eq!(subs[0].id, id);
    p.ingest(vec![ev("A", 2)]);
    p.shutdown();
    assert_eq!(read_file(&out).len(), 2);
}

#[test]
fn producer_stream() {
    let dir = tempfile::tempdir().unwrap();
    let p = producer(dir.path());
    let c = ControlClient::new(&p.control_addr().to_string());
    let mut stream = c.stream("N >= 3").unwrap();
    assert!(wait_for(Duration::from_secs(5), || p.pipe().len() == 1));
    p.ingest((0..5).map(|n| ev("A", n)).collect());
    let first = stream.next().unwrap().unwrap();
    let second = stream.next().unwrap().unwrap();
    assert!(first.contains("N=3"), "{first}");
    assert!(second.contains("N=4"), "{second}");
    drop(stream);
    assert!(wait_for(Duration::from_secs(5), || {
        p.ingest(vec![ev("A", 9)]);
        p.pipe().is_empty()
    }));
    p.shutdown();
}

fn node_config(spool: &Path) -> NodeConfig {
    let mut n = NodeConfig::new(spool);
    n.poll_interval = Duration::from_millis(100);
    n.forward_interval = Duration::from_millis(100);
    n.host = "h1".into();
    n.writer = WriterConfig::default().with_flush_interval(Duration::from_millis(50));
    n
}

fn app(spool: &Path, prog: &str) -> TriggeredHandle {
    let cfg = TriggerConfig::new(
        prog,
        spool,
        Endpoint::file(spool.join(format!("{prog}.default.log"))),
    )
    .with_check_interval(Duration::from_millis(50));
    let mut cfg = cfg;
    cfg.writer = WriterConfig::default().with_flush_interval(Duration::from_millis(50));
    TriggeredHandle::open(cfg).unwrap()
}

#[test]
fn activation_reaches_consumer_through_node_and_producer() {
    let dir = tempfile::tempdir().unwrap();
    let spool = dir.path().join("spool");
    std::fs::create_dir_all(&spool).unwrap();
    let out = dir.path().join("consumer.log");

    let m = manager(None);
    let p = producer(&dir.path().join("producer"));
    let pc = ControlClient::new(&p.control_addr().to_string());
    pc.subscribe("PROG = \"Athena\"", &format!("file://{}", out.display()))
        .unwrap();

    let mut cfg = node_config(&spool);
    cfg.manager = Some(m.local_addr().to_string());
    cfg.producer = Some(Endpoint::net("127.0.0.1", p.events_addr().port()));
    let node = Node::start(cfg).unwrap();

    let mut athena = app(&spool, "Athena");
    let mut other = app(&spool, "Other");
    assert!(!athena
        .t_write(Level::new(2).unwrap(), "Early", [("N", 0)])
        .unwrap());

    let mc = ControlClient::new(&m.local_addr().to_string());
    mc.set_activation("*", "h1", 3, None).unwrap();
    assert!(wait_for(Duration::from_secs(5), || {
        athena.poll_trigger().unwrap();
        athena.level() == Level::new(3).unwrap()
    }));
    for n in 1..=50 {
        assert!(athena
            .t_write(Level::new(3).unwrap(), "Tick", [("N", n)])
            .unwrap());
        assert!(!athena
            .t_write(Level::new(4).unwrap(), "Fine", [("N", n)])
            .unwrap());
    }
    other.poll_trigger().unwrap();
    other
        .t_write(Level::new(1).unwrap(), "Tick", [("N", 1)])
        .unwrap();
    athena.flush().unwrap();
    other.flush().unwrap();

    let arrived = wait_for(Duration::from_secs(10), || read_file(&out).len() == 50);
    assert!(
        arrived,
        "consumer has {} events; node {:?}; spool {:?}",
        read_file(&out).len(),
        node.stats(),
        std::fs::read_dir(&spool)
            .unwrap()
            .flatten()
            .map(|e| e.file_name())
            .collect::<Vec<_>>()
    );
    let got = read_file(&out);
    let ns: Vec<_> = got.iter().map(|e| e.field("N").cloned()).collect();
    assert_eq!(
        ns,
        (1..=50).map(|n| Some(Value::Int(n))).collect::<Vec<_>>()
    );
    assert!(got.iter().all(|e| e.prog == "Athena" && e.name == "Tick"));

    // Switching off stops emission.
    mc.set_activation("*", "h1", -1, None).unwrap();
    assert!(wait_for(Duration::from_secs(5), || {
        athena.poll_trigger().unwrap();
        athena.level() == Level::OFF
    }));
    assert!(!athena
        .t_write(Level::new(0).unwrap(), "Tick", [("N", 99)])
        .unwrap());

    athena.close().unwrap();
    other.close().unwrap();
    assert!(node.stats().forwarded >= 51);
    node.shutdown();
    p.shutdown();
    m.shutdown();
}

#[test]
fn unreachable_manager_leaves_triggers_alone() {
    let dir = tempfile::tempdir().unwrap();
    let spool = dir.path();
    let mut cfg = node_config(spool);
    // Nothing listens on the discard port.
    cfg.manager = Some("127.0.0.1:9".into());
    let mut a = app(spool, "Athena");
    let trig = a.trigger_path().to_path_buf();
    let manual = TriggerFile {
        level: Some(Level::new(5).unwrap()),
        destination: None,
    };
    manual.store(&trig).unwrap();
    let node = Node::start(cfg).unwrap();
    assert!(wait_for(Duration::from_secs(5), || node
        .stats()
        .sync_failures
        >= 2));
    assert_eq!(TriggerFile::load(&trig).unwrap(), Some(manual));
    a.poll_trigger().unwrap();
    assert_eq!(a.level(), Level::new(5).unwrap());
    node.shutdown();
}
