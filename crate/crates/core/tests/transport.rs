use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use nlact::codec::{read_all, Format};
use nlact::transport::{open_reader, Endpoint, Listener, ReadItem, Writer, WriterConfig};
use nlact::{Event, Level, Timestamp};

fn ev(i: i64) -> Event {
    Event::with_parts(
        Timestamp::from_micros(1_000_000 + i),
        "host",
        "prog",
        "Tick",
        Level::new(2).unwrap(),
        vec![("I".into(), i.into())],
    )
    .unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

/// Receives on `port` until `count` events arrive or `limit` passes.
fn receive(listener: Listener, count: usize, limit: Duration) -> Vec<Event> {
    let deadline = Instant::now() + limit;
    let mut got = Vec::new();
    listener.set_nonblocking(true).unwrap();
    while got.len() < count && Instant::now() < deadline {
        let mut inbound = match listener.accept() {
            Ok(i) => i,
            Err(_) => {
                thread::sleep(Duration::from_millis(10));
                continue;
            }
        };
        inbound
            .set_timeout(Some(Duration::from_millis(50)))
            .unwrap();
        let acker = inbound.acker();
        while Instant::now() < deadline {
            match inbound.next_batch(1000) {
                Ok(Some(b)) => {
                    acker.mark(b.len() as u64);
                    acker.ack_processed().unwrap();
                    got.extend(b);
                }
                _ => break,
            }
        }
    }
    got
}

#[test]
fn file_writer_appends_and_flushes_on_interval() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.nlog");
    let w = Writer::open(
        Endpoint::file(&path),
        WriterConfig::default().with_flush_interval(Duration::from_millis(100)),
    )
    .unwrap();
    for i in 0..10 {
        assert_eq!(w.write(ev(i)).unwrap(), i as u64);
    }
    thread::sleep(Duration::from_millis(400));
    let events = read_all(std::fs::File::open(&path).unwrap(), Format::Binary).unwrap();
    assert_eq!(events.len(), 10);
    assert_eq!(events[3].seq, Some(3));
    w.close().unwrap();
    assert_eq!(w.stats().settled, 10);
    assert!(w.write(ev(99)).is_err());
}

#[test]
fn unused_file_writer_creates_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("never.log");
    let w = Writer::open(Endpoint::file(&path), WriterConfig::default()).unwrap();
    w.flush().unwrap();
    w.close().unwrap();
    assert!(!path.exists());
}

#[test]
fn ascii_file_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.log");
    let w = Writer::open(Endpoint::file(&path), WriterConfig::default()).unwrap();
    w.write(ev(1)).unwrap();
    w.close().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(
        text.starts_with(
            "DATE=19700101000001.000001 HOST=host PROG=prog LVL=2 NL.EVNT=Tick NL.SEQ=0 I=1"
        ),
        "{text}"
    );
}

#[test]
fn network_writer_delivers_and_settles_on_ack() {
    let listener = Listener::bind_addr("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let rx = thread::spawn(move || receive(listener, 500, Duration::from_secs(10)));
    let w = Writer::open(Endpoint::net("127.0.0.1", port), WriterConfig::default()).unwrap();
    for i in 0..500 {
        w.write(ev(i)).unwrap();
    }
    w.close().unwrap();
    let got = rx.join().unwrap();
    assert_eq!(got.len(), 500);
    assert_eq!(
        got,
        (0..500)
            .map(|i| ev(i).with_seq(i as u64))
            .collect::<Vec<_>>()
    );
    assert_eq!(w.stats().settled, 500);
}

#[test]
fn unreachable_peer_fills_backup_then_resends() {
    let dir = tempfile::tempdir().unwrap();
    let backup = dir.path().join("backup.nlog");
    let port = free_port();
    let config = WriterConfig {
        reconnect_initial: Duration::from_millis(100),
        reconnect_max: Duration::from_millis(200),
        flush_interval: Duration::from_millis(50),
        ..WriterConfig::default().with_backup(&backup)
    };
    let w = Writer::open(Endpoint::net("127.0.0.1", port), config).unwrap();
    for i in 0..50 {
        w.write(ev(i)).unwrap();
    }
    assert!(
        w.flush().is_err(),
        "flush should report the unreachable peer"
    );
    assert_eq!(w.stats().backed_up, 50);
    assert_eq!(
        read_all(std::fs::File::open(&backup).unwrap(), Format::Binary)
            .unwrap()
            .len(),
        50
    );

    let listener = Listener::bind_addr(("127.0.0.1", port)).unwrap();
    let rx = thread::spawn(move || receive(listener, 60, Duration::from_secs(10)));
    thread::sleep(Duration::from_millis(300));
    for i in 50..60 {
        w.write(ev(i)).unwrap();
    }
    w.close().unwrap();
    let got = rx.join().unwrap();
    let mut seqs: Vec<u64> = got.iter().map(|e| e.seq.unwrap()).collect();
    seqs.sort();
    seqs.dedup();
    assert_eq!(seqs, (0..60).collect::<Vec<_>>());
    assert_eq!(std::fs::metadata(&backup).unwrap().len(), 0);
}

#[test]
fn no_backup_retains_in_memory_until_reconnect() {
    let port = free_port();
    let config = WriterConfig {
        reconnect_initial: Duration::from_millis(50),
        reconnect_max: Duration::from_millis(100),
        ..WriterConfig::default()
    };
    let w = Writer::open(Endpoint::net("127.0.0.1", port), config).unwrap();
    for i in 0..20 {
        w.write(ev(i)).unwrap();
    }
    assert!(w.flush().is_err());
    assert_eq!(w.stats().retained, 20);
    let listener = Listener::bind_addr(("127.0.0.1", port)).unwrap();
    let rx = thread::spawn(move || receive(listener, 20, Duration::from_secs(10)));
    thread::sleep(Duration::from_millis(300));
    w.close().unwrap();
    assert_eq!(rx.join().unwrap().len(), 20);
}

#[test]
fn file_reader_reports_truncation_notice() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.nlog");
    let mut bytes = nlact::codec::encode_binary(&[ev(1), ev(2)]).unwrap();
    bytes.truncate(bytes.len() - 2);
    std::fs::write(&path, bytes).unwrap();
    let items: Vec<ReadItem> = open_reader(&Endpoint::file(&path), false)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(items.len(), 2);
    assert!(matches!(items[0], ReadItem::Event(_)));
    assert!(matches!(items[1], ReadItem::Notice(_)));
}

#[test]
fn backup_must_be_writable() {
    let r = Writer::open(
        Endpoint::net("127.0.0.1", 1),
        WriterConfig::default().with_backup("/nonexistent/dir/b.nlog"),
    );
    assert!(r.is_err());
}
