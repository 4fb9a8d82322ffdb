use std::collections::VecDeque;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use tracing::warn;

use crate::event::Event;

use super::{Endpoint, Listener, SpoolReader, TransportError};

const POLL: Duration = Duration::from_millis(100);
const BATCH: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum ReadItem {
    Event(Event),
    /// Skipped or corrupt input that did not stop the read.
    Notice(String),
}

/// Iterator over the events arriving at an endpoint.
///
/// A file endpoint is read from the start; in tail mode the reader then keeps
/// polling for appended records instead of ending. A network endpoint is
/// bound and every sender's events are yielded as they arrive.
pub struct Reader {
    inner: Inner,
}

enum Inner {
    File {
        spool: SpoolReader,
        tail: bool,
        queue: VecDeque<ReadItem>,
        ended: bool,
    },
    Net {
        rx: Receiver<Result<ReadItem, TransportError>>,
    },
}

pub fn open_reader(endpoint: &Endpoint, tail: bool) -> Result<Reader, TransportError> {
    match endpoint {
        Endpoint::File { path } => {
            if !tail && !path.exists() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} not found", path.display()),
                )
                .into());
            }
            Ok(Reader {
                inner: Inner::File {
                    spool: SpoolReader::from_start(path.clone()),
                    tail,
                    queue: VecDeque::new(),
                    ended: false,
                },
            })
        }
        Endpoint::Net { .. } => {
            let listener = Listener::bind(endpoint)?;
            let (tx, rx) = crossbeam_channel::bounded(BATCH * 4);
            std::thread::Builder::new()
                .name("nl-reader".into())
                .spawn(move || accept_loop(listener, tx))?;
            Ok(Reader {
                inner: Inner::Net { rx },
            })
        }
    }
}

fn accept_loop(listener: Listener, tx: Sender<Result<ReadItem, TransportError>>) {
    loop {
        let mut inbound = match listener.accept() {
            Ok(i) => i,
            Err(e) => {
                warn!("accept failed: {e}");
                std::thread::sleep(POLL);
                continue;
            }
        };
        let tx = tx.clone();
        let spawned = std::thread::Builder::new()
            .name("nl-reader-conn".into())
            .spawn(move || {
                let acker = inbound.acker();
                loop {
                    match inbound.next_batch(BATCH) {
                        Ok(Some(batch)) => {
                            let n = batch.len() as u64;
                            for e in batch {
                                if tx.send(Ok(ReadItem::Event(e))).is_err() {
                                    return;
                                }
                            }
                            acker.mark(n);
                            let _ = acker.ack_processed();
                        }
                        Ok(None) => return,
                        Err(e) => {
                            let _ = tx.send(Ok(ReadItem::Notice(e.to_string())));
                            return;
                        }
                    }
                }
            });
        if spawned.is_err() {
            return;
        }
    }
}

impl Iterator for Reader {
    type Item = Result<ReadItem, TransportError>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.inner {
            Inner::Net { rx } => rx.recv().ok(),
            Inner::File {
                spool,
                tail,
                queue,
                ended,
            } => loop {
                if let Some(item) = queue.pop_front() {
                    return Some(Ok(item));
                }
                if *ended {
                    return None;
                }
                let batch = match spool.read_batch(BATCH) {
                    Ok(b) => b,
                    Err(e) => return Some(Err(e.into())),
                };
                queue.extend(batch.notices.into_iter().map(ReadItem::Notice));
                let empty = batch.events.is_empty();
                queue.extend(batch.events.into_iter().map(ReadItem::Event));
                if empty && queue.is_empty() {
                    if !*tail {
                        *ended = true;
                        if spool.backlog() > 0 {
                            return Some(Ok(ReadItem::Notice(format!(
                                "{}: {} trailing bytes form an incomplete record",
                                spool.path().display(),
                                spool.backlog()
                            ))));
                        }
                        return None;
                    }
                    std::thread::sleep(POLL);
                }
            },
        }
    }
}
