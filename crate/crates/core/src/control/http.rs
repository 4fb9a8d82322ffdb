use std::io::{self, Read};
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Request, Response, Server};

use super::ErrorBody;

const MAX_BODY: u64 = 1 << 20;

/// Status plus JSON body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn json<T: Serialize>(status: u16, body: &T) -> Reply {
        Reply {
            status,
            body: serde_json::to_string(body).expect("reply serializes"),
        }
    }

    pub fn error(status: u16, message: impl Into<String>, position: Option<usize>) -> Reply {
        Reply::json(
            status,
            &ErrorBody {
                error: message.into(),
                position,
            },
        )
    }

    pub fn not_found() -> Reply {
        Reply::error(404, "no such route", None)
    }

    pub fn send(self, request: Request) {
        let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
        let response = Response::from_string(self.body)
            .with_status_code(self.status)
            .with_header(header);
        if let Err(e) = request.respond(response) {
            tracing::debug!("response not delivered: {e}");
        }
    }
}

pub fn respond_json<T: Serialize>(request: Request, status: u16, body: &T) {
    Reply::json(status, body).send(request)
}

pub fn respond_error(
    request: Request,
    status: u16,
    message: impl Into<String>,
    position: Option<usize>,
) {
    Reply::error(status, message, position).send(request)
}

/// Parses the request body, mapping failures to a 400 reply.
pub fn read_json<T: DeserializeOwned>(request: &mut Request) -> Result<T, Reply> {
    let mut body = Vec::new();
    request
        .as_reader()
        .take(MAX_BODY)
        .read_to_end(&mut body)
        .map_err(|e| Reply::error(400, format!("reading body: {e}"), None))?;
    serde_json::from_slice(&body)
        .map_err(|e| Reply::error(400, format!("malformed body: {e}"), None))
}

/// Path and decoded query pairs of a request URL.
pub fn query_pairs(url: &str) -> (String, Vec<(String, String)>) {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let pairs = url::form_urlencoded::parse(query.as_bytes())
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect();
    (path.to_string(), pairs)
}

/// Blocking HTTP server with a fixed pool of request threads.
pub struct HttpServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl HttpServer {
    pub fn start<F>(addr: impl ToSocketAddrs, threads: usize, handler: F) -> io::Result<HttpServer>
    where
        F: Fn(Request) + Send + Sync + 'static,
    {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let server = Server::http(addr)
            .map_err(|e| io::Error::new(io::ErrorKind::AddrInUse, e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let handler = Arc::new(handler);
        let workers = (0..threads.max(1))
            .map(|i| {
                let server = server.clone();
                let handler = handler.clone();
                std::thread::Builder::new()
                    .name(format!("nl-http-{i}"))
                    .spawn(move || {
                        while let Ok(request) = server.recv() {
                            handler(request);
                        }
                    })
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(HttpServer {
            server,
            workers,
            addr,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_pairs_decode() {
        let (path, q) = query_pairs("/events?filter=LVL%20%3C%3D%202&max=5");
        assert_eq!(path, "/events");
        assert_eq!(
            q,
            vec![
                ("filter".into(), "LVL <= 2".into()),
                ("max".into(), "5".into())
            ]
        );
        assert_eq!(query_pairs("/x").1, vec![]);
    }
}
