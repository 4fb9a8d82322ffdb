use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;
use tiny_http::{Method, Request};

use crate::control::{
    query_pairs, read_json, ActivationError, ActivationSet, ClearActivationRequest, ClearResponse,
    HttpServer, Reply, ResolvedLevel, ResolvedLevels, SetActivationRequest,
};

use super::ServiceError;

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub listen: String,
    /// Activation set persistence; `None` keeps state in memory only.
    pub state_path: Option<PathBuf>,
    pub threads: usize,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            listen: format!("127.0.0.1:{}", crate::control::DEFAULT_MANAGER_PORT),
            state_path: None,
            threads: 4,
        }
    }
}

/// Serves the activation routes.
pub struct Manager {
    server: HttpServer,
    set: Arc<Mutex<ActivationSet>>,
}

impl Manager {
    pub fn start(config: ManagerConfig) -> Result<Manager, ServiceError> {
        let set = match &config.state_path {
            Some(p) => ActivationSet::open(p)?,
            None => ActivationSet::new(),
        };
        let set = Arc::new(Mutex::new(set));
        let shared = set.clone();
        let server = HttpServer::start(config.listen.as_str(), config.threads, move |req| {
            handle(&shared, req)
        })
        .map_err(|source| ServiceError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
        Ok(Manager { server, set })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn activations(&self) -> Arc<Mutex<ActivationSet>> {
        self.set.clone()
    }

    pub fn shutdown(self) {
        self.server.shutdown();
    }
}

fn activation_error(e: ActivationError) -> Reply {
    match e {
        ActivationError::Conflict { .. } => Reply::error(409, e.to_string(), None),
        ActivationError::State(..) => Reply::error(500, e.to_string(), None),
        _ => Reply::error(400, e.to_string(), None),
    }
}

fn handle(set: &Mutex<ActivationSet>, mut request: Request) {
    let (path, query) = query_pairs(request.url());
    let reply = if path != "/activations" {
        Reply::not_found()
    } else {
        match request.method() {
            Method::Put => match read_json::<SetActivationRequest>(&mut request) {
                Ok(r) => match set
                    .lock()
                    .set(&r.prog, &r.host, r.level as i64, r.if_version)
                {
                    Ok(a) => Reply::json(200, &a),
                    Err(e) => activation_error(e),
                },
                Err(reply) => reply,
            },
            Method::Delete => match read_json::<ClearActivationRequest>(&mut request) {
                Ok(r) => match set.lock().clear(&r.prog, &r.host) {
                    Ok(removed) => Reply::json(200, &ClearResponse { removed }),
                    Err(e) => activation_error(e),
                },
                Err(reply) => reply,
            },
            Method::Get => resolve(set, &query),
            _ => Reply::error(405, "method not allowed", None),
        }
    };
    reply.send(request);
}

fn resolve(set: &Mutex<ActivationSet>, query: &[(String, String)]) -> Reply {
    let host = query
        .iter()
        .find(|(k, _)| k == "host")
        .map(|(_, v)| v.clone());
    let progs: Vec<String> = query
        .iter()
        .filter(|(k, _)| k == "progs")
        .flat_map(|(_, v)| {
            v.split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect::<Vec<_>>()
        })
        .collect();
    let set = set.lock();
    match host {
        None if progs.is_empty() => Reply::json(200, &set.list()),
        None => Reply::error(400, "`progs` needs `host`", None),
        Some(host) => {
            let levels = progs
                .into_iter()
                .map(|prog| ResolvedLevel {
                    level: set.resolve(&host, &prog).value(),
                    prog,
                })
                .collect();
            Reply::json(200, &ResolvedLevels { host, levels })
        }
    }
}
