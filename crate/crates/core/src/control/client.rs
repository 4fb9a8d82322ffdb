use std::io::{BufRead, BufReader, Read};
use std::time::Duration;

use serde::de::DeserializeOwned;
use thiserror::Error;

use super::*;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{status}: {message}")]
    Http {
        status: u16,
        message: String,
        position: Option<usize>,
    },
    #[error("cannot reach {url}: {message}")]
    Unreachable { url: String, message: String },
    #[error("unexpected response: {0}")]
    Decode(String),
}

/// Client for producer and manager control routes.
#[derive(Clone)]
pub struct ControlClient {
    base: String,
    agent: ureq::Agent,
}

impl ControlClient {
    /// `base` is `http://host:port` or plain `host:port`.
    pub fn new(base: &str) -> ControlClient {
        ControlClient::with_timeout(base, Duration::from_secs(5))
    }

    pub fn with_timeout(base: &str, timeout: Duration) -> ControlClient {
        let base = if base.contains("://") {
            base.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", base.trim_end_matches('/'))
        };
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout_read(timeout)
            .timeout_write(timeout)
            .build();
        ControlClient { base, agent }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn call<T: DeserializeOwned>(
        &self,
        method: &str,
        path: &str,
        query: &[(&str, &str)],
        body: Option<&dyn erased::Body>,
    ) -> Result<T, ClientError> {
        let url = format!("{}{}", self.base, path);
        let mut req = self.agent.request(method, &url);
        for (k, v) in query {
            req = req.query(k, v);
        }
        let result = match body {
            Some(b) => req
                .set("Content-Type", "application/json")
                .send_string(&b.json()),
            None => req.call(),
        };
        match result {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| ClientError::Decode(e.to_string())),
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let (message, position) = match serde_json::from_str::<ErrorBody>(&text) {
                    Ok(b) => (b.error, b.position),
                    Err(_) => (text, None),
                };
                Err(ClientError::Http {
                    status,
                    message,
                    position,
                })
            }
            Err(e) => Err(ClientError::Unreachable {
                url,
                message: e.to_string(),
            }),
        }
    }

    pub fn subscribe(&self, filter: &str, endpoint: &str) -> Result<String, ClientError> {
        let req = SubscribeRequest {
            filter: filter.to_string(),
            endpoint: endpoint.to_string(),
        };
        let r: SubscribeResponse = self.call("POST", "/subscriptions", &[], Some(&req))?;
        Ok(r.id)
    }

    pub fn unsubscribe(&self, id: &str) -> Result<bool, ClientError> {
        let path = format!(
            "/subscriptions/{}",
            url::form_urlencoded::byte_serialize(id.as_bytes()).collect::<String>()
        );
        let r: UnsubscribeResponse = self.call("DELETE", &path, &[], None)?;
        Ok(r.removed)
    }

    pub fn subscriptions(&self) -> Result<Vec<Subscription>, ClientError> {
        let r: SubscriptionList = self.call("GET", "/subscriptions", &[], None)?;
        Ok(r.subscriptions)
    }

    pub fn query(&self, filter: &str, max: usize) -> Result<Vec<String>, ClientError> {
        let max = max.to_string();
        let r: QueryResult =
            self.call("GET", "/events", &[("filter", filter), ("max", &max)], None)?;
        Ok(r.events)
    }

    pub fn set_activation(
        &self,
        prog: &str,
        host: &str,
        level: i16,
        if_version: Option<u64>,
    ) -> Result<Activation, ClientError> {
        let req = SetActivationRequest {
            prog: prog.to_string(),
            host: host.to_string(),
            level,
            if_version,
        };
        self.call("PUT", "/activations", &[], Some(&req))
    }

    pub fn clear_activation(&self, prog: &str, host: &str) -> Result<bool, ClientError> {
        let req = ClearActivationRequest {
            prog: prog.to_string(),
            host: host.to_string(),
        };
        let r: ClearResponse = self.call("DELETE", "/activations", &[], Some(&req))?;
        Ok(r.removed)
    }

    pub fn activations(&self) -> Result<ActivationList, ClientError> {
        self.call("GET", "/activations", &[], None)
    }

    /// Effective levels for `progs` on `host`.
    pub fn resolve(&self, host: &str, progs: &[&str]) -> Result<Vec<ResolvedLevel>, ClientError> {
        let progs = progs.join(",");
        let r: ResolvedLevels = self.call(
            "GET",
            "/activations",
            &[("host", host), ("progs", &progs)],
            None,
        )?;
        Ok(r.levels)
    }

    /// Attaches to the producer's live event stream.
    pub fn stream(&self, filter: &str) -> Result<EventStream, ClientError> {
        let url = format!("{}/stream", self.base);
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(5))
            .build();
        match agent.get(&url).query("filter", filter).call() {
            Ok(resp) => Ok(EventStream {
                reader: BufReader::new(resp.into_reader()),
            }),
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let b = serde_json::from_str::<ErrorBody>(&text).unwrap_or(ErrorBody {
                    error: text,
                    position: None,
                });
                Err(ClientError::Http {
                    status,
                    message: b.error,
                    position: b.position,
                })
            }
            Err(e) => Err(ClientError::Unreachable {
                url,
                message: e.to_string(),
            }),
        }
    }
}

/// Lines of a server-sent event stream; heartbeat comments are skipped.
pub struct EventStream {
    reader: BufReader<Box<dyn Read + Send + Sync + 'static>>,
}

impl Iterator for EventStream {
    type Item = std::io::Result<String>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut line = String::new();
        loop {
            line.clear();
            match self.reader.read_line(&mut line) {
                Ok(0) => return None,
                Ok(_) => {
                    if let Some(data) = line.strip_prefix("data: ") {
                        return Some(Ok(data.trim_end_matches(['\r', '\n']).to_string()));
                    }
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

mod erased {
    /// Object-safe view of a serializable request body.
    pub trait Body {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize> Body for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("request serializes")
        }
    }
}
