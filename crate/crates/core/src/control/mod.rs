//! HTTP+JSON control plane: subscriptions and queries on a producer,
//! activation levels on a manager.
//!
//! | route                          | body / query                     |
//! |--------------------------------|----------------------------------|
//! | `POST /subscriptions`          | `{"filter", "endpoint"}`         |
//! | `DELETE /subscriptions/{id}`   |                                  |
//! | `GET /subscriptions`           |                                  |
//! | `GET /events`                  | `?filter=&max=`                  |
//! | `GET /stream`                  | `?filter=` (server-sent events)  |
//! | `PUT /activations`             | `{"prog", "host", "level", "if_version"}` |
//! | `DELETE /activations`          | `{"prog", "host"}`               |
//! | `GET /activations`             | `?host=&progs=a,b` to resolve    |
//!
//! Errors come back as `{"error": "...", "position": n}` with status 400
//! (bad request), 404 (unknown route) or 409 (stale `if_version`).

mod activation;
mod client;
mod http;

use serde::{Deserialize, Serialize};

pub use activation::{literal_prefix_len, ActivationError, ActivationSet};
pub use client::{ClientError, ControlClient, EventStream};
pub use http::{query_pairs, read_json, respond_error, respond_json, HttpServer, Reply};

pub const MANAGER_ENV: &str = "NL_MANAGER";
pub const PRODUCER_ENV: &str = "NL_PRODUCER";
pub const DEFAULT_MANAGER_PORT: u16 = 14381;
pub const DEFAULT_PRODUCER_PORT: u16 = 14382;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscribeRequest {
    pub filter: String,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscribeResponse {
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubscriptionState {
    Active,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub id: String,
    pub filter: String,
    pub endpoint: String,
    pub created_at: String,
    pub state: SubscriptionState,
    #[serde(default)]
    pub delivered: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionList {
    pub subscriptions: Vec<Subscription>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnsubscribeResponse {
    pub removed: bool,
}

/// Matching events in canonical ASCII, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetActivationRequest {
    pub prog: String,
    #[serde(default = "any_host")]
    pub host: String,
    pub level: i16,
    /// Reject with 409 unless the activation set is at this version.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub if_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearActivationRequest {
    pub prog: String,
    #[serde(default = "any_host")]
    pub host: String,
}

fn any_host() -> String {
    "*".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activation {
    pub prog: String,
    pub host: String,
    pub level: i16,
    /// Version of the set when this entry was last written; later wins ties.
    pub seq: u64,
    pub set_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationList {
    pub version: u64,
    pub activations: Vec<Activation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedLevel {
    pub prog: String,
    pub level: i16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedLevels {
    pub host: String,
    pub levels: Vec<ResolvedLevel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearResponse {
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}
