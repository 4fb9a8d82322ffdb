//! Instrumentation events, their wire formats, filtering, transport, and
//! remote activation of instrumentation in running programs.

pub mod codec;
pub mod control;
pub mod event;
pub mod filter;
pub mod harness;
pub mod services;
pub mod transport;
pub mod trigger;

pub use event::{Event, Level, Timestamp, Value};
pub use filter::{parse_filter, Filter};
