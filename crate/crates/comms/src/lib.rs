//! Publish/subscribe and remote service calls between the simulator and
//! its clients.
//!
//! The simulator process hosts a broker ([`Server`]) that relays every
//! message. Clients speak length-prefixed JSON frames over TCP, or the same
//! JSON bodies as WebSocket text messages; in-process clients skip the
//! socket entirely.

pub mod client;
pub mod frame;
pub mod queue;
pub mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{Client, Delivery, RemoteError, ServiceRequest, Subscription, DEFAULT_TIMEOUT};
pub use frame::{decode_frame, encode_frame, Frame, FrameCodec, FrameError, Op, MAX_FRAME};
pub use queue::SimQueue;
pub use server::Server;

pub const DEFAULT_PORT: u16 = 23500;
pub const DEFAULT_WS_PORT: u16 = 23501;

#[derive(Debug, Error)]
pub enum CommsError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error("cannot connect to {addr}: {reason}")]
    Connect { addr: String, reason: String },
    #[error("connection closed")]
    Closed,
    #[error("no reply within {0:?}")]
    Timeout(std::time::Duration),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(std::io::Error),
}

impl CommsError {
    /// Error code of a remote ERROR answer.
    pub fn code(&self) -> Option<&str> {
        match self {
            CommsError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicInfo {
    pub name: String,
    pub type_name: String,
    pub publisher_count: usize,
    pub subscriber_count: usize,
    pub rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientInfo {
    pub id: u64,
    pub name: String,
    pub address: String,
    pub transport: String,
    pub publishes: Vec<String>,
    pub subscribes: Vec<String>,
    pub services: Vec<String>,
}

/// Mean rate from arrival times (seconds, ascending) seen in a window of
/// `window` seconds: `(n - 1) / (t_last - t_first)`. A single arrival counts
/// as `1 / window` and none as 0.
pub fn rate_from_arrivals(times: &[f64], window: f64) -> f64 {
    match times.len() {
        0 => 0.0,
        1 => 1.0 / window,
        n => {
            let span = times[n - 1] - times[0];
            if span > 0.0 {
                (n - 1) as f64 / span
            } else {
                n as f64 / window
            }
        }
    }
}
