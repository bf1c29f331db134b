//! Named shared-memory duplex channel between a master and a follower
//! process, advanced one fixed step at a time by a flag handshake.

use std::io;
use std::time::Duration;

use thiserror::Error;

mod channel;
pub mod flag;
pub mod layout;
pub mod segment;

pub use channel::{Channel, Role, DEFAULT_POLL, DEFAULT_TIMEOUT};
pub use flag::ExchangeFlag;
pub use layout::{SegmentHeader, MAX_INPUTS, MAX_OUTPUTS};
pub use segment::SharedSegment;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("invalid channel name {0:?}: use 1-128 characters from [A-Za-z0-9._-]")]
    InvalidName(String),
    #[error("timeout must be positive")]
    InvalidTimeout,
    #[error("channel {0:?} is held by a live process")]
    NameInUse(String),
    #[error("capacity exceeded: {n_inputs} inputs / {n_outputs} outputs (limits {MAX_INPUTS} / {MAX_OUTPUTS})")]
    CapacityExceeded { n_inputs: usize, n_outputs: usize },
    #[error("{op} failed: {source}")]
    Os {
        op: &'static str,
        #[source]
        source: io::Error,
    },
    #[error("timed out after {} ms waiting for {waiting_for}", .waited.as_millis())]
    Timeout {
        waited: Duration,
        waiting_for: &'static str,
    },
    #[error("segment version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("bad segment magic {found:02x?}")]
    BadMagic { found: [u8; 4] },
    #[error("corrupt segment: {0}")]
    Corrupt(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("peer aborted the exchange")]
    AbortReceived,
    #[error("follower handler failed at {0}")]
    HandlerFailure(String),
    #[error("{what} has {got} values, channel declares {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0:?} end cannot perform this operation")]
    WrongRole(Role),
    #[error("channel is closed")]
    Closed,
}
