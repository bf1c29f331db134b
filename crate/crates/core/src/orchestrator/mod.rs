//! Splitting a model across two processes and running them in lockstep.
//!
//! Every cut wire carries its value one step late in both directions: the
//! master feeds the follower's step-`k` outputs into its own step `k+1`, and
//! the follower evaluates step `k` with the master values from step `k-1`.
//! Model outputs computed on the follower travel back in the same exchange
//! and are recorded without delay. The resulting trace equals a
//! single-process run of [`reference_with_delays`].

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::bridge::BridgeError;
use crate::engine::{ModelError, SimError};

mod run;
mod split;

pub use run::{
    follower_program, run_cosim, run_cosim_with, run_follower, run_master, run_master_with, run_mono, run_plan_with,
    CosimOptions, CosimOutcome, FollowerError, FollowerSpec, RunRole, RunStats, FOLLOWER_BIN_ENV,
};
pub use split::{
    assign_sides, follower_blocks, fresh_channel_name, reference_with_delays, split, BoundarySignal, CutSet, CutWire,
    Direction, ModelDocument, OutputSource, Side, SplitPlan,
};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("cut refers to wire {0}, which does not exist")]
    UnknownWire(usize),
    #[error("wire {0} is cut twice")]
    DuplicateWire(usize),
    #[error("cut does not split the model into master and follower groups: {0}")]
    NotABipartition(String),
    #[error("cut needs {master_to_follower} master->follower / {follower_to_master} follower->master signals (limits 1800 / 600)")]
    CapacityExceeded {
        master_to_follower: usize,
        follower_to_master: usize,
    },
    #[error("models with {0} external inputs cannot be split")]
    ModelInputs(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum CosimError {
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("invalid run configuration: {0}")]
    Config(SimError),
    #[error("master model failed at step {step}: {source}")]
    Master { step: u64, source: SimError },
    #[error("exchange at step {step} failed: {source}")]
    Exchange { step: u64, source: BridgeError },
    #[error("channel setup failed: {0}")]
    Bridge(#[from] BridgeError),
    #[error("plan has {plan:?} boundary signals but the channel carries {channel:?}")]
    BoundaryShapeMismatch {
        plan: (usize, usize),
        channel: (usize, usize),
    },
    #[error("could not spawn follower {program:?}: {source}")]
    SpawnFailure {
        program: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("follower {}{}{}", exit_label(*.exit_code), master_label(.master), diag_label(.diagnostics))]
    CosimFailed {
        /// `None` when the follower died from a signal.
        exit_code: Option<i32>,
        diagnostics: String,
        master: Option<Box<CosimError>>,
    },
    #[error("follower model payload: {0}")]
    Payload(#[source] io::Error),
}

fn exit_label(code: Option<i32>) -> String {
    match code {
        Some(c) => format!("exited with status {c}"),
        None => "was killed by a signal".into(),
    }
}

fn master_label(m: &Option<Box<CosimError>>) -> String {
    m.as_ref().map(|e| format!("; master: {e}")).unwrap_or_default()
}

fn diag_label(d: &str) -> String {
    if d.is_empty() {
        String::new()
    } else {
        format!("; follower said: {d}")
    }
}

impl CosimError {
    /// Step at which the run stopped, if known.
    pub fn step(&self) -> Option<u64> {
        match self {
            CosimError::Master { step, .. } | CosimError::Exchange { step, .. } => Some(*step),
            CosimError::CosimFailed { master: Some(m), .. } => m.step(),
            _ => None,
        }
    }

    /// The underlying exchange error, looking through a follower failure.
    pub fn bridge_error(&self) -> Option<&BridgeError> {
        match self {
            CosimError::Exchange { source, .. } => Some(source),
            CosimError::Bridge(e) => Some(e),
            CosimError::CosimFailed { master: Some(m), .. } => m.bridge_error(),
            _ => None,
        }
    }
}
