//! Two-process lockstep co-simulation over named shared memory.
//!
//! - [`engine`]: fixed-step block-diagram simulation.
//! - [`bridge`]: named shared-memory segment and the per-step flag handshake.
//! - [`orchestrator`]: model splitting, follower supervision, co-sim loop.
//! - [`testbed`]: single-machine power-system workload.

pub mod engine;
pub mod bridge;
pub mod orchestrator;
pub mod testbed;
