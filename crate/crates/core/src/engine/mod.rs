//! Fixed-step block-diagram engine.
//!
//! Each block computes its output from its inputs; blocks run in a
//! topological order of the wiring graph in which memory-block outputs carry
//! no dependency. A cycle without a memory block is an algebraic loop and is
//! rejected at validation.

pub mod block;
pub mod model;
pub mod sim;
pub mod trace;

pub use block::{Block, BlockId, BlockKind, PortRef};
pub use model::{validate_and_order, Driver, Model, ModelError, ModelSpec, OutputSpec, Wire};
pub use sim::{eval_step, simulate, simulate_closed, step_time, SimConfig, SimError, Simulator};
pub use trace::{compare_traces, ComparisonReport, Trace, TraceError, TraceRow};
