//! Fixed-step evaluation.
//!
//! One step at time `t` evaluates every block in order, samples the model
//! outputs, then advances memory-block state from the inputs just computed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::{clamp, BlockId, BlockKind};
use super::model::{Driver, Model};
use super::trace::{Trace, TraceRow};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("non-finite signal from block {block} at t={t}{}", fmt_step(*.step))]
    NonFiniteSignal {
        block: BlockId,
        t: f64,
        step: Option<u64>,
    },
    #[error("expected {expected} external inputs, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("expected {expected} state entries, got {got}")]
    StateLength { expected: usize, got: usize },
    #[error("recorded output {0} does not exist")]
    UnknownOutput(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn fmt_step(step: Option<u64>) -> String {
    step.map(|s| format!(" (step {s})")).unwrap_or_default()
}

impl SimError {
    fn at_step(self, k: u64) -> Self {
        match self {
            SimError::NonFiniteSignal { block, t, .. } => SimError::NonFiniteSignal { block, t, step: Some(k) },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Model output indices to record; `None` records every output.
    #[serde(default)]
    pub recorded: Option<Vec<usize>>,
}

impl SimConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self {
            dt,
            t_end,
            recorded: None,
        }
    }

    pub fn recording(mut self, outputs: Vec<usize>) -> Self {
        self.recorded = Some(outputs);
        self
    }

    /// Number of time steps, `round(t_end / dt)`. The run evaluates
    /// `steps + 1` instants, `t = 0, dt, .., steps * dt`.
    pub fn steps(&self) -> Result<u64, SimError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SimError::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(SimError::InvalidConfig(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        let n = (self.t_end / self.dt).round();
        if n > u32::MAX as f64 {
            return Err(SimError::InvalidConfig(format!("{n} steps exceeds the step counter range")));
        }
        Ok(n as u64)
    }

    /// Resolves the recorded output list against a model.
    pub fn recorded_outputs(&self, model: &Model) -> Result<Vec<usize>, SimError> {
        match &self.recorded {
            None => Ok((0..model.outputs().len()).collect()),
            Some(list) => {
                for i in list {
                    if *i >= model.outputs().len() {
                        return Err(SimError::UnknownOutput(*i));
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

/// Time of step `k`. Both sides of a split run compute time this way.
#[inline]
pub fn step_time(k: u64, dt: f64) -> f64 {
    k as f64 * dt
}

/// Mutable simulation state for one model.
#[derive(Debug, Clone)]
pub struct Simulator<'m> {
    model: &'m Model,
    dt: f64,
    state: Vec<f64>,
    next: Vec<f64>,
    signals: Vec<f64>,
    outputs: Vec<f64>,
    lag_decay: Vec<f64>,
}

impl<'m> Simulator<'m> {
    pub fn new(model: &'m Model, dt: f64) -> Self {
        Self::with_state(model, dt, model.initial_state()).expect("initial state has model length")
    }

    pub fn with_state(model: &'m Model, dt: f64, state: Vec<f64>) -> Result<Self, SimError> {
        let expected = model.memory_blocks().len();
        if state.len() != expected {
            return Err(SimError::StateLength {
                expected,
                got: state.len(),
            });
        }
        let lag_decay = model
            .memory_blocks()
            .iter()
            .map(|id| match model.block(*id).kind {
                BlockKind::FirstOrderLag { time_constant, .. } => (-dt / time_constant).exp(),
                _ => 0.0,
            })
            .collect();
        Ok(Self {
            model,
            dt,
            next: vec![0.0; state.len()],
            state,
            signals: vec![0.0; model.len()],
            outputs: vec![0.0; model.outputs().len()],
            lag_decay,
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Block output values from the most recent step.
    pub fn signals(&self) -> &[f64] {
        &self.signals
    }

    /// Evaluates the model at `t`, returns its outputs and advances state.
    pub fn step(&mut self, inputs: &[f64], t: f64) -> Result<&[f64], SimError> {
        let model = self.model;
        if inputs.len() != model.inputs().len() {
            return Err(SimError::InputLength {
                expected: model.inputs().len(),
                got: inputs.len(),
            });
        }

        // memory outputs depend only on state; publish them before anything reads them
        for (slot, &id) in model.memory_blocks().iter().enumerate() {
            self.signals[id.0] = self.state[slot];
        }

        for &id in model.eval_order() {
            if model.state_slot(id).is_some() {
                continue;
            }
            let drivers = model.drivers(id);
            let signals = &self.signals;
            let u = |i: usize| match drivers[i] {
                Driver::Block(b) => signals[b.0],
                Driver::Input(j) => inputs[j],
            };
            let y = match &model.block(id).kind {
                BlockKind::Constant { value } => *value,
                BlockKind::Step { t0, before, after } => {
                    if t < *t0 {
                        *before
                    } else {
                        *after
                    }
                }
                BlockKind::Gain { k } => k * u(0),
                BlockKind::Sum { signs } => {
                    let mut acc = 0.0;
                    for (i, s) in signs.iter().enumerate() {
                        if *s > 0 {
                            acc += u(i);
                        } else {
                            acc -= u(i);
                        }
                    }
                    acc
                }
                BlockKind::Product { n } => {
                    let mut acc = u(0);
                    for i in 1..*n {
                        acc *= u(i);
                    }
                    acc
                }
                BlockKind::Limiter { lo, hi } => clamp(u(0), *lo, *hi),
                BlockKind::Sine => u(0).sin(),
                BlockKind::External { .. } => u(0),
                BlockKind::Integrator { .. } | BlockKind::FirstOrderLag { .. } | BlockKind::UnitDelay { .. } => {
                    unreachable!("memory blocks are published before the pass")
                }
            };
            if !y.is_finite() {
                return Err(SimError::NonFiniteSignal { block: id, t, step: None });
            }
            self.signals[id.0] = y;
        }

        for (slot, &id) in model.memory_blocks().iter().enumerate() {
            let u = match model.drivers(id)[0] {
                Driver::Block(b) => self.signals[b.0],
                Driver::Input(j) => inputs[j],
            };
            let s = self.state[slot];
            let next = match &model.block(id).kind {
                BlockKind::Integrator { .. } => s + self.dt * u,
                BlockKind::FirstOrderLag { gain, .. } => {
                    let a = self.lag_decay[slot];
                    a * s + (1.0 - a) * gain * u
                }
                BlockKind::UnitDelay { .. } => u,
                _ => unreachable!("non-memory block in memory list"),
            };
            if !next.is_finite() {
                return Err(SimError::NonFiniteSignal { block: id, t, step: None });
            }
            self.next[slot] = next;
        }
        std::mem::swap(&mut self.state, &mut self.next);

        for (o, spec) in self.outputs.iter_mut().zip(model.outputs()) {
            *o = self.signals[spec.src.block.0];
        }
        Ok(&self.outputs)
    }
}

/// Pure single-step form: outputs at `t` and the advanced state.
pub fn eval_step(
    model: &Model,
    state: &[f64],
    inputs: &[f64],
    t: f64,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let mut sim = Simulator::with_state(model, dt, state.to_vec())?;
    let outputs = sim.step(inputs, t)?.to_vec();
    Ok((outputs, sim.state))
}

/// Runs `model` over the configured horizon. `input_fn` supplies the
/// external input vector for each instant.
pub fn simulate<F>(model: &Model, config: &SimConfig, mut input_fn: F) -> Result<Trace, SimError>
where
    F: FnMut(f64) -> Vec<f64>,
{
    let steps = config.steps()?;
    let recorded = config.recorded_outputs(model)?;
    let columns = recorded.iter().map(|i| model.outputs()[*i].name.clone()).collect();
    let mut trace = Trace::new(config.dt, columns);
    trace.reserve(steps as usize + 1);

    let mut sim = Simulator::new(model, config.dt);
    for k in 0..=steps {
        let t = step_time(k, config.dt);
        let inputs = input_fn(t);
        let outputs = sim.step(&inputs, t).map_err(|e| e.at_step(k))?;
        trace.push(TraceRow {
            t,
            values: recorded.iter().map(|i| outputs[*i]).collect(),
        });
    }
    Ok(trace)
}

/// [`simulate`] for models without external inputs.
pub fn simulate_closed(model: &Model, config: &SimConfig) -> Result<Trace, SimError> {
    simulate(model, config, |_| Vec::new())
}
