use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::split::{split, CutSet, OutputSource, SplitPlan};
use super::CosimError;
use crate::bridge::{BridgeError, Channel, DEFAULT_TIMEOUT};
use crate::engine::{step_time, Model, ModelSpec, SimConfig, SimError, Simulator, Trace, TraceRow};

/// Overrides the follower executable used by [`run_cosim`].
pub const FOLLOWER_BIN_ENV: &str = "COSIM_FOLLOWER_BIN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunRole {
    Mono,
    Master,
    Follower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub role: RunRole,
    /// Seconds.
    pub wall_time: f64,
    pub steps: u64,
    pub exchanges: u64,
    /// Seconds spent inside exchanges (waiting on the peer included).
    #[serde(default)]
    pub exchange_time: f64,
}

/// Runs a whole model in this process.
pub fn run_mono(model: &Model, config: &SimConfig) -> Result<(Trace, RunStats), SimError> {
    let start = Instant::now();
    let steps = config.steps()?;
    let trace = crate::engine::simulate_closed(model, config)?;
    Ok((
        trace,
        RunStats {
            role: RunRole::Mono,
            wall_time: start.elapsed().as_secs_f64(),
            steps,
            exchanges: 0,
            exchange_time: 0.0,
        },
    ))
}

pub fn run_master(plan: &SplitPlan, config: &SimConfig, channel: &mut Channel) -> Result<(Trace, RunStats), CosimError> {
    run_master_with(plan, config, channel, |_| {})
}

/// [`run_master`] with a callback invoked before each exchange.
pub fn run_master_with(
    plan: &SplitPlan,
    config: &SimConfig,
    channel: &mut Channel,
    mut before_exchange: impl FnMut(u64),
) -> Result<(Trace, RunStats), CosimError> {
    let start = Instant::now();
    let n_m2f = plan.master_to_follower.len();
    let n_f2m = plan.follower_to_master.len();
    if (channel.n_inputs(), channel.n_outputs()) != (n_m2f, n_f2m) {
        return Err(CosimError::BoundaryShapeMismatch {
            plan: (n_m2f, n_f2m),
            channel: (channel.n_inputs(), channel.n_outputs()),
        });
    }
    let steps = config.steps().map_err(CosimError::Config)?;
    let recorded: Vec<usize> = match &config.recorded {
        Some(r) => {
            if let Some(bad) = r.iter().find(|i| **i >= plan.outputs.len()) {
                return Err(CosimError::Config(SimError::UnknownOutput(*bad)));
            }
            r.clone()
        }
        None => (0..plan.outputs.len()).collect(),
    };
    let columns = recorded.iter().map(|i| plan.output_names[*i].clone()).collect();
    let mut trace = Trace::new(config.dt, columns);
    trace.reserve(steps as usize + 1);

    let n_fed_back = plan.n_fed_back();
    let mut sim = Simulator::new(&plan.master, config.dt);
    let mut from_follower = vec![0.0; n_f2m];
    let mut reply = vec![0.0; n_f2m];
    let mut to_follower = vec![0.0; n_m2f];
    let mut master_out = vec![0.0; plan.master.outputs().len()];
    let mut exchange_time = Duration::ZERO;

    for k in 0..=steps {
        let t = step_time(k, config.dt);
        let out = sim
            .step(&from_follower[..n_fed_back], t)
            .map_err(|source| CosimError::Master { step: k, source })?;
        master_out.copy_from_slice(out);
        let signals = sim.signals();
        for (v, tap) in to_follower.iter_mut().zip(&plan.master_taps) {
            *v = signals[tap.block.0];
        }

        before_exchange(k);
        let ex = Instant::now();
        channel
            .master_exchange_into(k as u32, t, &to_follower, &mut reply)
            .map_err(|source| CosimError::Exchange { step: k, source })?;
        exchange_time += ex.elapsed();

        let values = recorded
            .iter()
            .map(|i| match plan.outputs[*i] {
                OutputSource::Master(j) => master_out[j],
                OutputSource::Follower(j) => reply[j],
            })
            .collect();
        trace.push(TraceRow { t, values });
        std::mem::swap(&mut from_follower, &mut reply);
    }
    channel.close();

    Ok((
        trace,
        RunStats {
            role: RunRole::Master,
            wall_time: start.elapsed().as_secs_f64(),
            steps,
            exchanges: steps + 1,
            exchange_time: exchange_time.as_secs_f64(),
        },
    ))
}

/// How to launch a follower process.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerSpec {
    pub program: PathBuf,
    pub model_path: PathBuf,
    pub channel_name: String,
    pub dt: f64,
    pub t_end: f64,
    pub timeout: Duration,
}

impl FollowerSpec {
    /// `<program> --role follower --channel <name> --model <path> --dt <s> --t-end <s> --timeout-ms <ms>`
    pub fn command(&self) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.arg("--role")
            .arg("follower")
            .arg("--channel")
            .arg(&self.channel_name)
            .arg("--model")
            .arg(&self.model_path)
            // shortest round-trip formatting, so the follower parses the same bits
            .arg("--dt")
            .arg(self.dt.to_string())
            .arg("--t-end")
            .arg(self.t_end.to_string())
            .arg("--timeout-ms")
            .arg(self.timeout.as_millis().to_string());
        cmd
    }
}

#[derive(Debug, Error)]
pub enum FollowerError {
    #[error("follower model: {0}")]
    Model(String),
    #[error("follower model failed at step {step}: {source}")]
    Sim { step: u64, source: SimError },
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("follower model has {model:?} boundary signals but the channel carries {channel:?}")]
    BoundaryShapeMismatch {
        model: (usize, usize),
        channel: (usize, usize),
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl FollowerError {
    /// 2 for protocol, abort and timeout failures, 3 for model failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            FollowerError::Model(_) | FollowerError::Sim { .. } => 3,
            _ => 2,
        }
    }
}

fn load_follower_model(path: &Path) -> Result<Model, FollowerError> {
    let text = std::fs::read_to_string(path).map_err(|e| FollowerError::Model(format!("{}: {e}", path.display())))?;
    let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| FollowerError::Model(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| FollowerError::Model(e.to_string()))
}

/// Serves one co-simulation as the follower until the master shuts down.
pub fn run_follower(spec: &FollowerSpec) -> Result<RunStats, FollowerError> {
    let start = Instant::now();
    let model = load_follower_model(&spec.model_path)?;
    let config = SimConfig::new(spec.dt, spec.t_end);
    let steps = config.steps().map_err(|e| FollowerError::Model(e.to_string()))?;

    let mut channel = Channel::open_follower(&spec.channel_name, spec.timeout)?;
    let shape = (model.inputs().len(), model.outputs().len());
    if shape != (channel.n_inputs(), channel.n_outputs()) {
        channel.abort();
        return Err(FollowerError::BoundaryShapeMismatch {
            model: shape,
            channel: (channel.n_inputs(), channel.n_outputs()),
        });
    }

    let mut sim = Simulator::new(&model, spec.dt);
    // master values arrive one exchange before they are used
    let mut pending = vec![0.0; shape.0];
    let mut expected: u64 = 0;
    let mut failure: Option<FollowerError> = None;
    let served = channel.follower_serve(|step, t, inputs: &[f64], outputs: &mut [f64]| {
        let k = step as u64;
        let want_t = step_time(k, spec.dt);
        let problem = if k != expected {
            Some(format!("expected step {expected}, got {k}"))
        } else if k > steps {
            Some(format!("step {k} is past the horizon of {steps} steps"))
        } else if t.to_bits() != want_t.to_bits() {
            Some(format!("step {k} carries time {t}, expected {want_t}"))
        } else {
            None
        };
        if let Some(p) = problem {
            failure = Some(FollowerError::Protocol(p.clone()));
            return Err(p);
        }
        match sim.step(&pending, t) {
            Ok(y) => outputs.copy_from_slice(y),
            Err(source) => {
                let msg = source.to_string();
                failure = Some(FollowerError::Sim { step: k, source });
                return Err(msg);
            }
        }
        pending.copy_from_slice(inputs);
        expected += 1;
        Ok(())
    });
    let served = match served {
        Ok(n) => n,
        Err(e) => return Err(failure.take().unwrap_or(FollowerError::Bridge(e))),
    };
    if served != steps + 1 {
        return Err(FollowerError::Protocol(format!(
            "master shut down after {served} of {} steps",
            steps + 1
        )));
    }
    Ok(RunStats {
        role: RunRole::Follower,
        wall_time: start.elapsed().as_secs_f64(),
        steps,
        exchanges: served,
        exchange_time: 0.0,
    })
}

#[derive(Debug, Clone)]
pub struct CosimOptions {
    pub timeout: Duration,
    /// Follower executable; falls back to `$COSIM_FOLLOWER_BIN`, then to
    /// the current executable.
    pub follower_bin: Option<PathBuf>,
    pub channel_name: Option<String>,
}

impl Default for CosimOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            follower_bin: None,
            channel_name: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CosimOutcome {
    pub trace: Trace,
    pub master: RunStats,
    /// As reported by the follower on its stdout.
    pub follower: Option<RunStats>,
}

pub fn follower_program(opts: &CosimOptions) -> Result<PathBuf, CosimError> {
    if let Some(p) = &opts.follower_bin {
        return Ok(p.clone());
    }
    if let Some(p) = std::env::var_os(FOLLOWER_BIN_ENV) {
        return Ok(PathBuf::from(p));
    }
    std::env::current_exe().map_err(|source| CosimError::SpawnFailure {
        program: PathBuf::from("<current executable>"),
        source,
    })
}

/// Splits `model`, launches the follower process and runs the master half.
pub fn run_cosim(model: &Model, cut: &CutSet, config: &SimConfig, opts: &CosimOptions) -> Result<CosimOutcome, CosimError> {
    run_cosim_with(model, cut, config, opts, |_, _| {})
}

pub fn run_cosim_with(
    model: &Model,
    cut: &CutSet,
    config: &SimConfig,
    opts: &CosimOptions,
    hook: impl FnMut(u64, u32),
) -> Result<CosimOutcome, CosimError> {
    let mut plan = split(model, cut)?;
    if let Some(name) = &opts.channel_name {
        plan.channel_name = name.clone();
    }
    run_plan_with(&plan, config, opts, hook)
}

fn drain<R: Read + Send + 'static>(src: Option<R>) -> JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = src {
            let _ = r.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

fn wait_with_deadline(child: &mut Child, limit: Duration) -> std::io::Result<ExitStatus> {
    let deadline = Instant::now() + limit;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(status);
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            return child.wait();
        }
        thread::sleep(Duration::from_millis(2));
    }
}

/// Runs an existing plan; `hook(step, follower_pid)` runs before each exchange.
pub fn run_plan_with(
    plan: &SplitPlan,
    config: &SimConfig,
    opts: &CosimOptions,
    mut hook: impl FnMut(u64, u32),
) -> Result<CosimOutcome, CosimError> {
    config.steps().map_err(CosimError::Config)?;
    let program = follower_program(opts)?;

    let mut payload = tempfile::Builder::new()
        .prefix("cosim-follower-")
        .suffix(".json")
        .tempfile()
        .map_err(CosimError::Payload)?;
    serde_json::to_writer(&mut payload, plan.follower.spec()).map_err(|e| CosimError::Payload(e.into()))?;
    payload.flush().map_err(CosimError::Payload)?;

    let mut channel = Channel::create_master(
        &plan.channel_name,
        plan.master_to_follower.len(),
        plan.follower_to_master.len(),
        opts.timeout,
    )?;
    let spec = FollowerSpec {
        program: program.clone(),
        model_path: payload.path().to_path_buf(),
        channel_name: plan.channel_name.clone(),
        dt: config.dt,
        t_end: config.t_end,
        timeout: opts.timeout,
    };
    let mut child = spec
        .command()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| CosimError::SpawnFailure { program, source })?;
    let stdout = drain(child.stdout.take());
    let stderr = drain(child.stderr.take());
    let pid = child.id();

    let result = run_master_with(plan, config, &mut channel, |k| hook(k, pid));
    if result.is_err() {
        channel.abort();
    }
    channel.close();

    let status = wait_with_deadline(&mut child, opts.timeout + Duration::from_secs(1));
    let stdout = stdout.join().unwrap_or_default();
    let diagnostics = stderr.join().unwrap_or_default().trim().to_owned();
    let follower = stdout
        .lines()
        .rev()
        .find_map(|l| serde_json::from_str::<RunStats>(l).ok());

    let clean = matches!(&status, Ok(s) if s.success());
    match result {
        Ok((trace, master)) if clean => Ok(CosimOutcome {
            trace,
            master,
            follower,
        }),
        Err(e) if clean => Err(e),
        other => Err(CosimError::CosimFailed {
            exit_code: status.ok().and_then(|s| s.code()),
            diagnostics,
            master: other.err().map(Box::new),
        }),
    }
}
