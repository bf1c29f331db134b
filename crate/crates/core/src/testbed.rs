//! Single machine against an equivalent network, with AVR and governor.
//!
//! Per-unit on `base_mva`, classical machine (constant E′ behind x′d):
//!
//! ```text
//! dδ/dt  = ω_s (Δω − ω_net)          ω_net = R_net (P_sync − P0)
//! dΔω/dt = (P_m − P_e − D Δω) / 2H   P_e   = P_sync + P_load
//! P_sync = E′ V sin δ / x′d          V     = gate · E′ / E′0
//! E′     = E′0 + limit(lag_avr(K_a (V_ref − V)))
//! P_m    = P0 + lag_gov(−Δω / R)
//! ```
//!
//! `R_net = 0` makes the network an infinite bus. `gate` is 1 except during a
//! fault, when it is 0.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Block, BlockId, BlockKind, Model, ModelError, ModelSpec, OutputSpec, Wire};
use crate::orchestrator::{CutSet, Direction, ModelDocument};

pub const FREQUENCY: &str = "frequency";
pub const BUS_VOLTAGE: &str = "bus_voltage";
pub const TURBINE_POWER: &str = "turbine_power";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub v_nom_kv: f64,
    /// Inertia constant H, seconds.
    pub inertia_h: f64,
    pub gen_mw: f64,
    pub gen_mvar: f64,
    /// Transient reactance x′d, per unit.
    pub xd_transient: f64,
    /// Damping D, per-unit torque per per-unit speed.
    pub damping: f64,
    pub base_mva: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            v_nom_kv: 13.8,
            inertia_h: 2.4922,
            gen_mw: 20.0,
            gen_mvar: 20.82,
            xd_transient: 0.5897,
            damping: 1.0,
            base_mva: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedParams {
    pub generator: GeneratorParams,
    pub f_nom: f64,
    /// Governor droop R, per unit.
    pub droop_r: f64,
    pub governor_time_constant: f64,
    pub governor_enabled: bool,
    pub avr_gain: f64,
    pub avr_time_constant: f64,
    /// Symmetric bound on the AVR's contribution to E′.
    pub avr_limit: f64,
    /// Network frequency response to exported power; 0 is an infinite bus.
    pub network_droop: f64,
}

impl Default for TestbedParams {
    fn default() -> Self {
        Self {
            generator: GeneratorParams::default(),
            f_nom: 50.0,
            droop_r: 0.05,
            governor_time_constant: 2.0,
            governor_enabled: true,
            avr_gain: 5.0,
            avr_time_constant: 0.5,
            avr_limit: 1.0,
            network_droop: 0.05,
        }
    }
}

impl TestbedParams {
    pub fn validate(&self) -> Result<(), TestbedError> {
        let g = &self.generator;
        let positive = [
            ("inertia_h", g.inertia_h),
            ("base_mva", g.base_mva),
            ("xd_transient", g.xd_transient),
            ("f_nom", self.f_nom),
            ("droop_r", self.droop_r),
            ("governor_time_constant", self.governor_time_constant),
            ("avr_time_constant", self.avr_time_constant),
            ("avr_limit", self.avr_limit),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TestbedError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        let finite = [
            ("v_nom_kv", g.v_nom_kv),
            ("gen_mw", g.gen_mw),
            ("gen_mvar", g.gen_mvar),
            ("damping", g.damping),
            ("avr_gain", self.avr_gain),
            ("network_droop", self.network_droop),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(TestbedError::InvalidParams(format!("{name} must be finite, got {v}")));
            }
        }
        if self.network_droop < 0.0 {
            return Err(TestbedError::InvalidParams("network_droop must be >= 0".into()));
        }
        Ok(())
    }

    pub fn p0(&self) -> f64 {
        self.generator.gen_mw / self.generator.base_mva
    }

    pub fn q0(&self) -> f64 {
        self.generator.gen_mvar / self.generator.base_mva
    }

    /// (E′0, δ0) for unit terminal voltage at the rated operating point.
    pub fn initial_conditions(&self) -> (f64, f64) {
        let x = self.generator.xd_transient;
        let re = 1.0 + x * self.q0();
        let im = x * self.p0();
        (re.hypot(im), im.atan2(re))
    }

    pub fn omega_s(&self) -> f64 {
        2.0 * PI * self.f_nom
    }

    /// Post-disturbance steady frequency deviation for a load increase of
    /// `dp` per unit.
    pub fn steady_state_frequency(&self, dp: f64) -> f64 {
        if self.network_droop == 0.0 {
            return 0.0;
        }
        let gov = if self.governor_enabled { 1.0 / self.droop_r } else { 0.0 };
        -dp / (gov + self.generator.damping + 1.0 / self.network_droop)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TestbedError {
    #[error("invalid testbed parameters: {0}")]
    InvalidParams(String),
    #[error("bad scenario: {0}")]
    BadScenario(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LoadStep,
    Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub event_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clear_time: Option<f64>,
    #[serde(default)]
    pub magnitude_mw: f64,
}

impl Scenario {
    /// 5 MW switched in at 0.2 s.
    pub fn load_step() -> Self {
        Self {
            kind: ScenarioKind::LoadStep,
            event_time: 0.2,
            clear_time: None,
            magnitude_mw: 5.0,
        }
    }

    /// Three-phase fault at 0.1 s, cleared at 0.2 s.
    pub fn fault() -> Self {
        Self {
            kind: ScenarioKind::Fault,
            event_time: 0.1,
            clear_time: Some(0.2),
            magnitude_mw: 0.0,
        }
    }

    pub fn validate(&self, t_end: f64) -> Result<(), TestbedError> {
        let bad = |m: String| Err(TestbedError::BadScenario(m));
        if !(self.event_time > 0.0 && self.event_time < t_end) {
            return bad(format!("event_time {} must lie in (0, {t_end})", self.event_time));
        }
        match self.kind {
            ScenarioKind::LoadStep => {
                if !self.magnitude_mw.is_finite() {
                    return bad("magnitude_mw must be finite".into());
                }
            }
            ScenarioKind::Fault => match self.clear_time {
                Some(c) if c > self.event_time && c.is_finite() => {}
                Some(c) => return bad(format!("clear_time {c} must follow event_time {}", self.event_time)),
                None => return bad("a fault needs clear_time".into()),
            },
        }
        Ok(())
    }
}

/// Ids of the blocks and wires the scenarios and cuts refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct SmibLayout {
    pub delta: BlockId,
    pub omega: BlockId,
    pub terminal_voltage: BlockId,
    pub gate: BlockId,
    pub load: BlockId,
    pub avr_lag: BlockId,
    pub governor_lag: BlockId,
    pub turbine_power: BlockId,
    /// Derivative blocks feeding the δ and Δω integrators.
    pub d_delta: BlockId,
    pub d_omega: BlockId,
    pub p_sync: BlockId,
    /// V → AVR error.
    pub avr_in: usize,
    /// AVR limiter → E′ sum.
    pub avr_out: usize,
    /// Δω → droop gain.
    pub governor_in: usize,
    /// governor lag → P_m sum.
    pub governor_out: usize,
}

#[derive(Debug, Clone)]
pub struct Smib {
    pub model: Model,
    pub layout: SmibLayout,
    pub params: TestbedParams,
}

#[derive(Default)]
struct Builder {
    spec: ModelSpec,
}

impl Builder {
    fn block(&mut self, kind: BlockKind) -> BlockId {
        let id = self.spec.blocks.len();
        self.spec.blocks.push(Block::new(id, kind));
        BlockId(id)
    }

    fn wire(&mut self, src: BlockId, dst: BlockId, port: usize) -> usize {
        self.spec.wires.push(Wire::new((src.0, 0), (dst.0, port)));
        self.spec.wires.len() - 1
    }

    fn output(&mut self, name: &str, src: BlockId) {
        self.spec.outputs.push(OutputSpec::new(name, (src.0, 0)));
    }
}

pub fn build_smib_model(params: &TestbedParams) -> Result<Smib, TestbedError> {
    use BlockKind::*;
    params.validate()?;
    let g = &params.generator;
    let p0 = params.p0();
    let (e0, delta0) = params.initial_conditions();
    let mut b = Builder::default();

    let delta = b.block(Integrator { initial: delta0 });
    let omega = b.block(Integrator { initial: 0.0 });

    // excitation and terminal voltage
    let e0_blk = b.block(Constant { value: e0 });
    let eprime = b.block(Sum { signs: vec![1, 1] });
    let ratio = b.block(Gain { k: 1.0 / e0 });
    let gate = b.block(Constant { value: 1.0 });
    let vt = b.block(Product { n: 2 });
    b.wire(e0_blk, eprime, 0);
    b.wire(eprime, ratio, 0);
    b.wire(gate, vt, 0);
    b.wire(ratio, vt, 1);

    // electrical power
    let sin_d = b.block(Sine);
    let ev_sin = b.block(Product { n: 3 });
    let p_sync = b.block(Gain { k: 1.0 / g.xd_transient });
    let load = b.block(Constant { value: 0.0 });
    let p_e = b.block(Sum { signs: vec![1, 1] });
    b.wire(delta, sin_d, 0);
    b.wire(eprime, ev_sin, 0);
    b.wire(vt, ev_sin, 1);
    b.wire(sin_d, ev_sin, 2);
    b.wire(ev_sin, p_sync, 0);
    b.wire(p_sync, p_e, 0);
    b.wire(load, p_e, 1);

    // rotor angle against the network
    let p0_net = b.block(Constant { value: p0 });
    let dp_net = b.block(Sum { signs: vec![1, -1] });
    let omega_net = b.block(Gain { k: params.network_droop });
    let slip = b.block(Sum { signs: vec![1, -1] });
    let d_delta = b.block(Gain { k: params.omega_s() });
    b.wire(p_sync, dp_net, 0);
    b.wire(p0_net, dp_net, 1);
    b.wire(dp_net, omega_net, 0);
    b.wire(omega, slip, 0);
    b.wire(omega_net, slip, 1);
    b.wire(slip, d_delta, 0);
    b.wire(d_delta, delta, 0);

    // AVR
    let v_ref = b.block(Constant { value: 1.0 });
    let v_err = b.block(Sum { signs: vec![1, -1] });
    let avr_lag = b.block(FirstOrderLag {
        gain: params.avr_gain,
        time_constant: params.avr_time_constant,
        initial: 0.0,
    });
    let avr_lim = b.block(Limiter {
        lo: -params.avr_limit,
        hi: params.avr_limit,
    });
    b.wire(v_ref, v_err, 0);
    let avr_in = b.wire(vt, v_err, 1);
    b.wire(v_err, avr_lag, 0);
    b.wire(avr_lag, avr_lim, 0);
    let avr_out = b.wire(avr_lim, eprime, 1);

    // governor and turbine
    let droop_k = if params.governor_enabled { -1.0 / params.droop_r } else { 0.0 };
    let droop = b.block(Gain { k: droop_k });
    let gov_lag = b.block(FirstOrderLag {
        gain: 1.0,
        time_constant: params.governor_time_constant,
        initial: 0.0,
    });
    let pm0 = b.block(Constant { value: p0 });
    let p_m = b.block(Sum { signs: vec![1, 1] });
    let governor_in = b.wire(omega, droop, 0);
    b.wire(droop, gov_lag, 0);
    b.wire(pm0, p_m, 0);
    let governor_out = b.wire(gov_lag, p_m, 1);

    // swing
    let damp = b.block(Gain { k: g.damping });
    let accel = b.block(Sum { signs: vec![1, -1, -1] });
    let d_omega = b.block(Gain { k: 1.0 / (2.0 * g.inertia_h) });
    b.wire(omega, damp, 0);
    b.wire(p_m, accel, 0);
    b.wire(p_e, accel, 1);
    b.wire(damp, accel, 2);
    b.wire(accel, d_omega, 0);
    b.wire(d_omega, omega, 0);

    b.output(FREQUENCY, omega);
    b.output(BUS_VOLTAGE, vt);
    b.output(TURBINE_POWER, p_m);

    Ok(Smib {
        model: b.spec.validate()?,
        layout: SmibLayout {
            delta,
            omega,
            terminal_voltage: vt,
            gate,
            load,
            avr_lag,
            governor_lag: gov_lag,
            turbine_power: p_m,
            d_delta,
            d_omega,
            p_sync,
            avr_in,
            avr_out,
            governor_in,
            governor_out,
        },
        params: params.clone(),
    })
}

/// Adds `scenario` to a built testbed. Existing block ids and wire indices
/// are preserved, so cuts stay valid.
pub fn apply_scenario(smib: &Smib, scenario: &Scenario, t_end: f64) -> Result<Smib, TestbedError> {
    scenario.validate(t_end)?;
    let l = &smib.layout;
    let mut b = Builder {
        spec: smib.model.spec().clone(),
    };
    match scenario.kind {
        ScenarioKind::LoadStep => {
            b.spec.blocks[l.load.0].kind = BlockKind::Step {
                t0: scenario.event_time,
                before: 0.0,
                after: scenario.magnitude_mw / smib.params.generator.base_mva,
            };
        }
        ScenarioKind::Fault => {
            let clear = scenario.clear_time.expect("validated");
            b.spec.blocks[l.gate.0].kind = BlockKind::Sum { signs: vec![1, 1] };
            let on = b.block(BlockKind::Step {
                t0: scenario.event_time,
                before: 1.0,
                after: 0.0,
            });
            let off = b.block(BlockKind::Step {
                t0: clear,
                before: 0.0,
                after: 1.0,
            });
            b.wire(on, l.gate, 0);
            b.wire(off, l.gate, 1);
        }
    }
    Ok(Smib {
        model: b.spec.validate()?,
        layout: smib.layout.clone(),
        params: smib.params.clone(),
    })
}

/// Named cuts: "avr" moves the AVR to the follower, "governor" the governor
/// and turbine lag chain, "both" does both.
pub fn standard_cuts(smib: &Smib) -> BTreeMap<String, CutSet> {
    let l = &smib.layout;
    let avr = CutSet::new([
        (l.avr_in, Direction::MasterToFollower),
        (l.avr_out, Direction::FollowerToMaster),
    ]);
    let governor = CutSet::new([
        (l.governor_in, Direction::MasterToFollower),
        (l.governor_out, Direction::FollowerToMaster),
    ]);
    let both = avr.union(&governor);
    BTreeMap::from([
        ("avr".to_owned(), avr),
        ("governor".to_owned(), governor),
        ("both".to_owned(), both),
    ])
}

/// Model file contents with the standard cuts embedded.
pub fn document(smib: &Smib) -> ModelDocument {
    ModelDocument {
        model: smib.model.spec().clone(),
        cuts: standard_cuts(smib),
    }
}
