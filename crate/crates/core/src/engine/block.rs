//! Block palette.
//!
//! Every block has exactly one output port. Memory blocks (integrator,
//! first-order lag, unit delay) publish their pre-update state as output, so
//! their output never depends on the current input. That is what lets them
//! break feedback cycles during ordering.
//!
//! Adding a block kind means: a variant here, its arity in
//! [`BlockKind::n_inputs`], its parameter checks in [`BlockKind::check`], and
//! its output/update rules in `engine::sim`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Dense block index inside a [`Model`](super::Model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub usize);

impl BlockId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A block output or input port, serialized as `[block, port]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct PortRef {
    pub block: BlockId,
    pub port: usize,
}

impl PortRef {
    pub fn new(block: usize, port: usize) -> Self {
        Self {
            block: BlockId(block),
            port,
        }
    }
}

impl From<(usize, usize)> for PortRef {
    fn from((block, port): (usize, usize)) -> Self {
        Self::new(block, port)
    }
}

impl From<PortRef> for (usize, usize) {
    fn from(p: PortRef) -> Self {
        (p.block.0, p.port)
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.block, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum BlockKind {
    Constant {
        value: f64,
    },
    Gain {
        k: f64,
    },
    /// Signed sum; each entry must be `+1` or `-1`.
    Sum {
        signs: Vec<i8>,
    },
    /// Product of `n` inputs.
    Product {
        n: usize,
    },
    Limiter {
        lo: f64,
        hi: f64,
    },
    /// `before` while `t < t0`, `after` from `t0` on.
    Step {
        t0: f64,
        before: f64,
        after: f64,
    },
    Sine,
    /// Forward-Euler integrator.
    Integrator {
        initial: f64,
    },
    /// `K / (1 + sT)`, discretized exactly under zero-order hold.
    FirstOrderLag {
        gain: f64,
        time_constant: f64,
        initial: f64,
    },
    /// One-step delay, `y[k] = u[k-1]`.
    UnitDelay {
        initial: f64,
    },
    /// Boundary pass-through; its input port is model input number `slot`.
    External {
        slot: usize,
    },
}

impl BlockKind {
    pub fn n_inputs(&self) -> usize {
        match self {
            BlockKind::Constant { .. } | BlockKind::Step { .. } => 0,
            BlockKind::Gain { .. }
            | BlockKind::Limiter { .. }
            | BlockKind::Sine
            | BlockKind::Integrator { .. }
            | BlockKind::FirstOrderLag { .. }
            | BlockKind::UnitDelay { .. }
            | BlockKind::External { .. } => 1,
            BlockKind::Sum { signs } => signs.len(),
            BlockKind::Product { n } => *n,
        }
    }

    pub fn n_outputs(&self) -> usize {
        1
    }

    /// Output depends only on internal state.
    pub fn is_memory(&self) -> bool {
        matches!(
            self,
            BlockKind::Integrator { .. } | BlockKind::FirstOrderLag { .. } | BlockKind::UnitDelay { .. }
        )
    }

    pub fn initial_state(&self) -> Option<f64> {
        match self {
            BlockKind::Integrator { initial }
            | BlockKind::FirstOrderLag { initial, .. }
            | BlockKind::UnitDelay { initial } => Some(*initial),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::Constant { .. } => "constant",
            BlockKind::Gain { .. } => "gain",
            BlockKind::Sum { .. } => "sum",
            BlockKind::Product { .. } => "product",
            BlockKind::Limiter { .. } => "limiter",
            BlockKind::Step { .. } => "step",
            BlockKind::Sine => "sine",
            BlockKind::Integrator { .. } => "integrator",
            BlockKind::FirstOrderLag { .. } => "first_order_lag",
            BlockKind::UnitDelay { .. } => "unit_delay",
            BlockKind::External { .. } => "external",
        }
    }

    /// Parameter invariants. Returns a human-readable reason on failure.
    pub fn check(&self) -> Result<(), String> {
        let finite = |what: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{what} must be finite, got {v}"))
            }
        };
        match self {
            BlockKind::Constant { value } => finite("value", *value),
            BlockKind::Gain { k } => finite("k", *k),
            BlockKind::Sum { signs } => {
                if signs.is_empty() {
                    return Err("sum needs at least one sign".into());
                }
                match signs.iter().find(|s| **s != 1 && **s != -1) {
                    Some(s) => Err(format!("sum signs must be +1 or -1, got {s}")),
                    None => Ok(()),
                }
            }
            BlockKind::Product { n } => {
                if *n == 0 {
                    Err("product needs at least one input".into())
                } else {
                    Ok(())
                }
            }
            BlockKind::Limiter { lo, hi } => {
                if lo.is_nan() || hi.is_nan() {
                    Err("limiter bounds must not be NaN".into())
                } else if lo > hi {
                    Err(format!("limiter requires lo <= hi, got lo={lo} hi={hi}"))
                } else {
                    Ok(())
                }
            }
            BlockKind::Step { t0, before, after } => {
                finite("t0", *t0)?;
                finite("before", *before)?;
                finite("after", *after)
            }
            BlockKind::Sine => Ok(()),
            BlockKind::Integrator { initial } | BlockKind::UnitDelay { initial } => {
                finite("initial", *initial)
            }
            BlockKind::FirstOrderLag {
                gain,
                time_constant,
                initial,
            } => {
                finite("gain", *gain)?;
                finite("initial", *initial)?;
                if time_constant.is_finite() && *time_constant > 0.0 {
                    Ok(())
                } else {
                    Err(format!("time constant must be > 0, got {time_constant}"))
                }
            }
            BlockKind::External { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    #[serde(flatten)]
    pub kind: BlockKind,
}

impl Block {
    pub fn new(id: usize, kind: BlockKind) -> Self {
        Self {
            id: BlockId(id),
            kind,
        }
    }

    pub fn n_in(&self) -> usize {
        self.kind.n_inputs()
    }

    pub fn n_out(&self) -> usize {
        self.kind.n_outputs()
    }
}

/// Clamp used by the limiter block. NaN passes through unchanged so the
/// engine's finiteness check reports the block that produced it upstream.
#[inline]
pub fn clamp(u: f64, lo: f64, hi: f64) -> f64 {
    if u < lo {
        lo
    } else if u > hi {
        hi
    } else {
        u
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let b = Block::new(3, BlockKind::Gain { k: 2.5 });
        let v = serde_json::to_value(&b).unwrap();
        assert_eq!(v, serde_json::json!({"id": 3, "kind": "gain", "params": {"k": 2.5}}));
        let back: Block = serde_json::from_value(v).unwrap();
        assert_eq!(back, b);

        let sine: Block = serde_json::from_str(r#"{"id": 0, "kind": "sine"}"#).unwrap();
        assert_eq!(sine.kind, BlockKind::Sine);

        let lag: Block = serde_json::from_str(
            r#"{"id": 1, "kind": "first_order_lag", "params": {"gain": 1, "time_constant": 0.5, "initial": 0}}"#,
        )
        .unwrap();
        assert!(lag.kind.is_memory());
    }

    #[test]
    fn arity() {
        assert_eq!(BlockKind::Constant { value: 1.0 }.n_inputs(), 0);
        assert_eq!(BlockKind::Sum { signs: vec![1, -1, 1] }.n_inputs(), 3);
        assert_eq!(BlockKind::External { slot: 4 }.n_inputs(), 1);
        assert_eq!(BlockKind::Product { n: 2 }.n_inputs(), 2);
    }

    #[test]
    fn parameter_invariants() {
        assert!(BlockKind::Limiter { lo: 1.0, hi: 0.0 }.check().is_err());
        assert!(BlockKind::Limiter { lo: 0.0, hi: 0.0 }.check().is_ok());
        assert!(BlockKind::Sum { signs: vec![] }.check().is_err());
        assert!(BlockKind::Sum { signs: vec![2] }.check().is_err());
        let lag = |t| BlockKind::FirstOrderLag {
            gain: 1.0,
            time_constant: t,
            initial: 0.0,
        };
        assert!(lag(0.0).check().is_err());
        assert!(lag(-1.0).check().is_err());
        assert!(lag(1e-3).check().is_ok());
    }

    #[test]
    fn clamp_is_idempotent_near_extremes() {
        let (lo, hi) = (-1.5, 2.0);
        for u in [f64::MIN, -f64::MAX / 2.0, -1.5, 0.0, 2.0, f64::MAX, f64::INFINITY, f64::NEG_INFINITY] {
            let once = clamp(u, lo, hi);
            assert_eq!(clamp(once, lo, hi), once);
        }
    }
}
