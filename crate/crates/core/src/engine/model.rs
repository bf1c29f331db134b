//! Model topology: validation, wiring tables and evaluation order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::{Block, BlockId, BlockKind, PortRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wire {
    pub src: PortRef,
    pub dst: PortRef,
}

impl Wire {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
        }
    }
}

/// A named model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub name: String,
    pub src: PortRef,
}

impl OutputSpec {
    pub fn new(name: impl Into<String>, src: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            src: src.into(),
        }
    }
}

/// Unvalidated model description; this is also the JSON model format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub blocks: Vec<Block>,
    pub wires: Vec<Wire>,
    /// Input ports fed from outside, in external-vector order.
    #[serde(default)]
    pub inputs: Vec<PortRef>,
    #[serde(default)]
    pub outputs: Vec<OutputSpec>,
}

impl ModelSpec {
    pub fn validate(self) -> Result<Model, ModelError> {
        validate_and_order(self)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("block at position {position} has id {found}; ids must be dense and ordered")]
    NonDenseIds { position: usize, found: BlockId },
    #[error("block {block} ({kind}): {reason}")]
    InvalidBlock {
        block: BlockId,
        kind: &'static str,
        reason: String,
    },
    #[error("reference to unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("{direction} port {port} out of range for block {block}")]
    PortOutOfRange {
        block: BlockId,
        port: usize,
        direction: &'static str,
    },
    #[error("input port {port} of block {block} has no driver")]
    DanglingPort { block: BlockId, port: usize },
    #[error("input port {port} of block {block} is driven more than once")]
    DuplicateDrive { block: BlockId, port: usize },
    #[error("external block {block} must be model input {slot}")]
    ExternalSlot { block: BlockId, slot: usize },
    #[error("algebraic loop through blocks {}", fmt_ids(.cycle))]
    AlgebraicLoop { cycle: Vec<BlockId> },
}

fn fmt_ids(ids: &[BlockId]) -> String {
    let parts: Vec<String> = ids.iter().map(|b| b.to_string()).collect();
    format!("[{}]", parts.join(" -> "))
}

/// Where a block input port gets its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    /// Output of another block.
    Block(BlockId),
    /// Entry of the external input vector.
    Input(usize),
}

/// A validated, immutable model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    eval_order: Vec<BlockId>,
    drivers: Vec<Vec<Driver>>,
    state_slot: Vec<Option<usize>>,
    memory: Vec<BlockId>,
}

impl Model {
    pub fn blocks(&self) -> &[Block] {
        &self.spec.blocks
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.spec.blocks[id.0]
    }

    pub fn wires(&self) -> &[Wire] {
        &self.spec.wires
    }

    pub fn inputs(&self) -> &[PortRef] {
        &self.spec.inputs
    }

    pub fn outputs(&self) -> &[OutputSpec] {
        &self.spec.outputs
    }

    pub fn eval_order(&self) -> &[BlockId] {
        &self.eval_order
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn into_spec(self) -> ModelSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.blocks.is_empty()
    }

    pub fn drivers(&self, id: BlockId) -> &[Driver] {
        &self.drivers[id.0]
    }

    /// Memory blocks in state-vector order.
    pub fn memory_blocks(&self) -> &[BlockId] {
        &self.memory
    }

    pub fn state_slot(&self, id: BlockId) -> Option<usize> {
        self.state_slot[id.0]
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.memory
            .iter()
            .map(|id| self.block(*id).kind.initial_state().unwrap_or(0.0))
            .collect()
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.spec.outputs.iter().position(|o| o.name == name)
    }
}

/// Checks wiring and computes a deterministic evaluation order.
///
/// Wires leaving memory blocks carry no ordering constraint. Among ready
/// blocks, the lowest id is emitted first.
pub fn validate_and_order(spec: ModelSpec) -> Result<Model, ModelError> {
    let n = spec.blocks.len();
    for (position, block) in spec.blocks.iter().enumerate() {
        if block.id.0 != position {
            return Err(ModelError::NonDenseIds {
                position,
                found: block.id,
            });
        }
        block.kind.check().map_err(|reason| ModelError::InvalidBlock {
            block: block.id,
            kind: block.kind.name(),
            reason,
        })?;
    }

    let block_of = |id: BlockId| spec.blocks.get(id.0).ok_or(ModelError::UnknownBlock(id));
    let check_out = |p: PortRef| -> Result<(), ModelError> {
        if p.port < block_of(p.block)?.n_out() {
            Ok(())
        } else {
            Err(ModelError::PortOutOfRange {
                block: p.block,
                port: p.port,
                direction: "output",
            })
        }
    };
    let check_in = |p: PortRef| -> Result<(), ModelError> {
        if p.port < block_of(p.block)?.n_in() {
            Ok(())
        } else {
            Err(ModelError::PortOutOfRange {
                block: p.block,
                port: p.port,
                direction: "input",
            })
        }
    };

    let mut slots: Vec<Vec<Option<Driver>>> = spec.blocks.iter().map(|b| vec![None; b.n_in()]).collect();
    let mut assign = |p: PortRef, d: Driver| -> Result<(), ModelError> {
        let slot = &mut slots[p.block.0][p.port];
        if slot.is_some() {
            return Err(ModelError::DuplicateDrive {
                block: p.block,
                port: p.port,
            });
        }
        *slot = Some(d);
        Ok(())
    };

    for w in &spec.wires {
        check_out(w.src)?;
        check_in(w.dst)?;
        assign(w.dst, Driver::Block(w.src.block))?;
    }
    for (i, p) in spec.inputs.iter().enumerate() {
        check_in(*p)?;
        assign(*p, Driver::Input(i))?;
    }
    for o in &spec.outputs {
        check_out(o.src)?;
    }

    let mut drivers = Vec::with_capacity(n);
    for (b, ports) in slots.into_iter().enumerate() {
        let mut resolved = Vec::with_capacity(ports.len());
        for (port, d) in ports.into_iter().enumerate() {
            match d {
                Some(d) => resolved.push(d),
                None => {
                    return Err(ModelError::DanglingPort {
                        block: BlockId(b),
                        port,
                    })
                }
            }
        }
        drivers.push(resolved);
    }

    for block in &spec.blocks {
        if let BlockKind::External { slot } = block.kind {
            if drivers[block.id.0][0] != Driver::Input(slot) {
                return Err(ModelError::ExternalSlot { block: block.id, slot });
            }
        }
    }

    let is_memory: Vec<bool> = spec.blocks.iter().map(|b| b.kind.is_memory()).collect();
    // successors / predecessors over non-memory edges only
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for (dst, ds) in drivers.iter().enumerate() {
        for d in ds {
            if let Driver::Block(src) = d {
                if !is_memory[src.0] {
                    succ[src.0].push(dst);
                    pred[dst].push(src.0);
                    indegree[dst] += 1;
                }
            }
        }
    }

    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|b| indegree[*b] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(b)) = ready.pop() {
        order.push(BlockId(b));
        for &s in &succ[b] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }

    if order.len() < n {
        return Err(ModelError::AlgebraicLoop {
            cycle: extract_cycle(&indegree, &pred),
        });
    }

    let mut state_slot = vec![None; n];
    let mut memory = Vec::new();
    for (b, m) in is_memory.iter().enumerate() {
        if *m {
            state_slot[b] = Some(memory.len());
            memory.push(BlockId(b));
        }
    }

    Ok(Model {
        spec,
        eval_order: order,
        drivers,
        state_slot,
        memory,
    })
}

/// Every block left with nonzero in-degree after Kahn's pass has a
/// predecessor that is also left, so walking predecessors must revisit.
fn extract_cycle(indegree: &[usize], pred: &[Vec<usize>]) -> Vec<BlockId> {
    let left = |b: usize| indegree[b] > 0;
    let start = (0..indegree.len()).find(|b| left(*b)).expect("unsorted block");
    let mut walk = vec![start];
    let mut seen_at = vec![usize::MAX; indegree.len()];
    seen_at[start] = 0;
    let mut cur = start;
    loop {
        let next = pred[cur]
            .iter()
            .copied()
            .filter(|p| left(*p))
            .min()
            .expect("left block has a left predecessor");
        if seen_at[next] != usize::MAX {
            let mut cycle: Vec<usize> = walk[seen_at[next]..].to_vec();
            cycle.reverse();
            let min_pos = cycle
                .iter()
                .enumerate()
                .min_by_key(|(_, b)| **b)
                .map(|(i, _)| i)
                .unwrap_or(0);
            cycle.rotate_left(min_pos);
            return cycle.into_iter().map(BlockId).collect();
        }
        seen_at[next] = walk.len();
        walk.push(next);
        cur = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(blocks: Vec<BlockKind>, wires: Vec<Wire>) -> ModelSpec {
        ModelSpec {
            blocks: blocks.into_iter().enumerate().map(|(i, k)| Block::new(i, k)).collect(),
            wires,
            inputs: vec![],
            outputs: vec![],
        }
    }

    #[test]
    fn chain_orders_source_first() {
        let mut s = spec(
            vec![BlockKind::Constant { value: 1.0 }, BlockKind::Gain { k: 3.0 }],
            vec![Wire::new((0, 0), (1, 0))],
        );
        s.outputs.push(OutputSpec::new("y", (1, 0)));
        let m = s.validate().unwrap();
        assert_eq!(m.eval_order(), &[BlockId(0), BlockId(1)]);
    }

    #[test]
    fn ties_break_on_lowest_id() {
        // 2 -> 0, and 1 independent: order must be 1, 2, 0
        let s = spec(
            vec![
                BlockKind::Gain { k: 1.0 },
                BlockKind::Constant { value: 1.0 },
                BlockKind::Constant { value: 2.0 },
            ],
            vec![Wire::new((2, 0), (0, 0))],
        );
        let m = s.validate().unwrap();
        assert_eq!(m.eval_order(), &[BlockId(1), BlockId(2), BlockId(0)]);
    }

    #[test]
    fn gain_loop_is_algebraic() {
        let s = spec(
            vec![BlockKind::Gain { k: 1.0 }, BlockKind::Gain { k: 2.0 }],
            vec![Wire::new((0, 0), (1, 0)), Wire::new((1, 0), (0, 0))],
        );
        match s.validate() {
            Err(ModelError::AlgebraicLoop { cycle }) => assert_eq!(cycle, vec![BlockId(0), BlockId(1)]),
            other => panic!("expected loop, got {other:?}"),
        }
    }

    #[test]
    fn loop_message_names_cycle() {
        let s = spec(
            vec![
                BlockKind::Constant { value: 1.0 },
                BlockKind::Gain { k: 1.0 },
                BlockKind::Sum { signs: vec![1, 1] },
                BlockKind::Gain { k: 2.0 },
            ],
            vec![
                Wire::new((0, 0), (2, 0)),
                Wire::new((3, 0), (2, 1)),
                Wire::new((2, 0), (1, 0)),
                Wire::new((1, 0), (3, 0)),
            ],
        );
        let err = s.validate().unwrap_err();
        assert_eq!(err.to_string(), "algebraic loop through blocks [1 -> 3 -> 2]");
    }

    #[test]
    fn integrator_breaks_loop() {
        // Sum(0) -> Integrator(1) -> Gain(2) -> Sum(0)
        let s = spec(
            vec![
                BlockKind::Sum { signs: vec![1, -1] },
                BlockKind::Integrator { initial: 0.0 },
                BlockKind::Gain { k: 2.0 },
                BlockKind::Constant { value: 1.0 },
            ],
            vec![
                Wire::new((3, 0), (0, 0)),
                Wire::new((2, 0), (0, 1)),
                Wire::new((0, 0), (1, 0)),
                Wire::new((1, 0), (2, 0)),
            ],
        );
        let m = s.validate().unwrap();
        // only the integrator's outgoing edge is dropped
        assert_eq!(m.eval_order(), &[BlockId(2), BlockId(3), BlockId(0), BlockId(1)]);
        assert_eq!(m.memory_blocks(), &[BlockId(1)]);
    }

    #[test]
    fn dangling_and_duplicate() {
        let s = spec(vec![BlockKind::Gain { k: 1.0 }], vec![]);
        assert_eq!(
            s.validate().unwrap_err(),
            ModelError::DanglingPort {
                block: BlockId(0),
                port: 0
            }
        );

        let s = spec(
            vec![
                BlockKind::Constant { value: 1.0 },
                BlockKind::Constant { value: 2.0 },
                BlockKind::Gain { k: 1.0 },
            ],
            vec![Wire::new((0, 0), (2, 0)), Wire::new((1, 0), (2, 0))],
        );
        assert_eq!(
            s.validate().unwrap_err(),
            ModelError::DuplicateDrive {
                block: BlockId(2),
                port: 0
            }
        );
    }

    #[test]
    fn model_input_counts_as_driver() {
        let mut s = spec(vec![BlockKind::Gain { k: 1.0 }], vec![]);
        s.inputs.push(PortRef::new(0, 0));
        assert!(s.clone().validate().is_ok());
        s.wires.push(Wire::new((0, 0), (0, 0)));
        assert!(matches!(s.validate(), Err(ModelError::DuplicateDrive { .. })));
    }

    #[test]
    fn bad_references() {
        let s = spec(vec![BlockKind::Constant { value: 1.0 }], vec![Wire::new((0, 0), (5, 0))]);
        assert_eq!(s.validate().unwrap_err(), ModelError::UnknownBlock(BlockId(5)));

        let s = spec(
            vec![BlockKind::Constant { value: 1.0 }, BlockKind::Gain { k: 1.0 }],
            vec![Wire::new((0, 1), (1, 0))],
        );
        assert!(matches!(s.validate(), Err(ModelError::PortOutOfRange { direction: "output", .. })));

        let mut s = spec(vec![BlockKind::Constant { value: 1.0 }], vec![]);
        s.blocks[0].id = BlockId(1);
        assert!(matches!(s.validate(), Err(ModelError::NonDenseIds { .. })));
    }

    #[test]
    fn external_slot_must_match_input_position() {
        let mut s = spec(
            vec![BlockKind::External { slot: 1 }, BlockKind::Gain { k: 1.0 }],
            vec![],
        );
        s.inputs = vec![PortRef::new(1, 0), PortRef::new(0, 0)];
        assert!(s.clone().validate().is_ok());
        s.inputs.swap(0, 1);
        assert!(matches!(s.validate(), Err(ModelError::ExternalSlot { .. })));
    }

    #[test]
    fn json_roundtrip_of_document() {
        let text = r#"{
            "blocks": [
                {"id": 0, "kind": "constant", "params": {"value": 1.0}},
                {"id": 1, "kind": "gain", "params": {"k": 3.0}}
            ],
            "wires": [{"src": [0, 0], "dst": [1, 0]}],
            "inputs": [],
            "outputs": [{"name": "y", "src": [1, 0]}]
        }"#;
        let s: ModelSpec = serde_json::from_str(text).unwrap();
        let again: ModelSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.validate().unwrap().eval_order(), &[BlockId(0), BlockId(1)]);
    }
}
