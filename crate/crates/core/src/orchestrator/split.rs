//! Cutting a model into a master half and a follower half.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::SplitError;
use crate::bridge::{MAX_INPUTS, MAX_OUTPUTS};
use crate::engine::{Block, BlockId, BlockKind, Model, ModelSpec, OutputSpec, PortRef, Wire};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MasterToFollower,
    FollowerToMaster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Master,
    Follower,
}

impl Direction {
    /// (side of the wire's source, side of its destination)
    pub fn sides(self) -> (Side, Side) {
        match self {
            Direction::MasterToFollower => (Side::Master, Side::Follower),
            Direction::FollowerToMaster => (Side::Follower, Side::Master),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutWire {
    pub wire: usize,
    pub direction: Direction,
}

/// Wires to cut, by index into the source model's wire list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutSet {
    pub wires: Vec<CutWire>,
}

impl CutSet {
    pub fn new(wires: impl IntoIterator<Item = (usize, Direction)>) -> Self {
        Self {
            wires: wires
                .into_iter()
                .map(|(wire, direction)| CutWire { wire, direction })
                .collect(),
        }
    }

    pub fn union(&self, other: &CutSet) -> CutSet {
        let mut wires = self.wires.clone();
        wires.extend(other.wires.iter().copied());
        CutSet { wires }
    }

    fn sorted(&self) -> Vec<CutWire> {
        let mut w = self.wires.clone();
        w.sort_by_key(|c| c.wire);
        w
    }

    fn check_indices(&self, n_wires: usize) -> Result<(), SplitError> {
        let mut seen = vec![false; n_wires];
        for c in &self.wires {
            if c.wire >= n_wires {
                return Err(SplitError::UnknownWire(c.wire));
            }
            if std::mem::replace(&mut seen[c.wire], true) {
                return Err(SplitError::DuplicateWire(c.wire));
            }
        }
        Ok(())
    }
}

/// A model file: the engine's model JSON plus optional named cuts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(flatten)]
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cuts: BTreeMap<String, CutSet>,
}

/// What a follower-to-master slot carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundarySignal {
    /// A cut wire, consumed by the master one step later.
    Wire(usize),
    /// A model output computed on the follower side, recorded by the master
    /// in the same step.
    Observation(usize),
}

/// Where each output of the original model comes from during co-simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSource {
    /// Index into the master half's outputs.
    Master(usize),
    /// Index into the follower-to-master slots.
    Follower(usize),
}

#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub master: Model,
    pub follower: Model,
    /// Cut-wire index carried by each master-to-follower slot.
    pub master_to_follower: Vec<usize>,
    pub follower_to_master: Vec<BoundarySignal>,
    /// Master-half port feeding each master-to-follower slot.
    pub master_taps: Vec<PortRef>,
    pub outputs: Vec<OutputSource>,
    pub output_names: Vec<String>,
    pub channel_name: String,
}

impl SplitPlan {
    /// Number of follower-to-master slots that feed the master model.
    pub fn n_fed_back(&self) -> usize {
        self.master.inputs().len()
    }
}

/// A process-unique channel name.
pub fn fresh_channel_name() -> String {
    static N: AtomicUsize = AtomicUsize::new(0);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    format!(
        "cosim-{}-{}-{nanos}",
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    )
}

struct Components(Vec<usize>);

impl Components {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Assigns every block to a side. Each group of blocks still connected after
/// removing the cut takes the side implied by the cut wires touching it;
/// untouched groups stay with the master.
pub fn assign_sides(model: &Model, cut: &CutSet) -> Result<Vec<Side>, SplitError> {
    cut.check_indices(model.wires().len())?;
    if cut.wires.is_empty() {
        return Err(SplitError::NotABipartition("empty cut leaves nothing for the follower".into()));
    }
    let cut_mask = {
        let mut m = vec![false; model.wires().len()];
        for c in &cut.wires {
            m[c.wire] = true;
        }
        m
    };
    let mut comps = Components((0..model.len()).collect());
    for (i, w) in model.wires().iter().enumerate() {
        if !cut_mask[i] {
            comps.union(w.src.block.0, w.dst.block.0);
        }
    }

    let mut group_side: Vec<Option<(Side, usize)>> = vec![None; model.len()];
    for c in cut.sorted() {
        let w = model.wires()[c.wire];
        let (from, to) = c.direction.sides();
        for (block, side) in [(w.src.block, from), (w.dst.block, to)] {
            let root = comps.find(block.0);
            match group_side[root] {
                None => group_side[root] = Some((side, c.wire)),
                Some((s, _)) if s == side => {}
                Some((_, other)) => {
                    return Err(SplitError::NotABipartition(format!(
                        "cut wires {other} and {} place block {block} on both sides",
                        c.wire
                    )))
                }
            }
        }
    }
    let sides: Vec<Side> = (0..model.len())
        .map(|b| {
            let root = comps.find(b);
            group_side[root].map(|(s, _)| s).unwrap_or(Side::Master)
        })
        .collect();
    Ok(sides)
}

struct HalfBuilder {
    remap: Vec<Option<usize>>,
    spec: ModelSpec,
}

impl HalfBuilder {
    fn new(model: &Model, sides: &[Side], side: Side) -> Self {
        let mut remap = vec![None; model.len()];
        let mut spec = ModelSpec::default();
        for b in model.blocks() {
            if sides[b.id.0] == side {
                let id = spec.blocks.len();
                remap[b.id.0] = Some(id);
                spec.blocks.push(Block::new(id, b.kind.clone()));
            }
        }
        // cut wires always join opposite sides, so they never match here
        for w in model.wires() {
            if let (Some(s), Some(d)) = (remap[w.src.block.0], remap[w.dst.block.0]) {
                spec.wires.push(Wire::new((s, w.src.port), (d, w.dst.port)));
            }
        }
        Self { remap, spec }
    }

    fn port(&self, p: PortRef) -> PortRef {
        PortRef::new(self.remap[p.block.0].expect("port on this side"), p.port)
    }

    /// Adds an External block fed by the next model input and wired to `dst`.
    fn external_into(&mut self, dst: PortRef) {
        let slot = self.spec.inputs.len();
        let id = self.spec.blocks.len();
        self.spec.blocks.push(Block::new(id, BlockKind::External { slot }));
        self.spec.inputs.push(PortRef::new(id, 0));
        let dst = self.port(dst);
        self.spec.wires.push(Wire {
            src: PortRef::new(id, 0),
            dst,
        });
    }
}

pub fn split(model: &Model, cut: &CutSet) -> Result<SplitPlan, SplitError> {
    if !model.inputs().is_empty() {
        return Err(SplitError::ModelInputs(model.inputs().len()));
    }
    let sides = assign_sides(model, cut)?;
    if !sides.contains(&Side::Follower) {
        return Err(SplitError::NotABipartition("no block lands on the follower side".into()));
    }

    let sorted = cut.sorted();
    let master_to_follower: Vec<usize> = sorted
        .iter()
        .filter(|c| c.direction == Direction::MasterToFollower)
        .map(|c| c.wire)
        .collect();
    let fed_back: Vec<usize> = sorted
        .iter()
        .filter(|c| c.direction == Direction::FollowerToMaster)
        .map(|c| c.wire)
        .collect();
    let observed: Vec<usize> = model
        .outputs()
        .iter()
        .enumerate()
        .filter(|(_, o)| sides[o.src.block.0] == Side::Follower)
        .map(|(i, _)| i)
        .collect();

    let n_m2f = master_to_follower.len();
    let n_f2m = fed_back.len() + observed.len();
    if n_m2f > MAX_INPUTS || n_f2m > MAX_OUTPUTS {
        return Err(SplitError::CapacityExceeded {
            master_to_follower: n_m2f,
            follower_to_master: n_f2m,
        });
    }

    let wires = model.wires();
    let mut master = HalfBuilder::new(model, &sides, Side::Master);
    let mut follower = HalfBuilder::new(model, &sides, Side::Follower);

    for &i in &fed_back {
        master.external_into(wires[i].dst);
    }
    let master_taps = master_to_follower.iter().map(|&i| master.port(wires[i].src)).collect();

    let mut outputs = Vec::with_capacity(model.outputs().len());
    let mut follower_to_master: Vec<BoundarySignal> = fed_back.iter().map(|&i| BoundarySignal::Wire(i)).collect();
    for (i, o) in model.outputs().iter().enumerate() {
        match sides[o.src.block.0] {
            Side::Master => {
                outputs.push(OutputSource::Master(master.spec.outputs.len()));
                master.spec.outputs.push(OutputSpec {
                    name: o.name.clone(),
                    src: master.port(o.src),
                });
            }
            Side::Follower => {
                outputs.push(OutputSource::Follower(follower_to_master.len()));
                follower_to_master.push(BoundarySignal::Observation(i));
            }
        }
    }

    for &i in &master_to_follower {
        follower.external_into(wires[i].dst);
    }
    for s in &follower_to_master {
        let (name, src) = match *s {
            BoundarySignal::Wire(i) => (format!("wire{i}"), wires[i].src),
            BoundarySignal::Observation(o) => (model.outputs()[o].name.clone(), model.outputs()[o].src),
        };
        let src = follower.port(src);
        follower.spec.outputs.push(OutputSpec { name, src });
    }

    Ok(SplitPlan {
        master: master.spec.validate()?,
        follower: follower.spec.validate()?,
        master_to_follower,
        follower_to_master,
        master_taps,
        outputs,
        output_names: model.outputs().iter().map(|o| o.name.clone()).collect(),
        channel_name: fresh_channel_name(),
    })
}

/// The single-process equivalent of co-simulating `model` under `cut`: each
/// cut wire gets a unit delay with zero initial output. Wire `i` keeps its
/// index (now feeding the delay); the delay-to-destination wires are
/// appended.
pub fn reference_with_delays(model: &Model, cut: &CutSet) -> Result<Model, SplitError> {
    cut.check_indices(model.wires().len())?;
    let mut spec = model.spec().clone();
    for c in cut.sorted() {
        let id = spec.blocks.len();
        spec.blocks.push(Block::new(id, BlockKind::UnitDelay { initial: 0.0 }));
        let dst = spec.wires[c.wire].dst;
        spec.wires[c.wire].dst = PortRef::new(id, 0);
        spec.wires.push(Wire {
            src: PortRef::new(id, 0),
            dst,
        });
    }
    Ok(spec.validate()?)
}

/// Blocks placed on the follower side by `cut`.
pub fn follower_blocks(model: &Model, cut: &CutSet) -> Result<Vec<BlockId>, SplitError> {
    Ok(assign_sides(model, cut)?
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == Side::Follower)
        .map(|(i, _)| BlockId(i))
        .collect())
}
