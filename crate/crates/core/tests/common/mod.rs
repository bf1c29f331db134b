#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::Rng;

use cosim::engine::{Block, BlockKind, Model, ModelSpec, OutputSpec, Wire};
use cosim::orchestrator::{CosimOptions, CutSet, Direction};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_cosim"))
}

pub fn opts() -> CosimOptions {
    CosimOptions {
        timeout: Duration::from_millis(5000),
        follower_bin: Some(bin()),
        channel_name: None,
    }
}

pub fn unique(tag: &str) -> String {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static N: AtomicUsize = AtomicUsize::new(0);
    format!("t-{tag}-{}-{}", std::process::id(), N.fetch_add(1, Ordering::Relaxed))
}

pub fn build(blocks: Vec<BlockKind>, wires: Vec<Wire>, outputs: Vec<OutputSpec>) -> Model {
    ModelSpec {
        blocks: blocks.into_iter().enumerate().map(|(i, k)| Block::new(i, k)).collect(),
        wires,
        inputs: vec![],
        outputs,
    }
    .validate()
    .expect("test model is valid")
}

/// Constant(5) -> Gain(2), output "y" on the gain.
pub fn chain() -> Model {
    build(
        vec![BlockKind::Constant { value: 5.0 }, BlockKind::Gain { k: 2.0 }],
        vec![Wire::new((0, 0), (1, 0))],
        vec![OutputSpec::new("y", (1, 0))],
    )
}

fn random_kind(rng: &mut StdRng) -> BlockKind {
    let r = |rng: &mut StdRng, lo: f64, hi: f64| rng.random_range(lo..hi);
    match rng.random_range(0..11) {
        0 => BlockKind::Constant { value: r(rng, -2.0, 2.0) },
        1 => BlockKind::Gain { k: r(rng, -1.5, 1.5) },
        2 => {
            let n = rng.random_range(1..4);
            BlockKind::Sum {
                signs: (0..n).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect(),
            }
        }
        3 => BlockKind::Product { n: rng.random_range(1..3) },
        4 => BlockKind::Limiter { lo: -1.0, hi: 1.0 },
        5 => BlockKind::Step {
            t0: r(rng, 0.0, 0.5),
            before: r(rng, -1.0, 1.0),
            after: r(rng, -1.0, 1.0),
        },
        6 => BlockKind::Sine,
        7 => BlockKind::Integrator { initial: r(rng, -1.0, 1.0) },
        8 => BlockKind::FirstOrderLag {
            gain: r(rng, 0.5, 2.0),
            time_constant: r(rng, 0.05, 1.0),
            initial: r(rng, -1.0, 1.0),
        },
        9 => BlockKind::UnitDelay { initial: r(rng, -1.0, 1.0) },
        _ => BlockKind::Limiter { lo: -0.5, hi: 2.0 },
    }
}

/// Random closed model with `n` blocks. Ports are driven by an earlier block
/// or by any memory block, so feedback exists but algebraic loops do not.
pub fn random_model(rng: &mut StdRng, n: usize) -> Model {
    loop {
        let kinds: Vec<BlockKind> = (0..n).map(|_| random_kind(rng)).collect();
        let memory: Vec<usize> = (0..n).filter(|i| kinds[*i].is_memory()).collect();
        let mut wires = Vec::new();
        let mut ok = true;
        for (b, k) in kinds.iter().enumerate() {
            for p in 0..k.n_inputs() {
                let mut choices: Vec<usize> = (0..b).collect();
                choices.extend(memory.iter().copied().filter(|m| *m >= b));
                if choices.is_empty() {
                    ok = false;
                    break;
                }
                let src = choices[rng.random_range(0..choices.len())];
                wires.push(Wire::new((src, 0), (b, p)));
            }
        }
        if !ok {
            continue;
        }
        let n_out = rng.random_range(1..=n.min(4));
        let outputs = (0..n_out)
            .map(|i| OutputSpec::new(format!("o{i}"), (rng.random_range(0..n), 0)))
            .collect();
        let spec = ModelSpec {
            blocks: kinds.into_iter().enumerate().map(|(i, k)| Block::new(i, k)).collect(),
            wires,
            inputs: vec![],
            outputs,
        };
        return spec.validate().expect("generator never builds algebraic loops");
    }
}

/// Random side assignment turned into the cut of every crossing wire.
/// `None` when the assignment crosses no wire.
pub fn random_cut(rng: &mut StdRng, model: &Model) -> Option<CutSet> {
    let follower: Vec<bool> = (0..model.len()).map(|_| rng.random_bool(0.4)).collect();
    let cut = CutSet::new(model.wires().iter().enumerate().filter_map(|(i, w)| {
        match (follower[w.src.block.0], follower[w.dst.block.0]) {
            (false, true) => Some((i, Direction::MasterToFollower)),
            (true, false) => Some((i, Direction::FollowerToMaster)),
            _ => None,
        }
    }));
    (!cut.wires.is_empty()).then_some(cut)
}

/// Random wiring with arbitrary feedback, algebraic loops included.
pub fn random_graph(rng: &mut StdRng, n: usize) -> ModelSpec {
    let kinds: Vec<BlockKind> = (0..n)
        .map(|_| match rng.random_range(0..5) {
            0 => BlockKind::Gain { k: 1.0 },
            1 => BlockKind::Sum { signs: vec![1; rng.random_range(1..3)] },
            2 => BlockKind::Integrator { initial: 0.0 },
            3 => BlockKind::UnitDelay { initial: 0.0 },
            _ => BlockKind::Constant { value: 1.0 },
        })
        .collect();
    let mut wires = Vec::new();
    for (b, k) in kinds.iter().enumerate() {
        for p in 0..k.n_inputs() {
            wires.push(Wire::new((rng.random_range(0..n), 0), (b, p)));
        }
    }
    ModelSpec {
        blocks: kinds.into_iter().enumerate().map(|(i, k)| Block::new(i, k)).collect(),
        wires,
        inputs: vec![],
        outputs: vec![],
    }
}

/// Every simple cycle in the wiring graph, each listed once starting from
/// its smallest block, by exhaustive depth-first enumeration.
pub fn simple_cycles(spec: &ModelSpec) -> Vec<Vec<usize>> {
    let n = spec.blocks.len();
    let mut succ = vec![Vec::new(); n];
    for w in &spec.wires {
        if !succ[w.src.block.0].contains(&w.dst.block.0) {
            succ[w.src.block.0].push(w.dst.block.0);
        }
    }
    let mut cycles = Vec::new();
    fn dfs(start: usize, node: usize, succ: &[Vec<usize>], path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        for &next in &succ[node] {
            if next == start {
                out.push(path.clone());
            } else if next > start && !path.contains(&next) {
                path.push(next);
                dfs(start, next, succ, path, out);
                path.pop();
            }
        }
    }
    for s in 0..n {
        let mut path = vec![s];
        dfs(s, s, &succ, &mut path, &mut cycles);
    }
    cycles
}

/// Cycles made only of memoryless blocks.
pub fn algebraic_cycles(spec: &ModelSpec) -> Vec<Vec<usize>> {
    simple_cycles(spec)
        .into_iter()
        .filter(|c| c.iter().all(|b| !spec.blocks[*b].kind.is_memory()))
        .collect()
}
