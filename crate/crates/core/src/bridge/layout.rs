//! Frozen segment layout, little-endian.
//!
//! ```text
//! 0..4    magic      "CSIM"
//! 4..8    version    u32 = 1
//! 8..12   flag       u32 (ExchangeFlag)
//! 12..16  step       u32
//! 16..24  sim_time   f64
//! 24..28  n_inputs   u32
//! 28..32  n_outputs  u32
//! 32..    inputs     n_inputs  x f64   (master -> follower)
//! then    outputs    n_outputs x f64   (follower -> master)
//! ```

#[cfg(not(target_endian = "little"))]
compile_error!("the shared segment layout is little-endian and flags are accessed as native atomics");

pub const MAGIC: [u8; 4] = *b"CSIM";
pub const VERSION: u32 = 1;

pub const OFF_MAGIC: usize = 0;
pub const OFF_VERSION: usize = 4;
pub const OFF_FLAG: usize = 8;
pub const OFF_STEP: usize = 12;
pub const OFF_SIM_TIME: usize = 16;
pub const OFF_N_INPUTS: usize = 24;
pub const OFF_N_OUTPUTS: usize = 28;
pub const OFF_DATA: usize = 32;
pub const HEADER_LEN: usize = 32;

/// Largest master-to-follower vector a channel accepts.
pub const MAX_INPUTS: usize = 1800;
/// Largest follower-to-master vector a channel accepts.
pub const MAX_OUTPUTS: usize = 600;

pub const fn segment_len(n_inputs: usize, n_outputs: usize) -> usize {
    HEADER_LEN + 8 * (n_inputs + n_outputs)
}

pub const fn inputs_offset() -> usize {
    OFF_DATA
}

pub const fn outputs_offset(n_inputs: usize) -> usize {
    OFF_DATA + 8 * n_inputs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub flag: u32,
    pub step: u32,
    pub sim_time: f64,
    pub n_inputs: u32,
    pub n_outputs: u32,
}

impl SegmentHeader {
    pub fn new(n_inputs: u32, n_outputs: u32) -> Self {
        Self {
            magic: MAGIC,
            version: VERSION,
            flag: 0,
            step: 0,
            sim_time: 0.0,
            n_inputs,
            n_outputs,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(&self.magic);
        b[OFF_VERSION..OFF_VERSION + 4].copy_from_slice(&self.version.to_le_bytes());
        b[OFF_FLAG..OFF_FLAG + 4].copy_from_slice(&self.flag.to_le_bytes());
        b[OFF_STEP..OFF_STEP + 4].copy_from_slice(&self.step.to_le_bytes());
        b[OFF_SIM_TIME..OFF_SIM_TIME + 8].copy_from_slice(&self.sim_time.to_le_bytes());
        b[OFF_N_INPUTS..OFF_N_INPUTS + 4].copy_from_slice(&self.n_inputs.to_le_bytes());
        b[OFF_N_OUTPUTS..OFF_N_OUTPUTS + 4].copy_from_slice(&self.n_outputs.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        assert!(b.len() >= HEADER_LEN, "header needs {HEADER_LEN} bytes");
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        Self {
            magic: b[OFF_MAGIC..OFF_MAGIC + 4].try_into().unwrap(),
            version: u32_at(OFF_VERSION),
            flag: u32_at(OFF_FLAG),
            step: u32_at(OFF_STEP),
            sim_time: f64::from_le_bytes(b[OFF_SIM_TIME..OFF_SIM_TIME + 8].try_into().unwrap()),
            n_inputs: u32_at(OFF_N_INPUTS),
            n_outputs: u32_at(OFF_N_OUTPUTS),
        }
    }
}
