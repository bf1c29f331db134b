//! Per-step flag handshake over a [`SharedSegment`].
//!
//! Master (drives time):   write inputs, step, time -> flag INPUTS_READY -> wait OUTPUTS_READY -> read outputs.
//! Follower (serves steps): wait INPUTS_READY -> read inputs -> handler -> write outputs -> flag OUTPUTS_READY.
//!
//! Payload writes are plain stores followed by a release store of the flag;
//! the reader acquires the flag before touching the payload.

use std::fmt::Display;
use std::sync::atomic::Ordering;
use std::thread;
use std::time::{Duration, Instant};

use super::flag::ExchangeFlag;
use super::layout::{self, SegmentHeader, HEADER_LEN, MAX_INPUTS, MAX_OUTPUTS};
use super::segment::{self, OpenOutcome, SharedSegment};
use super::BridgeError;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(5000);
pub const DEFAULT_POLL: Duration = Duration::from_micros(50);
/// Waits yield the CPU instead of sleeping for this long before falling back
/// to `poll`-interval sleeps.
const YIELD_WINDOW: Duration = Duration::from_millis(2);
/// Retry interval while a follower waits for the segment to appear.
const OPEN_RETRY: Duration = Duration::from_millis(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Master,
    Follower,
}

/// One end of a master/follower exchange channel.
#[derive(Debug)]
pub struct Channel {
    seg: Option<SharedSegment>,
    name: String,
    role: Role,
    n_inputs: usize,
    n_outputs: usize,
    timeout: Duration,
    poll: Duration,
    last_step: Option<u32>,
    seen: ExchangeFlag,
    log: Option<Vec<(ExchangeFlag, ExchangeFlag)>>,
}

fn check_timeout(timeout: Duration) -> Result<(), BridgeError> {
    if timeout.is_zero() {
        Err(BridgeError::InvalidTimeout)
    } else {
        Ok(())
    }
}

impl Channel {
    /// Creates the named segment and initializes its header (flag IDLE,
    /// step 0, zeroed payload).
    pub fn create_master(name: &str, n_inputs: usize, n_outputs: usize, timeout: Duration) -> Result<Self, BridgeError> {
        segment::check_name(name)?;
        check_timeout(timeout)?;
        if n_inputs > MAX_INPUTS || n_outputs > MAX_OUTPUTS {
            return Err(BridgeError::CapacityExceeded { n_inputs, n_outputs });
        }
        let mut seg = SharedSegment::create(name, layout::segment_len(n_inputs, n_outputs))?;

        // magic goes in last so an opener never sees a half-written header
        let mut header = SegmentHeader::new(n_inputs as u32, n_outputs as u32).encode();
        let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
        header[0..4].fill(0);
        seg.write_bytes(0, &header);
        seg.atomic_u32(layout::OFF_MAGIC).store(magic, Ordering::Release);

        Ok(Self {
            seg: Some(seg),
            name: name.to_owned(),
            role: Role::Master,
            n_inputs,
            n_outputs,
            timeout,
            poll: DEFAULT_POLL,
            last_step: None,
            seen: ExchangeFlag::Idle,
            log: None,
        })
    }

    /// Attaches to a master's segment, retrying until it appears or
    /// `timeout` passes.
    pub fn open_follower(name: &str, timeout: Duration) -> Result<Self, BridgeError> {
        segment::check_name(name)?;
        check_timeout(timeout)?;
        let start = Instant::now();
        loop {
            if let OpenOutcome::Ready(seg) = SharedSegment::open(name)? {
                let magic = seg.atomic_u32(layout::OFF_MAGIC).load(Ordering::Acquire).to_le_bytes();
                if magic != [0; 4] {
                    return Self::attach(name, seg, magic, timeout);
                }
            }
            if start.elapsed() >= timeout {
                return Err(BridgeError::Timeout {
                    waited: start.elapsed(),
                    waiting_for: "segment to be created",
                });
            }
            thread::sleep(OPEN_RETRY);
        }
    }

    fn attach(name: &str, seg: SharedSegment, magic: [u8; 4], timeout: Duration) -> Result<Self, BridgeError> {
        if magic != layout::MAGIC {
            return Err(BridgeError::BadMagic { found: magic });
        }
        let mut raw = [0u8; HEADER_LEN];
        seg.read_bytes(0, &mut raw);
        let header = SegmentHeader::decode(&raw);
        if header.version != layout::VERSION {
            return Err(BridgeError::VersionMismatch {
                found: header.version,
                expected: layout::VERSION,
            });
        }
        let (n_inputs, n_outputs) = (header.n_inputs as usize, header.n_outputs as usize);
        if n_inputs > MAX_INPUTS || n_outputs > MAX_OUTPUTS {
            return Err(BridgeError::CapacityExceeded { n_inputs, n_outputs });
        }
        if seg.len() < layout::segment_len(n_inputs, n_outputs) {
            return Err(BridgeError::Corrupt(format!(
                "segment is {} bytes, header declares {}",
                seg.len(),
                layout::segment_len(n_inputs, n_outputs)
            )));
        }
        let raw_flag = seg.atomic_u32(layout::OFF_FLAG).load(Ordering::Acquire);
        let seen = ExchangeFlag::from_raw(raw_flag)
            .ok_or_else(|| BridgeError::ProtocolViolation(format!("unknown flag value {raw_flag}")))?;
        Ok(Self {
            seg: Some(seg),
            name: name.to_owned(),
            role: Role::Follower,
            n_inputs,
            n_outputs,
            timeout,
            poll: DEFAULT_POLL,
            last_step: None,
            seen,
            log: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_poll_interval(&mut self, poll: Duration) {
        self.poll = poll;
    }

    pub fn is_closed(&self) -> bool {
        self.seg.is_none()
    }

    /// Starts recording every flag change this side makes or observes.
    pub fn enable_transition_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn transitions(&self) -> &[(ExchangeFlag, ExchangeFlag)] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn header(&self) -> Result<SegmentHeader, BridgeError> {
        let mut raw = [0u8; HEADER_LEN];
        self.seg()?.read_bytes(0, &mut raw);
        Ok(SegmentHeader::decode(&raw))
    }

    /// Raw copy of the segment bytes.
    pub fn raw_bytes(&self) -> Result<Vec<u8>, BridgeError> {
        Ok(self.seg()?.snapshot())
    }

    fn seg(&self) -> Result<&SharedSegment, BridgeError> {
        self.seg.as_ref().ok_or(BridgeError::Closed)
    }

    fn seg_mut(&mut self) -> Result<&mut SharedSegment, BridgeError> {
        self.seg.as_mut().ok_or(BridgeError::Closed)
    }

    fn note(&mut self, to: ExchangeFlag) {
        if to != self.seen {
            if let Some(log) = self.log.as_mut() {
                log.push((self.seen, to));
            }
            self.seen = to;
        }
    }

    fn load_flag(&mut self) -> Result<ExchangeFlag, BridgeError> {
        let raw = self.seg()?.atomic_u32(layout::OFF_FLAG).load(Ordering::Acquire);
        let flag =
            ExchangeFlag::from_raw(raw).ok_or_else(|| BridgeError::ProtocolViolation(format!("unknown flag value {raw}")))?;
        if flag != self.seen && !self.seen.can_transition(flag) {
            return Err(BridgeError::ProtocolViolation(format!(
                "illegal flag transition {} -> {}",
                self.seen, flag
            )));
        }
        self.note(flag);
        Ok(flag)
    }

    fn store_flag(&mut self, flag: ExchangeFlag) -> Result<(), BridgeError> {
        self.seg()?.atomic_u32(layout::OFF_FLAG).store(flag.raw(), Ordering::Release);
        self.note(flag);
        Ok(())
    }

    fn wait_until(
        &mut self,
        waiting_for: &'static str,
        done: impl Fn(ExchangeFlag) -> bool,
    ) -> Result<ExchangeFlag, BridgeError> {
        let start = Instant::now();
        loop {
            let flag = self.load_flag()?;
            if done(flag) {
                return Ok(flag);
            }
            let waited = start.elapsed();
            if waited >= self.timeout {
                return Err(BridgeError::Timeout { waited, waiting_for });
            }
            if waited < YIELD_WINDOW {
                thread::yield_now();
            } else {
                thread::sleep(self.poll);
            }
        }
    }

    fn require(&self, role: Role) -> Result<(), BridgeError> {
        if self.role == role {
            Ok(())
        } else {
            Err(BridgeError::WrongRole(self.role))
        }
    }

    /// Publishes one step of inputs and blocks for the follower's outputs.
    pub fn master_exchange(&mut self, step: u32, sim_time: f64, inputs: &[f64]) -> Result<Vec<f64>, BridgeError> {
        let mut out = vec![0.0; self.n_outputs];
        self.master_exchange_into(step, sim_time, inputs, &mut out)?;
        Ok(out)
    }

    pub fn master_exchange_into(
        &mut self,
        step: u32,
        sim_time: f64,
        inputs: &[f64],
        outputs: &mut [f64],
    ) -> Result<(), BridgeError> {
        self.require(Role::Master)?;
        if inputs.len() != self.n_inputs {
            return Err(BridgeError::LengthMismatch {
                what: "inputs",
                expected: self.n_inputs,
                got: inputs.len(),
            });
        }
        if outputs.len() != self.n_outputs {
            return Err(BridgeError::LengthMismatch {
                what: "outputs",
                expected: self.n_outputs,
                got: outputs.len(),
            });
        }
        let flag = self.load_flag()?;
        match (self.last_step, flag) {
            (None, ExchangeFlag::Idle) | (Some(_), ExchangeFlag::OutputsReady) => {}
            (_, ExchangeFlag::Abort) => return Err(BridgeError::AbortReceived),
            (_, other) => {
                return Err(BridgeError::ProtocolViolation(format!(
                    "master cannot start an exchange while the flag is {other}"
                )))
            }
        }
        if let Some(prev) = self.last_step {
            if Some(step) != prev.checked_add(1) {
                return Err(BridgeError::ProtocolViolation(format!(
                    "step {step} does not follow step {prev}"
                )));
            }
        }

        let seg = self.seg_mut()?;
        seg.write_f64s(layout::inputs_offset(), inputs);
        seg.write_u32(layout::OFF_STEP, step);
        seg.write_f64(layout::OFF_SIM_TIME, sim_time);
        self.store_flag(ExchangeFlag::InputsReady)?;

        match self.wait_until("OUTPUTS_READY", |f| f != ExchangeFlag::InputsReady)? {
            ExchangeFlag::OutputsReady => {}
            ExchangeFlag::Abort => return Err(BridgeError::AbortReceived),
            other => {
                return Err(BridgeError::ProtocolViolation(format!(
                    "follower answered with {other}"
                )))
            }
        }
        let n_inputs = self.n_inputs;
        self.seg()?.read_f64s(layout::outputs_offset(n_inputs), outputs);
        self.last_step = Some(step);
        Ok(())
    }

    /// Serves steps until the master signals SHUTDOWN. Returns the number of
    /// steps served. A handler error sets ABORT before returning.
    pub fn follower_serve<F, E>(&mut self, mut handler: F) -> Result<u64, BridgeError>
    where
        F: FnMut(u32, f64, &[f64], &mut [f64]) -> Result<(), E>,
        E: Display,
    {
        self.require(Role::Follower)?;
        let mut inputs = vec![0.0; self.n_inputs];
        let mut outputs = vec![0.0; self.n_outputs];
        let mut served = 0u64;
        loop {
            let flag = self.wait_until("INPUTS_READY", |f| {
                !matches!(f, ExchangeFlag::Idle | ExchangeFlag::OutputsReady)
            })?;
            match flag {
                ExchangeFlag::InputsReady => {}
                ExchangeFlag::Shutdown => return Ok(served),
                ExchangeFlag::Abort => return Err(BridgeError::AbortReceived),
                other => unreachable!("wait filtered {other}"),
            }
            let seg = self.seg()?;
            let step = seg.read_u32(layout::OFF_STEP);
            let sim_time = seg.read_f64(layout::OFF_SIM_TIME);
            seg.read_f64s(layout::inputs_offset(), &mut inputs);

            if let Err(e) = handler(step, sim_time, &inputs, &mut outputs) {
                let msg = format!("step {step}: {e}");
                self.abort();
                return Err(BridgeError::HandlerFailure(msg));
            }
            let off = layout::outputs_offset(self.n_inputs);
            self.seg_mut()?.write_f64s(off, &outputs);
            self.store_flag(ExchangeFlag::OutputsReady)?;
            self.last_step = Some(step);
            served += 1;
        }
    }

    /// Sets ABORT. Either side may call this; it is a no-op once closed.
    pub fn abort(&mut self) {
        let _ = self.store_flag(ExchangeFlag::Abort);
    }

    /// Releases the segment. The master first publishes SHUTDOWN unless the
    /// channel was aborted. Calling `close` again does nothing.
    pub fn close(&mut self) {
        if self.seg.is_none() {
            return;
        }
        if self.role == Role::Master {
            let current = self
                .seg()
                .map(|s| s.atomic_u32(layout::OFF_FLAG).load(Ordering::Acquire))
                .unwrap_or(ExchangeFlag::Abort.raw());
            if current != ExchangeFlag::Abort.raw() {
                let _ = self.store_flag(ExchangeFlag::Shutdown);
            }
        }
        self.seg = None;
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unique(tag: &str) -> String {
        use std::sync::atomic::AtomicUsize;
        static N: AtomicUsize = AtomicUsize::new(0);
        format!("ch-{tag}-{}-{}", std::process::id(), N.fetch_add(1, Ordering::Relaxed))
    }

    const T: Duration = Duration::from_millis(2000);

    #[test]
    fn create_initializes_header() {
        let name = unique("init");
        let ch = Channel::create_master(&name, 2, 1, Duration::from_millis(5000)).unwrap();
        let h = ch.header().unwrap();
        assert_eq!(h, SegmentHeader::new(2, 1));
        assert_eq!(h.flag, ExchangeFlag::Idle.raw());
        let bytes = ch.raw_bytes().unwrap();
        assert_eq!(bytes.len(), 32 + 8 * 3);
        assert!(bytes[32..].iter().all(|b| *b == 0));
    }

    #[test]
    fn capacity_limits() {
        assert!(matches!(
            Channel::create_master(&unique("cap"), 1801, 1, T),
            Err(BridgeError::CapacityExceeded { .. })
        ));
        assert!(matches!(
            Channel::create_master(&unique("cap"), 1, 601, T),
            Err(BridgeError::CapacityExceeded { .. })
        ));
        assert!(Channel::create_master(&unique("cap"), 1800, 600, T).is_ok());
    }

    #[test]
    fn name_in_use_while_open() {
        let name = unique("dup");
        let _a = Channel::create_master(&name, 1, 1, T).unwrap();
        assert!(matches!(
            Channel::create_master(&name, 1, 1, T),
            Err(BridgeError::NameInUse(_))
        ));
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(
            Channel::create_master("bad name", 1, 1, T),
            Err(BridgeError::InvalidName(_))
        ));
        assert!(matches!(
            Channel::create_master(&unique("t"), 1, 1, Duration::ZERO),
            Err(BridgeError::InvalidTimeout)
        ));
    }

    #[test]
    fn follower_sees_counts() {
        let name = unique("counts");
        let _m = Channel::create_master(&name, 7, 3, T).unwrap();
        let f = Channel::open_follower(&name, T).unwrap();
        assert_eq!((f.n_inputs(), f.n_outputs()), (7, 3));
        assert_eq!(f.role(), Role::Follower);
    }

    #[test]
    fn open_without_master_times_out() {
        let start = Instant::now();
        let err = Channel::open_follower(&unique("none"), Duration::from_millis(100)).unwrap_err();
        assert!(matches!(err, BridgeError::Timeout { .. }));
        assert!(start.elapsed() >= Duration::from_millis(100));
    }

    #[test]
    fn corrupted_magic_rejected() {
        let name = unique("magic");
        let _m = Channel::create_master(&name, 1, 1, T).unwrap();
        let OpenOutcome::Ready(mut raw) = SharedSegment::open(&name).unwrap() else {
            panic!("segment exists");
        };
        raw.write_bytes(0, &[0xAB]);
        assert!(matches!(
            Channel::open_follower(&name, T),
            Err(BridgeError::BadMagic { found: [0xAB, b'S', b'I', b'M'] })
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let name = unique("ver");
        let _m = Channel::create_master(&name, 1, 1, T).unwrap();
        let OpenOutcome::Ready(mut raw) = SharedSegment::open(&name).unwrap() else {
            panic!("segment exists");
        };
        raw.write_u32(layout::OFF_VERSION, 9);
        assert!(matches!(
            Channel::open_follower(&name, T),
            Err(BridgeError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn echo_in_threads() {
        let name = unique("echo");
        let mut m = Channel::create_master(&name, 2, 1, T).unwrap();
        let n2 = name.clone();
        let follower = thread::spawn(move || {
            let mut f = Channel::open_follower(&n2, T).unwrap();
            f.follower_serve(|_, _, i: &[f64], o: &mut [f64]| {
                o[0] = i[0];
                Ok::<_, String>(())
            })
        });
        assert_eq!(m.master_exchange(0, 0.0, &[1.0, 2.0]).unwrap(), vec![1.0]);
        assert_eq!(m.master_exchange(1, 0.1, &[3.0, 4.0]).unwrap(), vec![3.0]);
        m.close();
        assert_eq!(follower.join().unwrap().unwrap(), 2);
    }

    #[test]
    fn shutdown_before_any_step() {
        let name = unique("early");
        let mut m = Channel::create_master(&name, 1, 1, T).unwrap();
        let mut f = Channel::open_follower(&name, T).unwrap();
        // keep the mapping alive in the follower, then shut down
        m.close();
        let served = f
            .follower_serve(|_, _, _: &[f64], _: &mut [f64]| Ok::<_, String>(()))
            .unwrap();
        assert_eq!(served, 0);
    }

    #[test]
    fn handler_failure_aborts_master() {
        let name = unique("abort");
        let mut m = Channel::create_master(&name, 1, 1, T).unwrap();
        let n2 = name.clone();
        let follower = thread::spawn(move || {
            let mut f = Channel::open_follower(&n2, T).unwrap();
            f.follower_serve(|step, _, i: &[f64], o: &mut [f64]| {
                if step == 2 {
                    return Err("boom");
                }
                o[0] = i[0];
                Ok(())
            })
        });
        assert!(m.master_exchange(0, 0.0, &[1.0]).is_ok());
        assert!(m.master_exchange(1, 0.0, &[1.0]).is_ok());
        assert!(matches!(m.master_exchange(2, 0.0, &[1.0]), Err(BridgeError::AbortReceived)));
        let err = follower.join().unwrap().unwrap_err();
        assert!(matches!(err, BridgeError::HandlerFailure(ref m) if m.contains("boom")));
        // aborted channel does not get overwritten by SHUTDOWN
        m.close();
    }

    #[test]
    fn step_must_be_consecutive() {
        let name = unique("steps");
        let mut m = Channel::create_master(&name, 1, 1, T).unwrap();
        let n2 = name.clone();
        let follower = thread::spawn(move || {
            let mut f = Channel::open_follower(&n2, T).unwrap();
            f.follower_serve(|_, _, _: &[f64], _: &mut [f64]| Ok::<_, String>(()))
        });
        m.master_exchange(5, 0.0, &[0.0]).unwrap();
        assert!(matches!(
            m.master_exchange(7, 0.0, &[0.0]),
            Err(BridgeError::ProtocolViolation(_))
        ));
        m.master_exchange(6, 0.0, &[0.0]).unwrap();
        m.close();
        assert_eq!(follower.join().unwrap().unwrap(), 2);
    }

    #[test]
    fn silent_follower_times_out() {
        let name = unique("silent");
        let mut m = Channel::create_master(&name, 1, 1, Duration::from_millis(100)).unwrap();
        let f = Channel::open_follower(&name, T).unwrap();
        drop(f);
        let err = m.master_exchange(0, 0.0, &[1.0]).unwrap_err();
        assert!(matches!(err, BridgeError::Timeout { waiting_for: "OUTPUTS_READY", .. }));
    }

    #[test]
    fn close_is_idempotent_and_unlinks() {
        let name = unique("close");
        let mut m = Channel::create_master(&name, 1, 1, T).unwrap();
        m.close();
        m.close();
        assert!(m.is_closed());
        assert!(matches!(m.master_exchange(0, 0.0, &[0.0]), Err(BridgeError::Closed)));
        assert!(matches!(
            Channel::open_follower(&name, Duration::from_millis(50)),
            Err(BridgeError::Timeout { .. })
        ));
    }

    #[test]
    fn wrong_role() {
        let name = unique("role");
        let mut m = Channel::create_master(&name, 1, 1, T).unwrap();
        assert!(matches!(
            m.follower_serve(|_, _, _: &[f64], _: &mut [f64]| Ok::<_, String>(())),
            Err(BridgeError::WrongRole(Role::Master))
        ));
    }
}
