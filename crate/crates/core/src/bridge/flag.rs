use std::fmt;

/// Handshake state stored in the segment header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum ExchangeFlag {
    Idle = 0,
    InputsReady = 1,
    OutputsReady = 2,
    Shutdown = 3,
    Abort = 4,
}

impl ExchangeFlag {
    pub fn from_raw(v: u32) -> Option<Self> {
        Some(match v {
            0 => ExchangeFlag::Idle,
            1 => ExchangeFlag::InputsReady,
            2 => ExchangeFlag::OutputsReady,
            3 => ExchangeFlag::Shutdown,
            4 => ExchangeFlag::Abort,
            _ => return None,
        })
    }

    pub fn raw(self) -> u32 {
        self as u32
    }

    /// The legal transition relation. Self-loops are not transitions.
    pub fn can_transition(self, to: ExchangeFlag) -> bool {
        use ExchangeFlag::*;
        matches!(
            (self, to),
            (Idle, InputsReady) | (InputsReady, OutputsReady) | (OutputsReady, InputsReady) | (_, Shutdown) | (_, Abort)
        ) && self != to
    }
}

impl fmt::Display for ExchangeFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExchangeFlag::Idle => "IDLE",
            ExchangeFlag::InputsReady => "INPUTS_READY",
            ExchangeFlag::OutputsReady => "OUTPUTS_READY",
            ExchangeFlag::Shutdown => "SHUTDOWN",
            ExchangeFlag::Abort => "ABORT",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::ExchangeFlag::*;
    use super::*;

    #[test]
    fn transition_relation() {
        let all = [Idle, InputsReady, OutputsReady, Shutdown, Abort];
        let legal: Vec<(ExchangeFlag, ExchangeFlag)> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_transition(*b))
            .collect();
        assert!(legal.contains(&(Idle, InputsReady)));
        assert!(legal.contains(&(OutputsReady, InputsReady)));
        assert!(legal.contains(&(Abort, Shutdown)));
        assert!(!legal.contains(&(Idle, OutputsReady)));
        assert!(!legal.contains(&(InputsReady, Idle)));
        assert!(!legal.contains(&(Shutdown, InputsReady)));
        // 3 forward edges, 4 into SHUTDOWN, 4 into ABORT
        assert_eq!(legal.len(), 11);
    }

    #[test]
    fn raw_codes() {
        for v in 0..5 {
            assert_eq!(ExchangeFlag::from_raw(v).unwrap().raw(), v);
        }
        assert_eq!(ExchangeFlag::from_raw(5), None);
    }
}
