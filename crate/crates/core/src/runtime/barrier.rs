//! Round-tagged rendezvous barrier with timeout.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BarrierError {
    #[error("protocol error: round {got} arrived at barrier for round {expected}")]
    RoundMismatch { expected: u64, got: u64 },
    #[error("barrier timeout in round {round}: {arrived}/{expected} workers arrived")]
    Timeout { round: u64, arrived: usize, expected: usize },
    #[error("barrier aborted: {0}")]
    Aborted(String),
}

#[derive(Debug)]
struct State {
    arrived: usize,
    generation: u64,
    round: Option<u64>,
    poisoned: Option<BarrierError>,
}

/// Lockstep barrier for a fixed set of workers.
///
/// All workers must pass the same round id. A mismatch, a timeout or an
/// explicit [`abort`](Self::abort) poisons the barrier so that every current
/// and future waiter fails with the same error.
#[derive(Debug)]
pub struct RoundBarrier {
    workers: usize,
    timeout: Duration,
    state: Mutex<State>,
    cvar: Condvar,
}

impl RoundBarrier {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(workers: usize, timeout: Duration) -> Self {
        Self {
            workers,
            timeout,
            state: Mutex::new(State { arrived: 0, generation: 0, round: None, poisoned: None }),
            cvar: Condvar::new(),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn wait(&self, round: u64) -> Result<(), BarrierError> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(err) = &st.poisoned {
            return Err(err.clone());
        }
        match st.round {
            None => st.round = Some(round),
            Some(expected) if expected != round => {
                let err = BarrierError::RoundMismatch { expected, got: round };
                st.poisoned = Some(err.clone());
                self.cvar.notify_all();
                return Err(err);
            }
            Some(_) => {}
        }
        st.arrived += 1;
        if st.arrived == self.workers {
            st.arrived = 0;
            st.round = None;
            st.generation = st.generation.wrapping_add(1);
            self.cvar.notify_all();
            return Ok(());
        }
        let generation = st.generation;
        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some(err) = &st.poisoned {
                return Err(err.clone());
            }
            if st.generation != generation {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                let err = BarrierError::Timeout { round, arrived: st.arrived, expected: self.workers };
                st.poisoned = Some(err.clone());
                self.cvar.notify_all();
                return Err(err);
            }
            st = self
                .cvar
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Releases all waiters with an error. Used when a worker fails.
    pub fn abort(&self, reason: impl Into<String>) {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if st.poisoned.is_none() {
            st.poisoned = Some(BarrierError::Aborted(reason.into()));
        }
        self.cvar.notify_all();
    }

    pub fn poisoned(&self) -> Option<BarrierError> {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).poisoned.clone()
    }
}
