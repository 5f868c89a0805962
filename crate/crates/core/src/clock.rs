use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::model::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Simulated,
    Wall,
}

/// Monotone control-plane clock with one-second resolution.
///
/// Simulated clocks only move when advanced; clones share the same time.
#[derive(Debug, Clone)]
pub struct Clock {
    mode: ClockMode,
    sim: Arc<AtomicU64>,
}

impl Clock {
    pub fn simulated(start: Timestamp) -> Self {
        Self { mode: ClockMode::Simulated, sim: Arc::new(AtomicU64::new(start)) }
    }

    pub fn wall() -> Self {
        Self { mode: ClockMode::Wall, sim: Arc::new(AtomicU64::new(0)) }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn now(&self) -> Timestamp {
        match self.mode {
            ClockMode::Simulated => self.sim.load(Ordering::SeqCst),
            ClockMode::Wall => {
                let wall = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                // never report less than an earlier reading
                self.sim.fetch_max(wall, Ordering::SeqCst).max(wall)
            }
        }
    }

    /// Moves a simulated clock forward; no-op for wall clocks.
    pub fn advance(&self, secs: u64) -> Timestamp {
        match self.mode {
            ClockMode::Simulated => self.sim.fetch_add(secs, Ordering::SeqCst) + secs,
            ClockMode::Wall => self.now(),
        }
    }

    /// Sets a simulated clock to `t` if that does not move it backwards.
    pub fn set(&self, t: Timestamp) -> Timestamp {
        match self.mode {
            ClockMode::Simulated => self.sim.fetch_max(t, Ordering::SeqCst).max(t),
            ClockMode::Wall => self.now(),
        }
    }
}

impl Default for Clock {
    fn default() -> Self {
        Clock::simulated(0)
    }
}
