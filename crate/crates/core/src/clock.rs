//! Time sources. The simulation backend shares one virtual clock across every
//! node; the socket backend reads the wall clock.

use crate::ids::Nanos;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Deterministic clock advanced explicitly by the simulation driver.
#[derive(Clone, Debug, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn now(&self) -> Nanos {
        self.now.load(Ordering::Acquire)
    }

    /// Moves the clock forward to `t`. Time never runs backwards.
    pub fn advance_to(&self, t: Nanos) {
        self.now.fetch_max(t, Ordering::AcqRel);
    }
}

#[derive(Clone, Debug)]
pub enum Clock {
    Virtual(VirtualClock),
    Wall(Instant),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }

    #[inline]
    pub fn now(&self) -> Nanos {
        match self {
            Clock::Virtual(c) => c.now(),
            Clock::Wall(start) => start.elapsed().as_nanos() as Nanos,
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }
}
