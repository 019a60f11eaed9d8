//! Session clocks.
//!
//! Musical time is always a monotonic millisecond clock that starts at session
//! begin. Every component that needs "now" or that must spend time (the mock
//! backend's cost model, the simulation's idle waits) goes through [`Clock`],
//! so the same engine code runs against a deterministic virtual clock or the
//! real one.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync + fmt::Debug {
    /// Milliseconds since session start.
    fn now_ms(&self) -> f64;

    /// Spend `ms` of clock time doing work.
    fn sleep_ms(&self, ms: f64);

    /// Wait idle until `t_ms`. Clocks that can skip idle time do so.
    fn advance_to(&self, t_ms: f64);
}

pub type SharedClock = Arc<dyn Clock>;

/// Deterministic clock: time only moves when someone sleeps or advances it.
#[derive(Debug, Default)]
pub struct VirtualClock {
    bits: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::starting_at(0.0)
    }

    pub fn starting_at(t_ms: f64) -> Self {
        Self {
            bits: AtomicU64::new(t_ms.to_bits()),
        }
    }

    pub fn shared() -> Arc<Self> {
        Arc::new(Self::new())
    }

    fn store_max(&self, t_ms: f64) {
        let mut cur = self.bits.load(Ordering::Acquire);
        loop {
            if f64::from_bits(cur) >= t_ms {
                return;
            }
            match self
                .bits
                .compare_exchange(cur, t_ms.to_bits(), Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::Acquire))
    }

    fn sleep_ms(&self, ms: f64) {
        if ms > 0.0 {
            self.store_max(self.now_ms() + ms);
        }
    }

    fn advance_to(&self, t_ms: f64) {
        self.store_max(t_ms);
    }
}

/// Real monotonic clock.
///
/// With `skip_idle` set, [`Clock::advance_to`] jumps forward instantly instead
/// of sleeping: work (and cost-model sleeps) still takes real time, but idle
/// gaps between performance events cost nothing. Benchmarks use this to
/// measure true engine overhead without replaying minutes of music.
#[derive(Debug)]
pub struct WallClock {
    origin: Instant,
    skipped_ms: Mutex<f64>,
    skip_idle: bool,
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
            skipped_ms: Mutex::new(0.0),
            skip_idle: false,
        }
    }

    pub fn fast_forward() -> Self {
        Self {
            skip_idle: true,
            ..Self::new()
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        let skipped = *self.skipped_ms.lock().unwrap();
        self.origin.elapsed().as_secs_f64() * 1000.0 + skipped
    }

    fn sleep_ms(&self, ms: f64) {
        if ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(ms / 1000.0));
        }
    }

    fn advance_to(&self, t_ms: f64) {
        let now = self.now_ms();
        if t_ms <= now {
            return;
        }
        if self.skip_idle {
            *self.skipped_ms.lock().unwrap() += t_ms - now;
        } else {
            std::thread::sleep(Duration::from_secs_f64((t_ms - now) / 1000.0));
        }
    }
}
