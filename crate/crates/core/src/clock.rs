//! Injectable time source.
//!
//! Everything that waits or timestamps goes through [`Clock`] so tests can run
//! on virtual time. [`VirtualClock`] never blocks: sleeping advances the shared
//! counter.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};

pub trait Clock: Send + Sync {
    /// Elapsed time since the clock's origin.
    fn now(&self) -> Duration;

    fn sleep(&self, d: Duration);

    /// Wall-clock timestamp used for record provenance.
    fn utc_now(&self) -> DateTime<Utc>;
}

/// Real time.
#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }

    fn utc_now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Shared nanosecond counter; clones observe the same time.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    nanos: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_ns(&self) -> u64 {
        self.nanos.load(Ordering::Acquire)
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::AcqRel);
    }

    /// Moves time forward to `t` if it is in the future; never moves backwards.
    pub fn advance_to(&self, t: Duration) {
        self.nanos.fetch_max(t.as_nanos() as u64, Ordering::AcqRel);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.now_ns())
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }

    fn utc_now(&self) -> DateTime<Utc> {
        DateTime::<Utc>::UNIX_EPOCH + chrono::Duration::nanoseconds(self.now_ns() as i64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_sleep_advances_shared_time() {
        let clock = VirtualClock::new();
        let other = clock.clone();
        clock.sleep(Duration::from_millis(250));
        assert_eq!(other.now(), Duration::from_millis(250));
        other.advance_to(Duration::from_millis(100));
        assert_eq!(clock.now_ns(), 250_000_000);
        other.advance_to(Duration::from_secs(1));
        assert_eq!(clock.now(), Duration::from_secs(1));
    }

    #[test]
    fn virtual_timestamps_start_at_epoch() {
        let clock = VirtualClock::new();
        assert_eq!(clock.utc_now().timestamp(), 0);
        clock.advance(Duration::from_secs(3));
        assert_eq!(clock.utc_now().timestamp(), 3);
    }
}
