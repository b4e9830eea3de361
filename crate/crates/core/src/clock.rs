//! Time sources for trace timestamps.
//!
//! Live runs stamp trace events with wall-clock time. Replay runs use a
//! logical clock anchored on the pull request so reports are byte-stable.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, Duration, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Starts at `origin` and advances one millisecond per reading.
#[derive(Debug)]
pub struct LogicalClock {
    origin: DateTime<Utc>,
    ticks: AtomicI64,
}

impl LogicalClock {
    pub fn new(origin: DateTime<Utc>) -> Self {
        Self {
            origin,
            ticks: AtomicI64::new(0),
        }
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.ticks.fetch_add(1, Ordering::Relaxed);
        self.origin + Duration::milliseconds(t)
    }
}
