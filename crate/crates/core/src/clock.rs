use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, TimeZone, Utc};

/// Source of creation timestamps.
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

/// Deterministic clock: starts at a fixed instant and advances one second per
/// reading. Used for fixture workspaces so that exports are reproducible.
#[derive(Debug)]
pub struct LogicalClock {
    next: AtomicI64,
}

impl LogicalClock {
    pub fn starting_at(unix_seconds: i64) -> Self {
        Self {
            next: AtomicI64::new(unix_seconds),
        }
    }

    /// Resumes after the given instant.
    pub fn after(last: DateTime<Utc>) -> Self {
        Self::starting_at(last.timestamp() + 1)
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        // 2024-01-01T00:00:00Z
        Self::starting_at(1_704_067_200)
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let secs = self.next.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(secs, 0).single().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_clock_ticks() {
        let c = LogicalClock::starting_at(10);
        assert_eq!(c.now().timestamp(), 10);
        assert_eq!(c.now().timestamp(), 11);
        let resumed = LogicalClock::after(c.now());
        assert_eq!(resumed.now().timestamp(), 13);
    }
}
