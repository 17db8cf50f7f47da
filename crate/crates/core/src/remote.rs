//! Plumbing shared by the HTTP-backed providers.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

/// Exponential backoff: attempt `n` (0-based) waits `base * 2^(n-1)` before running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

pub(crate) enum Attempt<T, E> {
    Done(T),
    Retry(E),
    Fail(E),
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt == 0 {
            Duration::ZERO
        } else {
            self.base_delay * 2u32.saturating_pow(attempt - 1)
        }
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    /// On exhaustion returns the last retriable error and the attempt count.
    pub(crate) fn run<T, E>(&self, mut op: impl FnMut(u32) -> Attempt<T, E>) -> Result<T, (E, u32)> {
        let attempts = self.attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            thread::sleep(self.delay_before(attempt));
            match op(attempt) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err((e, attempt + 1)),
                Attempt::Retry(e) => last = Some(e),
            }
        }
        Err((last.expect("at least one attempt"), attempts))
    }
}

/// Counting semaphore bounding concurrent requests to one provider.
#[derive(Debug)]
pub struct InFlightLimit {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self.freed.wait(available).unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.0.freed.notify_one();
    }
}

/// Removes every occurrence of `secret` from `message`.
pub fn scrub(message: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => message.replace(s, "[redacted]"),
        _ => message.to_string(),
    }
}

pub(crate) fn retriable_status(status: u16) -> bool {
    status == 429 || status >= 500
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before(0), Duration::ZERO);
        assert_eq!(p.delay_before(1), Duration::from_millis(250));
        assert_eq!(p.delay_before(2), Duration::from_millis(500));
    }

    #[test]
    fn run_stops_on_permanent_failure() {
        let p = RetryPolicy {
            attempts: 3,
            base_delay: Duration::ZERO,
        };
        let r: Result<(), _> = p.run(|_| Attempt::Fail("bad"));
        assert_eq!(r, Err(("bad", 1)));
        let r: Result<(), _> = p.run(|_| Attempt::Retry("down"));
        assert_eq!(r, Err(("down", 3)));
        let r: Result<u32, (&str, u32)> = p.run(|n| if n == 1 { Attempt::Done(n) } else { Attempt::Retry("x") });
        assert_eq!(r, Ok(1));
    }

    #[test]
    fn limit_bounds_concurrency() {
        let limit = Arc::new(InFlightLimit::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limit, active, peak) = (limit.clone(), active.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = limit.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn scrub_hides_secret() {
        assert_eq!(scrub("key sk-123 leaked", Some("sk-123")), "key [redacted] leaked");
        assert_eq!(scrub("nothing", None), "nothing");
    }
}
