//! Retry loop with exponential backoff and an in-flight request limiter,
//! shared by the remote denoiser and the vision-chat prompt extractor.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 200,
            max_backoff_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << (attempt - 1).min(16))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

/// Outcome of a single failed attempt.
#[derive(Debug)]
pub enum Attempt<E> {
    Retry(E),
    Fail(E),
}

/// Runs `op(attempt)` (1-based) until it succeeds, fails permanently, or the
/// attempt budget is spent. Returns the value or last error together with the
/// number of attempts made.
pub fn with_retries<T, E: std::fmt::Display>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, Attempt<E>>,
) -> Result<(T, u32), (E, u32)> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok((v, attempt)),
            Err(Attempt::Fail(e)) => return Err((e, attempt)),
            Err(Attempt::Retry(e)) => {
                if attempt >= max {
                    return Err((e, attempt));
                }
                log::debug!("attempt {attempt}/{max} failed, retrying: {e}");
                std::thread::sleep(policy.backoff(attempt));
                attempt += 1;
            }
        }
    }
}

/// Counting semaphore bounding concurrent remote calls.
#[derive(Debug)]
pub struct InflightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut n = self.active.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InflightPermit { limiter: self }
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.active.lock().unwrap();
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn succeeds_after_transient_failures() {
        let r = with_retries(&RetryPolicy::no_backoff(3), |a| {
            if a < 3 {
                Err(Attempt::Retry("503"))
            } else {
                Ok(a)
            }
        });
        assert_eq!(r.unwrap(), (3, 3));
    }

    #[test]
    fn budget_exhausted() {
        let r: Result<((), u32), _> =
            with_retries(&RetryPolicy::no_backoff(2), |_| Err(Attempt::Retry("down")));
        assert_eq!(r.unwrap_err(), ("down", 2));
    }

    #[test]
    fn permanent_failure_stops() {
        let r: Result<((), u32), _> =
            with_retries(&RetryPolicy::no_backoff(5), |_| Err(Attempt::Fail("400")));
        assert_eq!(r.unwrap_err().1, 1);
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = InflightLimiter::new(2);
        let active = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = limiter.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
