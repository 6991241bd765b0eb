//! Bounded exponential backoff shared by the remote clients.

use std::thread;
use std::time::Duration;

/// Outcome of one attempt.
#[derive(Debug)]
pub enum Attempt<E> {
    /// Worth retrying (network error, rate limit, 5xx).
    Transient(E),
    /// Retrying cannot help (authentication, malformed request).
    Fatal(E),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, the first one included.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay: Duration::from_secs(1), factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay slept after the failed attempt number `attempt` (1-based).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }

    /// Runs `op` until it succeeds, fails fatally, or attempts run out.
    /// `op` receives the 1-based attempt number. Returns the attempt count
    /// alongside the result.
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, Attempt<E>>,
    ) -> (Result<T, E>, u32) {
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return (Ok(v), attempt),
                Err(Attempt::Fatal(e)) => return (Err(e), attempt),
                Err(Attempt::Transient(e)) => {
                    if attempt >= max {
                        return (Err(e), attempt);
                    }
                    log::warn!("attempt {attempt}/{max} failed, backing off");
                    thread::sleep(self.delay_after(attempt));
                    attempt += 1;
                }
            }
        }
    }
}
