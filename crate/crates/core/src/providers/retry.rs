use std::future::Future;
use std::time::Duration;

use rand::Rng;

use super::ProviderError;

/// Exponential backoff with full jitter, for connection establishment only.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn new(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_secs(5),
        }
    }

    pub fn with_base_delay(mut self, d: Duration) -> Self {
        self.base_delay = d;
        self
    }

    /// Upper bound of the sleep before retry number `retry` (1-based).
    pub fn ceiling(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    fn jittered(&self, retry: u32) -> Duration {
        let ceil = self.ceiling(retry);
        if ceil.is_zero() {
            return ceil;
        }
        let frac: f64 = rand::rng().random_range(0.5..=1.0);
        ceil.mul_f64(frac)
    }
}

/// Run `attempt` until it succeeds, fails with a non-retryable error, or the
/// budget of `max_retries + 1` attempts is spent.
pub async fn with_retry<T, F, Fut>(policy: &RetryPolicy, mut attempt: F) -> Result<T, ProviderError>
where
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Result<T, ProviderError>>,
{
    let mut n = 0;
    loop {
        match attempt(n).await {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && n < policy.max_retries => {
                n += 1;
                tracing::debug!(attempt = n, error = %e, "retrying provider connection");
                tokio::time::sleep(policy.jittered(n)).await;
            }
            Err(ProviderError::Unreachable { message, .. }) => {
                return Err(ProviderError::Unreachable { attempts: n + 1, message })
            }
            Err(e) => return Err(e),
        }
    }
}
