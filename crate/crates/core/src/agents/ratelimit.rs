//! Per-endpoint token buckets shared by every client of that endpoint.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: f64, refill_per_sec: f64) -> Self {
        assert!(capacity >= 1.0 && refill_per_sec > 0.0, "bucket needs capacity >= 1 and a positive refill rate");
        TokenBucket { capacity, refill_per_sec, state: Mutex::new((capacity, Instant::now())) }
    }

    pub fn per_minute(requests: f64) -> Self {
        TokenBucket::new(requests.max(1.0), requests / 60.0)
    }

    /// Takes a token if one is available, otherwise reports how long to wait.
    pub fn try_acquire_at(&self, now: Instant) -> Result<(), Duration> {
        let mut guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let (tokens, last) = &mut *guard;
        let elapsed = now.saturating_duration_since(*last).as_secs_f64();
        *tokens = (*tokens + elapsed * self.refill_per_sec).min(self.capacity);
        *last = now.max(*last);
        if *tokens >= 1.0 {
            *tokens -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - *tokens) / self.refill_per_sec))
        }
    }

    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire_at(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
}

fn registry() -> &'static Mutex<HashMap<String, Arc<TokenBucket>>> {
    static BUCKETS: OnceLock<Mutex<HashMap<String, Arc<TokenBucket>>>> = OnceLock::new();
    BUCKETS.get_or_init(Default::default)
}

/// The bucket for `endpoint`, created on first use. Later callers share the
/// first caller's rate.
pub fn bucket_for(endpoint: &str, requests_per_minute: f64) -> Arc<TokenBucket> {
    let mut map = registry().lock().unwrap_or_else(|e| e.into_inner());
    map.entry(endpoint.to_string()).or_insert_with(|| Arc::new(TokenBucket::per_minute(requests_per_minute))).clone()
}
