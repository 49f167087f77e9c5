//! Per-backend concurrency and request-rate limits.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

use crate::backend::{Backend, BackendError, BackendProfile, ModelReply, ModelRequest};

/// Wraps a backend so that at most `profile.concurrency` calls run at once
/// and call starts are spaced to honour `profile.requests_per_minute`.
pub struct LimitedBackend {
    inner: Arc<dyn Backend>,
    permits: Semaphore,
    interval: Option<Duration>,
    next_start: Mutex<Instant>,
}

impl LimitedBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        let profile = inner.profile();
        let interval = profile
            .requests_per_minute
            .map(|rpm| Duration::from_secs_f64(60.0 / f64::from(rpm.max(1))));
        LimitedBackend {
            permits: Semaphore::new(profile.concurrency.max(1)),
            interval,
            next_start: Mutex::new(Instant::now()),
            inner,
        }
    }

    async fn wait_for_slot(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let start = {
            let mut next = self.next_start.lock().await;
            let start = (*next).max(Instant::now());
            *next = start + interval;
            start
        };
        tokio::time::sleep_until(start).await;
    }
}

#[async_trait]
impl Backend for LimitedBackend {
    fn profile(&self) -> &BackendProfile {
        self.inner.profile()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    async fn invoke(&self, req: &ModelRequest) -> Result<ModelReply, BackendError> {
        let _permit = self.permits.acquire().await.expect("semaphore is never closed");
        self.wait_for_slot().await;
        self.inner.invoke(req).await
    }
}
