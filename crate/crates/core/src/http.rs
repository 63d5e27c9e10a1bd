//! Blocking POST with retries, shared by the HTTP clients.

use std::time::Duration;

use crate::retry::{with_retries, Attempt, RetryPolicy};

pub(crate) fn agent(timeout_secs: f64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(timeout_secs.max(0.001))))
        .http_status_as_error(false)
        .build()
        .into()
}

/// POSTs `body` to `url`. Transport errors, 429 and 5xx are retried; any other
/// non-2xx status fails at once. Returns the response body and the attempts
/// made, or the last error message and the attempts made.
pub(crate) fn post(
    agent: &ureq::Agent,
    url: &str,
    headers: &[(&str, &str)],
    body: &[u8],
    policy: &RetryPolicy,
) -> Result<(Vec<u8>, u32), (String, u32)> {
    with_retries(policy, |_| {
        let mut req = agent.post(url);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let mut resp = req
            .send(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => Ok(bytes),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fail(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes[..bytes.len().min(200)])
            ))),
        }
    })
}
