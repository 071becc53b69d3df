//! Minimal blocking HTTP plumbing shared by the remote providers and the
//! OpenAlex client.
//!
//! Everything talks to a [`Transport`] so tests can substitute recorded
//! fixtures; [`ReqwestTransport`] is the production implementation.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn ok(body: impl Into<Vec<u8>>) -> Self {
        Self {
            status: 200,
            body: body.into(),
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("request to {url} failed: {message}")]
    Connection { url: String, message: String },
}

pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError>;
    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<HttpResponse, TransportError>;
}

/// Exponential backoff: `base_delay * 2^attempt`, capped at `max_delay`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests and fixtures.
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, Error)]
pub enum RequestError {
    #[error("HTTP {status} (permanent): {body}")]
    Permanent { status: u16, body: String },
    #[error("giving up after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
}

impl RequestError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RequestError::Exhausted { .. })
    }
}

/// Runs `send` until it yields a 2xx, a 4xx (permanent), or the retry budget
/// runs out. 5xx responses and transport errors are retried.
pub fn send_with_retry<F>(policy: &RetryPolicy, mut send: F) -> Result<HttpResponse, RequestError>
where
    F: FnMut() -> Result<HttpResponse, TransportError>,
{
    let mut attempt = 0;
    loop {
        let last = match send() {
            Ok(resp) if resp.is_success() => return Ok(resp),
            Ok(resp) if (400..500).contains(&resp.status) => {
                return Err(RequestError::Permanent {
                    status: resp.status,
                    body: resp.body_text(),
                })
            }
            Ok(resp) => format!("HTTP {}: {}", resp.status, resp.body_text()),
            Err(e) => e.to_string(),
        };
        if attempt >= policy.max_retries {
            return Err(RequestError::Exhausted {
                attempts: attempt + 1,
                last,
            });
        }
        let delay = policy.delay_for(attempt);
        tracing::warn!(attempt, ?delay, error = %last, "retrying request");
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        attempt += 1;
    }
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("polimatch/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| TransportError::Connection {
                url: String::new(),
                message: e.to_string(),
            })?;
        Ok(Self { client })
    }

    fn finish(url: &str, result: reqwest::Result<reqwest::blocking::Response>) -> Result<HttpResponse, TransportError> {
        let map_err = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportError::Timeout { url: url.to_string() }
            } else {
                TransportError::Connection {
                    url: url.to_string(),
                    message: e.to_string(),
                }
            }
        };
        let resp = result.map_err(map_err)?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(map_err)?.to_vec();
        Ok(HttpResponse { status, body })
    }
}

impl Transport for ReqwestTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        Self::finish(url, self.client.get(url).send())
    }

    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<HttpResponse, TransportError> {
        Self::finish(url, self.client.post(url).json(body).send())
    }
}
