//! Minimal JSON-over-HTTP helper for the remote embedding and generation services.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HttpFailure {
    /// 401 / 403.
    Auth(String),
    /// Network errors, 408, 429 and 5xx.
    Transient(String),
    /// Anything else, including undecodable bodies.
    Permanent(String),
}

pub fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

pub fn post_json<B: Serialize, R: DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &B,
) -> Result<R, HttpFailure> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(|e| HttpFailure::Transient(e.to_string()))?;
    let status = resp.status().as_u16();
    match status {
        200..=299 => resp
            .body_mut()
            .read_json::<R>()
            .map_err(|e| HttpFailure::Permanent(format!("undecodable response: {e}"))),
        401 | 403 => Err(HttpFailure::Auth(format!("http status {status}"))),
        408 | 429 | 500..=599 => Err(HttpFailure::Transient(format!("http status {status}"))),
        _ => Err(HttpFailure::Permanent(format!("http status {status}"))),
    }
}
