use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Capabilities, OracleError, Result, TextGenerator};

pub const ENV_CLASS_URL: &str = "ORACLE_CLASS_URL";
pub const ENV_SALIENCY_URL: &str = "ORACLE_SALIENCY_URL";
pub const ENV_TOKEN: &str = "ORACLE_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    /// Additional attempts after the first failure.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
    pub max_concurrency: Option<usize>,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: None,
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(500),
            max_concurrency: Some(4),
        }
    }

    /// Reads the endpoint from `url_var` and the bearer token from `ORACLE_TOKEN`.
    pub fn from_env(url_var: &str) -> Result<Self> {
        let url = std::env::var(url_var)
            .map_err(|_| OracleError::InvalidConfig(format!("environment variable {url_var} not set")))?;
        let mut config = Self::new(url);
        config.token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        Ok(config)
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// Remote inference client: POSTs `{"prompt": ...}` and expects `{"text": ...}`.
pub struct HttpGenerator {
    client: reqwest::blocking::Client,
    config: RemoteConfig,
}

enum Attempt {
    Retry(String),
    Fatal(OracleError),
}

impl HttpGenerator {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| OracleError::InvalidConfig(e.to_string()))?;
        Ok(Self { client, config })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, prompt: &str) -> std::result::Result<String, Attempt> {
        let mut request = self.client.post(&self.config.url).json(&GenerateRequest { prompt });
        if let Some(token) = &self.config.token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(Attempt::Retry(format!("{} returned {status}", self.config.url)));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(OracleError::Unavailable(format!(
                "{} returned {status}",
                self.config.url
            ))));
        }
        let body: GenerateResponse = response
            .json()
            .map_err(|e| Attempt::Fatal(OracleError::BadResponse(e.to_string())))?;
        Ok(body.text)
    }
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, prompt: &str) -> Result<String> {
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    log::warn!("oracle request failed (attempt {}): {reason}", attempt + 1);
                    last = reason;
                }
            }
        }
        Err(OracleError::Unavailable(last))
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_concurrency: self.config.max_concurrency,
        }
    }
}
