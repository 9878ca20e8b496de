//! Black-box adapter for a remote grader behind a plain HTTP JSON endpoint.
//!
//! The endpoint URL and optional bearer credential are read from environment
//! variables named in the run config, so secrets never appear in config
//! files. Request: `POST {"prompt", "temperature", "max_new_tokens",
//! "sample_count", "seed"}`. Response: `{"samples": ["...", ...]}`.
//! Only `http://host:port/path` URLs are supported; transfer targets in this
//! toolkit are reached through local proxies when TLS is required.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, BlackBoxBackend, GenerationConfig};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub name: String,
    /// Environment variable holding the endpoint URL.
    pub url_env: String,
    /// Environment variable holding an optional bearer token.
    pub credential_env: Option<String>,
    pub max_retries: u32,
    pub timeout: Duration,
    /// Minimum interval between requests (request-rate ceiling).
    pub min_interval: Duration,
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    url: ParsedUrl,
    credential: Option<String>,
    last_request: Mutex<Option<Instant>>,
}

#[derive(Debug, Clone)]
struct ParsedUrl {
    host: String,
    port: u16,
    path: String,
}

fn parse_url(url: &str) -> Result<ParsedUrl, BackendError> {
    let rest = url.strip_prefix("http://").ok_or_else(|| {
        BackendError::BackendUnavailable {
            message: format!("unsupported URL (http:// required): {url}"),
            retries: 0,
        }
    })?;
    let (authority, path) = match rest.find('/') {
        Some(i) => (&rest[..i], rest[i..].to_string()),
        None => (rest, "/".to_string()),
    };
    let (host, port) = match authority.rsplit_once(':') {
        Some((h, p)) => (
            h.to_string(),
            p.parse::<u16>().map_err(|_| BackendError::BackendUnavailable {
                message: format!("bad port in URL: {url}"),
                retries: 0,
            })?,
        ),
        None => (authority.to_string(), 80),
    };
    Ok(ParsedUrl { host, port, path })
}

#[derive(Deserialize)]
struct SamplesResponse {
    samples: Vec<String>,
}

impl HttpBackend {
    pub fn from_env(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let url = std::env::var(&config.url_env).map_err(|_| BackendError::BackendUnavailable {
            message: format!("environment variable {} not set", config.url_env),
            retries: 0,
        })?;
        let credential = match &config.credential_env {
            Some(var) => std::env::var(var).ok(),
            None => None,
        };
        Ok(Self {
            url: parse_url(&url)?,
            credential,
            config,
            last_request: Mutex::new(None),
        })
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().unwrap();
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < self.config.min_interval {
                std::thread::sleep(self.config.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn request_once(&self, body: &str) -> Result<String, String> {
        let addr = format!("{}:{}", self.url.host, self.url.port);
        let mut stream =
            TcpStream::connect(&addr).map_err(|e| format!("connect {addr}: {e}"))?;
        stream
            .set_read_timeout(Some(self.config.timeout))
            .map_err(|e| e.to_string())?;
        stream
            .set_write_timeout(Some(self.config.timeout))
            .map_err(|e| e.to_string())?;
        let auth = self
            .credential
            .as_ref()
            .map(|c| format!("Authorization: Bearer {c}\r\n"))
            .unwrap_or_default();
        let req = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\n{}Content-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.url.path,
            self.url.host,
            auth,
            body.len(),
            body
        );
        stream
            .write_all(req.as_bytes())
            .map_err(|e| format!("write: {e}"))?;
        let mut response = Vec::new();
        stream
            .read_to_end(&mut response)
            .map_err(|e| format!("read: {e}"))?;
        let text = String::from_utf8_lossy(&response);
        let (head, payload) = text
            .split_once("\r\n\r\n")
            .ok_or_else(|| "malformed HTTP response".to_string())?;
        let status_line = head.lines().next().unwrap_or("");
        let status: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad status line: {status_line}"))?;
        if status != 200 {
            return Err(format!("HTTP status {status}"));
        }
        Ok(payload.to_string())
    }
}

impl BlackBoxBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn generate(
        &self,
        prompt: &str,
        config: &GenerationConfig,
    ) -> Result<Vec<String>, BackendError> {
        let body = json!({
            "prompt": prompt,
            "temperature": config.temperature,
            "max_new_tokens": config.max_new_tokens,
            "sample_count": config.sample_count,
            "seed": config.random_seed,
        })
        .to_string();
        let mut last_err = String::new();
        for attempt in 0..=self.config.max_retries {
            self.throttle();
            match self.request_once(&body) {
                Ok(payload) => {
                    let parsed: SamplesResponse = serde_json::from_str(payload.trim())
                        .map_err(|e| BackendError::BackendUnavailable {
                            message: format!("bad response body: {e}"),
                            retries: attempt,
                        })?;
                    if parsed.samples.len() != config.sample_count {
                        return Err(BackendError::BackendUnavailable {
                            message: format!(
                                "endpoint returned {} samples, expected {}",
                                parsed.samples.len(),
                                config.sample_count
                            ),
                            retries: attempt,
                        });
                    }
                    return Ok(parsed.samples);
                }
                Err(e) => last_err = e,
            }
        }
        Err(BackendError::BackendUnavailable {
            message: last_err,
            retries: self.config.max_retries,
        })
    }
}
