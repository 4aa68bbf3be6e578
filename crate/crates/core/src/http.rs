//! Blocking JSON-over-HTTP plumbing shared by the remote text-generation,
//! logit and classifier clients.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Where a remote service lives and which environment variable holds its
/// bearer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub base_url: String,
    #[serde(default)]
    pub path: String,
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>, path: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            path: path.into(),
            token_env: None,
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn with_token_env(mut self, var: impl Into<String>) -> Self {
        self.token_env = Some(var.into());
        self
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

/// Thin wrapper over a blocking reqwest client bound to one endpoint.
#[derive(Debug, Clone)]
pub struct JsonClient {
    endpoint: Endpoint,
    client: reqwest::blocking::Client,
}

impl JsonClient {
    pub fn new(endpoint: Endpoint) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self { endpoint, client })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn authorize(&self, req: reqwest::blocking::RequestBuilder) -> reqwest::blocking::RequestBuilder {
        match self.endpoint.token_env.as_deref().and_then(|v| std::env::var(v).ok()) {
            Some(token) => req.bearer_auth(token),
            None => req,
        }
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, String> {
        let req = self.authorize(self.client.post(self.endpoint.url(path)).json(body));
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(format!("HTTP {status}: {text}"));
        }
        resp.json::<R>().map_err(|e| e.to_string())
    }

    pub fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R, String> {
        let req = self.authorize(self.client.get(self.endpoint.url(path)));
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        resp.json::<R>().map_err(|e| e.to_string())
    }
}
