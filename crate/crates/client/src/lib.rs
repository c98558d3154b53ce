//! Thin async client for the compose service.

use serde::de::DeserializeOwned;
use serde::Serialize;
use stylemix_core::api::{ComposeRequest, ComposeResponse, ErrorBody, LayoutResponse, SampleRequest, SampleResponse};

pub use reqwest::StatusCode;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("service answered {status}: {}", body.error)]
    Status { status: StatusCode, body: ErrorBody },
    #[error("transport error: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            ClientError::Status { body, .. } => body.field.as_deref(),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// A response body together with the server-side timing header.
#[derive(Debug, Clone)]
pub struct Timed<T> {
    pub value: T,
    pub timing_ms: Option<f64>,
    pub raw: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn finish<T: DeserializeOwned>(resp: reqwest::Response) -> Result<Timed<T>> {
        let status = resp.status();
        let timing_ms = resp
            .headers()
            .get("x-timing-ms")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        let raw = resp.bytes().await?.to_vec();
        if !status.is_success() {
            let body = serde_json::from_slice(&raw).unwrap_or_else(|_| ErrorBody {
                error: String::from_utf8_lossy(&raw).into_owned(),
                field: None,
            });
            return Err(ClientError::Status { status, body });
        }
        let value = serde_json::from_slice(&raw).map_err(|e| ClientError::Status {
            status,
            body: ErrorBody {
                error: format!("unreadable response: {e}"),
                field: None,
            },
        })?;
        Ok(Timed { value, timing_ms, raw })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<Timed<T>> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::finish(resp).await
    }

    pub async fn layout(&self) -> Result<LayoutResponse> {
        let resp = self.http.get(format!("{}/layout", self.base)).send().await?;
        Ok(Self::finish(resp).await?.value)
    }

    pub async fn compose(&self, req: &ComposeRequest) -> Result<ComposeResponse> {
        Ok(self.compose_timed(req).await?.value)
    }

    pub async fn compose_timed(&self, req: &ComposeRequest) -> Result<Timed<ComposeResponse>> {
        self.post("/compose", req).await
    }

    pub async fn sample(&self, seed: u64, psi: Option<f64>) -> Result<SampleResponse> {
        Ok(self.post("/sample", &SampleRequest { seed, psi }).await?.value)
    }

    /// Posts an arbitrary JSON body; for exercising the error paths.
    pub async fn post_raw(&self, path: &str, body: &str) -> Result<Timed<serde_json::Value>> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .await?;
        Self::finish(resp).await
    }
}
