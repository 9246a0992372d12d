//! Thin async client for the descattn HTTP service.

use descattn_core::analysis::ErrorReport;
use descattn_core::api::{
    ApiError, FlopsRequest, FlopsResponse, ForwardRequest, ForwardResponse, Health, HistogramRequest,
    HistogramResponse, RunRequest, StreamCreate, StreamCreated, VerifyRequest,
};
use descattn_core::bench::{BenchReport, BenchSpec};
use descattn_core::streaming::{CacheReport, StreamConfig};
use descattn_core::tokens::{load_dump, save_dump};
use descattn_core::{Precision, Scalar, TokenTensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error body.
    #[error("{} ({kind}, HTTP {status})", .message)]
    Api { status: u16, kind: String, message: String },
    #[error("bad payload: {0}")]
    Payload(#[from] descattn_core::Error),
}

impl ClientError {
    /// `kind` of a service-side error, if this is one.
    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Api { kind, .. } => Some(kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

async fn check(resp: reqwest::Response) -> Result<reqwest::Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await.unwrap_or_default();
    let (kind, message) = match serde_json::from_str::<ApiError>(&text) {
        Ok(e) => (e.kind, e.error),
        Err(_) => ("http".to_string(), text),
    };
    Err(ClientError::Api {
        status: status.as_u16(),
        kind,
        message,
    })
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn post_json<Req: Serialize + ?Sized, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    async fn get_json<Resp: DeserializeOwned>(&self, path: &str) -> Result<Resp> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn health(&self) -> Result<Health> {
        self.get_json("/health").await
    }

    pub async fn verify(&self, req: &VerifyRequest) -> Result<descattn_core::verify::VerifyReport> {
        self.post_json("/v1/verify", req).await
    }

    pub async fn flops(&self, req: &FlopsRequest) -> Result<FlopsResponse> {
        self.post_json("/v1/flops", req).await
    }

    pub async fn forward(&self, req: &ForwardRequest) -> Result<ForwardResponse> {
        self.post_json("/v1/forward", req).await
    }

    pub async fn compare(&self, req: &RunRequest) -> Result<ErrorReport> {
        self.post_json("/v1/compare", req).await
    }

    pub async fn histogram(&self, req: &HistogramRequest) -> Result<HistogramResponse> {
        self.post_json("/v1/histogram", req).await
    }

    pub async fn bench(&self, spec: &BenchSpec) -> Result<BenchReport> {
        self.post_json("/v1/bench", spec).await
    }

    pub async fn create_stream(&self, config: StreamConfig, precision: Precision) -> Result<StreamHandle<'_>> {
        let created: StreamCreated = self.post_json("/v1/streams", &StreamCreate { config, precision }).await?;
        Ok(StreamHandle {
            client: self,
            info: created,
        })
    }
}

/// A live streaming session on the service.
#[derive(Debug)]
pub struct StreamHandle<'a> {
    client: &'a Client,
    info: StreamCreated,
}

impl StreamHandle<'_> {
    pub fn id(&self) -> &str {
        &self.info.id
    }

    pub fn config(&self) -> &StreamConfig {
        &self.info.config
    }

    pub fn precision(&self) -> Precision {
        self.info.precision
    }

    /// Sends one chunk and returns its output tokens.
    pub async fn push<T: Scalar>(&self, chunk: &TokenTensor<T>) -> Result<TokenTensor<T>> {
        let url = format!("{}/v1/streams/{}/chunks", self.client.base, self.info.id);
        let resp = self
            .client
            .http
            .post(url)
            .header("content-type", "application/octet-stream")
            .body(save_dump(chunk))
            .send()
            .await?;
        let bytes = check(resp).await?.bytes().await?;
        Ok(load_dump(&bytes)?)
    }

    pub async fn cache(&self) -> Result<CacheReport> {
        self.client.get_json(&format!("/v1/streams/{}/cache", self.info.id)).await
    }

    pub async fn close(self) -> Result<()> {
        let url = format!("{}/v1/streams/{}", self.client.base, self.info.id);
        check(self.client.http.delete(url).send().await?).await?;
        Ok(())
    }
}
