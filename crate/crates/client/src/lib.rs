//! Typed async client for the medfuse HTTP service.

use std::time::{Duration, Instant};

use medfuse_core::api::{CohortPreviewRequest, ErrorBody, LoadRequest, RunStarted, RunStatus, SnapshotSummary};
use medfuse_core::cohort::CohortSpec;
use medfuse_core::pipeline::{CohortPreview, RunConfig, WidthsPreview, WidthsQuery};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("HTTP {status}: {}{}", body.message, body.field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    Api { status: u16, body: ErrorBody },
    #[error("run {run_id} still not finished after {waited:?}")]
    Timeout { run_id: String, waited: Duration },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8088`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn load_snapshot(&self, req: &LoadRequest) -> Result<SnapshotSummary> {
        self.post("/snapshot/load", req).await
    }

    pub async fn preview_cohort(&self, cohort: &CohortSpec) -> Result<CohortPreview> {
        self.post("/cohort/preview", &CohortPreviewRequest { cohort: cohort.clone() })
            .await
    }

    pub async fn preview_widths(&self, query: &WidthsQuery) -> Result<WidthsPreview> {
        self.post("/align/preview", query).await
    }

    /// Queues a run and returns its id.
    pub async fn start_run(&self, config: &RunConfig) -> Result<String> {
        let started: RunStarted = self.post("/run", config).await?;
        Ok(started.run_id)
    }

    pub async fn run_status(&self, run_id: &str) -> Result<RunStatus> {
        let resp = self.http.get(self.url(&format!("/run/{run_id}/report"))).send().await?;
        decode(resp).await
    }

    /// Polls until the run reaches a terminal state.
    pub async fn wait_for_run(&self, run_id: &str, poll: Duration, timeout: Duration) -> Result<RunStatus> {
        let started = Instant::now();
        loop {
            let status = self.run_status(run_id).await?;
            if status.state.is_terminal() {
                return Ok(status);
            }
            if started.elapsed() >= timeout {
                return Err(ClientError::Timeout {
                    run_id: run_id.to_string(),
                    waited: started.elapsed(),
                });
            }
            tokio::time::sleep(poll).await;
        }
    }

    pub async fn artifact(&self, run_id: &str, name: &str) -> Result<Vec<u8>> {
        let resp = self
            .http
            .get(self.url(&format!("/run/{run_id}/artifact/{name}")))
            .send()
            .await?;
        if !resp.status().is_success() {
            return Err(api_error(resp).await);
        }
        Ok(resp.bytes().await?.to_vec())
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(self.url(path)).json(body).send().await?;
        decode(resp).await
    }
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
    if resp.status().is_success() {
        Ok(resp.json().await?)
    } else {
        Err(api_error(resp).await)
    }
}

async fn api_error(resp: reqwest::Response) -> ClientError {
    let status = resp.status().as_u16();
    let text = resp.text().await.unwrap_or_default();
    let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
        error: "http".into(),
        field: None,
        message: text,
    });
    ClientError::Api { status, body }
}
