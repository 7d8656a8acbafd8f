//! Typed client for the fusionnet HTTP service.

use std::time::Duration;

use fusionnet_core::api::{
    ApiError, AugmentRequest, AugmentResponse, EvaluateRequest, EvaluateResponse, GradcheckRequest,
    GradcheckResponse, Health, JobCreated, JobState, JobStatus, PredictRequest, PredictResponse, TrainOutcome,
    TrainRequest,
};
use fusionnet_core::pipeline::StepRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    /// The service answered with an error body.
    #[error("{message} (HTTP {status})")]
    Api { status: u16, message: String },
    #[error("training job {job} failed: {message}")]
    JobFailed { job: u64, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
    poll: Duration,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
            poll: Duration::from_millis(100),
        }
    }

    /// Interval between job status requests in [`Client::wait_training`].
    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(url: &str, resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return resp.json().await.map_err(|source| ClientError::Transport {
                url: url.to_string(),
                source,
            });
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ApiError>(&text).map_or(text, |e| e.error);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let resp = self.http.get(&url).send().await.map_err(|source| ClientError::Transport {
            url: url.clone(),
            source,
        })?;
        Self::decode(&url, resp).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .http
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        Self::decode(&url, resp).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn start_training(&self, req: &TrainRequest) -> Result<JobCreated> {
        self.post("/v1/train", req).await
    }

    /// Status of a training job with the step records from `since` on.
    pub async fn job(&self, job: u64, since: usize) -> Result<JobStatus> {
        self.get(&format!("/v1/jobs/{job}?since={since}")).await
    }

    /// Polls a job until it finishes, passing every new step record and
    /// phase change to the callbacks.
    pub async fn wait_training(
        &self,
        job: u64,
        mut on_phase: impl FnMut(&str, u64),
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<TrainOutcome> {
        let mut seen = 0;
        let mut phase = String::new();
        loop {
            let status = self.job(job, seen).await?;
            if status.phase != phase {
                phase = status.phase.clone();
                on_phase(&phase, status.total_steps);
            }
            for rec in &status.records {
                on_step(rec);
            }
            seen += status.records.len();
            match status.state {
                JobState::Running => tokio::time::sleep(self.poll).await,
                JobState::Succeeded => {
                    return status.outcome.ok_or_else(|| ClientError::JobFailed {
                        job,
                        message: "finished without an outcome".into(),
                    })
                }
                JobState::Failed => {
                    return Err(ClientError::JobFailed {
                        job,
                        message: status.error.unwrap_or_default(),
                    })
                }
            }
        }
    }

    pub async fn predict(&self, req: &PredictRequest) -> Result<PredictResponse> {
        self.post("/v1/predict", req).await
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<EvaluateResponse> {
        self.post("/v1/evaluate", req).await
    }

    pub async fn augment(&self, req: &AugmentRequest) -> Result<AugmentResponse> {
        self.post("/v1/augment", req).await
    }

    pub async fn gradcheck(&self, req: &GradcheckRequest) -> Result<GradcheckResponse> {
        self.post("/v1/gradcheck", req).await
    }
}
