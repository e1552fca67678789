//! Thin async client for the ROMANO HTTP service, plus the `romano` CLI logic.

pub mod cli;

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use romano_core::api::{
    AdvanceRequest, CommandRequest, DecodeRequest, DecodeResponse, EncodeRequest, EncodeResponse, ErrorBody,
    IdResponse, RunRequest, SessionInfo,
};
use romano_core::codec::RomanoMessage;
use romano_core::harness::{DemoKind, DemoReport, ExperimentReport, RunOutput, ScalabilityReport, SweepReport};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {}", body.message)]
    Api { status: u16, body: ErrorBody },
}

impl ClientError {
    /// The service's error kind, such as "unknown_target".
    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            ClientError::Http(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Client {
        Client { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn call<B: Serialize, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
    ) -> Result<T, ClientError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str::<ErrorBody>(&text)
            .unwrap_or_else(|_| ErrorBody { error: "http".into(), message: text });
        Err(ClientError::Api { status: status.as_u16(), body })
    }

    pub async fn health(&self) -> Result<serde_json::Value, ClientError> {
        self.call::<(), _>(Method::GET, "/health", None).await
    }

    pub async fn encode(&self, message: &RomanoMessage) -> Result<EncodeResponse, ClientError> {
        self.call(Method::POST, "/codec/encode", Some(&EncodeRequest { message: message.clone() })).await
    }

    pub async fn decode(&self, hex: &str) -> Result<RomanoMessage, ClientError> {
        let r: DecodeResponse = self.call(Method::POST, "/codec/decode", Some(&DecodeRequest { hex: hex.into() })).await?;
        Ok(r.message)
    }

    pub async fn romano_id(&self, address: &str) -> Result<IdResponse, ClientError> {
        let url = format!("{}/romano-id", self.base);
        let resp = self.http.get(url).query(&[("address", address)]).send().await?;
        if resp.status().is_success() {
            return Ok(resp.json().await?);
        }
        let status = resp.status().as_u16();
        let body = resp.json().await?;
        Err(ClientError::Api { status, body })
    }

    pub async fn throughput(&self, req: &RunRequest) -> Result<RunOutput<ExperimentReport>, ClientError> {
        self.call(Method::POST, "/experiments/throughput", Some(req)).await
    }

    pub async fn scalability(&self, req: &RunRequest) -> Result<RunOutput<ScalabilityReport>, ClientError> {
        self.call(Method::POST, "/experiments/scalability", Some(req)).await
    }

    pub async fn sweep(&self, req: &RunRequest) -> Result<SweepReport, ClientError> {
        self.call(Method::POST, "/experiments/sweep", Some(req)).await
    }

    pub async fn demo(&self, kind: DemoKind, req: &RunRequest) -> Result<RunOutput<DemoReport>, ClientError> {
        self.call(Method::POST, &format!("/demos/{kind}"), Some(req)).await
    }

    pub async fn create_session(&self, req: &RunRequest) -> Result<SessionInfo, ClientError> {
        self.call(Method::POST, "/sessions", Some(req)).await
    }

    pub async fn session(&self, id: u64) -> Result<SessionInfo, ClientError> {
        self.call::<(), _>(Method::GET, &format!("/sessions/{id}"), None).await
    }

    pub async fn command(&self, id: u64, cmd: &CommandRequest) -> Result<SessionInfo, ClientError> {
        self.call(Method::POST, &format!("/sessions/{id}/commands"), Some(cmd)).await
    }

    pub async fn advance(&self, id: u64, ms: u64) -> Result<SessionInfo, ClientError> {
        self.call(Method::POST, &format!("/sessions/{id}/advance"), Some(&AdvanceRequest { ms })).await
    }

    pub async fn delete_session(&self, id: u64) -> Result<(), ClientError> {
        let resp = self.http.delete(format!("{}/sessions/{id}", self.base)).send().await?;
        match resp.status() {
            StatusCode::NO_CONTENT | StatusCode::OK => Ok(()),
            s => {
                let body = resp.json().await?;
                Err(ClientError::Api { status: s.as_u16(), body })
            }
        }
    }
}
