//! Blocking HTTP clients for the chat-completion and NLI scoring endpoints.
//!
//! Both clients are meant for worker threads; do not call them from inside
//! an async runtime.

use std::time::{Duration, Instant};

use iie_core::gateway::wire::ChatRequest;
use iie_core::gateway::{CompletionReply, CompletionRequest, LlmBackend, TransportError};
use iie_core::nli::{NliError, NliReply, NliRequest, NliScorer};
use reqwest::blocking::Client;
use reqwest::StatusCode;

use crate::error::{HarnessError, Result};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const SCORE_PATH: &str = "/score";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Appends `path` unless the endpoint already ends with it.
pub fn endpoint_url(base: &str, path: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(path) {
        base.to_string()
    } else {
        format!("{base}{path}")
    }
}

fn client(timeout: Duration) -> Result<Client> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| HarnessError::Client(e.to_string()))
}

pub struct HttpChatBackend {
    client: Client,
    url: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Result<Self> {
        Ok(HttpChatBackend {
            client: client(timeout)?,
            url: endpoint_url(endpoint, CHAT_PATH),
            api_key: api_key.filter(|k| !k.is_empty()),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn classify_status(status: StatusCode, body: String) -> TransportError {
    let msg = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
    if status == StatusCode::TOO_MANY_REQUESTS {
        TransportError::RateLimited(msg)
    } else if status.is_server_error() || status == StatusCode::REQUEST_TIMEOUT {
        TransportError::Unreachable(msg)
    } else {
        TransportError::Malformed(msg)
    }
}

impl LlmBackend for HttpChatBackend {
    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionReply, TransportError> {
        let body = ChatRequest::single_user(
            &request.model_id,
            &request.rendered_prompt,
            request.temperature,
            request.max_tokens,
        );
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let started = Instant::now();
        let resp = req.send().map_err(|e| TransportError::Unreachable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Unreachable(e.to_string()))?;
        if !status.is_success() {
            return Err(classify_status(status, text));
        }
        let parsed: iie_core::gateway::wire::ChatResponse =
            serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))?;
        let content = parsed
            .text()
            .ok_or_else(|| TransportError::Malformed("reply has no choices".into()))?;
        Ok(CompletionReply {
            text: content.to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
            token_usage: parsed.usage,
        })
    }
}

pub struct HttpNliScorer {
    client: Client,
    url: String,
}

impl HttpNliScorer {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        Ok(HttpNliScorer {
            client: client(timeout)?,
            url: endpoint_url(endpoint, SCORE_PATH),
        })
    }
}

impl NliScorer for HttpNliScorer {
    fn score(&self, request: &NliRequest) -> std::result::Result<NliReply, NliError> {
        let resp = self
            .client
            .post(&self.url)
            .json(request)
            .send()
            .map_err(|e| NliError::EndpointUnreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(NliError::EndpointUnreachable(format!(
                "HTTP {status} from {}",
                self.url
            )));
        }
        resp.json::<NliReply>()
            .map_err(|e| NliError::EndpointUnreachable(format!("unreadable reply: {e}")))
    }
}
