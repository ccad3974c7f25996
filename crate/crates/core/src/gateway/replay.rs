use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CompletionReply, CompletionRequest, LlmBackend, TemplateId, TransportError};

pub const REPLAY_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported replay schema_version {0:?}")]
    Version(String),
    #[error("entry {index}: exactly one of reply/error is required")]
    Outcome { index: usize },
}

/// One canned reply. Entries without `sentence` match any sentence and are
/// consulted only after the sentence-specific queue is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<String>,
    pub step: TemplateId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<TransportError>,
}

impl ReplayEntry {
    pub fn reply(sentence: Option<String>, step: TemplateId, text: impl Into<String>) -> Self {
        ReplayEntry {
            sentence,
            step,
            reply: Some(text.into()),
            error: None,
        }
    }

    pub fn error(sentence: Option<String>, step: TemplateId, error: TransportError) -> Self {
        ReplayEntry {
            sentence,
            step,
            reply: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayFile {
    pub schema_version: String,
    pub entries: Vec<ReplayEntry>,
}

impl ReplayFile {
    pub fn from_entries(entries: Vec<ReplayEntry>) -> Self {
        ReplayFile {
            schema_version: REPLAY_SCHEMA_VERSION.into(),
            entries,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ReplayError> {
        let file: ReplayFile = serde_json::from_str(text)?;
        if file.schema_version != REPLAY_SCHEMA_VERSION {
            return Err(ReplayError::Version(file.schema_version));
        }
        for (index, e) in file.entries.iter().enumerate() {
            if e.reply.is_some() == e.error.is_some() {
                return Err(ReplayError::Outcome { index });
            }
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("replay serializes")
    }
}

type Key = (Option<String>, TemplateId);

/// Deterministic backend serving scripted replies FIFO per
/// (sentence, step).
#[derive(Debug)]
pub struct ReplayBackend {
    queues: Mutex<BTreeMap<Key, VecDeque<Result<String, TransportError>>>>,
}

impl ReplayBackend {
    pub fn new(file: ReplayFile) -> Self {
        let mut queues: BTreeMap<Key, VecDeque<_>> = BTreeMap::new();
        for e in file.entries {
            let outcome = match (e.reply, e.error) {
                (Some(text), _) => Ok(text),
                (None, Some(err)) => Err(err),
                (None, None) => Err(TransportError::Malformed("empty replay entry".into())),
            };
            queues.entry((e.sentence, e.step)).or_default().push_back(outcome);
        }
        ReplayBackend {
            queues: Mutex::new(queues),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ReplayError> {
        Ok(Self::new(ReplayFile::from_json(text)?))
    }

    /// Entries not yet consumed.
    pub fn remaining(&self) -> usize {
        self.queues.lock().unwrap().values().map(VecDeque::len).sum()
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionReply, TransportError> {
        let mut queues = self.queues.lock().unwrap();
        let specific = (Some(request.context.clone()), request.step);
        let wildcard = (None, request.step);
        let next = [specific, wildcard]
            .into_iter()
            .find_map(|k| queues.get_mut(&k).and_then(VecDeque::pop_front));
        match next {
            Some(Ok(text)) => Ok(CompletionReply {
                text,
                latency_ms: 0,
                token_usage: None,
            }),
            Some(Err(e)) => Err(e),
            None => Err(TransportError::Exhausted(format!(
                "{} for {:?}",
                request.step, request.context
            ))),
        }
    }
}
