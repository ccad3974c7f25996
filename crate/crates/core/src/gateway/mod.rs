//! Prompt rendering and chat-completion calls with retries, a global
//! concurrency cap, spacing between requests, and a transcript of every
//! attempt.

mod replay;
mod template;
pub mod wire;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use replay::{ReplayBackend, ReplayEntry, ReplayError, ReplayFile};
pub use template::*;
pub use wire::Usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub step: TemplateId,
    /// Sentence the run is about; used by replay lookups, never sent.
    pub context: String,
    pub model_id: String,
    pub rendered_prompt: String,
    pub temperature: f32,
    pub max_tokens: u32,
    /// 1-based.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionReply {
    pub text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<Usage>,
}

/// Failure of a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum TransportError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("malformed endpoint reply: {0}")]
    Malformed(String),
    #[error("replay exhausted: {0}")]
    Exhausted(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        matches!(self, TransportError::Unreachable(_) | TransportError::RateLimited(_))
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionReply, TransportError>;
}

impl<F> LlmBackend for F
where
    F: Fn(&CompletionRequest) -> Result<CompletionReply, TransportError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionReply, TransportError> {
        self(request)
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{step}: endpoint unreachable after {attempts} attempts: {message}")]
    EndpointUnreachable {
        step: TemplateId,
        attempts: u32,
        message: String,
    },
    #[error("{step}: rate limited after {attempts} attempts")]
    RateLimited { step: TemplateId, attempts: u32 },
    #[error("{step}: malformed endpoint reply: {message}")]
    MalformedEndpointReply { step: TemplateId, message: String },
    #[error("{step}: no scripted reply left ({message})")]
    ReplayExhausted { step: TemplateId, message: String },
    #[error("{step}: reply still unparseable after re-prompt: {error}")]
    FormatUnrecoverable { step: TemplateId, error: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Reply(CompletionReply),
    Error(TransportError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub step: TemplateId,
    pub request: CompletionRequest,
    pub outcome: AttemptOutcome,
}

/// Append-only log of every attempt in one sentence run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: TranscriptEntry) {
        self.entries.push(entry);
    }

    /// Replay file that reproduces this transcript's replies in order.
    pub fn to_replay(&self) -> ReplayFile {
        ReplayFile::from_entries(
            self.entries
                .iter()
                .map(|e| match &e.outcome {
                    AttemptOutcome::Reply(r) => {
                        ReplayEntry::reply(Some(e.request.context.clone()), e.step, r.text.clone())
                    }
                    AttemptOutcome::Error(err) => {
                        ReplayEntry::error(Some(e.request.context.clone()), e.step, err.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Time source for backoff and rate spacing.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
    fn sleep_ms(&self, ms: u64);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }
}

/// Clock that advances only when slept on. Used by tests and replays.
#[derive(Default)]
pub struct ManualClock {
    now: AtomicU64,
    slept: Mutex<Vec<u64>>,
}

impl ManualClock {
    pub fn sleeps(&self) -> Vec<u64> {
        self.slept.lock().unwrap().clone()
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_ms(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
        self.slept.lock().unwrap().push(ms);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub model_id: String,
    pub temperature: f32,
    pub max_tokens: u32,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Requests in flight across all sentence runs.
    pub concurrency: usize,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            model_id: "mock".into(),
            temperature: 0.0,
            max_tokens: 1024,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            concurrency: 4,
            min_interval_ms: 0,
        }
    }
}

impl GatewayConfig {
    pub fn backoff_ms(&self, failed_attempt: u32) -> u64 {
        let shift = failed_attempt.saturating_sub(1).min(20);
        self.backoff_base_ms.saturating_mul(1 << shift).min(self.backoff_max_ms)
    }
}

struct LimiterState {
    in_flight: usize,
    next_start_ms: u64,
}

struct Limiter {
    cap: usize,
    min_interval_ms: u64,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        self.0.state.lock().unwrap().in_flight -= 1;
        self.0.freed.notify_one();
    }
}

impl Limiter {
    fn new(cap: usize, min_interval_ms: u64) -> Self {
        Limiter {
            cap: cap.max(1),
            min_interval_ms,
            state: Mutex::new(LimiterState {
                in_flight: 0,
                next_start_ms: 0,
            }),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self, clock: &dyn Clock) -> Permit<'_> {
        let mut st = self.state.lock().unwrap();
        while st.in_flight >= self.cap {
            st = self.freed.wait(st).unwrap();
        }
        st.in_flight += 1;
        let now = clock.now_ms();
        let start = st.next_start_ms.max(now);
        st.next_start_ms = start + self.min_interval_ms;
        drop(st);
        if start > now {
            clock.sleep_ms(start - now);
        }
        Permit(self)
    }

    fn in_flight(&self) -> usize {
        self.state.lock().unwrap().in_flight
    }
}

/// A reply that parsed, possibly on the corrective second try.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub reprompted: bool,
}

/// Cheap to clone; clones share the backend, limiter and clock.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    templates: Arc<TemplateSet>,
    config: GatewayConfig,
    clock: Arc<dyn Clock>,
    limiter: Arc<Limiter>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>, config: GatewayConfig) -> Self {
        let limiter = Arc::new(Limiter::new(config.concurrency, config.min_interval_ms));
        Gateway {
            backend,
            templates: Arc::new(TemplateSet::builtin()),
            config,
            clock: Arc::new(SystemClock::default()),
            limiter,
        }
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn in_flight(&self) -> usize {
        self.limiter.in_flight()
    }

    pub fn render(&self, step: TemplateId, bindings: &BTreeMap<&str, String>) -> Result<String, GatewayError> {
        Ok(self.templates.render(step, bindings)?)
    }

    /// Sends `prompt`, retrying transport failures with exponential backoff.
    pub fn complete(
        &self,
        step: TemplateId,
        context: &str,
        prompt: &str,
        transcript: &mut Transcript,
    ) -> Result<CompletionReply, GatewayError> {
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 1..=attempts {
            let request = CompletionRequest {
                step,
                context: context.to_string(),
                model_id: self.config.model_id.clone(),
                rendered_prompt: prompt.to_string(),
                temperature: self.config.temperature,
                max_tokens: self.config.max_tokens,
                attempt,
            };
            let result = {
                let _permit = self.limiter.acquire(self.clock.as_ref());
                self.backend.complete(&request)
            };
            let outcome = match &result {
                Ok(reply) => AttemptOutcome::Reply(reply.clone()),
                Err(e) => AttemptOutcome::Error(e.clone()),
            };
            transcript.push(TranscriptEntry { step, request, outcome });
            match result {
                Ok(reply) => return Ok(reply),
                Err(e) if e.retryable() => {
                    if attempt < attempts {
                        self.clock.sleep_ms(self.config.backoff_ms(attempt));
                    }
                    last = Some(e);
                }
                Err(TransportError::Malformed(message)) => {
                    return Err(GatewayError::MalformedEndpointReply { step, message })
                }
                Err(TransportError::Exhausted(message)) => return Err(GatewayError::ReplayExhausted { step, message }),
                Err(_) => unreachable!("retryable variants handled above"),
            }
        }
        Err(match last {
            Some(TransportError::RateLimited(_)) => GatewayError::RateLimited { step, attempts },
            Some(e) => GatewayError::EndpointUnreachable {
                step,
                attempts,
                message: e.to_string(),
            },
            None => unreachable!("at least one attempt"),
        })
    }

    /// Issues `prompt` again with a line naming the expected reply format.
    pub fn reprompt_on_parse_failure(
        &self,
        step: TemplateId,
        context: &str,
        prompt: &str,
        transcript: &mut Transcript,
    ) -> Result<CompletionReply, GatewayError> {
        let corrected = format!("{prompt}\n\n{}", step.format_hint());
        self.complete(step, context, &corrected, transcript)
    }

    /// Renders, sends and parses; one corrective re-prompt on parse failure.
    pub fn ask<T, E: fmt::Display>(
        &self,
        step: TemplateId,
        context: &str,
        bindings: &BTreeMap<&str, String>,
        transcript: &mut Transcript,
        mut parse: impl FnMut(&str) -> Result<T, E>,
    ) -> Result<Parsed<T>, GatewayError> {
        let prompt = self.render(step, bindings)?;
        let first = self.complete(step, context, &prompt, transcript)?;
        if let Ok(value) = parse(&first.text) {
            return Ok(Parsed {
                value,
                reprompted: false,
            });
        }
        let second = self.reprompt_on_parse_failure(step, context, &prompt, transcript)?;
        match parse(&second.text) {
            Ok(value) => Ok(Parsed {
                value,
                reprompted: true,
            }),
            Err(e) => Err(GatewayError::FormatUnrecoverable {
                step,
                error: e.to_string(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn reply(text: &str) -> CompletionReply {
        CompletionReply {
            text: text.into(),
            latency_ms: 0,
            token_usage: None,
        }
    }

    fn gateway(backend: impl LlmBackend + 'static) -> (Gateway, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::default());
        let gw = Gateway::new(Arc::new(backend), GatewayConfig::default()).with_clock(clock.clone());
        (gw, clock)
    }

    fn failing_then(fails: u32, err: TransportError) -> impl LlmBackend {
        let calls = AtomicU32::new(0);
        move |_: &CompletionRequest| {
            if calls.fetch_add(1, Ordering::SeqCst) < fails {
                Err(err.clone())
            } else {
                Ok(reply("yes"))
            }
        }
    }

    #[test]
    fn scripted_reply() {
        let (gw, _) = gateway(|_: &CompletionRequest| Ok(reply("yes")));
        let mut t = Transcript::new();
        let r = gw.complete(TemplateId::DuplicateRemoval, "s", "p", &mut t).unwrap();
        assert_eq!(r.text, "yes");
        assert_eq!(t.len(), 1);
        assert_eq!(t.entries()[0].request.attempt, 1);
    }

    #[test]
    fn retries_then_succeeds() {
        let (gw, clock) = gateway(failing_then(2, TransportError::Unreachable("down".into())));
        let mut t = Transcript::new();
        let r = gw.complete(TemplateId::DuplicateRemoval, "s", "p", &mut t).unwrap();
        assert_eq!(r.text, "yes");
        assert_eq!(t.len(), 3);
        assert_eq!(t.entries().last().unwrap().request.attempt, 3);
        assert_eq!(clock.sleeps(), vec![500, 1000]);
    }

    #[test]
    fn gives_up_after_cap() {
        let (gw, clock) = gateway(failing_then(4, TransportError::Unreachable("down".into())));
        let mut t = Transcript::new();
        let err = gw.complete(TemplateId::DuplicateRemoval, "s", "p", &mut t).unwrap_err();
        assert!(matches!(err, GatewayError::EndpointUnreachable { attempts: 4, .. }));
        assert_eq!(t.len(), 4);
        assert_eq!(clock.sleeps(), vec![500, 1000, 2000]);

        let (gw, _) = gateway(failing_then(9, TransportError::RateLimited("429".into())));
        let err = gw
            .complete(TemplateId::DuplicateRemoval, "s", "p", &mut Transcript::new())
            .unwrap_err();
        assert!(matches!(err, GatewayError::RateLimited { attempts: 4, .. }));
    }

    #[test]
    fn malformed_is_not_retried() {
        let (gw, _) = gateway(failing_then(1, TransportError::Malformed("no choices".into())));
        let mut t = Transcript::new();
        let err = gw.complete(TemplateId::DuplicateRemoval, "s", "p", &mut t).unwrap_err();
        assert!(matches!(err, GatewayError::MalformedEndpointReply { .. }));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn backoff_is_capped() {
        let cfg = GatewayConfig::default();
        assert_eq!(cfg.backoff_ms(1), 500);
        assert_eq!(cfg.backoff_ms(4), 4000);
        assert_eq!(cfg.backoff_ms(5), 8000);
        assert_eq!(cfg.backoff_ms(60), 8000);
    }

    fn yes_no(text: &str) -> Result<bool, String> {
        match text.trim() {
            "yes" => Ok(true),
            "no" => Ok(false),
            other => Err(format!("not a verdict: {other:?}")),
        }
    }

    fn sequence(replies: &'static [&'static str]) -> impl LlmBackend {
        let i = AtomicU32::new(0);
        move |_: &CompletionRequest| {
            let n = i.fetch_add(1, Ordering::SeqCst) as usize;
            Ok(reply(replies[n.min(replies.len() - 1)]))
        }
    }

    fn dup_bindings() -> BTreeMap<&'static str, String> {
        [
            (CONTEXT_SENTENCE, "s"),
            (EXTRACTED_RELATIONSHIPS, "[]"),
            (TRIPLET_TO_ANALYZE, "(a, b, c)"),
        ]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect()
    }

    #[test]
    fn reprompt_recovers() {
        let (gw, _) = gateway(sequence(&["Sure, here it is", "no"]));
        let mut t = Transcript::new();
        let p = gw
            .ask(TemplateId::DuplicateRemoval, "s", &dup_bindings(), &mut t, yes_no)
            .unwrap();
        assert_eq!(
            p,
            Parsed {
                value: false,
                reprompted: true
            }
        );
        assert_eq!(t.len(), 2);
        let second = &t.entries()[1].request.rendered_prompt;
        assert!(second.starts_with(&t.entries()[0].request.rendered_prompt));
        assert!(second.ends_with(TemplateId::DuplicateRemoval.format_hint()));
    }

    #[test]
    fn reprompt_is_single() {
        let (gw, _) = gateway(sequence(&["prose", "more prose", "yes"]));
        let mut t = Transcript::new();
        let err = gw
            .ask(TemplateId::DuplicateRemoval, "s", &dup_bindings(), &mut t, yes_no)
            .unwrap_err();
        assert!(matches!(err, GatewayError::FormatUnrecoverable { .. }));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn valid_first_reply_skips_reprompt() {
        let (gw, _) = gateway(sequence(&["yes"]));
        let mut t = Transcript::new();
        let p = gw
            .ask(TemplateId::DuplicateRemoval, "s", &dup_bindings(), &mut t, yes_no)
            .unwrap();
        assert!(!p.reprompted);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn rate_spacing() {
        let clock = Arc::new(ManualClock::default());
        let cfg = GatewayConfig {
            min_interval_ms: 100,
            ..GatewayConfig::default()
        };
        let gw = Gateway::new(Arc::new(|_: &CompletionRequest| Ok(reply("yes"))), cfg).with_clock(clock.clone());
        let mut t = Transcript::new();
        for _ in 0..3 {
            gw.complete(TemplateId::DuplicateRemoval, "s", "p", &mut t).unwrap();
        }
        assert_eq!(clock.sleeps(), vec![100, 100]);
    }

    #[test]
    fn concurrency_cap_holds() {
        use std::sync::atomic::AtomicUsize;
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (l, p) = (live.clone(), peak.clone());
        let backend = move |_: &CompletionRequest| {
            let now = l.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            l.fetch_sub(1, Ordering::SeqCst);
            Ok(reply("yes"))
        };
        let cfg = GatewayConfig {
            concurrency: 2,
            ..GatewayConfig::default()
        };
        let gw = Gateway::new(Arc::new(backend), cfg);
        std::thread::scope(|s| {
            for i in 0..8 {
                let gw = gw.clone();
                s.spawn(move || {
                    let mut t = Transcript::new();
                    gw.complete(TemplateId::DuplicateRemoval, &i.to_string(), "p", &mut t)
                        .unwrap();
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gw.in_flight(), 0);
    }

    #[test]
    fn transcript_serializes() {
        let (gw, _) = gateway(failing_then(1, TransportError::Unreachable("x".into())));
        let mut t = Transcript::new();
        gw.complete(TemplateId::EntityExtraction, "s", "p", &mut t).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Transcript = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        let replay = t.to_replay();
        assert_eq!(replay.entries.len(), 2);
        assert!(replay.entries[0].error.is_some());
        assert_eq!(replay.entries[1].reply.as_deref(), Some("yes"));
    }
}
