use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use iie_core::gateway::wire::ChatRequest;
use iie_core::gateway::{
    CompletionRequest, Gateway, GatewayConfig, GatewayError, LlmBackend, ManualClock, TemplateId, Transcript,
    TransportError,
};
use iie_core::nli::{NliError, NliRequest, NliScorer};
use iie_harness::http::{endpoint_url, HttpChatBackend, HttpNliScorer, CHAT_PATH};
use serde_json::{json, Value};

#[derive(Default)]
struct Script {
    /// (status, body) pairs served in order; the last one repeats.
    replies: VecDeque<(u16, Value)>,
    seen: Vec<(Option<String>, Value)>,
}

type Shared = Arc<Mutex<Script>>;

async fn handler(State(s): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> impl IntoResponse {
    let mut s = s.lock().unwrap();
    let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
    s.seen.push((auth, body));
    let (status, reply) = if s.replies.len() > 1 {
        s.replies.pop_front().unwrap()
    } else {
        s.replies.front().cloned().unwrap()
    };
    (StatusCode::from_u16(status).unwrap(), Json(reply))
}

/// Starts a server on its own runtime thread and returns its base URL.
fn serve(replies: Vec<(u16, Value)>) -> (String, Shared) {
    let shared: Shared = Arc::new(Mutex::new(Script {
        replies: replies.into(),
        seen: Vec::new(),
    }));
    let app = Router::new()
        .route(CHAT_PATH, post(handler))
        .route("/score", post(handler))
        .with_state(shared.clone());
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    (format!("http://{addr}"), shared)
}

fn chat_reply(text: &str) -> Value {
    json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 2, "total_tokens": 13}
    })
}

fn request(prompt: &str) -> CompletionRequest {
    CompletionRequest {
        step: TemplateId::EntityExtraction,
        context: "ctx".into(),
        model_id: "test-model".into(),
        rendered_prompt: prompt.into(),
        temperature: 0.0,
        max_tokens: 64,
        attempt: 1,
    }
}

fn timeout() -> std::time::Duration {
    std::time::Duration::from_secs(10)
}

#[test]
fn endpoint_paths() {
    assert_eq!(endpoint_url("http://h:1/", CHAT_PATH), "http://h:1/v1/chat/completions");
    assert_eq!(
        endpoint_url("http://h:1/v1/chat/completions", CHAT_PATH),
        "http://h:1/v1/chat/completions"
    );
    assert_eq!(endpoint_url("http://h:1", "/score"), "http://h:1/score");
}

#[test]
fn chat_request_wire_shape_and_auth() {
    let (url, shared) = serve(vec![(200, chat_reply("Entities: Jesse <person>"))]);
    let backend = HttpChatBackend::new(&url, Some("k-123".into()), timeout()).unwrap();
    let reply = backend.complete(&request("hello")).unwrap();
    assert_eq!(reply.text, "Entities: Jesse <person>");
    assert_eq!(reply.token_usage.unwrap().completion_tokens, 2);

    let seen = &shared.lock().unwrap().seen;
    assert_eq!(seen[0].0.as_deref(), Some("Bearer k-123"));
    let sent: ChatRequest = serde_json::from_value(seen[0].1.clone()).unwrap();
    assert_eq!(sent, ChatRequest::single_user("test-model", "hello", 0.0, 64));
}

#[test]
fn no_key_sends_no_auth_header() {
    let (url, shared) = serve(vec![(200, chat_reply("ok"))]);
    let backend = HttpChatBackend::new(&url, Some(String::new()), timeout()).unwrap();
    backend.complete(&request("x")).unwrap();
    assert_eq!(shared.lock().unwrap().seen[0].0, None);
}

#[test]
fn status_codes_map_to_transport_errors() {
    let cases = [(429, "rate"), (503, "unreachable"), (400, "malformed")];
    for (status, kind) in cases {
        let (url, _) = serve(vec![(status, json!({"error": "x"}))]);
        let backend = HttpChatBackend::new(&url, None, timeout()).unwrap();
        let err = backend.complete(&request("x")).unwrap_err();
        let ok = match kind {
            "rate" => matches!(err, TransportError::RateLimited(_)),
            "unreachable" => matches!(err, TransportError::Unreachable(_)),
            _ => matches!(err, TransportError::Malformed(_)),
        };
        assert!(ok, "status {status} gave {err:?}");
    }
    let (url, _) = serve(vec![(200, json!({"choices": []}))]);
    let backend = HttpChatBackend::new(&url, None, timeout()).unwrap();
    assert!(matches!(
        backend.complete(&request("x")),
        Err(TransportError::Malformed(_))
    ));
}

#[test]
fn unreachable_endpoint() {
    // port 9 on localhost is closed in the sandbox
    let backend = HttpChatBackend::new("http://127.0.0.1:9", None, timeout()).unwrap();
    assert!(matches!(
        backend.complete(&request("x")),
        Err(TransportError::Unreachable(_))
    ));
}

#[test]
fn gateway_retries_server_errors_over_http() {
    let (url, shared) = serve(vec![
        (503, json!({})),
        (500, json!({})),
        (200, chat_reply("Entities: Jesse <person>")),
    ]);
    let backend = HttpChatBackend::new(&url, None, timeout()).unwrap();
    let clock = Arc::new(ManualClock::default());
    let gw = Gateway::new(Arc::new(backend), GatewayConfig::default()).with_clock(clock.clone());
    let mut t = Transcript::new();
    let reply = gw.complete(TemplateId::EntityExtraction, "ctx", "p", &mut t).unwrap();
    assert_eq!(reply.text, "Entities: Jesse <person>");
    assert_eq!(t.len(), 3);
    assert_eq!(shared.lock().unwrap().seen.len(), 3);
    assert_eq!(clock.sleeps().len(), 2);

    let (url, _) = serve(vec![(429, json!({}))]);
    let backend = HttpChatBackend::new(&url, None, timeout()).unwrap();
    let gw = Gateway::new(Arc::new(backend), GatewayConfig::default()).with_clock(Arc::new(ManualClock::default()));
    let mut t = Transcript::new();
    let err = gw
        .complete(TemplateId::EntityExtraction, "ctx", "p", &mut t)
        .unwrap_err();
    assert!(matches!(err, GatewayError::RateLimited { attempts: 4, .. }));
    assert_eq!(t.len(), 4);
}

#[test]
fn nli_scorer_wire_shape() {
    let (url, shared) = serve(vec![(
        200,
        json!({"entailment": 0.7, "neutral": 0.2, "contradiction": 0.1}),
    )]);
    let scorer = HttpNliScorer::new(&url, timeout()).unwrap();
    let req = NliRequest {
        premise: "Jesse walked the dog.".into(),
        hypothesis: "Jesse walks dog".into(),
    };
    let reply = scorer.score(&req).unwrap();
    assert_eq!(reply.entailment, 0.7);
    let seen = &shared.lock().unwrap().seen;
    assert_eq!(
        seen[0].1,
        json!({"premise": "Jesse walked the dog.", "hypothesis": "Jesse walks dog"})
    );

    let (url, _) = serve(vec![(500, json!({}))]);
    let scorer = HttpNliScorer::new(&url, timeout()).unwrap();
    assert!(matches!(scorer.score(&req), Err(NliError::EndpointUnreachable(_))));
    let (url, _) = serve(vec![(200, json!({"entailment": "high"}))]);
    let scorer = HttpNliScorer::new(&url, timeout()).unwrap();
    assert!(matches!(scorer.score(&req), Err(NliError::EndpointUnreachable(_))));
}
