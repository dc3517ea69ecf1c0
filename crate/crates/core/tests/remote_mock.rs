//! Remote backends against an in-process mock of the hosted endpoints.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine as _;
use serde_json::{json, Value};

use reflex_core::backends::{BackendConfig, BackendError, Backends};
use reflex_core::types::{AspectSchema, ImagePayload, ImageRecord, QuestionSource};
use reflex_core::{Engine, EngineError, SessionState, UserInput};

#[derive(Clone, Copy, PartialEq)]
enum Captions {
    Complete,
    /// Drops `Color` from the first reply only.
    MissingOnce,
    /// Drops `Color` every time.
    AlwaysMissing,
}

struct Mock {
    captions: Captions,
    caption_calls: usize,
    question_mentions_aspect: bool,
    fail_all: bool,
    auth: Vec<String>,
}

type Shared = Arc<Mutex<Mock>>;

fn caption_reply(schema: &AspectSchema, drop_color: bool) -> String {
    let mut obj = serde_json::Map::new();
    for aspect in &schema.aspects {
        if drop_color && aspect == "Color" {
            continue;
        }
        obj.insert(aspect.clone(), json!(format!("some {}", aspect.to_lowercase())));
    }
    format!("Here you go: {}", Value::Object(obj))
}

async fn chat(State(mock): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let mut m = mock.lock().unwrap();
    if let Some(auth) = headers.get("authorization") {
        m.auth.push(auth.to_str().unwrap().to_string());
    }
    if m.fail_all {
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({})));
    }
    let messages = body["messages"].as_array().unwrap();
    let system = messages[0]["content"].as_str().unwrap();
    let last = messages.last().unwrap()["content"].as_str().unwrap().to_string();
    let schema = AspectSchema::default_schema();
    let text = if system.contains("image evaluator") {
        m.caption_calls += 1;
        let drop = match m.captions {
            Captions::Complete => false,
            Captions::MissingOnce => m.caption_calls == 1,
            Captions::AlwaysMissing => true,
        };
        caption_reply(&schema, drop)
    } else if system.contains("Ask one short question") {
        let aspect = schema
            .aspects
            .iter()
            .find(|a| last.contains(&format!("\"{a}\"")))
            .unwrap()
            .clone();
        if m.question_mentions_aspect {
            format!("Which {aspect} would you like the image to have?")
        } else {
            "Anything else?".to_string()
        }
    } else {
        // summarizer: echo the user turns
        messages[1..]
            .iter()
            .filter(|m| m["role"] == "user")
            .map(|m| m["content"].as_str().unwrap())
            .collect::<Vec<_>>()
            .join(", ")
    };
    (
        StatusCode::OK,
        Json(json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]})),
    )
}

async fn images(State(mock): State<Shared>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    if mock.lock().unwrap().fail_all {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({})));
    }
    assert_eq!(body["size"], "512x512");
    let bytes = format!("img:{}:{}", body["prompt"].as_str().unwrap(), body["seed"]);
    (
        StatusCode::OK,
        Json(json!({"image_base64": base64::engine::general_purpose::STANDARD.encode(bytes), "media_type": "image/png"})),
    )
}

/// Letter-frequency embeddings: texts sharing words score higher.
async fn embeddings(Json(body): Json<Value>) -> Json<Value> {
    let data: Vec<Value> = body["input"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            let mut v = vec![0.0f64; 26];
            for c in s.as_str().unwrap().to_lowercase().chars().filter(char::is_ascii_lowercase) {
                v[(c as u8 - b'a') as usize] += 1.0;
            }
            json!({"embedding": v})
        })
        .collect();
    Json(json!({"data": data}))
}

fn serve(mock: Mock) -> (String, Shared) {
    let shared: Shared = Arc::new(Mutex::new(mock));
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/images/generations", post(images))
        .route("/v1/embeddings", post(embeddings))
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
    (format!("http://{addr}/v1"), shared)
}

fn mock(captions: Captions) -> Mock {
    Mock {
        captions,
        caption_calls: 0,
        question_mentions_aspect: true,
        fail_all: false,
        auth: Vec::new(),
    }
}

fn backends(url: &str) -> Backends {
    let mut cfg = BackendConfig::remote(url);
    cfg.timeout_ms = 5_000;
    Backends::remote(&cfg).unwrap()
}

fn byte_image() -> ImageRecord {
    ImageRecord {
        round: 1,
        payload: ImagePayload::Bytes {
            media_type: "image/png".into(),
            data: b"pixels".to_vec(),
        },
        seed: 0,
        trajectory: None,
    }
}

#[test]
fn full_round_against_mock() {
    let (url, shared) = serve(mock(Captions::Complete));
    let engine = Engine::new(backends(&url));
    let state = SessionState::new("r", AspectSchema::default_schema(), 3);
    let out = engine
        .run_round(&state, UserInput::Text("a red parrot on a branch".into()))
        .unwrap();
    assert_eq!(out.record.prompt.text, "a red parrot on a branch");
    let ImagePayload::Bytes { data, .. } = &out.record.image.payload else {
        panic!("expected bytes");
    };
    assert!(String::from_utf8_lossy(data).starts_with("img:a red parrot"));
    assert_eq!(out.record.captions.captions.len(), 7);
    assert_eq!(out.record.question.source, QuestionSource::Backend);
    assert!(out.record.question.text.contains(&out.record.question.aspect));
    assert_eq!(shared.lock().unwrap().caption_calls, 1);
    assert_eq!(out.events.len(), 6);
}

#[test]
fn question_mentions_the_chosen_aspect() {
    let (url, _) = serve(mock(Captions::Complete));
    let backends = backends(&url);
    let schema = AspectSchema::default_schema();
    let captions = backends.captioner.caption(&byte_image(), &schema).unwrap();
    let text = backends
        .questioner
        .as_ref()
        .unwrap()
        .write_question(&schema, &captions, "Color")
        .unwrap();
    assert!(text.contains("Color"), "{text}");
}

#[test]
fn question_without_the_aspect_falls_back_to_template() {
    let mut m = mock(Captions::Complete);
    m.question_mentions_aspect = false;
    let (url, _) = serve(m);
    let engine = Engine::new(backends(&url));
    let state = SessionState::new("r", AspectSchema::default_schema(), 3);
    let out = engine.run_round(&state, UserInput::Text("a parrot".into())).unwrap();
    let q = &out.record.question;
    assert_eq!(q.source, QuestionSource::Template);
    assert_eq!(q.text, format!("What should the {} of the image be?", q.aspect));
}

#[test]
fn captioner_reprompts_once_then_succeeds() {
    let (url, shared) = serve(mock(Captions::MissingOnce));
    let captions = backends(&url)
        .captioner
        .caption(&byte_image(), &AspectSchema::default_schema())
        .unwrap();
    assert_eq!(captions.captions["Color"], "some color");
    assert_eq!(shared.lock().unwrap().caption_calls, 2);
}

#[test]
fn captioner_gives_up_after_two_bad_replies() {
    let (url, shared) = serve(mock(Captions::AlwaysMissing));
    let err = backends(&url)
        .captioner
        .caption(&byte_image(), &AspectSchema::default_schema())
        .unwrap_err();
    assert!(matches!(err, BackendError::MissingAspect(ref a) if a == "Color"), "{err:?}");
    assert_eq!(shared.lock().unwrap().caption_calls, 2);
}

#[test]
fn embeddings_give_clamped_cosine() {
    let (url, _) = serve(mock(Captions::Complete));
    let e = backends(&url).embedder;
    assert!((e.similarity("parrot", "parrot").unwrap() - 1.0).abs() < 1e-12);
    let s = e.similarity("parrot", "xyz").unwrap();
    assert!((0.0..1.0).contains(&s));
}

#[test]
fn server_errors_surface_as_unavailable() {
    let mut m = mock(Captions::Complete);
    m.fail_all = true;
    let (url, _) = serve(m);
    let engine = Engine::new(backends(&url));
    let state = SessionState::new("r", AspectSchema::default_schema(), 3);
    let err = engine.run_round(&state, UserInput::Text("a parrot".into())).unwrap_err();
    assert!(matches!(
        err,
        EngineError::Backend {
            source: BackendError::Unavailable(_),
            ..
        }
    ));
}

#[test]
fn unreachable_server_is_unavailable() {
    // bind then drop to find a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = BackendConfig::remote(format!("http://127.0.0.1:{port}"));
    cfg.timeout_ms = 500;
    let b = Backends::remote(&cfg).unwrap();
    let started = std::time::Instant::now();
    let schema = AspectSchema::default_schema();
    let prompt = reflex_core::types::PromptRecord {
        round: 1,
        text: "x".into(),
        structured: None,
    };
    let err = b.generator.generate(&schema, &prompt, 1).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable(_)));
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    let (url, shared) = serve(mock(Captions::Complete));
    let mut cfg = BackendConfig::remote(&url);
    cfg.api_key = Some("sk-test".into());
    let b = Backends::remote(&cfg).unwrap();
    b.captioner.caption(&byte_image(), &AspectSchema::default_schema()).unwrap();
    assert_eq!(shared.lock().unwrap().auth, vec!["Bearer sk-test".to_string()]);
}
