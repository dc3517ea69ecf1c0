use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tower::ServiceExt;

use reflex_core::backends::{BackendConfig, Backends, ToyGenerator};
use reflex_core::dpo::{DiffusionSchedule, PolicyParams, TrainerConfig};
use reflex_core::store::replay_file;
use reflex_core::toyworld::ToyWorldConfig;
use reflex_core::types::AspectVector;
use reflex_core::{AspectSchema, Engine, SessionState, UserInput};
use reflex_service::render::RoundView;
use reflex_service::{router, AppState, ServiceConfig};

struct Harness {
    app: Arc<AppState>,
    router: Router,
    _dir: tempfile::TempDir,
}

fn harness_with(tweak: impl FnOnce(&mut ServiceConfig)) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::new(dir.path());
    cfg.trainer = TrainerConfig {
        epochs: 3,
        prompts_per_epoch: 10,
        ..TrainerConfig::default()
    };
    tweak(&mut cfg);
    let app = AppState::open(cfg).unwrap();
    Harness {
        router: router(app.clone()),
        app,
        _dir: dir,
    }
}

fn harness() -> Harness {
    harness_with(|_| {})
}

async fn call(router: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn create(router: &Router, body: Value) -> String {
    let (status, v) = call(router, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn events(router: &Router, id: &str, since: u64) -> Vec<Value> {
    let (status, v) = call(router, "GET", &format!("/sessions/{id}/events?since={since}"), None).await;
    assert_eq!(status, StatusCode::OK);
    v["events"].as_array().unwrap().clone()
}

fn types(events: &[Value]) -> Vec<String> {
    events.iter().map(|e| e["type"].as_str().unwrap().to_string()).collect()
}

/// Remote endpoints: `hang` accepts connections and never answers.
async fn mock_remote(hang: bool) -> String {
    async fn chat(Json(body): Json<Value>) -> Json<Value> {
        let messages = body["messages"].as_array().unwrap();
        let system = messages[0]["content"].as_str().unwrap();
        let last = messages.last().unwrap()["content"].as_str().unwrap();
        let schema = AspectSchema::default_schema();
        let text = if system.contains("image evaluator") {
            let obj: serde_json::Map<String, Value> =
                schema.aspects.iter().map(|a| (a.clone(), json!(format!("a {a}")))).collect();
            Value::Object(obj).to_string()
        } else if system.contains("Ask one short question") {
            let a = schema.aspects.iter().find(|a| last.contains(&format!("\"{a}\""))).unwrap();
            format!("What {a} do you want?")
        } else {
            last.to_string()
        };
        Json(json!({"choices": [{"message": {"content": text}}]}))
    }
    async fn images() -> Json<Value> {
        Json(json!({"image_base64": "aGVsbG8=", "media_type": "image/png"}))
    }
    async fn embeddings(Json(body): Json<Value>) -> Json<Value> {
        let n = body["input"].as_array().unwrap().len();
        Json(json!({"data": vec![json!({"embedding": [1.0, 0.0]}); n]}))
    }
    async fn never() -> Json<Value> {
        tokio::time::sleep(Duration::from_secs(3600)).await;
        Json(json!({}))
    }
    let app = if hang {
        Router::new().fallback(post(never))
    } else {
        Router::new()
            .route("/chat/completions", post(chat))
            .route("/images/generations", post(images))
            .route("/embeddings", post(embeddings))
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn dead_url() -> String {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    format!("http://127.0.0.1:{port}")
}

fn remote_cfg(url: &str, timeout_ms: u64) -> impl FnOnce(&mut ServiceConfig) {
    let url = url.to_string();
    move |cfg| {
        cfg.backend = BackendConfig::remote(url);
        cfg.backend.timeout_ms = timeout_ms;
    }
}

#[tokio::test]
async fn fresh_toy_session() {
    let h = harness();
    let (status, v) = call(&h.router, "POST", "/sessions", Some(json!({"schema": "default", "mode": "toy"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["round"], 0);
    assert_eq!(v["status"], "open");
    assert_eq!(v["pairs_until_training"], 40);
    let id = v["id"].as_str().unwrap();
    let evs = events(&h.router, id, 0).await;
    assert_eq!(types(&evs), ["session_created"]);
    assert!(events(&h.router, id, 1).await.is_empty());
}

#[tokio::test]
async fn unknown_schema_is_rejected() {
    let h = harness();
    let (status, v) = call(&h.router, "POST", "/sessions", Some(json!({"schema": "foo"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "UnknownSchema");
}

#[tokio::test]
async fn persona_selects_remote_model() {
    let h = harness_with(remote_cfg("http://127.0.0.1:9", 1000));
    let (status, v) = call(&h.router, "POST", "/sessions", Some(json!({"persona": "B", "mode": "remote"}))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    assert_eq!(v["model_name"], "persona-b");
    assert_eq!(v["persona"], "B");
    let (status, v) = call(&h.router, "POST", "/sessions", Some(json!({"persona": "Z", "mode": "remote"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "UnknownPersona");
}

#[tokio::test]
async fn schema_listing() {
    let h = harness();
    let (status, v) = call(&h.router, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = v["schemas"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"default") && names.contains(&"fashion"));
}

#[tokio::test]
async fn first_round_matches_engine_run() {
    let h = harness();
    let id = create(&h.router, json!({"seed": 42})).await;
    let (status, v) = call(
        &h.router,
        "POST",
        &format!("/sessions/{id}/message"),
        Some(json!({"assignment": {"Content": "parrot"}})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let got: RoundView = serde_json::from_value(v).unwrap();

    // the same round computed directly
    let schema = AspectSchema::default_schema();
    let state = SessionState::new(id.clone(), schema.clone(), 42);
    let policy = PolicyParams::zeros(2, DiffusionSchedule::standard());
    let engine = Engine::new(Backends::toy(ToyGenerator::with_policy(ToyWorldConfig::default(), policy)));
    let input = UserInput::Assignment(AspectVector::parse_assignment(&schema, "Content=parrot").unwrap());
    let out = engine.run_round(&state, input).unwrap();
    assert_eq!(got, RoundView::new(&schema, &out.record));
    assert_eq!(got.round, 1);
    assert_ne!(got.question.aspect, "Content");
    assert!(got.has_trajectory);

    let evs = events(&h.router, &id, 0).await;
    assert_eq!(
        types(&evs),
        ["session_created", "user_message", "prompt", "generation", "caption", "ambiguity", "question"]
    );
    let (_, s) = call(&h.router, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["round"], 1);
    assert_eq!(s["open_question"]["aspect"], got.question.aspect);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let h = harness();
    for (method, uri, body) in [
        ("POST", "/sessions/nope/message", Some(json!({"text": "hi"}))),
        ("POST", "/sessions/nope/preference", Some(json!({"winner_round": 1, "loser_round": 2}))),
        ("POST", "/sessions/nope/refine", Some(json!({"tool": "aae"}))),
        ("GET", "/sessions/nope", None),
        ("GET", "/sessions/nope/events", None),
    ] {
        let (status, v) = call(&h.router, method, uri, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["error"], "SessionNotFound");
    }
}

#[tokio::test]
async fn bad_input_is_400_and_changes_nothing() {
    let h = harness();
    let id = create(&h.router, json!({})).await;
    for body in [json!({}), json!({"text": "  "}), json!({"assignment": "Colour=red"}), json!({"text": "a", "assignment": "Color=red"})] {
        let (status, _) = call(&h.router, "POST", &format!("/sessions/{id}/message"), Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
    }
    assert_eq!(events(&h.router, &id, 0).await.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn backend_down_is_502_and_state_unchanged() {
    let h = harness_with(remote_cfg(&dead_url(), 500));
    let id = create(&h.router, json!({"mode": "remote"})).await;
    let (status, v) = call(&h.router, "POST", &format!("/sessions/{id}/message"), Some(json!({"text": "a parrot"}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{v}");
    assert_eq!(v["error"], "BackendUnavailable");
    let (_, s) = call(&h.router, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["round"], 0);
    assert_eq!(s["status"], "open");
    assert_eq!(events(&h.router, &id, 0).await.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_messages_get_409() {
    let url = mock_remote(true).await;
    let h = harness_with(remote_cfg(&url, 1500));
    let id = create(&h.router, json!({"mode": "remote"})).await;
    let router = h.router.clone();
    let uri = format!("/sessions/{id}/message");
    let first = tokio::spawn({
        let uri = uri.clone();
        async move { call(&router, "POST", &uri, Some(json!({"text": "slow"}))).await }
    });
    let started = Instant::now();
    loop {
        let (_, s) = call(&h.router, "GET", &format!("/sessions/{id}"), None).await;
        if s["status"] == "busy" {
            break;
        }
        assert!(started.elapsed() < Duration::from_secs(1), "round never started");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let (status, v) = call(&h.router, "POST", &uri, Some(json!({"text": "second"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "RoundInFlight");
    let (status, _) = call(&h.router, "POST", &format!("/sessions/{id}/preference"), Some(json!({"winner_round": 1, "loser_round": 2}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = first.await.unwrap();
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(events(&h.router, &id, 0).await.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn remote_rounds_have_no_trajectories() {
    let url = mock_remote(false).await;
    let h = harness_with(remote_cfg(&url, 5000));
    let id = create(&h.router, json!({"mode": "remote", "persona": "A"})).await;
    for text in ["a parrot", "make it red"] {
        let (status, v) = call(&h.router, "POST", &format!("/sessions/{id}/message"), Some(json!({"text": text}))).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["image"]["kind"], "bytes");
        assert_eq!(v["question"]["source"], "backend");
    }
    let (status, v) = call(&h.router, "POST", &format!("/sessions/{id}/preference"), Some(json!({"winner_round": 1, "loser_round": 2}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "MissingTrajectory");
    for tool in ["dpo", "aae"] {
        let (status, v) = call(&h.router, "POST", &format!("/sessions/{id}/refine"), Some(json!({"tool": tool}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(v["error"], "ToolUnavailable");
    }
    // image bytes are served back by hash
    let (_, s) = call(&h.router, "GET", &format!("/sessions/{id}"), None).await;
    let url = s["rounds"][0]["image"]["url"].as_str().unwrap().to_string();
    let resp = h.router.clone().oneshot(Request::get(&url).body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    assert_eq!(&bytes[..], b"hello");
}

async fn toy_rounds(router: &Router, id: &str, n: usize) {
    let answers = ["Content=parrot", "Color=red", "Style=2", "Size=1", "Background=3", "Other=4"];
    for a in answers.iter().take(n) {
        let (status, v) = call(router, "POST", &format!("/sessions/{id}/message"), Some(json!({"assignment": a}))).await;
        assert_eq!(status, StatusCode::OK, "{v}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn preferences_trigger_training_at_batch_size() {
    let h = harness_with(|cfg| cfg.pairs_per_training = 4);
    let id = create(&h.router, json!({"seed": 5})).await;
    toy_rounds(&h.router, &id, 3).await;
    let uri = format!("/sessions/{id}/preference");

    let (status, v) = call(&h.router, "POST", &uri, Some(json!({"winner_round": 2, "loser_round": 2}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "SameRound");
    let (status, _) = call(&h.router, "POST", &uri, Some(json!({"winner_round": 1, "loser_round": 9}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let before = events(&h.router, &id, 0).await.len();
    let pairs = [(1, 2), (3, 1), (2, 3), (1, 3)];
    for (i, (w, l)) in pairs.iter().enumerate() {
        let (status, v) = call(&h.router, "POST", &uri, Some(json!({"winner_round": w, "loser_round": l}))).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["pair_count"], i + 1);
        assert_eq!(v["pairs_until_training"], 4 - (i + 1) % 4);
        assert_eq!(v["training"].is_null(), i < 3);
    }
    let evs = events(&h.router, &id, before as u64).await;
    let t = types(&evs);
    assert_eq!(&t[..4], ["preference"; 4]);
    assert_eq!(&t[4..], ["training_update"; 3]);
    assert_eq!(evs[4]["payload"]["pairs"], 4);

    // training moved the policy, so later rounds sample from it
    let policy = reflex_core::store::load_params(&h.app.dirs.policy(&id)).unwrap();
    assert!(policy.kl_to(&PolicyParams::zeros(2, DiffusionSchedule::standard())).unwrap() > 0.0);
    let (_, s) = call(&h.router, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["pairs"], 4);
    assert_eq!(s["pairs_until_training"], 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn refine_tools_in_toy_mode() {
    let h = harness_with(|cfg| cfg.neglect_prob = 0.2);
    let id = create(&h.router, json!({"seed": 11})).await;
    let uri = format!("/sessions/{id}/refine");

    let (status, v) = call(&h.router, "POST", &uri, Some(json!({"tool": "aae"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let (status, v) = call(&h.router, "POST", &uri, Some(json!({"tool": "dpo"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let (status, _) = call(&h.router, "POST", &uri, Some(json!({"tool": "paint"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    call(&h.router, "POST", &format!("/sessions/{id}/message"), Some(json!({"assignment": "Content=1, Style=2, Background=3"}))).await;
    let (status, v) = call(&h.router, "POST", &uri, Some(json!({"tool": "aae", "params": {"threshold": 0.9}}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["tool"], "aae");
    assert!(v["report"]["sim"].as_f64().unwrap() >= v["report"]["initial_sim"].as_f64().unwrap());

    // the same call through the library
    let schema = AspectSchema::default_schema();
    let (_, s) = call(&h.router, "GET", &format!("/sessions/{id}"), None).await;
    let prompt: AspectVector = serde_json::from_value(s["rounds"][0]["prompt_structured"].clone()).unwrap();
    let seed = s["rounds"][0]["image_seed"].as_u64().unwrap();
    let world = ToyWorldConfig::new(schema).with_neglect(0.2);
    let (image, report) = reflex_core::aae::run_tool(&prompt, seed, &reflex_core::aae::ToolConfig::with_threshold(0.9), &world).unwrap();
    assert_eq!(v["report"], serde_json::to_value(&report).unwrap());
    assert_eq!(v["image"]["card"]["vector"], serde_json::to_value(&image).unwrap());

    let (status, _) = call(&h.router, "POST", &uri, Some(json!({"tool": "aae", "params": {"threshold": 1.5}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    call(&h.router, "POST", &format!("/sessions/{id}/message"), Some(json!({"assignment": "Color=2"}))).await;
    call(&h.router, "POST", &format!("/sessions/{id}/preference"), Some(json!({"winner_round": 1, "loser_round": 2}))).await;
    let (status, v) = call(&h.router, "POST", &uri, Some(json!({"tool": "dpo", "params": {"epochs": 2, "prompts_per_epoch": 5}}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["training"]["steps"], 10);
    assert!((v["training"]["first_loss"].as_f64().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

    let t = types(&events(&h.router, &id, 0).await);
    assert!(t.contains(&"tool2_invocation".to_string()));
    assert_eq!(t.iter().filter(|x| *x == "training_update").count(), 2);
}

#[tokio::test]
async fn toy_images_are_served_as_cards() {
    let h = harness();
    let id = create(&h.router, json!({"seed": 3})).await;
    let (_, v) = call(&h.router, "POST", &format!("/sessions/{id}/message"), Some(json!({"assignment": "Color=blue"}))).await;
    let url = v["image"]["url"].as_str().unwrap();
    let (status, card) = call(&h.router, "GET", url, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(card["cells"].as_array().unwrap().len(), 7);
    assert_eq!(card["cells"][4]["label"], "blue");
    assert_eq!(card, v["image"]["card"]);

    let (status, _) = call(&h.router, "GET", &format!("/images/{}", "0".repeat(64)), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&h.router, "GET", "/images/../etc", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn long_poll_waits_for_new_events() {
    let h = harness();
    let id = create(&h.router, json!({})).await;

    let started = Instant::now();
    let (_, v) = call(&h.router, "GET", &format!("/sessions/{id}/events?since=1&timeout_ms=150"), None).await;
    assert!(v["events"].as_array().unwrap().is_empty());
    assert_eq!(v["last_seq"], 1);
    assert!(started.elapsed() >= Duration::from_millis(150));

    let router = h.router.clone();
    let poll_uri = format!("/sessions/{id}/events?since=1&timeout_ms=5000");
    let poll = tokio::spawn(async move { call(&router, "GET", &poll_uri, None).await });
    tokio::time::sleep(Duration::from_millis(50)).await;
    call(&h.router, "POST", &format!("/sessions/{id}/message"), Some(json!({"text": "hello"}))).await;
    let (_, v) = poll.await.unwrap();
    let evs = v["events"].as_array().unwrap();
    assert_eq!(evs.len(), 6);
    assert_eq!(evs[0]["seq"], 2);
    assert_eq!(v["last_seq"], 7);
}

#[tokio::test]
async fn reads_do_not_mutate() {
    let h = harness();
    let id = create(&h.router, json!({})).await;
    toy_rounds(&h.router, &id, 1).await;
    let log = std::fs::read(h.app.dirs.session_log(&id)).unwrap();
    for uri in [format!("/sessions/{id}"), format!("/sessions/{id}/events"), "/schema".into()] {
        call(&h.router, "GET", &uri, None).await;
    }
    assert_eq!(std::fs::read(h.app.dirs.session_log(&id)).unwrap(), log);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig::new(dir.path());
    let (id, before_view, before_events) = {
        let app = AppState::open(cfg.clone()).unwrap();
        let r = router(app);
        let id = create(&r, json!({"seed": 8})).await;
        toy_rounds(&r, &id, 2).await;
        let (_, view) = call(&r, "GET", &format!("/sessions/{id}"), None).await;
        (id.clone(), view, events(&r, &id, 0).await)
    };
    let app = AppState::open(cfg).unwrap();
    let r = router(app.clone());
    let (_, view) = call(&r, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(view, before_view);
    assert_eq!(events(&r, &id, 0).await, before_events);
    // the log on disk folds to the served state
    let state = replay_file(&app.dirs.session_log(&id), Some(&app.blobs)).unwrap();
    assert_eq!(state.current_round(), 2);
    toy_rounds(&r, &id, 1).await;
    assert_eq!(events(&r, &id, 13).await.len(), 6);
}
