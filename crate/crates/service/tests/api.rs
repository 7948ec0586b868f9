use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use converse_core::agent::Agent;
use converse_core::catalog::{generate_synthetic, Catalog, SyntheticSpec};
use converse_core::checkpoint::Manifest;
use converse_core::encoder::EncoderConfig;
use converse_core::env::{trace_to_jsonl, Action, ActionKind, Env, EpisodeConfig, Status, UserResponse};
use converse_core::params::ParamSet;
use converse_core::training::Mode;
use converse_service::{router, AppState, Registry, SessionView};
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn catalog() -> Catalog {
    generate_synthetic(&SyntheticSpec { n_users: 6, n_items: 30, n_types: 4, n_values_per_type: 3, values_per_item: 4, interactions_per_user: 4, seed: 2 }).unwrap()
}

fn app_with(idle: Duration) -> (Arc<AppState>, Catalog) {
    let c = catalog();
    let enc = EncoderConfig { d: 8, heads: 2, ..Default::default() };
    let mut params = ParamSet::default();
    let agent = Agent::register(&mut params, &enc, c.entity_index(), 16, &mut ChaCha8Rng::seed_from_u64(3));
    let manifest = Manifest::new(&enc, 16, &c, 1, 0, Mode::Sapient, 3);
    let mut reg = Registry::new();
    reg.add_catalog("demo", c.clone());
    reg.add_checkpoint("ck", "demo", manifest, agent, params).unwrap();
    (AppState::new(reg, EpisodeConfig::default(), idle), c)
}

fn app() -> (Arc<AppState>, Catalog) {
    app_with(Duration::from_secs(1800))
}

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let res = router(app.clone(), None).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into())))
}

fn view(v: Value) -> SessionView {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn listings() {
    let (app, c) = app();
    let (s, cats) = call(&app, "GET", "/catalogs", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(cats[0]["id"], "demo");
    assert_eq!(cats[0]["n_items"], c.n_items());
    let (s, cks) = call(&app, "GET", "/checkpoints", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(cks[0]["catalog_id"], "demo");
    assert_eq!(cks[0]["manifest"]["catalog_fingerprint"], c.fingerprint());
}

#[tokio::test]
async fn fresh_session_and_errors() {
    let (app, _) = app();
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({"catalog_id": "demo", "checkpoint_id": "ck", "user": 0}))).await;
    assert_eq!(s, StatusCode::OK);
    let v = view(v);
    assert_eq!((v.turn, v.status, v.transcript.len()), (0, Status::Running, 1));
    let d = v.diagnostics.unwrap();
    assert!((d.pi[0] + d.pi[1] - 1.0).abs() < 1e-12);
    assert!(v.pending.is_some());

    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"catalog_id": "demo", "checkpoint_id": "nope", "user": 0}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"catalog_id": "demo", "checkpoint_id": "ck", "seed_value": 999}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/sessions/s999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", &format!("/sessions/{}/response", v.session_id), Some(json!({"bogus": 1}))).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn same_inputs_give_same_first_action() {
    let (app, _) = app();
    let body = json!({"catalog_id": "demo", "checkpoint_id": "ck", "user": 2, "seed": 5});
    let a = view(call(&app, "POST", "/sessions", Some(body.clone())).await.1);
    let b = view(call(&app, "POST", "/sessions", Some(body)).await.1);
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.pending, b.pending);
    assert_eq!(a.seed_value, b.seed_value);
}

/// Drives a human-mode session with scripted answers and replays it on a bare env.
#[tokio::test]
async fn human_session_matches_env_replay() {
    let (app, c) = app();
    let targets = c.user_items(1).to_vec();
    let mut v = view(call(&app, "POST", "/sessions", Some(json!({"catalog_id": "demo", "checkpoint_id": "ck", "targets": targets, "seed": 1}))).await.1);
    let episode = EpisodeConfig::default();
    let env = Env::new(&c, &episode);
    let mut state = env.init_with_seed(0, v.seed_value);
    let mut total = 0.0;
    while v.status == Status::Running {
        let p = v.pending.clone().unwrap();
        // answer as the rule-based user would, but through the API
        let (body, action) = match p.kind {
            ActionKind::Ask => {
                let acc: Vec<usize> = p.ids.iter().copied().filter(|&x| targets.iter().any(|&t| c.item_has_value(t, x))).collect();
                (json!({ "accepted": acc }), Action::Ask(p.ids.clone()))
            }
            ActionKind::Rec => {
                let hit: Vec<usize> = p.ids.iter().copied().filter(|x| targets.contains(x)).collect();
                let body = if hit.is_empty() { json!({"rejected": true}) } else { json!({ "accepted": hit }) };
                (body, Action::Rec(p.ids.clone()))
            }
        };
        let (s, next) = call(&app, "POST", &format!("/sessions/{}/response", v.session_id), Some(body)).await;
        assert_eq!(s, StatusCode::OK, "{next}");
        v = view(next);
        let step = env.step(&state, &action, &targets).unwrap();
        state = step.next;
        total += step.reward;
        assert_eq!(v.candidate_items, state.candidate_items.len());
        assert_eq!(v.candidate_values, state.candidate_values.len());
        assert_eq!(v.turn, state.turn);
        assert!((v.total_reward - total).abs() < 1e-12);
        assert!(v.turn <= episode.t_max);
    }
    assert!(v.pending.is_none());
    let (_, got) = call(&app, "GET", &format!("/sessions/{}", v.session_id), None).await;
    let got = view(got);
    assert_eq!(got.transcript, v.transcript);
    let (_, trace) = call(&app, "GET", &format!("/sessions/{}/trace", v.session_id), None).await;
    assert_eq!(trace.as_str().unwrap(), trace_to_jsonl(&got.transcript));
    let (s, _) = call(&app, "POST", &format!("/sessions/{}/response", v.session_id), Some(json!({"rejected": true}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn rejecting_everything_fails_at_the_turn_limit() {
    let (app, _) = app();
    // no declared targets: every question is declined and every list rejected
    let mut v = view(call(&app, "POST", "/sessions", Some(json!({"catalog_id": "demo", "checkpoint_id": "ck", "seed_value": 0}))).await.1);
    while v.status == Status::Running {
        let body = match v.pending.as_ref().unwrap().kind {
            ActionKind::Ask => json!({"accepted": []}),
            ActionKind::Rec => json!({"rejected": true}),
        };
        v = view(call(&app, "POST", &format!("/sessions/{}/response", v.session_id), Some(body)).await.1);
    }
    assert_eq!(v.status, Status::Fail);
    assert!(v.turn <= 15);
    let last = v.transcript.last().unwrap();
    let base = if last.kind == "ask" { -0.1 * last.payload.len() as f64 } else { -0.1 };
    assert!((last.reward - (base - 0.3)).abs() < 1e-12, "{last:?}");
}

#[tokio::test]
async fn simulated_session_runs_one_turn_per_request() {
    let (app, c) = app();
    let targets = c.user_items(3).to_vec();
    let v = view(call(&app, "POST", "/sessions", Some(json!({"catalog_id": "demo", "checkpoint_id": "ck", "targets": targets, "simulated": true}))).await.1);
    let p = v.pending.clone().unwrap();
    let next = view(call(&app, "POST", &format!("/sessions/{}/response", v.session_id), Some(json!({}))).await.1);
    assert_eq!(next.turn, 1);
    let env_cfg = EpisodeConfig::default();
    let env = Env::new(&c, &env_cfg);
    let action = match p.kind {
        ActionKind::Ask => Action::Ask(p.ids),
        ActionKind::Rec => Action::Rec(p.ids),
    };
    let expected = env.simulate_user(&action, &targets);
    let got = &next.transcript[1];
    match expected {
        UserResponse::Ask { accepted, .. } => assert_eq!(got.accepted, accepted),
        UserResponse::Rec { hit } => assert_eq!(got.accepted.is_empty(), !hit),
    }
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"catalog_id": "demo", "checkpoint_id": "ck", "simulated": true}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let (app, _) = app_with(Duration::from_millis(50));
    call(&app, "POST", "/sessions", Some(json!({"catalog_id": "demo", "checkpoint_id": "ck", "user": 0}))).await;
    assert_eq!(app.session_count(), 1);
    assert_eq!(app.expire(Instant::now()), 0);
    assert_eq!(app.expire(Instant::now() + Duration::from_millis(100)), 1);
    assert_eq!(app.session_count(), 0);
}

#[tokio::test]
async fn ui_assets_are_served() {
    let (app, _) = app();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>hi</html>").unwrap();
    let res = router(app, Some(dir.path().to_path_buf())).oneshot(Request::get("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"<html>hi</html>");
}
