use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use sati_core::session::SessionService;
use sati_server::{api, app, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn router() -> Router {
    api(AppState::new(Arc::new(SessionService::mock())))
}

async fn call(r: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = raw(r, method, uri, body, &[]).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

async fn raw(
    r: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    headers: &[(&str, &str)],
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = r.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn inputs(goal: &str) -> Value {
    json!({ "mood": "negative", "goal": goal, "duration_min": 10, "technique": "Noting" })
}

#[tokio::test]
async fn mindful_session_over_http() {
    let r = router();
    let (st, user) = call(&r, Method::POST, "/users", Some(json!({ "display_name": "Ana", "reminder_time": "07:30" }))).await;
    assert_eq!(st, StatusCode::CREATED);
    let uid = user["user_id"].as_str().unwrap().to_string();
    let (st, s) = call(&r, Method::POST, "/sessions", Some(json!({ "user_id": uid }))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(s["condition"], "mindful");
    let sid = s["session_id"].as_str().unwrap().to_string();
    let base = format!("/sessions/{sid}");

    let (st, s) = call(&r, Method::PUT, &format!("{base}/inputs"), Some(inputs("Sleep"))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(s["state"], "InputsSet");

    let (st, open) = call(&r, Method::POST, &format!("{base}/reflection/open"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(open["message"]["content"].as_str().unwrap().starts_with("I'm really sorry to hear you're not feeling well"));
    let turn = json!({ "message": "I keep waking up at night", "mode": "present" });
    let (st, reply) = call(&r, Method::POST, &format!("{base}/reflection/turn"), Some(turn)).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(reply["mode"], "present");
    let (st, _) = call(&r, Method::POST, &format!("{base}/generate"), None).await;
    assert_eq!(st, StatusCode::CONFLICT, "generate with an open reflection");
    let (st, _) = call(&r, Method::POST, &format!("{base}/reflection/close"), None).await;
    assert_eq!(st, StatusCode::OK);

    let (st, out) = call(&r, Method::POST, &format!("{base}/generate"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(out["script_ref"], format!("session:{sid}"));
    assert_eq!(out["delivered"]["check_report"]["passed"], true);
    let (st, deck) = call(&r, Method::GET, &format!("{base}/cards"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(!deck["cards"].as_array().unwrap().is_empty());

    let (st, wav) = raw(&r, Method::GET, &format!("{base}/audio"), None, &[]).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(&wav[..4], b"RIFF");
    let (st, _) = call(&r, Method::POST, &format!("{base}/finish"), None).await;
    assert_eq!(st, StatusCode::OK);
    let (st, done) = call(&r, Method::POST, &format!("{base}/feedback"), Some(json!({ "rating": 5, "text": "Rested." }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(done["state"], "Completed");
    assert!(done["summary"]["summary_text"].as_str().unwrap().contains("Sleep"));

    let (st, menu) = call(&r, Method::GET, &format!("/menu-order?user_id={uid}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(menu["goals"][0], "Sleep");
    let (st, rem) =
        call(&r, Method::GET, &format!("/users/{uid}/next-reminder?now=2024-04-01T08:00:00Z"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(rem["next"], "2024-04-02T07:30:00Z");
}

#[tokio::test]
async fn static_condition_over_http() {
    let r = router();
    let (_, user) = call(&r, Method::POST, "/users", Some(json!({ "display_name": "Ben" }))).await;
    let uid = user["user_id"].as_str().unwrap();
    let (_, s) = call(&r, Method::POST, "/sessions", Some(json!({ "user_id": uid, "condition": "static" }))).await;
    let base = format!("/sessions/{}", s["session_id"].as_str().unwrap());
    call(&r, Method::PUT, &format!("{base}/inputs"), Some(inputs("Sleep"))).await;
    let (st, _) = call(&r, Method::POST, &format!("{base}/reflection/open"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, out) = call(&r, Method::POST, &format!("{base}/generate"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(out["delivered"]["kind"], "template");
    assert!(out["script_ref"].as_str().unwrap().starts_with("template:"));
    let ms = out["delivered"]["pseudo_delay_ms"].as_u64().unwrap();
    assert!((8_000..=15_000).contains(&ms));
}

#[tokio::test]
async fn error_statuses() {
    let r = router();
    let (st, body) = call(&r, Method::GET, "/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    let (st, _) = call(&r, Method::POST, "/sessions", Some(json!({ "user_id": "ghost" }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (_, user) = call(&r, Method::POST, "/users", Some(json!({ "display_name": "Cy" }))).await;
    let uid = user["user_id"].as_str().unwrap();
    let (_, s) = call(&r, Method::POST, "/sessions", Some(json!({ "user_id": uid }))).await;
    let base = format!("/sessions/{}", s["session_id"].as_str().unwrap());
    let (st, _) = call(&r, Method::PUT, &format!("{base}/inputs"), Some(inputs("Not A Goal"))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&r, Method::POST, &format!("{base}/generate"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call(&r, Method::POST, &format!("{base}/reflection/dance"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&r, Method::POST, "/users", Some(json!({ "display_name": "D", "reminder_time": "25:00" }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&r, Method::GET, "/analytics/engagement?from=2024-04-10&to=2024-04-01", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, a) = call(&r, Method::POST, &format!("{base}/abandon"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(a["state"], "Abandoned");
    let (st, _) = call(&r, Method::POST, &format!("{base}/abandon"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
}

#[tokio::test]
async fn checkins_engagement_and_concepts() {
    let r = router();
    let (_, user) = call(&r, Method::POST, "/users", Some(json!({ "display_name": "Di" }))).await;
    let uid = user["user_id"].as_str().unwrap();
    let c = json!({ "user_id": uid, "date": "2024-04-01", "sleep": 3, "mood": 4, "focus": 2 });
    let (st, _) = call(&r, Method::POST, "/checkins", Some(c)).await;
    assert_eq!(st, StatusCode::CREATED);
    let c = json!({ "user_id": uid, "date": "2024-04-01", "sleep": 0, "mood": 4, "focus": 2 });
    let (st, _) = call(&r, Method::POST, "/checkins", Some(c)).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);

    let (st, eng) =
        call(&r, Method::GET, "/analytics/engagement?from=2024-04-01&to=2024-04-15&condition=mindful", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(eng.is_object());
    let (st, concepts) = call(&r, Method::GET, "/concepts", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(concepts.as_array().unwrap().len(), 8);
}

#[tokio::test]
async fn api_key_guards_everything_but_health() {
    let mut state = AppState::new(Arc::new(SessionService::mock()));
    state.api_key = Some("s3cret".into());
    let r = api(state);
    let (st, _) = raw(&r, Method::GET, "/health", None, &[]).await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = raw(&r, Method::GET, "/concepts", None, &[]).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = raw(&r, Method::GET, "/concepts", None, &[("x-api-key", "wrong")]).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = raw(&r, Method::GET, "/concepts", None, &[("x-api-key", "s3cret")]).await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = raw(&r, Method::GET, "/concepts", None, &[("authorization", "Bearer s3cret")]).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test]
async fn serves_client_bundle_with_spa_fallback() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<!doctype html><title>app</title>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let r = app(AppState::new(Arc::new(SessionService::mock())), Some(dir.path().to_path_buf()));
    let (st, body) = raw(&r, Method::GET, "/app.js", None, &[]).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, b"console.log(1)");
    let (_, body) = raw(&r, Method::GET, "/session/abc", None, &[]).await;
    assert!(String::from_utf8(body).unwrap().contains("<title>app</title>"));
    let (st, _) = raw(&r, Method::GET, "/health", None, &[]).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn real_socket_round_trip() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(async move { axum::serve(listener, router()).await });
    let body = tokio::task::spawn_blocking(move || {
        ureq::get(&format!("http://{addr}/health")).call().unwrap().body_mut().read_to_string().unwrap()
    })
    .await
    .unwrap();
    assert!(body.contains("ok"));
    server.abort();
}
