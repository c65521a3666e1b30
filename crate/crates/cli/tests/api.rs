use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use counsel_cli::{main_with, server::router, synthetic_config};
use counsel_core::adjudication::ConceptMap;
use counsel_core::review::ReviewService;
use counsel_core::synth::{generate_synthetic_corpus, GroundTruth, SyntheticCorpusSpec, TRUTH_FILE};
use counsel_core::util::read_json;

/// Corpus plus a manual-policy run stopped at review.
fn blocked(dir: &Path) -> (std::path::PathBuf, GroundTruth) {
    let spec = SyntheticCorpusSpec { n_rcs: 16, n_vbac: 4, ..Default::default() };
    let corpus = dir.join("corpus");
    generate_synthetic_corpus(&spec).unwrap().write_to(&corpus).unwrap();
    let config = dir.join("pipeline.toml");
    let text = synthetic_config(&corpus, &dir.join("run")).replace("auto_resolve", "manual");
    std::fs::write(&config, text).unwrap();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(["counsel", "run", "-c", config.to_str().unwrap()], &mut out, &mut err);
    assert_eq!(code, 4, "{}", String::from_utf8_lossy(&err));
    (config, read_json(&corpus.join(TRUTH_FILE)).unwrap())
}

fn app(dir: &Path, token: Option<&str>) -> Router {
    let svc = ReviewService::open(&dir.join("run"), ConceptMap::default()).unwrap();
    router(svc, token.map(str::to_string), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

fn encode(id: &str) -> String {
    id.bytes()
        .map(|b| if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) { (b as char).to_string() } else { format!("%{b:02X}") })
        .collect()
}

#[tokio::test]
async fn review_flow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (config, truth) = blocked(dir.path());
    let app = app(dir.path(), None);

    let (s, page) = call(&app, "GET", "/api/tasks?status=pending&page_size=500", None, None).await;
    assert_eq!(s, StatusCode::OK);
    let tasks = page["tasks"].as_array().unwrap().clone();
    assert!(!tasks.is_empty());
    assert_eq!(page["total"].as_u64().unwrap() as usize, tasks.len());

    let (s, status) = call(&app, "GET", "/api/cohort/status", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(status["ready"], json!(false));

    let (s, agg) = call(&app, "GET", "/api/audit/aggregates", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(agg["pending_flags"].as_u64().unwrap() > 0);

    for t in &tasks {
        let id = t["task_id"].as_str().unwrap();
        let (s, one) = call(&app, "GET", &format!("/api/tasks/{}", encode(id)), None, None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(one["task_id"], t["task_id"]);
        assert!(!one["candidates"].as_array().unwrap().is_empty());
        assert!(one["note_context"].is_string());

        let decision = match t["subject"]["kind"].as_str().unwrap() {
            "flag" => {
                let rid = t["subject"]["audit"]["record_id"].as_str().unwrap().into();
                let extracted = t["subject"]["audit"]["extracted"].as_str().unwrap();
                truth.answer_for(&rid, extracted).unwrap().to_string()
            }
            _ => {
                let rid: counsel_core::RecordId = t["subject"]["record_id"].as_str().unwrap().into();
                truth.consult_decisions[&rid].to_string()
            }
        };
        let (s, resolved) = call(
            &app,
            "POST",
            &format!("/api/tasks/{}/resolution", encode(id)),
            Some(json!({"decision": decision, "reviewer_note": "checked"})),
            None,
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{resolved}");
        assert_eq!(resolved["status"], json!("resolved"));
        assert_eq!(resolved["reviewer_note"], json!("checked"));
    }

    let (_, status) = call(&app, "GET", "/api/cohort/status", None, None).await;
    assert_eq!(status["ready"], json!(true));
    let (_, events) = call(&app, "GET", "/api/events?since=0", None, None).await;
    assert!(events.as_array().unwrap().iter().any(|e| e["event"] == json!("resolved")));

    // The CLI now runs to completion from the same log.
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(["counsel", "run", "-c", config.to_str().unwrap()], &mut out, &mut err);
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    let out = String::from_utf8(out).unwrap();
    assert!(out.contains("audit: reused") && out.contains("finalize: ran"), "{out}");
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    blocked(dir.path());
    let app = app(dir.path(), None);
    let (s, _) = call(&app, "GET", "/api/tasks/nope", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/api/tasks/nope/resolution", Some(json!({"decision": "Hallucination"})), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, page) = call(&app, "GET", "/api/tasks?kind=flag", None, None).await;
    let id = encode(page["tasks"][0]["task_id"].as_str().unwrap());
    let (s, _) = call(&app, "POST", &format!("/api/tasks/{id}/resolution"), Some(json!({"decision": "Excluded"})), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", &format!("/api/tasks/{id}/resolution"), Some(json!({"decision": "Maybe"})), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "GET", "/api/tasks?page=0", None, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/api/tasks?status=bogus", None, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn bearer_token_guards_the_api() {
    let dir = tempfile::tempdir().unwrap();
    blocked(dir.path());
    let app = app(dir.path(), Some("s3cret"));
    let (s, _) = call(&app, "GET", "/api/tasks", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(&app, "GET", "/api/tasks", None, Some("wrong")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(&app, "GET", "/api/tasks", None, Some("s3cret")).await;
    assert_eq!(s, StatusCode::OK);
    let (s, body) = call(&app, "GET", "/api/health", None, None).await;
    assert_eq!((s, body), (StatusCode::OK, json!("ok")));
}
