use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use dpsir_api::{router, AppState};
use dpsir_core::engine::Workbench;
use dpsir_core::fixtures::{self, FixtureCorpus, V_INDICATORS, V_LINKS, V_VARIABLES};
use dpsir_core::store::Workspace;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn fixture_state(dir: &Path) -> AppState {
    let corpus = FixtureCorpus::read_dir(&fixtures::shipped_dir()).unwrap();
    let wb = fixtures::run_fixture_pipeline(&corpus, dir).await.unwrap();
    AppState::new(wb)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes, _) = call_raw(app, method, uri, body, None).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn call_raw(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_owned());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_version() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(fixture_state(dir.path()).await);
    let (status, body) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test(flavor = "multi_thread")]
async fn dpsir_layout_with_hidden_blocks_spaces_the_rest_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(fixture_state(dir.path()).await);
    let (status, body) = call(&app, Method::GET, "/layouts/dpsir?hide=State,Impact", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["layout"]["kind"], "dpsir");
    assert_eq!(body["version_id"], fixtures::V_LINKS_FORK);
    let blocks = body["layout"]["data"]["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 3);
    let mids: Vec<f64> = blocks
        .iter()
        .map(|b| {
            let s = b["sector"]["start"].as_f64().unwrap();
            let e = b["sector"]["end"].as_f64().unwrap();
            assert!((e - s - TAU / 3.0).abs() < 1e-9);
            (s + e) / 2.0
        })
        .collect();
    for i in 0..3 {
        let gap = (mids[(i + 1) % 3] - mids[i]).rem_euclid(TAU);
        assert!((gap - TAU / 3.0).abs() < 1e-9, "gap {gap}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn layouts_accept_query_parameters_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(fixture_state(dir.path()).await);
    let uri = format!(
        "/layouts/linkgraph?version={V_LINKS}&snippet={}",
        urlencode(fixtures::FOUR_VARIABLE_SNIPPET)
    );
    let (status, body) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["layout"]["kind"], "link-graph");

    let (status, bytes, ctype) = call_raw(&app, Method::GET, "/layouts/uncertainty?format=svg", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/svg+xml"));
    assert!(String::from_utf8(bytes).unwrap().starts_with("<svg"));

    let (status, _) = call(&app, Method::GET, "/layouts/pie", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, "/layouts/dpsir?hide=Weather", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::GET, &format!("/layouts/keywords?version={V_LINKS}"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

fn urlencode(s: &str) -> String {
    s.replace('#', "%23")
}

#[tokio::test(flavor = "multi_thread")]
async fn get_routes_do_not_mutate_the_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let state = fixture_state(dir.path()).await;
    let app = router(state.clone());
    let before = state.workbench().read().await.store().export_bytes().unwrap();
    let snippet = urlencode(fixtures::FOUR_VARIABLE_SNIPPET);
    for uri in [
        "/documents".to_owned(),
        "/documents/island-01".to_owned(),
        "/snippets".to_owned(),
        format!("/snippets/{snippet}"),
        "/versions".to_owned(),
        "/versions?step=links".to_owned(),
        format!("/versions/{V_VARIABLES}"),
        format!("/versions/{V_LINKS}/lineage"),
        "/progress".to_owned(),
        format!("/runsets/{V_INDICATORS}"),
        format!("/runsets/{V_INDICATORS}/raw"),
        format!("/runsets/{V_INDICATORS}/summaries"),
        "/rules".to_owned(),
        "/layouts/uncertainty".to_owned(),
        format!("/layouts/keywords?version={V_VARIABLES}"),
        "/layouts/dpsir?open=Driver".to_owned(),
        format!("/evidence/{snippet}?version={V_INDICATORS}"),
        "/palette".to_owned(),
    ] {
        let (status, body) = call(&app, Method::GET, &uri, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {body}");
    }
    let after = state.workbench().read().await.store().export_bytes().unwrap();
    assert!(before == after, "a GET route changed the workspace");
}

#[tokio::test(flavor = "multi_thread")]
async fn summaries_are_sorted_by_uncertainty() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(fixture_state(dir.path()).await);
    let (_, body) = call(&app, Method::GET, &format!("/runsets/{V_INDICATORS}/summaries"), None).await;
    let u: Vec<f64> = body
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["uncertainty"].as_f64().unwrap())
        .collect();
    assert!(u.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(body[0]["snippet_id"], fixtures::SCRIPTED_FOUR_FIFTHS);
    assert!((u[0] - 0.8).abs() < 1e-12);
}

#[tokio::test(flavor = "multi_thread")]
async fn evidence_spans_point_at_the_quotes() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(fixture_state(dir.path()).await);
    let key = FixtureCorpus::read_dir(&fixtures::shipped_dir()).unwrap().key;
    let id = fixtures::FOUR_VARIABLE_SNIPPET;
    let (status, body) = call(
        &app,
        Method::GET,
        &format!("/evidence/{}?version={V_VARIABLES}", urlencode(id)),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(body["unmatched"].as_array().unwrap().is_empty());
    let convs = body["conversations"].as_array().unwrap();
    let mut quoted: Vec<String> = body["spans"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            let text: Vec<char> = convs[s["conversation"].as_u64().unwrap() as usize]["text"]
                .as_str()
                .unwrap()
                .chars()
                .collect();
            text[s["start"].as_u64().unwrap() as usize..s["end"].as_u64().unwrap() as usize]
                .iter()
                .collect()
        })
        .collect();
    quoted.sort();
    quoted.dedup();
    let mut expected = key.snippet(id).unwrap().evidence.clone();
    expected.sort();
    assert_eq!(quoted, expected);
}

#[tokio::test(flavor = "multi_thread")]
async fn rules_round_trip_and_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(fixture_state(dir.path()).await);
    let snippet = "island-09#0";
    let rule = json!({
        "snippet_id": snippet,
        "condition": "must_have",
        "value": { "kind": "indicator", "indicator": "Response" },
    });
    let (status, body) = call(&app, Method::POST, "/rules", Some(rule.clone())).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let id = body["id"].as_str().unwrap().to_owned();
    let (_, listed) = call(&app, Method::GET, "/rules", None).await;
    assert_eq!(listed[&id], rule);
    let (_, got) = call(&app, Method::GET, &format!("/rules/{id}"), None).await;
    assert_eq!(got, rule);

    let labels = |body: &Value| -> Vec<String> {
        body["result"]["runsets"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["snippet_id"] == snippet)
            .map(|r| serde_json::from_value(r["aggregate"]["labels"].clone()).unwrap())
            .unwrap()
    };
    let (_, with_rule) = call(&app, Method::GET, &format!("/runsets/{V_INDICATORS}"), None).await;
    assert!(labels(&with_rule).contains(&"Response".to_owned()));

    let (status, _) = call(&app, Method::DELETE, &format!("/rules/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, Method::DELETE, &format!("/rules/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, without) = call(&app, Method::GET, &format!("/runsets/{V_INDICATORS}"), None).await;
    assert_eq!(labels(&without), vec!["Driver".to_owned()]);

    let bad = json!({ "snippet_id": "nowhere#0", "condition": "must_have", "value": { "kind": "indicator", "indicator": "State" } });
    let (status, _) = call(&app, Method::POST, "/rules", Some(bad)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn versions_are_created_and_forked() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(fixture_state(dir.path()).await);
    let edits = json!([{ "op": "append_indicator_definition", "indicator": "Driver", "text": " Includes family obligations." }]);
    let (status, v) = call(
        &app,
        Method::PUT,
        &format!("/versions/{V_INDICATORS}"),
        Some(json!({ "edits": edits })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    assert_eq!(v["parent_id"], V_INDICATORS);
    let (status, created) = call(&app, Method::POST, "/versions", Some(json!({ "step": "indicators" }))).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    let (status, _) = call(&app, Method::POST, "/versions", Some(json!({ "step": "dance" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::GET, "/versions/v99", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::DELETE, &format!("/versions/{V_INDICATORS}"), None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_execute_of_one_version_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = FixtureCorpus::read_dir(&fixtures::shipped_dir()).unwrap();
    {
        let store = Workspace::open(dir.path()).unwrap();
        let mut wb = Workbench::open(store, Arc::new(corpus.provider()), fixtures::fixture_engine_config()).unwrap();
        for doc in corpus.documents() {
            wb.add_document(&doc).unwrap();
        }
        wb.segment(&corpus.key.questions).await.unwrap();
        fixtures::create_fixture_versions(&mut wb).unwrap();
    }
    let slow = Arc::new(corpus.provider().with_latency(Duration::from_millis(300)));
    let store = Workspace::open(dir.path()).unwrap();
    let wb = Workbench::open(store, slow, fixtures::fixture_engine_config()).unwrap();
    let state = AppState::new(wb);
    let app = router(state.clone());

    let uri = format!("/versions/{V_INDICATORS}/execute");
    let first = {
        let app = app.clone();
        let uri = uri.clone();
        tokio::spawn(async move { call(&app, Method::POST, &uri, Some(json!({ "k": 5 }))).await })
    };
    while !state.is_running(V_INDICATORS) {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let (status, body) = call(&app, Method::POST, &uri, None).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    let mut progress = Value::Null;
    for _ in 0..200 {
        let (status, p) = call(&app, Method::GET, "/progress", None).await;
        assert_eq!(status, StatusCode::OK);
        progress = p;
        if progress["total"].as_u64().unwrap() > 0 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    assert_eq!(progress["total"].as_u64().unwrap(), 21 * 5);
    assert!(progress["completed"].as_u64().unwrap() < 21 * 5);

    let (status, body) = first.await.unwrap();
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["k"], 5);
    assert!(!state.is_running(V_INDICATORS));
    let (status, _) = call(
        &app,
        Method::POST,
        &format!("/versions/{V_VARIABLES}/execute"),
        Some(json!({ "k": 0 })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn bearer_token_guards_everything_but_health() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(fixture_state(dir.path()).await.with_token(Some("s3cret".into())));
    let (status, _, _) = call_raw(&app, Method::GET, "/health", None, None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _, _) = call_raw(&app, Method::GET, "/documents", None, None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _, _) = call_raw(&app, Method::GET, "/documents", None, Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _, _) = call_raw(&app, Method::GET, "/documents", None, Some("s3cret")).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn cors_allowlist_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cors = dpsir_api::server::cors_layer(&["http://localhost:5173".to_owned()]).unwrap();
    let app = router(fixture_state(dir.path()).await).layer(cors);
    let req = |origin: &str| {
        Request::builder()
            .uri("/palette")
            .header(header::ORIGIN, origin)
            .body(Body::empty())
            .unwrap()
    };
    let ok = app.clone().oneshot(req("http://localhost:5173")).await.unwrap();
    assert_eq!(
        ok.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "http://localhost:5173"
    );
    let other = app.oneshot(req("http://evil.example")).await.unwrap();
    assert!(other.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}
