mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::tiny_config;
use facectl_cli::server::{router, AppState};
use facectl_cli::Config;
use facectl_core::pipeline::{run_desk_pipeline, DeskArtifacts, SilentLog};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn artifacts(dir: &std::path::Path) -> DeskArtifacts {
    run_desk_pipeline(&tiny_config().desk(), dir, &mut SilentLog).unwrap()
}

fn state(art: &DeskArtifacts, config: Config) -> Arc<AppState> {
    AppState::new(config, art.rsm.clone(), art.model.clone(), Some(art.dataset.clone())).unwrap()
}

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn new_session(st: &Arc<AppState>, sample: usize) -> String {
    let (code, v) = call(st, "POST", "/api/sessions", Some(json!({ "sample": sample }))).await;
    assert_eq!(code, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn info_samples_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let art = artifacts(dir.path());
    let st = state(&art, tiny_config());

    let (code, info) = call(&st, "GET", "/api/info", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(info["strategies"].as_array().unwrap().len(), 6);
    assert_eq!(info["image_size"], 8);

    let (code, s) = call(&st, "GET", "/api/samples?n=2", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(s["samples"].as_array().unwrap().len(), 2);
    assert!(s["samples"][0]["params"]["theta_global"].is_array());

    let (code, _) = call(&st, "POST", "/api/sessions/nope/edit", Some(json!({}))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = call(&st, "GET", "/api/jobs/j9999", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);

    let id = new_session(&st, art.finetune_index).await;
    let (code, v) = call(
        &st,
        "POST",
        &format!("/api/sessions/{id}/edit"),
        Some(json!({ "overrides": { "theta_global": "sideways" } })),
    )
    .await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "overrides.theta_global", "{v}");
    let (code, v) = call(&st, "POST", &format!("/api/sessions/{id}/edit"), Some(json!({ "sed": 1 }))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST, "{v}");
    let (code, v) = call(&st, "POST", "/api/sessions", Some(json!({ "sample": "three" }))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "sample");
}

#[tokio::test]
async fn edits_are_deterministic_and_previews_follow_pose() {
    let dir = tempfile::tempdir().unwrap();
    let art = artifacts(dir.path());
    let st = state(&art, tiny_config());
    let id = new_session(&st, art.finetune_index).await;

    let body = json!({ "overrides": { "theta_global": [0.3, 0.0, 0.0] }, "seed": 4, "t_inf": 5 });
    let (c1, a) = call(&st, "POST", &format!("/api/sessions/{id}/edit"), Some(body.clone())).await;
    let (c2, b) = call(&st, "POST", &format!("/api/sessions/{id}/edit"), Some(body)).await;
    assert_eq!((c1, c2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["image_png_base64"], b["image_png_base64"]);
    assert_eq!(a["trace"]["steps"].as_array().unwrap().len(), 5);
    assert_eq!(a["trace"]["target_params"]["theta_global"][0], 0.3);

    let preview = |yaw: &str| format!("/api/sessions/{id}/snapshot-preview?yaw={yaw}");
    let (_, p0) = call(&st, "GET", &preview("0"), None).await;
    let (_, p1) = call(&st, "GET", &preview("0.4"), None).await;
    assert_ne!(p0["normal_png_base64"], p1["normal_png_base64"]);
    let (code, _) = call(&st, "GET", &format!("/api/sessions/{id}/snapshot-preview?light=1,2"), None).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn finetune_is_exclusive_and_copy_on_write() {
    let dir = tempfile::tempdir().unwrap();
    let art = artifacts(dir.path());
    let mut config = tiny_config();
    config.finetune.iterations = 3000;
    let st = state(&art, config);
    let base = st.base.checksum();
    let id = new_session(&st, art.finetune_index).await;

    let (code, v) = call(&st, "POST", &format!("/api/sessions/{id}/finetune"), Some(json!({}))).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let job = v["job_id"].as_str().unwrap().to_string();
    let (code, _) = call(&st, "POST", &format!("/api/sessions/{id}/finetune"), Some(json!({}))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = call(&st, "POST", &format!("/api/sessions/{id}/edit"), Some(json!({}))).await;
    assert_eq!(code, StatusCode::CONFLICT);

    // a second session is not blocked
    let other = new_session(&st, art.finetune_index).await;
    let (code, _) = call(&st, "POST", &format!("/api/sessions/{other}/edit"), Some(json!({ "t_inf": 3 }))).await;
    assert_eq!(code, StatusCode::OK);

    let mut last = Value::Null;
    for _ in 0..600 {
        let (code, v) = call(&st, "GET", &format!("/api/jobs/{job}"), None).await;
        assert_eq!(code, StatusCode::OK);
        let state = v["state"].as_str().unwrap().to_string();
        assert!(["queued", "running", "done"].contains(&state.as_str()), "{v}");
        last = v;
        if state == "done" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    assert_eq!(last["state"], "done", "{last}");
    assert_eq!(last["progress"], 1.0);
    assert_eq!(st.base.checksum(), base, "shared weights untouched");

    let (code, v) = call(&st, "POST", &format!("/api/sessions/{id}/edit"), Some(json!({ "t_inf": 3 }))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["finetuned"], true);
    let (_, v) = call(&st, "POST", &format!("/api/sessions/{other}/edit"), Some(json!({ "t_inf": 3 }))).await;
    assert_eq!(v["finetuned"], false);
}

#[tokio::test]
async fn sessions_replay_bit_for_bit_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let art = artifacts(dir.path());
    let mut config = tiny_config();
    config.serve.sessions_dir = Some(dir.path().join("sessions"));
    config.finetune.iterations = 3;
    let st = state(&art, config.clone());
    let id = new_session(&st, art.finetune_index).await;

    let (_, v) = call(&st, "POST", &format!("/api/sessions/{id}/finetune"), Some(json!({}))).await;
    let job = v["job_id"].as_str().unwrap().to_string();
    for _ in 0..600 {
        let (_, v) = call(&st, "GET", &format!("/api/jobs/{job}"), None).await;
        if v["state"] == "done" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let requests = [
        ("edit", json!({ "overrides": { "theta_jaw": 0.2 }, "seed": 1, "t_inf": 4 })),
        ("edit", json!({ "seed": 2, "t_inf": 4, "use_finetuned": false })),
        ("inpaint", json!({ "region": { "x": 2, "y": 2, "w": 3, "h": 3 }, "seed": 3, "t_inf": 4 })),
        ("manipulate", json!({ "direction": "ambient", "scale": 0.5, "seed": 4, "t_inf": 4 })),
    ];
    for (path, body) in &requests {
        let (code, v) = call(&st, "POST", &format!("/api/sessions/{id}/{path}"), Some(body.clone())).await;
        assert_eq!(code, StatusCode::OK, "{path}: {v}");
    }
    let (code, v) = call(
        &st,
        "POST",
        &format!("/api/sessions/{id}/manipulate"),
        Some(json!({ "direction": "smile", "scale": 1.0 })),
    )
    .await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "direction");

    let (_, before) = call(&st, "GET", &format!("/api/sessions/{id}"), None).await;
    drop(st);
    let restarted = state(&art, config);
    let (code, after) = call(&restarted, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(before["record"], after["record"]);
    assert_eq!(after["record"]["history"].as_array().unwrap().len(), requests.len());
    assert_eq!(after["finetuned"], true);
    assert_eq!(restarted.replay(&id).unwrap(), Vec::<usize>::new());

    // new ids continue after the restored ones
    let next = new_session(&restarted, 0).await;
    assert_ne!(next, id);
}
