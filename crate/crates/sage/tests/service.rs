mod common;

use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use sage::service::{self, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Value,
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri).header("origin", "http://studio.test");
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(|b| Body::from(b.to_owned())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    Reply { status, headers, body }
}

fn png(v: &Value, key: &str) -> Vec<u8> {
    B64.decode(v[key].as_str().unwrap_or_else(|| panic!("{key} missing in {v}"))).unwrap()
}

fn app_with(root: &Path, max_sessions: usize) -> Router {
    service::router(ServiceConfig {
        max_sessions,
        ..ServiceConfig::new(root)
    })
}

/// Registry with one translator checkpoint `ink` and one without, `photo`.
fn registry() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    common::save_under(tmp.path(), "ink", &common::tiny_stage2(21), Some("Ink sketch"));
    let mut bare = common::tiny_config(2, 0);
    bare.ablation.use_translator = false;
    bare.ablation.use_spade = false;
    let (_, s1) = sage_core::training::stage1_init(&common::tiny_config(1, 0)).unwrap();
    let (_, ck) = sage_core::training::stage2_init(&s1, &bare).unwrap();
    common::save_under(tmp.path(), "photo", &ck, None);
    tmp
}

async fn session(app: &Router, seed: u64) -> Value {
    let r = call(app, "POST", "/api/session", Some(&json!({"ckpt_id": "ink", "seed": seed}).to_string())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    r.body
}

fn validator(name: &str) -> jsonschema::Validator {
    let mut doc: Value = serde_json::from_str(service::OPENAPI).unwrap();
    doc["$ref"] = json!(format!("#/components/schemas/{name}"));
    jsonschema::validator_for(&doc).unwrap()
}

fn assert_schema(name: &str, v: &Value) {
    let val = validator(name);
    let errors: Vec<String> = val.iter_errors(v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?} in {v}");
}

const SQUARE: &str = r#"{"edits": [{"polygon": [[2, 2], [10, 2], [10, 10], [2, 10]], "class": 13}]}"#;

#[tokio::test]
async fn same_seed_gives_identical_previews() {
    let reg = registry();
    let app = app_with(reg.path(), 8);
    let a = session(&app, 7).await;
    let b = session(&app, 7).await;
    let c = session(&app, 8).await;
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(png(&a, "preview_png_b64"), png(&b, "preview_png_b64"));
    assert_eq!(png(&a, "mask_png_b64"), png(&b, "mask_png_b64"));
    assert_ne!(png(&a, "preview_png_b64"), png(&c, "preview_png_b64"));
    assert_schema("SessionCreated", &a);
    // preview decodes to an image of the advertised size
    let img = sage::imageio::decode_rgb(&png(&a, "preview_png_b64"), Path::new("preview")).unwrap();
    assert_eq!(img.shape(), &[3, 16, 16]);
}

#[tokio::test]
async fn session_request_errors() {
    let reg = registry();
    let app = app_with(reg.path(), 8);
    let r = call(&app, "POST", "/api/session", Some(r#"{"ckpt_id": "ink"}"#)).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_schema("Error", &r.body);
    let r = call(&app, "POST", "/api/session", Some(r#"{"ckpt_id": "ink", "seed": -1}"#)).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = call(&app, "POST", "/api/session", Some("{not json")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = call(&app, "POST", "/api/session", Some(r#"{"ckpt_id": "nope", "seed": 1}"#)).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_schema("Error", &r.body);
    let r = call(&app, "GET", "/api/session/not-a-session/render?yaw=0&pitch=0", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn render_steers_the_viewpoint() {
    let reg = registry();
    let app = app_with(reg.path(), 8);
    let s = session(&app, 3).await;
    let id = s["session_id"].as_str().unwrap();
    let uri = |y: &str, p: &str| format!("/api/session/{id}/render?yaw={y}&pitch={p}");
    let r0 = call(&app, "GET", &uri("0", "0"), None).await;
    assert_eq!(r0.status, StatusCode::OK);
    assert_schema("RenderResult", &r0.body);
    assert_eq!(png(&r0.body, "drawing_png_b64"), png(&s, "preview_png_b64"));
    assert_eq!(png(&r0.body, "mask_png_b64"), png(&s, "mask_png_b64"));
    let r1 = call(&app, "GET", &uri("0.4", "-0.1"), None).await;
    let r2 = call(&app, "GET", &uri("0.4", "-0.1"), None).await;
    assert_eq!(r1.body, r2.body);
    assert_ne!(png(&r1.body, "drawing_png_b64"), png(&r0.body, "drawing_png_b64"));

    let out = call(&app, "GET", &uri("2.0", "0"), None).await;
    assert_eq!(out.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_schema("PoseError", &out.body);
    let yb = out.body["yaw_bounds"].as_array().unwrap();
    assert!(yb[0].as_f64().unwrap() < 0.0 && yb[1].as_f64().unwrap() < 2.0);
    for q in ["yaw=0", "yaw=abc&pitch=0", "yaw=NaN&pitch=0", "yaw=inf&pitch=0"] {
        let r = call(&app, "GET", &format!("/api/session/{id}/render?{q}"), None).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{q}");
    }
    // a rejected pose leaves the session where it was
    let again = call(&app, "POST", &format!("/api/session/{id}/edit"), Some(r#"{"edits": []}"#)).await;
    assert_eq!(png(&again.body, "drawing_png_b64"), png(&r1.body, "drawing_png_b64"));
}

#[tokio::test]
async fn edit_layer_applies_and_clears() {
    let reg = registry();
    let app = app_with(reg.path(), 8);
    let s = session(&app, 5).await;
    let id = s["session_id"].as_str().unwrap();
    let edit_uri = format!("/api/session/{id}/edit");
    let base = call(&app, "GET", &format!("/api/session/{id}/render?yaw=0.2&pitch=0"), None).await;

    let empty = call(&app, "POST", &edit_uri, Some(r#"{"edits": []}"#)).await;
    assert_eq!(empty.status, StatusCode::OK);
    assert_schema("EditResult", &empty.body);
    assert_eq!(png(&empty.body, "drawing_png_b64"), png(&base.body, "drawing_png_b64"));

    let e1 = call(&app, "POST", &edit_uri, Some(SQUARE)).await;
    assert_eq!(e1.status, StatusCode::OK, "{}", e1.body);
    let (labels, _, w) = sage::imageio::decode_labels(&png(&e1.body, "mask_png_b64"), Path::new("m")).unwrap();
    assert!((2..10).all(|i| (2..10).all(|j| labels[i * w + j] == 13)));
    assert_ne!(png(&e1.body, "drawing_png_b64"), png(&base.body, "drawing_png_b64"));
    // the same op again changes nothing
    let e2 = call(&app, "POST", &edit_uri, Some(SQUARE)).await;
    assert_eq!(e1.body, e2.body);
    // edits persist across pose changes
    let moved = call(&app, "GET", &format!("/api/session/{id}/render?yaw=0.2&pitch=0"), None).await;
    assert_eq!(png(&moved.body, "drawing_png_b64"), png(&e1.body, "drawing_png_b64"));

    let cleared = call(&app, "DELETE", &edit_uri, None).await;
    assert_eq!(cleared.status, StatusCode::OK);
    assert_eq!(png(&cleared.body, "drawing_png_b64"), png(&base.body, "drawing_png_b64"));
    assert_eq!(png(&cleared.body, "mask_png_b64"), png(&base.body, "mask_png_b64"));
}

#[tokio::test]
async fn malformed_edits_are_rejected_without_changing_state() {
    let reg = registry();
    let app = app_with(reg.path(), 8);
    let s = session(&app, 6).await;
    let id = s["session_id"].as_str().unwrap();
    let uri = format!("/api/session/{id}/edit");
    let bad_class = r#"{"edits": [{"polygon": [[0, 0], [4, 0], [4, 4]], "class": 19}]}"#;
    let r = call(&app, "POST", &uri, Some(bad_class)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_schema("Error", &r.body);
    for body in [
        "[]",
        "{broken",
        r#"{"edits": [{"polygon": [[0, 0], [4, 0]], "class": 3}]}"#,
        r#"{"edits": [{"polygon": [[0, 0], [40, 0], [4, 4]], "class": 3}]}"#,
        r#"{"edits": [{"class": 3}]}"#,
    ] {
        let r = call(&app, "POST", &uri, Some(body)).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{body}: {}", r.body);
    }
    let now = call(&app, "POST", &uri, Some(r#"{"edits": []}"#)).await;
    assert_eq!(png(&now.body, "drawing_png_b64"), png(&s, "preview_png_b64"));
}

#[tokio::test]
async fn edits_need_a_translator() {
    let reg = registry();
    let app = app_with(reg.path(), 8);
    let r = call(&app, "POST", "/api/session", Some(r#"{"ckpt_id": "photo", "seed": 1}"#)).await;
    assert_eq!(r.status, StatusCode::OK);
    let id = r.body["session_id"].as_str().unwrap();
    let e = call(&app, "POST", &format!("/api/session/{id}/edit"), Some(SQUARE)).await;
    assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
    // the failed op is not kept
    let ok = call(&app, "POST", &format!("/api/session/{id}/edit"), Some(r#"{"edits": []}"#)).await;
    assert_eq!(ok.status, StatusCode::OK);
}

#[tokio::test]
async fn replay_from_seed_and_edits_is_byte_identical() {
    let reg = registry();
    let run = |reg_path: std::path::PathBuf| async move {
        let app = app_with(&reg_path, 8);
        let s = session(&app, 9).await;
        let id = s["session_id"].as_str().unwrap().to_owned();
        call(&app, "GET", &format!("/api/session/{id}/render?yaw=-0.3&pitch=0.1"), None).await;
        call(&app, "POST", &format!("/api/session/{id}/edit"), Some(SQUARE)).await.body
    };
    let a = run(reg.path().to_path_buf()).await;
    let b = run(reg.path().to_path_buf()).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn checkpoint_listing() {
    let empty = tempfile::tempdir().unwrap();
    let r = call(&app_with(empty.path(), 8), "GET", "/api/checkpoints", None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body, json!([]));
    let missing = call(&app_with(&empty.path().join("absent"), 8), "GET", "/api/checkpoints", None).await;
    assert_eq!(missing.body, json!([]));

    let reg = registry();
    // a directory without a checkpoint is not registered
    std::fs::create_dir(reg.path().join("notes")).unwrap();
    let r = call(&app_with(reg.path(), 8), "GET", "/api/checkpoints", None).await;
    assert_eq!(
        r.body,
        json!([
            {"ckpt_id": "ink", "style_name": "Ink sketch", "resolution": 16},
            {"ckpt_id": "photo", "style_name": "photo", "resolution": 16},
        ])
    );
    for item in r.body.as_array().unwrap() {
        assert_schema("Checkpoint", item);
    }
}

#[tokio::test]
async fn spec_is_served_and_covers_the_routes() {
    let empty = tempfile::tempdir().unwrap();
    let r = call(&app_with(empty.path(), 8), "GET", "/api/spec", None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers["content-type"], "application/json");
    assert!(r.body["openapi"].as_str().unwrap().starts_with("3."));
    let paths = r.body["paths"].as_object().unwrap();
    for p in ["/api/session", "/api/session/{id}/render", "/api/session/{id}/edit", "/api/checkpoints", "/api/spec"] {
        assert!(paths.contains_key(p), "{p}");
    }
    // request examples validate against their schemas
    assert_schema("EditRequest", &serde_json::from_str(SQUARE).unwrap());
    assert_schema("SessionRequest", &json!({"ckpt_id": "ink", "seed": 1}));
    assert!(!validator("EditRequest").is_valid(&json!({"edits": [{"class": 30, "polygon": [[0, 0], [1, 0], [1, 1]]}]})));
}

#[tokio::test]
async fn least_recently_used_session_is_evicted() {
    let reg = registry();
    let app = app_with(reg.path(), 2);
    let a = session(&app, 1).await;
    let b = session(&app, 2).await;
    let ida = a["session_id"].as_str().unwrap();
    let idb = b["session_id"].as_str().unwrap();
    // touch a, so b becomes the oldest
    assert_eq!(call(&app, "GET", &format!("/api/session/{ida}/render?yaw=0&pitch=0"), None).await.status, StatusCode::OK);
    let _c = session(&app, 3).await;
    assert_eq!(call(&app, "GET", &format!("/api/session/{idb}/render?yaw=0&pitch=0"), None).await.status, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", &format!("/api/session/{ida}/render?yaw=0&pitch=0"), None).await.status, StatusCode::OK);
}

#[tokio::test]
async fn cors_headers() {
    let empty = tempfile::tempdir().unwrap();
    let r = call(&app_with(empty.path(), 8), "GET", "/api/checkpoints", None).await;
    assert_eq!(r.headers["access-control-allow-origin"], "*");
    let app = service::router(ServiceConfig {
        cors_origin: Some("http://studio.test".into()),
        ..ServiceConfig::new(empty.path())
    });
    let r = call(&app, "GET", "/api/checkpoints", None).await;
    assert_eq!(r.headers["access-control-allow-origin"], "http://studio.test");
    let pre = Request::builder()
        .method("OPTIONS")
        .uri("/api/session")
        .header("origin", "http://studio.test")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(pre).await.unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers()["access-control-allow-methods"].to_str().unwrap().contains("POST"));
}
