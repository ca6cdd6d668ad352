use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use roomroam_core::layout::{sample_layout, Layout};
use roomroam_core::model::{serialize, ModelConfig, ModelParams};
use roomroam_core::predict::Predictor;
use roomroam_core::rdwsim::{estimate_resets, SimConfig};
use roomroam_service::{model_path, router, AppState, LoadedModel, PredictResponse, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn model_bytes() -> Vec<u8> {
    let cfg = ModelConfig {
        embed_dim: 8,
        ..ModelConfig::toy()
    };
    let mut params = ModelParams::init(&cfg, 5).unwrap();
    params.round_to_f32();
    serialize(&params, &cfg)
}

fn sim_config() -> ServiceConfig {
    ServiceConfig {
        sim: SimConfig {
            episode_distance: 40.0,
            ..SimConfig::default()
        },
        ..ServiceConfig::default()
    }
}

fn app_with(model: bool, config: ServiceConfig) -> Router {
    let model = model.then(|| LoadedModel::from_bytes(&model_bytes()).unwrap());
    router(AppState::new(model, config))
}

fn app() -> Router {
    app_with(true, sim_config())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn raw_post(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(Method::POST)
        .uri(uri)
        .body(Body::from(body.to_owned()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn layout_json(layout: &Layout) -> Value {
    serde_json::from_str(&layout.to_json()).unwrap()
}

fn assert_error_body(v: &Value) {
    let obj = v.as_object().expect("error body is an object");
    assert!(obj["code"].is_string(), "{v}");
    assert!(obj["message"].is_string(), "{v}");
    assert!(obj.contains_key("detail"), "{v}");
}

#[tokio::test]
async fn predict_valid_layout() {
    let app = app();
    let layout = sample_layout(1, 3).unwrap();
    let (status, body) = call(&app, Method::POST, "/api/predict", Some(layout_json(&layout))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: PredictResponse = serde_json::from_value(body).unwrap();
    assert!(resp.predicted_resets.is_finite());
    assert_eq!(resp.heatmap.len(), 14);
    assert!(resp.heatmap.iter().all(|r| r.len() == 14));
    assert!(resp.heatmap.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(resp.model_version.len(), 64);
    assert!(resp.latency_ms >= 0.0);

    let direct = Predictor::from_bytes(&model_bytes()).unwrap().predict(&layout).unwrap();
    assert_eq!(resp.predicted_resets.to_bits(), direct.resets.to_bits());
    assert_eq!(resp.heatmap, direct.heatmap.values);
}

#[tokio::test]
async fn predict_schema_errors_carry_the_field_path() {
    let app = app();
    let body = json!({"room": {"width_m": 5.0, "height_m": 5.0},
        "objects": [{"kind": "piano", "center_m": [1.0, 1.0], "rotation_deg": 0}]});
    let (status, v) = call(&app, Method::POST, "/api/predict", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error_body(&v);
    assert_eq!(v["code"], "schema_violation");
    assert_eq!(v["detail"]["path"], "objects[0].kind");

    let body = json!({"room": {"width_m": 5.0, "height_m": 5.0},
        "objects": [{"kind": "sofa", "center_m": [1.0, 1.0], "rotation_deg": 45}]});
    let (status, v) = call(&app, Method::POST, "/api/predict", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["detail"]["path"], "objects[0].rotation_deg");

    let (status, v) = raw_post(&app, "/api/predict", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error_body(&v);
}

#[tokio::test]
async fn predict_rejects_impossible_layouts() {
    let app = app();
    let outside = json!({"room": {"width_m": 5.0, "height_m": 5.0},
        "objects": [{"kind": "sofa", "center_m": [7.0, 1.0], "rotation_deg": 0}]});
    let (status, v) = call(&app, Method::POST, "/api/predict", Some(outside)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error_body(&v);

    let overlap = json!({"room": {"width_m": 5.0, "height_m": 5.0}, "objects": [
        {"kind": "sofa", "center_m": [2.5, 2.5], "rotation_deg": 0},
        {"kind": "tv_stand", "center_m": [2.5, 2.6], "rotation_deg": 0}]});
    let (status, v) = call(&app, Method::POST, "/api/predict", Some(overlap)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid_layout");
}

#[tokio::test]
async fn without_a_model() {
    let app = app_with(false, sim_config());
    let layout = layout_json(&sample_layout(1, 3).unwrap());
    let (status, v) = call(&app, Method::POST, "/api/predict", Some(layout)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_error_body(&v);
    let (status, _) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    // catalog and simulation need no model
    let (status, _) = call(&app, Method::GET, "/api/catalog", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn healthz_and_catalog() {
    let app = app();
    let (status, v) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model_version"].as_str().unwrap().len(), 64);
    let (status, v) = call(&app, Method::GET, "/api/catalog", None).await;
    assert_eq!(status, StatusCode::OK);
    let kinds: Vec<&str> = v.as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds.len(), 5);
    assert!(kinds.contains(&"sofa") && kinds.contains(&"mini_fridge"));
}

#[tokio::test]
async fn simulate_matches_the_library() {
    let app = app();
    let layout = sample_layout(4, 4).unwrap();
    let body = json!({"layout": layout_json(&layout), "paths": 6, "seed": 17});
    let (status, v) = call(&app, Method::POST, "/api/simulate", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let expected = estimate_resets(&layout, &sim_config().sim, 6, 17).unwrap();
    assert_eq!(v, serde_json::to_value(&expected).unwrap());
    let per_path = v["per_path"].as_array().unwrap();
    let mean = per_path.iter().map(|x| x.as_f64().unwrap()).sum::<f64>() / 6.0;
    assert_eq!(v["mean"].as_f64().unwrap(), mean);

    let (_, again) = call(&app, Method::POST, "/api/simulate", Some(body)).await;
    assert_eq!(again, v);
}

#[tokio::test]
async fn simulate_errors() {
    let app = app();
    let layout = layout_json(&sample_layout(4, 3).unwrap());
    for paths in [0, 101] {
        let body = json!({"layout": layout, "paths": paths, "seed": 1});
        let (status, v) = call(&app, Method::POST, "/api/simulate", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "paths {paths}");
        assert_eq!(v["code"], "paths_out_of_range");
    }
    // a room this narrow leaves no place for the reset buffer around the fridge
    let blocked = json!({"room": {"width_m": 1.0, "height_m": 0.6},
        "objects": [{"kind": "mini_fridge", "center_m": [0.5, 0.3], "rotation_deg": 0}]});
    let (status, v) = call(
        &app,
        Method::POST,
        "/api/simulate",
        Some(json!({"layout": blocked, "paths": 2, "seed": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_error_body(&v);

    let (status, v) = call(&app, Method::POST, "/api/simulate", Some(json!({"paths": 2, "seed": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error_body(&v);
}

#[tokio::test]
async fn simulate_time_budget() {
    let app = app_with(
        true,
        ServiceConfig {
            time_budget: Duration::ZERO,
            ..sim_config()
        },
    );
    let layout = layout_json(&sample_layout(4, 3).unwrap());
    let body = json!({"layout": layout, "paths": 3, "seed": 1});
    let (status, v) = call(&app, Method::POST, "/api/simulate", Some(body)).await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(v["code"], "time_budget_exceeded");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_predictions_equal_serial_ones() {
    let app = app();
    let layouts: Vec<Value> = (0..8)
        .map(|i| layout_json(&sample_layout(i, 3 + (i as usize % 3)).unwrap()))
        .collect();
    let mut serial = Vec::new();
    for l in &layouts {
        serial.push(call(&app, Method::POST, "/api/predict", Some(l.clone())).await.1);
    }
    let handles: Vec<_> = layouts
        .iter()
        .cloned()
        .map(|l| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, Method::POST, "/api/predict", Some(l)).await.1 })
        })
        .collect();
    for (h, s) in handles.into_iter().zip(serial) {
        let c = h.await.unwrap();
        assert_eq!(c["predicted_resets"], s["predicted_resets"]);
        assert_eq!(c["heatmap"], s["heatmap"]);
    }
}

#[tokio::test]
async fn cors_preflight() {
    let app = app();
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/api/predict")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}

#[test]
fn env_var_overrides_flag() {
    let flag = Some("a.bin".into());
    assert_eq!(model_path(flag.clone(), Some("b.bin".into())), Some("b.bin".into()));
    assert_eq!(model_path(flag.clone(), Some("".into())), flag);
    assert_eq!(model_path(None, None), None);
}

#[test]
fn corrupt_model_is_rejected() {
    let mut bytes = model_bytes();
    bytes.truncate(100);
    assert!(LoadedModel::from_bytes(&bytes).is_err());
}
