use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle::{DType, Device};
use editsvc::jobs::{EditJob, JobStatus};
use editsvc::{router, Service, ServiceConfig};
use facelab::checkpoint::file_hash;
use facelab::diffcore::{EditModel, ModelConfig};
use facelab::estimators::{Regressor, RegressorConfig};
use facelab::synthface::{make_pair_sized, IdentitySpec, SceneImage};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Setup {
    dir: tempfile::TempDir,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let model = EditModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
        model.to_checkpoint().unwrap().save(&dir.path().join("model.ckpt")).unwrap();
        let reg = Regressor::new(
            RegressorConfig {
                image_size: 16,
                channels: vec![4, 8, 8],
                hidden: 16,
                num_identities: 2,
                ..RegressorConfig::default()
            },
            &Device::Cpu,
        )
        .unwrap();
        reg.save(&dir.path().join("est.ckpt")).unwrap();
        Self { dir }
    }

    fn config(&self) -> ServiceConfig {
        ServiceConfig {
            model_path: self.dir.path().join("model.ckpt"),
            estimator_path: Some(self.dir.path().join("est.ckpt")),
            workers: 2,
            store_path: self.dir.path().join("jobs.jsonl"),
            job_ttl: Duration::from_secs(3600),
        }
    }

    fn start(&self) -> Arc<Service> {
        Service::start(&self.config()).unwrap()
    }
}

fn face(size: usize, seed: u64) -> SceneImage {
    make_pair_sized(&IdentitySpec::reference(0), seed, size).unwrap().identity_image
}

fn png_b64(img: &SceneImage) -> String {
    B64.encode(img.encode_png().unwrap())
}

async fn call(svc: &Arc<Service>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(Arc::clone(svc)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_done(svc: &Arc<Service>, id: &str) -> Value {
    for _ in 0..3000 {
        let (s, v) = call(svc, "GET", &format!("/v1/jobs/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {id} did not finish");
}

fn edit_body(img: &SceneImage, delta: &str, seed: u64) -> String {
    json!({ "image": png_b64(img), "delta": delta, "steps": 3, "seed": seed }).to_string()
}

#[tokio::test]
async fn model_card_contract() {
    let s = Setup::new();
    let svc = s.start();
    let (status, v) = call(&svc, "GET", "/v1/model", None).await;
    assert_eq!(status, StatusCode::OK);
    for k in ["checkpoint_hash", "config", "aus", "training", "estimator", "image_size"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    assert_eq!(v["checkpoint_hash"], file_hash(&s.config().model_path).unwrap());
    let aus = v["aus"].as_array().unwrap();
    assert_eq!(aus.len(), 12);
    assert_eq!(aus[2]["label"], "AU4");
    assert_eq!(aus[2]["name"], "Brow Lowerer");
}

#[tokio::test]
async fn estimate_contract() {
    let s = Setup::new();
    let svc = s.start();
    let body = json!({ "image": png_b64(&face(16, 1)) }).to_string();
    let (status, a) = call(&svc, "POST", "/v1/estimate", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a["aus"].as_array().unwrap().len(), 12);
    assert_eq!(a["id_embedding"].as_array().unwrap().len(), 32);
    let (_, b) = call(&svc, "POST", "/v1/estimate", Some(body)).await;
    assert_eq!(a, b);

    let (status, v) = call(&svc, "POST", "/v1/estimate", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("malformed"));
    let (status, _) = call(&svc, "POST", "/v1/estimate", Some(json!({ "image": "@@@" }).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&svc, "POST", "/v1/estimate", Some(json!({ "image": B64.encode(b"not a png") }).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // 2x is downscaled, 5x and non-multiples are refused
    let (status, _) = call(&svc, "POST", "/v1/estimate", Some(json!({ "image": png_b64(&SceneImage::filled(32, [0.2; 3])) }).to_string())).await;
    assert_eq!(status, StatusCode::OK);
    for size in [80, 24, 8] {
        let body = json!({ "image": png_b64(&SceneImage::filled(size, [0.2; 3])) }).to_string();
        assert_eq!(call(&svc, "POST", "/v1/estimate", Some(body)).await.0, StatusCode::BAD_REQUEST, "size {size}");
    }
}

#[tokio::test]
async fn edit_validation_status_codes() {
    let s = Setup::new();
    let svc = s.start();
    let img = face(16, 2);
    for (delta, code) in [
        ("AU12+3", StatusCode::BAD_REQUEST),
        ("AU99=1", StatusCode::BAD_REQUEST),
        ("AU12=three", StatusCode::BAD_REQUEST),
        ("AU4=-11", StatusCode::UNPROCESSABLE_ENTITY),
        ("AU12=10.5", StatusCode::UNPROCESSABLE_ENTITY),
    ] {
        let (status, v) = call(&svc, "POST", "/v1/edit", Some(edit_body(&img, delta, 0))).await;
        assert_eq!(status, code, "{delta}: {v}");
        assert!(v["error"].as_str().unwrap().contains("delta"));
    }
    let bad_steps = json!({ "image": png_b64(&img), "delta": "AU12=1", "steps": 0 }).to_string();
    assert_eq!(call(&svc, "POST", "/v1/edit", Some(bad_steps)).await.0, StatusCode::BAD_REQUEST);
    let (status, _) = call(&svc, "GET", "/v1/jobs/does-not-exist", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn edit_job_lifecycle() {
    let s = Setup::new();
    let svc = s.start();
    let img = face(16, 3);
    let (status, job) = call(&svc, "POST", "/v1/edit", Some(edit_body(&img, "AU12=+3", 7))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(job["status"], "queued");
    let delta: Vec<f64> = serde_json::from_value(job["request"]["au_delta"].clone()).unwrap();
    assert_eq!(delta.iter().filter(|v| **v != 0.0).count(), 1);
    assert_eq!(delta[5], 3.0);
    let done = wait_done(&svc, job["job_id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "done", "{}", done["error"]);
    let out = SceneImage::decode_png(&B64.decode(done["result"]["image_png_base64"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(out.size, 16);
    assert_eq!(done["result"]["estimate"]["aus"].as_array().unwrap().len(), 12);
    let t = &done["timings"];
    assert!(t["started_at"].as_f64().unwrap() >= t["created_at"].as_f64().unwrap());
    assert!(t["finished_at"].as_f64().unwrap() >= t["started_at"].as_f64().unwrap());
}

#[tokio::test]
async fn concurrent_jobs_are_independent() {
    let s = Setup::new();
    let svc = s.start();
    let img = face(16, 4);
    let (_, a) = call(&svc, "POST", "/v1/edit", Some(edit_body(&img, "AU4=-6", 1))).await;
    let (_, b) = call(&svc, "POST", "/v1/edit", Some(edit_body(&img, "AU4=-6", 2))).await;
    let a = wait_done(&svc, a["job_id"].as_str().unwrap()).await;
    let b = wait_done(&svc, b["job_id"].as_str().unwrap()).await;
    assert_eq!((a["status"].as_str(), b["status"].as_str()), (Some("done"), Some("done")));
    assert_ne!(a["result"]["image_png_base64"], b["result"]["image_png_base64"]);
    let (_, again) = call(&svc, "POST", "/v1/edit", Some(edit_body(&img, "AU4=-6", 1))).await;
    let again = wait_done(&svc, again["job_id"].as_str().unwrap()).await;
    assert_eq!(again["result"], a["result"]);
}

#[tokio::test]
async fn jobs_survive_restart() {
    let s = Setup::new();
    let svc = s.start();
    let (_, job) = call(&svc, "POST", "/v1/edit", Some(edit_body(&face(16, 5), "AU1=+2", 9))).await;
    let id = job["job_id"].as_str().unwrap().to_string();
    let before = wait_done(&svc, &id).await;
    assert_eq!(before["status"], "done");

    let svc2 = s.start();
    let (status, after) = call(&svc2, "GET", &format!("/v1/jobs/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after, before);
    let typed: EditJob = serde_json::from_value(after).unwrap();
    assert_eq!(typed.status, JobStatus::Done);
}

#[test]
fn missing_checkpoint_is_reported_by_path() {
    let s = Setup::new();
    let mut cfg = s.config();
    cfg.model_path = s.dir.path().join("nope.ckpt");
    let err = Service::start(&cfg).err().unwrap().to_string();
    assert!(err.contains("nope.ckpt"), "{err}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn served_over_tcp() {
    let s = Setup::new();
    let svc = s.start();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(svc)).await.unwrap() });
    let resp = tokio::task::spawn_blocking(move || {
        let mut c = std::net::TcpStream::connect(addr).unwrap();
        c.write_all(b"GET /v1/model HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
        let mut out = String::new();
        c.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(Path::new(&s.config().store_path).exists());
}
