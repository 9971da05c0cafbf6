use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use icontra_service::http::MAX_UPLOAD_BYTES;
use icontra_service::{router, FakeEngine, SessionService};
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "icontra-test-boundary";

fn png_bytes(width: u32, height: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(width, height, |x, y| {
        if (width / 4..3 * width / 4).contains(&x) && (height / 4..3 * height / 4).contains(&y) {
            image::Rgb([250, 250, 250])
        } else {
            image::Rgb([20, 30, 40])
        }
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn multipart(fields: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        if *name == "image" {
            body.extend_from_slice(
                b"Content-Disposition: form-data; name=\"image\"; filename=\"photo.png\"\r\nContent-Type: image/png\r\n\r\n",
            );
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(value);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

struct Api {
    app: Router,
    service: SessionService,
    _dir: tempfile::TempDir,
}

impl Api {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let engine = Arc::new(FakeEngine::new(32, 12, Duration::from_millis(1)));
        let service = SessionService::open(dir.path(), engine).unwrap();
        Self {
            app: router(service.clone()),
            service,
            _dir: dir,
        }
    }

    async fn send(&self, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let mime = res
            .headers()
            .get(header::CONTENT_TYPE)
            .map(|v| v.to_str().unwrap().to_string());
        let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, body, mime)
    }

    async fn json(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                req = req.header(header::CONTENT_TYPE, "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let (status, bytes, _) = self.send(req.body(body).unwrap()).await;
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn upload(&self, fields: &[(&str, &[u8])]) -> (StatusCode, Value) {
        let req = Request::post("/sessions")
            .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
            .body(Body::from(multipart(fields)))
            .unwrap();
        let (status, bytes, _) = self.send(req).await;
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn wait_job(&self, id: &str) -> Value {
        for _ in 0..5000 {
            let (status, job) = self.json("GET", &format!("/jobs/{id}"), None).await;
            assert_eq!(status, StatusCode::OK);
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
        panic!("job {id} did not finish");
    }

    async fn ready_session(&self) -> String {
        let png = png_bytes(40, 24);
        let (status, created) = self.upload(&[("image", &png), ("caption", b"a photo of a box")]).await;
        assert_eq!(status, StatusCode::CREATED, "{created}");
        let job = self.wait_job(created["job"]["id"].as_str().unwrap()).await;
        assert_eq!(job["state"], "done");
        created["session"]["id"].as_str().unwrap().to_string()
    }
}

#[tokio::test]
async fn upload_generate_and_fetch_result() {
    let api = Api::new();
    let png = png_bytes(40, 24);
    let (status, created) = api
        .upload(&[("image", &png), ("caption", b"a photo of a box"), ("object_prompt", b"white box")])
        .await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    assert_eq!(created["session"]["status"], "extracting");
    assert_eq!(created["session"]["object_prompt"], "white box");
    assert_eq!(created["job"]["kind"], "extract");
    let id = created["session"]["id"].as_str().unwrap().to_string();
    api.wait_job(created["job"]["id"].as_str().unwrap()).await;

    let (status, session) = api.json("GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(session["status"], "ready");
    assert_eq!(session["cells"].as_array().unwrap().len(), 6);

    let (status, job) = api
        .json(
            "POST",
            &format!("/sessions/{id}/cells/3/generate"),
            Some(json!({ "prompt": "a photo of a lamp", "config": { "lambda_max": 0.8 }, "seed": 7 })),
        )
        .await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    assert_eq!(job["request"]["config"]["lambda_max"], 0.8);
    assert_eq!(job["request"]["config"]["start_step"], 4);
    assert_eq!(job["request"]["seed"], 7);
    let job = api.wait_job(job["id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done");
    assert_eq!(job["progress"]["step"], job["progress"]["total"]);

    let (status, cell) = api.json("GET", &format!("/sessions/{id}/cells/3"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(cell["status"], "done");
    assert_eq!(cell["prompt_history"], json!(["a photo of a lamp"]));
    let url = cell["results"][0]["image_url"].as_str().unwrap().to_string();
    let (status, bytes, mime) = api.send(Request::get(&url).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(mime.as_deref(), Some("image/png"));
    assert_eq!(image::load_from_memory(&bytes).unwrap().width(), 32);

    let (status, manifest, mime) =
        api.send(Request::get(format!("/results/{id}/cell_3_0.json")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(mime.as_deref(), Some("application/json"));
    let manifest: Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(manifest["config"]["request"]["config"]["lambda_max"], 0.8);

    let (status, list) = api.json("GET", "/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 1);
    api.service.shutdown();
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let api = Api::new();
    let (status, body) = api.upload(&[("caption", b"no image")]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let (status, body) = api.upload(&[("image", b"not an image at all")]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    assert!(body["error"].as_str().unwrap().contains("decode"));

    let oversized = vec![0u8; MAX_UPLOAD_BYTES + 1];
    let (status, _) = api.upload(&[("image", &oversized)]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    let way_over = vec![0u8; MAX_UPLOAD_BYTES + 200 * 1024];
    let (status, _) = api.upload(&[("image", &way_over)]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(api.service.sessions().is_empty());
    api.service.shutdown();
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let api = Api::new();
    let id = api.ready_session().await;
    let generate = |cell: usize| format!("/sessions/{id}/cells/{cell}/generate");

    let cases = [
        (generate(0), json!({ "prompt": "" }), StatusCode::BAD_REQUEST),
        (generate(0), json!({ "prompt": "x", "bogus": 1 }), StatusCode::BAD_REQUEST),
        (generate(0), json!({ "prompt": "x", "config": { "lamda_max": 1 } }), StatusCode::BAD_REQUEST),
        (generate(0), json!({ "prompt": "x", "config": { "start_step": 40 } }), StatusCode::BAD_REQUEST),
        (generate(6), json!({ "prompt": "x" }), StatusCode::NOT_FOUND),
        ("/sessions/missing/cells/0/generate".into(), json!({ "prompt": "x" }), StatusCode::NOT_FOUND),
        (format!("/sessions/{id}/cells/1/import"), json!({ "from_cell": 0, "ordinal": 0 }), StatusCode::NOT_FOUND),
    ];
    for (uri, body, want) in cases {
        let (status, resp) = api.json("POST", &uri, Some(body.clone())).await;
        assert_eq!(status, want, "{uri} {body} -> {resp}");
        assert!(resp["error"].is_string());
    }
    for uri in ["/sessions/missing".to_string(), "/jobs/missing".into(), format!("/results/{id}/..%2Fsession.json")] {
        let (status, _) = api.json("GET", &uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
    api.service.shutdown();
}

#[tokio::test]
async fn import_and_cancel_through_the_api() {
    let api = Api::new();
    let id = api.ready_session().await;
    let (_, job) = api
        .json("POST", &format!("/sessions/{id}/cells/0/generate"), Some(json!({ "prompt": "a chair" })))
        .await;
    api.wait_job(job["id"].as_str().unwrap()).await;

    let (status, cell) = api
        .json("POST", &format!("/sessions/{id}/cells/1/import"), Some(json!({ "from_cell": 0, "ordinal": 0 })))
        .await;
    assert_eq!(status, StatusCode::OK, "{cell}");
    assert_eq!(cell["imported_from"], json!({ "cell": 0, "ordinal": 0 }));
    let (status, body) = api
        .json("POST", &format!("/sessions/{id}/cells/0/import"), Some(json!({ "from_cell": 1, "ordinal": 0 })))
        .await;
    // cell 1 has no results yet
    assert_eq!(status, StatusCode::NOT_FOUND, "{body}");

    let (_, job) = api
        .json("POST", &format!("/sessions/{id}/cells/1/generate"), Some(json!({ "prompt": "a sofa" })))
        .await;
    assert_eq!(api.wait_job(job["id"].as_str().unwrap()).await["state"], "done");
    let (status, _) = api
        .json("POST", &format!("/sessions/{id}/cells/0/import"), Some(json!({ "from_cell": 1, "ordinal": 0 })))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, job) = api
        .json("POST", &format!("/sessions/{id}/cells/2/generate"), Some(json!({ "prompt": "slow [stall]" })))
        .await;
    let job_id = job["id"].as_str().unwrap();
    let (status, _) = api.json("POST", &format!("/jobs/{job_id}/cancel"), None).await;
    assert_eq!(status, StatusCode::OK);
    let job = api.wait_job(job_id).await;
    assert_eq!(job["state"], "failed");
    api.service.shutdown();
}
