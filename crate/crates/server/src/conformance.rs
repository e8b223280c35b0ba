//! Scripted walk through every endpoint against an in-process router, used by the test
//! suites and available for smoke-testing a deployment's index.

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

use pictor::dataset::{Manifest, Split, Task};
use pictor::net::{NetConfig, PaintingNet};
use pictor::retrieval::{build_index, sha256_hex};
use pictor::synth::{SynthConfig, SynthCorpus};

use crate::{router, AppState, ServerConfig, Service, ServerError, THUMBNAIL_SIDE, TOP_LABELS};

/// Outcome of one scripted request.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Untrained small network and index over a small synthetic corpus.
pub fn toy_service(count: usize, seed: u64) -> Result<Service, ServerError> {
    let corpus = SynthCorpus::new(SynthConfig { count, seed, min_side: 96, ..SynthConfig::default() });
    let manifest = Manifest::build(corpus.metadata_csv().as_bytes(), "", 2, seed)?;
    let [a, s, g] = manifest.num_classes();
    let cfg = NetConfig { num_artist: a, num_style: s, num_genre: g, ..NetConfig::default() };
    let net = PaintingNet::build(cfg, seed)?;
    let sha = sha256_hex(&net.to_checkpoint(json!({})).to_bytes());
    let index = build_index(&net, &sha, &manifest, &corpus, &[Split::Train, Split::Test], None)?;
    Service::new(net, index, manifest, Arc::new(corpus), None, sha)
}

struct Reply {
    status: StatusCode,
    content_type: String,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

async fn send(app: &Router, req: Request<Body>) -> Reply {
    let resp = app.clone().oneshot(req).await.expect("router is infallible");
    let status = resp.status();
    let content_type = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let body = to_bytes(resp.into_body(), usize::MAX).await.map(|b| b.to_vec()).unwrap_or_default();
    Reply { status, content_type, body }
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).expect("valid request")
}

fn post_json(uri: &str, body: &Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .expect("valid request")
}

const BOUNDARY: &str = "pictor-conformance-boundary";

/// `multipart/form-data` request carrying `bytes` in field `field`.
pub fn multipart_request(uri: &str, field: &str, bytes: &[u8]) -> Request<Body> {
    let mut body = format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"upload.png\"\r\nContent-Type: application/octet-stream\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    Request::post(uri)
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .expect("valid request")
}

struct Recorder(Vec<Check>);

impl Recorder {
    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.0.push(Check { name: name.to_string(), passed, detail: detail.into() });
    }

    fn status(&mut self, name: &str, reply: &Reply, want: StatusCode) -> bool {
        let ok = reply.status == want;
        let detail = format!("status {} (want {want})", reply.status);
        self.check(name, ok, detail);
        ok
    }
}

fn distribution_ok(task: &Value, classes: usize) -> Result<(), String> {
    let dist: Vec<f64> = task["distribution"]
        .as_array()
        .ok_or("missing distribution")?
        .iter()
        .filter_map(Value::as_f64)
        .collect();
    if dist.len() != classes {
        return Err(format!("{} probabilities for {classes} classes", dist.len()));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(format!("probabilities sum to {sum}"));
    }
    let top: Vec<f64> = task["top"]
        .as_array()
        .ok_or("missing top labels")?
        .iter()
        .filter_map(|l| l["probability"].as_f64())
        .collect();
    if top.len() != classes.min(TOP_LABELS) || top.windows(2).any(|w| w[0] < w[1]) {
        return Err(format!("top labels {top:?} are not the {} best in order", classes.min(TOP_LABELS)));
    }
    let best = dist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top.first() != Some(&best) {
        return Err("first top label is not the most probable".into());
    }
    Ok(())
}

fn hits(reply: &Reply) -> Vec<(String, f64, u64)> {
    reply.json()["hits"]
        .as_array()
        .map(|a| {
            a.iter()
                .map(|h| {
                    (
                        h["painting_id"].as_str().unwrap_or_default().to_string(),
                        h["score"].as_f64().unwrap_or(f64::NAN),
                        h["rank"].as_u64().unwrap_or(0),
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

fn ranked(h: &[(String, f64, u64)]) -> bool {
    h.iter().enumerate().all(|(i, x)| x.2 == i as u64 + 1) && h.windows(2).all(|w| w[0].1 >= w[1].1)
}

/// Runs the script against `state` and returns one entry per assertion. `state` is left
/// serving the same service it started with.
pub async fn run(state: Arc<AppState>) -> Vec<Check> {
    let mut rec = Recorder(Vec::new());
    let service = match state.service() {
        Ok(s) => s,
        Err(e) => {
            rec.check("service available", false, e.message);
            return rec.0;
        }
    };
    let small_limit = 16 * 1024;
    let app = router(state.clone(), &ServerConfig::default());
    let limited = router(state.clone(), &ServerConfig { max_upload_bytes: small_limit, static_dir: None });
    let n = service.index.len();
    let classes = service.manifest.num_classes();
    let probe_id = service.index.ids[0].clone();
    let record = service.manifest.record(&probe_id).cloned();
    let image = record.as_ref().and_then(|r| service.source.load(r).ok());
    let png = image.as_ref().and_then(|i| i.to_png().ok()).unwrap_or_default();

    // health
    let r = send(&app, get("/health")).await;
    if rec.status("health: 200", &r, StatusCode::OK) {
        let v = r.json();
        rec.check(
            "health: index size and checkpoint hash",
            v["index_size"] == json!(n) && v["checkpoint_sha256"] == json!(service.checkpoint_sha256),
            v.to_string(),
        );
    }

    // classify
    let r = send(&app, multipart_request("/classify", "image", &png)).await;
    if rec.status("classify: valid image 200", &r, StatusCode::OK) {
        let v = r.json();
        for t in Task::ALL {
            let res = distribution_ok(&v["tasks"][t.name()], classes[t.index()]);
            rec.check(&format!("classify: {t} probabilities normalized"), res.is_ok(), res.err().unwrap_or_default());
        }
        let again = send(&app, multipart_request("/classify", "image", &png)).await.json();
        rec.check(
            "classify: upload token is content-addressed",
            v["upload_token"] == again["upload_token"] && v["upload_token"] == json!(sha256_hex(&png)),
            v["upload_token"].to_string(),
        );
    }
    let r = send(&app, multipart_request("/classify", "image", b"definitely not an image")).await;
    rec.status("classify: undecodable upload 400", &r, StatusCode::BAD_REQUEST);
    let r = send(&app, multipart_request("/classify", "picture", &png)).await;
    rec.status("classify: missing image field 400", &r, StatusCode::BAD_REQUEST);
    let oversized = vec![0u8; small_limit * 2];
    let r = send(&limited, multipart_request("/classify", "image", &oversized)).await;
    rec.status("classify: oversized upload 413", &r, StatusCode::PAYLOAD_TOO_LARGE);

    // similar by id
    for task in Task::ALL {
        let r = send(&app, post_json("/similar", &json!({ "painting_id": probe_id, "task": task.name(), "k": 4 }))).await;
        if rec.status(&format!("similar: {task} by id 200"), &r, StatusCode::OK) {
            let h = hits(&r);
            rec.check(
                &format!("similar: {task} returns k hits, ranked, self excluded"),
                h.len() == 4.min(n - 1) && ranked(&h) && h.iter().all(|x| x.0 != probe_id),
                format!("{h:?}"),
            );
        }
    }
    let r = send(&app, post_json("/similar", &json!({ "painting_id": probe_id, "task": "style", "k": n + 10 }))).await;
    if rec.status("similar: k above index size 200", &r, StatusCode::OK) {
        let h = hits(&r);
        rec.check(
            "similar: k truncates to the index size minus the query",
            h.len() == n - 1 && ranked(&h),
            format!("{} hits for {n} indexed", h.len()),
        );
    }
    let r = send(&app, post_json("/similar", &json!({ "painting_id": probe_id, "task": "style" }))).await;
    if rec.status("similar: default k 200", &r, StatusCode::OK) {
        let h = hits(&r);
        rec.check("similar: default k is 4", h.len() == 4.min(n - 1), format!("{} hits", h.len()));
    }
    let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
    let r = send(&app, post_json("/similar", &json!({ "image": b64, "task": "genre", "k": 3 }))).await;
    if rec.status("similar: by uploaded image 200", &r, StatusCode::OK) {
        let h = hits(&r);
        rec.check("similar: upload query returns k ranked hits", h.len() == 3.min(n) && ranked(&h), format!("{h:?}"));
    }
    let cases = [
        ("similar: k = 0 400", json!({ "painting_id": probe_id, "task": "style", "k": 0 }), StatusCode::BAD_REQUEST),
        ("similar: unknown task 400", json!({ "painting_id": probe_id, "task": "era" }), StatusCode::BAD_REQUEST),
        ("similar: unknown id 404", json!({ "painting_id": "no-such-painting", "task": "style" }), StatusCode::NOT_FOUND),
        ("similar: both id and image 400", json!({ "painting_id": probe_id, "image": b64, "task": "style" }), StatusCode::BAD_REQUEST),
        ("similar: neither id nor image 400", json!({ "task": "style" }), StatusCode::BAD_REQUEST),
        ("similar: invalid base64 400", json!({ "image": "***", "task": "style" }), StatusCode::BAD_REQUEST),
    ];
    for (name, body, want) in cases {
        let r = send(&app, post_json("/similar", &body)).await;
        rec.status(name, &r, want);
    }
    let malformed = Request::post("/similar")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{not json"))
        .expect("valid request");
    let r = send(&app, malformed).await;
    rec.status("similar: malformed JSON 400", &r, StatusCode::BAD_REQUEST);

    // painting records and thumbnails
    let r = send(&app, get(&format!("/painting/{probe_id}"))).await;
    if rec.status("painting: known id 200", &r, StatusCode::OK) {
        let v = r.json();
        rec.check("painting: record matches", v["record"]["id"] == json!(probe_id), v["record"].to_string());
    }
    let r = send(&app, get("/painting/no-such-painting")).await;
    rec.status("painting: unknown id 404", &r, StatusCode::NOT_FOUND);
    let r = send(&app, get(&format!("/painting/{probe_id}/thumbnail"))).await;
    if rec.status("thumbnail: 200", &r, StatusCode::OK) {
        let decoded = pictor::imaging::ImageBuffer::decode(&r.body);
        let ok = r.content_type == "image/png"
            && decoded.as_ref().is_ok_and(|i| i.width().max(i.height()) <= THUMBNAIL_SIDE);
        rec.check("thumbnail: PNG within the size bound", ok, r.content_type.clone());
    }

    // reload window
    state.begin_reload();
    let r = send(&app, get("/health")).await;
    rec.status("reload: health 503 while swapping", &r, StatusCode::SERVICE_UNAVAILABLE);
    let r = send(&app, post_json("/similar", &json!({ "painting_id": probe_id, "task": "style" }))).await;
    rec.status("reload: similar 503 while swapping", &r, StatusCode::SERVICE_UNAVAILABLE);
    match Arc::try_unwrap(service) {
        Ok(s) => state.finish_reload(s),
        Err(_) => {
            rec.check("reload: service handle released", false, "service still shared; cannot restore");
            return rec.0;
        }
    }
    let r = send(&app, get("/health")).await;
    rec.status("reload: health 200 after swap", &r, StatusCode::OK);

    if image.is_none() {
        rec.check("fixture image readable", false, format!("cannot load `{probe_id}`"));
    }
    rec.0
}
