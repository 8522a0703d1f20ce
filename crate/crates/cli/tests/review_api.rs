use std::path::Path;
use std::sync::Arc;

use mdb_cli::server::{serve, AppState};
use mdb_core::curation::image::Image;
use mdb_core::datasets::{Label, Manifest, SampleRecord};
use mdb_core::review::{load_log, replay, ReviewSession};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::sync::oneshot;

struct Running {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
    http: reqwest::Client,
}

impl Running {
    async fn get(&self, path: &str) -> reqwest::Response {
        self.http.get(format!("{}{path}", self.base)).send().await.unwrap()
    }

    async fn post(&self, body: impl Into<reqwest::Body>) -> reqwest::Response {
        self.http
            .post(format!("{}/api/decision", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap()
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.await.unwrap().unwrap();
    }
}

fn manifest(n: usize) -> Manifest {
    let records = (0..n)
        .map(|i| {
            let mut r = SampleRecord::new(format!("img{i}"), format!("img{i}.png"), Label::Fake, "gen");
            r.meta.insert("style".into(), json!("photo"));
            r
        })
        .collect();
    Manifest::new(records).unwrap()
}

async fn start(dir: &Path, m: Manifest, ui: Option<&Path>) -> Running {
    let session = ReviewSession::open(m, dir.join("decisions.jsonl")).unwrap();
    let state = Arc::new(AppState::new(session, dir, ui.map(Path::to_path_buf)));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel();
    let handle = tokio::spawn(serve(listener, state, async {
        let _ = rx.await;
    }));
    Running {
        base,
        stop: Some(tx),
        handle,
        http: reqwest::Client::new(),
    }
}

fn ids(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn pending_decide_progress_round_trip() {
    let dir = TempDir::new().unwrap();
    let srv = start(dir.path(), manifest(3), None).await;

    let pending: Value = srv.get("/api/pending").await.json().await.unwrap();
    assert_eq!(ids(&pending), ["img0", "img1", "img2"]);
    assert_eq!(pending[0]["path"], "img0.png");
    assert_eq!(pending[0]["meta"]["style"], "photo");

    let r = srv.post(json!({"id": "img1", "verdict": "keep", "annotator": "ana"}).to_string()).await;
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.json::<Value>().await.unwrap(), json!({"accepted": true, "decided_count": 1}));

    let pending: Value = srv.get("/api/pending?limit=10").await.json().await.unwrap();
    assert_eq!(ids(&pending), ["img0", "img2"]);
    let limited: Value = srv.get("/api/pending?limit=1").await.json().await.unwrap();
    assert_eq!(ids(&limited), ["img0"]);
    let progress: Value = srv.get("/api/progress").await.json().await.unwrap();
    assert_eq!(progress, json!({"total": 3, "decided": 1, "kept": 1, "dropped": 0}));

    // last write wins
    srv.post(json!({"id": "img1", "verdict": "drop", "annotator": "ben"}).to_string()).await;
    let progress: Value = srv.get("/api/progress").await.json().await.unwrap();
    assert_eq!(progress, json!({"total": 3, "decided": 1, "kept": 0, "dropped": 1}));
    srv.stop().await;
}

#[tokio::test]
async fn error_statuses() {
    let dir = TempDir::new().unwrap();
    let srv = start(dir.path(), manifest(2), None).await;
    let r = srv.post(json!({"id": "ghost", "verdict": "keep", "annotator": "a"}).to_string()).await;
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    assert!(r.json::<Value>().await.unwrap()["error"].as_str().unwrap().contains("ghost"));
    let r = srv.post(json!({"id": "img0", "verdict": "maybe", "annotator": "a"}).to_string()).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = srv.post("{not json").await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = srv.post(json!({"verdict": "keep"}).to_string()).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(srv.get("/api/image/ghost").await.status(), StatusCode::NOT_FOUND);
    // image file absent on disk
    assert_eq!(srv.get("/api/image/img0").await.status(), StatusCode::NOT_FOUND);
    assert_eq!(srv.get("/index.html").await.status(), StatusCode::NOT_FOUND);
    let progress: Value = srv.get("/api/progress").await.json().await.unwrap();
    assert_eq!(progress["decided"], 0);
    srv.stop().await;
}

#[tokio::test]
async fn serves_images_and_ui_bundle() {
    let dir = TempDir::new().unwrap();
    let img = Image::from_fn(4, 3, 3, |x, y, c| (x * 40 + y * 20 + c) as u8).unwrap();
    img.save_png(dir.path().join("img0.png")).unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>review</html>").unwrap();
    std::fs::write(ui.join("app.js"), "console.log(1)").unwrap();
    let srv = start(dir.path(), manifest(1), Some(&ui)).await;

    let r = srv.get("/api/image/img0").await;
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "image/png");
    assert_eq!(Image::decode_png(&r.bytes().await.unwrap()).unwrap(), img);

    let r = srv.get("/").await;
    assert_eq!(r.headers()["content-type"], "text/html; charset=utf-8");
    assert_eq!(r.text().await.unwrap(), "<html>review</html>");
    assert_eq!(srv.get("/app.js").await.headers()["content-type"], "text/javascript");
    assert_eq!(srv.get("/../decisions.jsonl").await.status(), StatusCode::NOT_FOUND);
    assert_eq!(srv.get("/%2e%2e/decisions.jsonl").await.status(), StatusCode::NOT_FOUND);
    srv.stop().await;
}

#[tokio::test]
async fn log_replay_matches_served_state_and_survives_restart() {
    let dir = TempDir::new().unwrap();
    let m = manifest(6);
    let srv = start(dir.path(), m.clone(), None).await;
    let mut posts = Vec::new();
    for (i, (id, verdict)) in [("img0", "keep"), ("img3", "drop"), ("img0", "drop"), ("img5", "keep")].into_iter().enumerate() {
        let http = srv.http.clone();
        let url = format!("{}/api/decision", srv.base);
        posts.push(tokio::spawn(async move {
            http.post(url)
                .json(&json!({"id": id, "verdict": verdict, "annotator": format!("a{i}")}))
                .send()
                .await
                .unwrap()
                .status()
        }));
    }
    for p in posts {
        assert_eq!(p.await.unwrap(), StatusCode::OK);
    }
    let served_pending: Value = srv.get("/api/pending").await.json().await.unwrap();
    let served_progress: Value = srv.get("/api/progress").await.json().await.unwrap();
    srv.stop().await;

    let log = load_log(dir.path().join("decisions.jsonl")).unwrap();
    assert_eq!(log.len(), 4);
    let replayed = replay(&log, &m).unwrap();
    let offline = ReviewSession::in_memory(replayed.clone()).unwrap();
    assert_eq!(serde_json::to_value(offline.progress()).unwrap(), served_progress);
    let offline_pending: Vec<String> = offline.pending(usize::MAX).into_iter().map(|r| r.id).collect();
    assert_eq!(offline_pending, ids(&served_pending));
    assert_eq!(replay(&log, &replayed).unwrap(), replayed);

    // A restarted server resumes from the same log.
    let srv = start(dir.path(), m, None).await;
    let progress: Value = srv.get("/api/progress").await.json().await.unwrap();
    assert_eq!(progress, served_progress);
    srv.stop().await;
}
