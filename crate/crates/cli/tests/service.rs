use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use sbir_cli::config::AppConfig;
use sbir_cli::engine::{self, Engine, QueryResponse};
use sbir_cli::service::{router, Health, ServiceInfo, ServiceState};
use sbir_core::data::StrokeSketch;
use tower::ServiceExt;

struct Fixture {
    root: PathBuf,
    config: AppConfig,
}

fn config(root: &Path) -> AppConfig {
    AppConfig::parse(&format!(
        r#"seed = 9
[paths]
data_root = "{r}/data"
checkpoints = "{r}/ckpt"
index = "{r}/photos.sbix"

[data.synth]
num_categories = 4
photos_per_category = 4
sketches_per_category = 3
seed = 9

[service]
top_k = 3
"#,
        r = root.display()
    ))
    .unwrap()
}

/// Untrained network, its checkpoint and an index over every photo.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = scratch("service-fixture");
        let config = config(&root);
        let data = engine::load_dataset(&config).unwrap();
        let net = engine::build_net(&config).unwrap();
        std::fs::create_dir_all(&config.paths.checkpoints).unwrap();
        net.save(config.final_checkpoint()).unwrap();
        let prep = sbir_core::data::Preprocessor::new(config.data.prep.clone(), config.photo_input(), &data).unwrap();
        let mut index = sbir_core::index::EmbeddingIndex::new(net.embedding_dim()).unwrap();
        let photos: Vec<_> = data.manifest.items.iter().filter(|i| i.is_photo_like()).collect();
        let ids: Vec<&str> = photos.iter().map(|p| p.id.as_str()).collect();
        for (p, v) in photos.iter().zip(sbir_core::trainer::embed_photos(&net, &prep, &ids).unwrap()) {
            index.add(p.id.clone(), &v, Some(p.category.clone())).unwrap();
        }
        index.snapshot();
        index.save(&config.paths.index).unwrap();
        Fixture { root, config }
    })
}

fn loaded() -> (Arc<ServiceState>, &'static Fixture) {
    let f = fixture();
    let state = Arc::new(ServiceState::new(f.config.clone()));
    state.set_engine(Engine::load(&f.config, &f.config.final_checkpoint(), &f.config.paths.index));
    (state, f)
}

fn sketch_text(f: &Fixture) -> String {
    std::fs::read_to_string(f.root.join("data/sketches/c01_s000.json")).unwrap()
}

async fn send(state: &Arc<ServiceState>, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let res = router(state.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let body = to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, body, ctype)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(body.into()).unwrap()
}

#[tokio::test]
async fn health_is_unavailable_until_loaded() {
    let f = fixture();
    let state = Arc::new(ServiceState::new(f.config.clone()));
    let (status, _, _) = send(&state, get("/health")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _, _) = send(&state, post("/query", sketch_text(f))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    state.set_engine(Engine::load(&f.config, &f.config.final_checkpoint(), &f.config.paths.index));
    let (status, body, _) = send(&state, get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    let health: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(health.entries, 16);
    assert_eq!(health.model_fingerprint, engine::file_fingerprint(&f.config.final_checkpoint()).unwrap());
    assert_eq!(health.index_fingerprint, engine::file_fingerprint(&f.config.paths.index).unwrap());
}

#[tokio::test]
async fn failed_load_keeps_health_unavailable() {
    let f = fixture();
    let state = Arc::new(ServiceState::new(f.config.clone()));
    state.set_engine(Engine::load(&f.config, &f.root.join("missing.sbf"), &f.config.paths.index));
    let (status, body, _) = send(&state, get("/health")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(String::from_utf8_lossy(&body).contains("missing.sbf"));
}

#[tokio::test]
async fn query_returns_k_sorted_results_matching_the_index() {
    let (state, f) = loaded();
    let (status, body, _) = send(&state, post("/query?k=5", sketch_text(f))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let res: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(res.k, 5);
    assert_eq!(res.results.len(), 5);
    assert!(res.results.windows(2).all(|w| w[0].distance <= w[1].distance));
    assert_eq!(res.results.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);

    let engine = Engine::load(&f.config, &f.config.final_checkpoint(), &f.config.paths.index).unwrap();
    let sketch = StrokeSketch::from_json(&sketch_text(f)).unwrap();
    let direct = engine.index.query(&engine.embed(&sketch).unwrap(), 5, engine.net.query_scale).unwrap();
    let ids: Vec<_> = direct.iter().map(|h| h.id.clone()).collect();
    assert_eq!(res.results.iter().map(|h| h.id.clone()).collect::<Vec<_>>(), ids);
    assert_eq!(res.results[0].thumbnail, format!("/image/{}", ids[0]));

    let (_, body, _) = send(&state, post("/query", sketch_text(f))).await;
    let res: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(res.results.len(), 3);
}

#[tokio::test]
async fn malformed_sketches_are_bad_requests() {
    let (state, f) = loaded();
    let cases = [
        "not json",
        r#"{"version":2,"canvas":{"w":10,"h":10},"strokes":[]}"#,
        r#"{"version":1,"canvas":{"w":10,"h":10}}"#,
        r#"{"version":1,"canvas":{"w":-1,"h":10},"strokes":[[[1,1],[2,2]]]}"#,
    ];
    for case in cases {
        let (status, body, _) = send(&state, post("/query", case)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{case}");
        let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(err["error"].as_str().is_some_and(|e| !e.is_empty()), "{case}");
    }
    let (status, body, _) = send(&state, post("/query", r#"{"version":2,"canvas":{"w":10,"h":10},"strokes":[]}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("version"));
    let (status, _, _) = send(&state, post("/query?k=0", sketch_text(f))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn images_are_served_by_id() {
    let (state, f) = loaded();
    let (status, body, ctype) = send(&state, get("/image/c02_p001")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(body, std::fs::read(f.root.join("data/photos/c02_p001.png")).unwrap());
    let (status, _, _) = send(&state, get("/image/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn config_reports_model_and_scale() {
    let (state, _) = loaded();
    let (status, body, _) = send(&state, get("/config")).await;
    assert_eq!(status, StatusCode::OK);
    let info: ServiceInfo = serde_json::from_slice(&body).unwrap();
    assert_eq!(info.top_k, 3);
    assert_eq!(info.dim, 128);
    assert_eq!(info.scale, 2.0);
}

#[test]
fn stroke_documents_round_trip_byte_exact() {
    let f = fixture();
    for entry in std::fs::read_dir(f.root.join("data/sketches")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        let sketch = StrokeSketch::from_json(&text).unwrap();
        assert_eq!(sketch.to_json(), text.trim_end());
        assert_eq!(StrokeSketch::from_json(&sketch.to_json()).unwrap(), sketch);
    }
    let ui = r#"{"version":1,"canvas":{"w":512,"h":384},"strokes":[[[10.5,20.25],[11,21]],[[100,100]]]}"#;
    let sketch = StrokeSketch::from_json(ui).unwrap();
    assert_eq!((sketch.width, sketch.height), (512.0, 384.0));
    assert_eq!(sketch.strokes[0][1], [11.0, 21.0]);
    assert_eq!(sketch.to_json(), ui);
}

/// Fresh directory under cargo's per-target scratch space.
fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
