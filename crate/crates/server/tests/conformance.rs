use std::sync::Arc;

use pictor_server::conformance::{run, toy_service};
use pictor_server::AppState;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_conformance_run_passes() {
    let service = tokio::task::spawn_blocking(|| toy_service(40, 3)).await.unwrap().unwrap();
    let n = service.index.len();
    assert!(n >= 30, "toy index has {n} entries");
    let state = Arc::new(AppState::new(service));
    let checks = run(state.clone()).await;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(checks.len() > 25);
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(state.service().is_ok());
}

#[tokio::test]
async fn empty_state_answers_503_everywhere() {
    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use tower::ServiceExt;

    let app = pictor_server::router(Arc::new(AppState::default()), &Default::default());
    for uri in ["/health", "/painting/x", "/painting/x/thumbnail"] {
        let resp = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE, "{uri}");
    }
    let req = Request::post("/similar").body(Body::from(r#"{"painting_id":"x","task":"style"}"#)).unwrap();
    assert_eq!(app.oneshot(req).await.unwrap().status(), StatusCode::SERVICE_UNAVAILABLE);
}

#[test]
fn index_must_match_checkpoint_and_failed_reload_keeps_service() {
    let s = toy_service(30, 5).unwrap();
    let sha = s.checkpoint_sha256.clone();
    let state = AppState::new(s);
    let err = state.reload_with(|| {
        let cur = toy_service(30, 5)?;
        pictor_server::Service::new(cur.net, cur.index, cur.manifest, cur.source, None, "0".repeat(64))
    });
    assert!(matches!(err, Err(pictor_server::ServerError::Mismatch(_))));
    assert_eq!(state.service().unwrap().checkpoint_sha256, sha);
}
