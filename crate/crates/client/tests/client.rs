use stylemix_client::{Client, ClientError, StatusCode};
use stylemix_core::api::ComposeContext;
use stylemix_core::generator::ToyGenerator;
use stylemix_core::hierarchy::{build_tree, Topology};
use stylemix_core::segmentation::{fit_region_model, Labeling, SegmentConfig};
use stylemix_service::{spawn, AppState};

fn context() -> ComposeContext {
    let g = ToyGenerator::build(6);
    let config = SegmentConfig {
        num_images: 4,
        sample_points: Some(600),
        ..SegmentConfig::default()
    };
    let m = fit_region_model(&g, &config, &Labeling::Auto).unwrap();
    let tree = build_tree(&Topology::toy(), g.layout(), Some(2), 3).unwrap();
    ComposeContext::new(g, m, tree, Default::default()).unwrap()
}

async fn client() -> Client {
    let (addr, _) = spawn("127.0.0.1:0".parse().unwrap(), AppState::loaded(context())).await.unwrap();
    Client::new(format!("http://{addr}/"))
}

#[test]
fn base_drops_trailing_slashes() {
    assert_eq!(Client::new("http://localhost:8080//").base(), "http://localhost:8080");
}

#[tokio::test]
async fn sample_ids_resolve_in_compose() {
    let c = client().await;
    let layout = c.layout().await.unwrap();
    let s = c.sample(7, None).await.unwrap();
    assert_eq!(s.seed, 7);
    let body = serde_json::json!({
        "regions": layout.regions.iter().map(|r| (r.clone(), serde_json::json!({"code_id": s.code_id}))).collect::<serde_json::Map<_, _>>(),
        "global": {"seed": 7},
    });
    let timed = c.post_raw("/compose", &body.to_string()).await.unwrap();
    assert!(timed.timing_ms.is_some());
    assert!(timed.value["image_png"].is_string());
}

#[tokio::test]
async fn error_bodies_carry_status_and_field() {
    let c = client().await;
    let err = c.post_raw("/compose", "{not json").await.unwrap_err();
    assert_eq!(err.status(), Some(StatusCode::BAD_REQUEST));
    assert_eq!(err.field(), Some("body"));
    let err = c.post_raw("/compose", r#"{"regions": 3}"#).await.unwrap_err();
    assert_eq!(err.status(), Some(StatusCode::UNPROCESSABLE_ENTITY));
    let err = c.sample(1, Some(0.0)).await.unwrap_err();
    assert!(matches!(&err, ClientError::Status { .. }));
    assert_eq!(err.field(), Some("psi"));
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = Client::new(format!("http://{addr}")).layout().await.unwrap_err();
    assert!(matches!(err, ClientError::Transport(_)));
    assert_eq!(err.field(), None);
}
