use descattn_client::Client;
use descattn_core::aggregator::AggregatorConfig;
use descattn_core::api::{FlopsRequest, ForwardRequest, HistogramRequest, RunRequest, VerifyRequest};
use descattn_core::attention::HistogramMode;
use descattn_core::bench::{BenchMode, BenchRun, BenchSpec};
use descattn_core::streaming::{run_stream, StreamConfig};
use descattn_core::tokens::generate_synthetic;
use descattn_core::{api, Precision, TokenTensor};

async fn client() -> Client {
    let addr = descattn_service::spawn("127.0.0.1:0").await.unwrap();
    Client::new(format!("http://{addr}/"))
}

fn run_request() -> RunRequest {
    RunRequest {
        config: AggregatorConfig {
            layers: 2,
            ..Default::default()
        },
        frames: 3,
        token_seed: 4,
        precision: Precision::F32,
    }
}

#[tokio::test]
async fn forward_over_http_matches_local_call() {
    let c = client().await;
    assert_eq!(c.health().await.unwrap().status, "ok");
    let req = ForwardRequest {
        run: run_request(),
        include_tokens: true,
    };
    let remote = c.forward(&req).await.unwrap();
    let local = api::forward(&req).unwrap();
    assert_eq!(remote.checksum, local.checksum);
    assert_eq!(remote.keys_per_layer, local.keys_per_layer);
    let (a, b) = (remote.output.unwrap(), local.output.unwrap());
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0)));
}

#[tokio::test]
async fn service_errors_surface_with_kind() {
    let c = client().await;
    let mut req = run_request();
    req.config.layers = 0;
    let e = c.compare(&req).await.unwrap_err();
    assert_eq!(e.kind(), Some("invalid_config"));
}

#[tokio::test]
async fn analysis_endpoints() {
    let c = client().await;
    let f = c
        .flops(&FlopsRequest {
            stream: StreamConfig::default(),
            frames: 30,
            precision: Precision::F32,
        })
        .await
        .unwrap();
    assert_eq!(f.comparison.dense.tokens, 30 * 69);

    let h = c
        .histogram(&HistogramRequest {
            run: run_request(),
            layer: 0,
            mode: HistogramMode::Frame,
        })
        .await
        .unwrap();
    assert_eq!(h.histogram.total(), 4 * 3 * 69 * 69);

    let v = c
        .verify(&VerifyRequest {
            seed: 2,
            filters: vec!["compression.".into()],
        })
        .await
        .unwrap();
    assert!(v.passed());
}

#[tokio::test]
async fn stream_handle_round_trip() {
    let c = client().await;
    let cfg = StreamConfig {
        chunk: 3,
        retain: 1,
        persist_first_frame: true,
        base: AggregatorConfig {
            layers: 2,
            ..Default::default()
        },
    };
    let s = c.create_stream(cfg, Precision::F32).await.unwrap();
    let t = generate_synthetic::<f32>(7, cfg.base.layout, 1).unwrap();
    let mut parts = Vec::new();
    for start in (0..7).step_by(3) {
        parts.push(s.push(&t.slice_frames(start..(start + 3).min(7)).unwrap()).await.unwrap());
    }
    assert_eq!(TokenTensor::concat(&parts).unwrap(), run_stream(&t, &cfg).unwrap());
    assert_eq!(s.cache().await.unwrap().frames_seen, 7);

    let oversized = generate_synthetic::<f32>(4, cfg.base.layout, 1).unwrap();
    assert_eq!(s.push(&oversized).await.unwrap_err().kind(), Some("invalid_config"));
    s.close().await.unwrap();
}

#[tokio::test]
async fn bench_over_http() {
    let c = client().await;
    let mut run = BenchRun {
        mode: BenchMode::Dense,
        frames: 2,
        ..Default::default()
    };
    run.stream.base.layers = 1;
    let r = c
        .bench(&BenchSpec {
            runs: vec![run],
            parallel: false,
        })
        .await
        .unwrap();
    assert_eq!(r.records.len(), 3);
    assert!(r.summaries[0].deterministic);
}
