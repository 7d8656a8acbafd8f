use fusionnet_client::{Client, ClientError};
use fusionnet_core::api::{AugmentRequest, EvaluateRequest, PredictRequest, TrainRequest};
use fusionnet_core::architecture::NetworkSpec;
use fusionnet_core::metrics::EvalConfig;
use fusionnet_core::pipeline::imageio::read_gray;
use fusionnet_core::pipeline::synthetic::write_corpus;
use fusionnet_core::pipeline::{load_checkpoint, load_dataset, AugmentConfig, DatasetManifest, TrainConfig};

async fn client() -> Client {
    let addr = fusionnet_server::spawn(([127, 0, 0, 1], 0).into()).await.unwrap();
    Client::new(format!("http://{addr}/")).with_poll_interval(std::time::Duration::from_millis(20))
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.network = NetworkSpec {
        levels: 2,
        base_features: 2,
        input_size: [24, 24],
        ..NetworkSpec::default()
    };
    cfg.augmentation = AugmentConfig {
        elastic_amplitude: 2.0,
        pad_radius: 4,
        ..AugmentConfig::default()
    };
    cfg.training.epochs = 1;
    cfg.training.batch_size = 4;
    cfg.training.folds = 1;
    cfg
}

#[tokio::test]
async fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_corpus(&d.join("data"), 2, 16, 3).unwrap();
    let c = client().await;
    assert_eq!(c.health().await.unwrap().status, "ok");

    let req = TrainRequest {
        config: tiny_config(),
        data: d.join("data/manifest.toml"),
        out: d.join("model.fnet"),
        resume: None,
    };
    let job = c.start_training(&req).await.unwrap().job;
    let mut phases = Vec::new();
    let mut steps = Vec::new();
    let outcome = c
        .wait_training(job, |p, total| phases.push((p.to_string(), total)), |r| steps.push(r.step))
        .await
        .unwrap();
    assert_eq!(phases.last().unwrap(), &("final".to_string(), 4));
    assert_eq!(steps, vec![0, 1, 2, 3]);
    assert_eq!(outcome.steps, 4);
    assert!(outcome.folds.is_empty());
    let ckpt = load_checkpoint(&outcome.checkpoint).unwrap();
    assert_eq!(ckpt.history.len(), 4);
    assert_eq!(outcome.final_loss, ckpt.history.last().copied());

    let pred = c
        .predict(&PredictRequest {
            ckpt: outcome.checkpoint.clone(),
            input: d.join("data/manifest.toml"),
            out: d.join("pred"),
            tta: true,
        })
        .await
        .unwrap();
    assert_eq!(pred.files.len(), 2);
    for f in &pred.files {
        let img = read_gray(&f.output).unwrap();
        assert_eq!(img.dims(), (16, 16));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let single = c
        .predict(&PredictRequest {
            ckpt: outcome.checkpoint.clone(),
            input: d.join("data/image_00.png"),
            out: d.join("single"),
            tta: false,
        })
        .await
        .unwrap();
    assert_eq!(single.files[0].output, d.join("single/image_00.png"));

    let scores = c
        .evaluate(&EvaluateRequest {
            pred: d.join("pred"),
            truth: d.join("data/manifest.toml"),
            config: EvalConfig::default(),
        })
        .await
        .unwrap();
    assert_eq!(scores.images.len(), 2);
    assert_eq!(scores.images[0].name, "image_00");
    for v in [scores.mean.v_rand, scores.mean.v_info, scores.mean.v_dice] {
        assert!((0.0..=1.0).contains(&v));
    }

    // resuming a finished run adds nothing
    let again = c
        .start_training(&TrainRequest {
            resume: Some(outcome.checkpoint.clone()),
            out: d.join("again.fnet"),
            ..req
        })
        .await
        .unwrap();
    let resumed = c.wait_training(again.job, |_, _| {}, |_| panic!("no steps expected")).await.unwrap();
    assert_eq!(resumed.steps, 4);
}

#[tokio::test]
async fn augment_writes_an_enriched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data"), 2, 16, 0).unwrap();
    let c = client().await;
    let req = AugmentRequest {
        data: dir.path().join("data/manifest.toml"),
        out: dir.path().join("aug"),
        seed: 4,
        augmentation: AugmentConfig::default(),
    };
    let resp = c.augment(&req).await.unwrap();
    assert_eq!(resp.samples, 16);
    let manifest = DatasetManifest::load(&resp.manifest).unwrap();
    assert_eq!(manifest.samples[1].image.to_str().unwrap(), "image_00_r90.png");
    let pairs = load_dataset(&manifest).unwrap();
    assert!(pairs.iter().all(|p| p.dims() == (16, 16)));

    let first = std::fs::read(dir.path().join("aug/image_01_r180f.png")).unwrap();
    c.augment(&req).await.unwrap();
    assert_eq!(std::fs::read(dir.path().join("aug/image_01_r180f.png")).unwrap(), first);
}

#[tokio::test]
async fn service_errors_become_api_errors() {
    let dir = tempfile::tempdir().unwrap();
    let c = client().await;
    let err = c
        .evaluate(&EvaluateRequest {
            pred: dir.path().to_path_buf(),
            truth: dir.path().join("missing.toml"),
            config: EvalConfig::default(),
        })
        .await
        .unwrap_err();
    match err {
        ClientError::Api { status, message } => {
            assert_eq!(status, 422);
            assert!(message.contains("missing.toml"), "{message}");
        }
        other => panic!("unexpected {other}"),
    }

    let job = c
        .start_training(&TrainRequest {
            config: tiny_config(),
            data: dir.path().join("missing.toml"),
            out: dir.path().join("m.fnet"),
            resume: None,
        })
        .await
        .unwrap()
        .job;
    let err = c.wait_training(job, |_, _| {}, |_| {}).await.unwrap_err();
    assert!(matches!(err, ClientError::JobFailed { .. }), "{err}");
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = Client::new(format!("http://{addr}")).health().await.unwrap_err();
    assert!(matches!(err, ClientError::Transport { .. }), "{err}");
    assert!(err.to_string().contains(&addr.to_string()));
}
