mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use kconflict::backends::{BackendError, BigramProvider, MockServer, RemoteClient, RemoteOptions, ServedBackend};
use kconflict::runner::{run_experiment, BackendSpec, Backends, BackendsConfig, ExperimentConfig, Mode, RunError};

fn setup(dir: &Path) -> (MockServer, ExperimentConfig) {
    let items = common::synthetic_items(30);
    common::write_dataset(&dir.join("dataset.jsonl"), &items);
    let corpus = common::bigram_corpus(&items);
    std::fs::write(dir.join("corpus.txt"), &corpus).unwrap();
    let (tok, model) = BigramProvider::from_corpus(&corpus).unwrap();
    let server = MockServer::start(
        "127.0.0.1:0",
        ServedBackend {
            provider: Some(Arc::new(model)),
            tokenizer: Some(Arc::new(tok)),
            generator: None,
        },
        2,
    )
    .unwrap();
    let cfg = ExperimentConfig::from_toml(&format!(
        r#"
dataset = "{}"
sample_size = 10
mode = "closed_book"
k = 3
max_len = 6
workers = 2
[backends]
expert = "{}"
"#,
        dir.join("dataset.jsonl").display(),
        server.base_url()
    ))
    .unwrap();
    (server, cfg)
}

fn tokenize_bodies(server: &MockServer) -> Vec<String> {
    server
        .requests()
        .into_iter()
        .filter(|(_, path, _)| path == "/v1/tokenize")
        .map(|(_, _, body)| body)
        .collect()
}

#[test]
fn closed_book_prompts_carry_no_evidence() {
    let dir = tempfile::tempdir().unwrap();
    let (server, cfg) = setup(dir.path());
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.aggregate.n_failed, 0);
    let bodies = tokenize_bodies(&server);
    assert_eq!(bodies.len(), 10);
    assert!(bodies.iter().all(|b| !b.contains("Evidence") && !b.contains("long ago")));
    assert!(report.records.iter().all(|r| r.evidence.is_empty()));
}

#[test]
fn in_context_prompts_carry_evidence() {
    let dir = tempfile::tempdir().unwrap();
    let (server, mut cfg) = setup(dir.path());
    cfg.mode = Mode::InContext;
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.aggregate.n_failed, 0);
    let bodies = tokenize_bodies(&server);
    assert!(bodies.iter().all(|b| b.matches("Evidence [").count() == 3));
}

#[test]
fn remote_and_local_backends_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, mut cfg) = setup(dir.path());
    cfg.mode = Mode::InContext;
    let remote = run_experiment(&cfg).unwrap();
    cfg.backends.expert = Some(BackendSpec::Bigram(dir.path().join("corpus.txt")));
    let local = run_experiment(&cfg).unwrap();
    assert_eq!(remote.records, local.records);
    assert_eq!(remote.aggregate, local.aggregate);
    assert_eq!(remote.backend_calls, local.backend_calls);
}

#[test]
fn unreachable_server_is_a_transport_error_after_retries() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let client = RemoteClient::new(
        &format!("http://127.0.0.1:{port}"),
        RemoteOptions {
            retries: 1,
            backoff: Duration::from_millis(1),
            ..RemoteOptions::default()
        },
    );
    match client.fetch_descriptor() {
        Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("expected a transport error, got {other:?}"),
    }
    let err = Backends::connect(&BackendsConfig {
        expert: Some(BackendSpec::Http(format!("http://127.0.0.1:{port}"))),
        ..Default::default()
    })
    .err()
    .expect("connect fails");
    assert!(matches!(err, RunError::Backend(_)));
}

#[test]
fn generation_role_without_generator_reports_501() {
    let dir = tempfile::tempdir().unwrap();
    let (server, _) = setup(dir.path());
    let client = RemoteClient::new(&server.base_url(), RemoteOptions::default());
    let err = client
        .generate(&kconflict::backends::wire::GenerateRequest {
            prompt: "x".into(),
            temperature: 1.0,
            max_tokens: 4,
        })
        .unwrap_err();
    assert!(matches!(err, BackendError::Remote { status: 501, .. }));
}
