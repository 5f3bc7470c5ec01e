//! LLM transport and policy behaviour, offline: cassette replay and a local HTTP stub.

mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use step_core::decompose::{build_context, ContextMode, DecomposerOutput, DecompositionPolicy, PolicyError};
use step_core::llm::{
    parse_verdict, subgoal_bundle, Cassette, EndpointConfig, LlmClient, LlmJudge, LlmPolicy, TransportError,
    TransportMode,
};
use step_core::planner::{run_episode, PlannerConfig};
use step_core::tree::SubgoalTree;
use step_core::world::{observe, Embodiment};

fn committed_cassette() -> Arc<Cassette> {
    Arc::new(Cassette::load(&suite_dir().join("cassette.json")).expect("committed cassette loads"))
}

fn endpoint(base_url: String, timeout: Duration) -> EndpointConfig {
    EndpointConfig { base_url, model: "stub".into(), api_key: None, timeout, temperature: 0.0, seed: 0 }
}

/// Serves one canned HTTP response per incoming connection, in order.
fn stub_server(responses: Vec<(u16, String)>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for (status, body) in responses {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body_in = vec![0; content_length];
            let _ = reader.read_exact(&mut body_in);
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    format!("http://{addr}")
}

fn chat(content: &str) -> (u16, String) {
    (200, serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string())
}

fn first_context(mode: ContextMode) -> step_core::decompose::DecompositionContext {
    let task = suite().into_iter().find(|t| t.id == "ls01").unwrap();
    let tree = SubgoalTree::init(&task.instruction).unwrap();
    build_context(&tree, tree.root(), &observe(&task.world), &Embodiment::single_arm(), mode, &[]).unwrap()
}

#[test]
fn replaying_the_committed_cassette_reproduces_the_scripted_run() {
    let client = Arc::new(LlmClient::replay(committed_cassette()));
    let (llm_policy, llm_judge) = (LlmPolicy::new(client.clone()), LlmJudge::new(client));
    let (policy, judge) = scripted();
    for task in suite() {
        let config = PlannerConfig::default();
        let replayed = run_episode(&task, &llm_policy, &llm_judge, &config).unwrap();
        let direct = run_episode(&task, &policy, &judge, &config).unwrap();
        assert!(replayed.outcome.is_success(), "{}", task.id);
        assert_eq!(replayed.to_jsonl(), direct.to_jsonl(), "{}", task.id);
    }
}

#[test]
fn cassette_miss_is_loud() {
    let client = LlmClient::replay(Arc::new(Cassette::new()));
    let bundle = subgoal_bundle(&first_context(ContextMode::FullStep));
    match client.complete(&bundle) {
        Err(TransportError::CassetteMiss { key, .. }) => assert_eq!(key, bundle.key()),
        other => panic!("expected a cassette miss, got {other:?}"),
    }
    let client = Arc::new(client);
    let task = suite().into_iter().next().unwrap();
    let err = run_episode(&task, &LlmPolicy::new(client.clone()), &LlmJudge::new(client), &PlannerConfig::default())
        .unwrap_err();
    assert!(err.message.contains("no cassette entry"), "{err}");
}

#[test]
fn silent_endpoint_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let timeout = Duration::from_millis(300);
    let client = LlmClient::new(TransportMode::Live, Some(endpoint(url, timeout)), Arc::new(Cassette::new())).unwrap();
    let started = Instant::now();
    let result = client.complete(&subgoal_bundle(&first_context(ContextMode::FullStep)));
    assert_eq!(result, Err(TransportError::Timeout(timeout)));
    assert!(started.elapsed() < Duration::from_secs(5));
    drop(listener);
}

#[test]
fn http_errors_surface_their_status() {
    let url = stub_server(vec![(503, "{}".into())]);
    let client =
        LlmClient::new(TransportMode::Live, Some(endpoint(url, Duration::from_secs(5))), Arc::new(Cassette::new()))
            .unwrap();
    assert_eq!(
        client.complete(&subgoal_bundle(&first_context(ContextMode::FullStep))),
        Err(TransportError::HttpStatus(503))
    );
}

#[test]
fn live_and_record_modes_need_an_endpoint() {
    for mode in [TransportMode::Live, TransportMode::Record] {
        assert!(matches!(LlmClient::new(mode, None, Arc::new(Cassette::new())), Err(TransportError::NotConfigured(_))));
    }
}

#[test]
fn record_mode_persists_and_replay_serves_it() {
    let url = stub_server(vec![chat("SUBGOAL: walk to the drawer")]);
    let cassette = Arc::new(Cassette::new());
    let client =
        LlmClient::new(TransportMode::Record, Some(endpoint(url, Duration::from_secs(5))), cassette.clone()).unwrap();
    let ctx = first_context(ContextMode::FullStep);
    let policy = LlmPolicy::new(Arc::new(client));
    let reply = policy.next_subgoal(&ctx).unwrap();
    assert_eq!(reply.output, DecomposerOutput::Subgoal("walk to the drawer".into()));
    assert_eq!(cassette.len(), 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    cassette.save(&path).unwrap();
    let replay = LlmPolicy::new(Arc::new(LlmClient::replay(Arc::new(Cassette::load(&path).unwrap()))));
    assert_eq!(replay.next_subgoal(&ctx).unwrap(), reply);
}

#[test]
fn malformed_replies_are_retried_then_reported() {
    let url = stub_server(vec![chat("Sure! First, walk over."), chat("SUBGOAL: open the drawer")]);
    let client =
        LlmClient::new(TransportMode::Live, Some(endpoint(url, Duration::from_secs(5))), Arc::new(Cassette::new()))
            .unwrap();
    let reply = LlmPolicy::new(Arc::new(client)).next_subgoal(&first_context(ContextMode::FullStep)).unwrap();
    assert_eq!(reply.retries, 1);
    assert_eq!(reply.output, DecomposerOutput::Subgoal("open the drawer".into()));

    let url = stub_server(vec![chat("hmm"), chat("not sure"), chat("let me think")]);
    let client =
        LlmClient::new(TransportMode::Live, Some(endpoint(url, Duration::from_secs(5))), Arc::new(Cassette::new()))
            .unwrap();
    let err = LlmPolicy::new(Arc::new(client)).next_subgoal(&first_context(ContextMode::FullStep)).unwrap_err();
    assert_eq!(err, PolicyError::Grammar { raw: "let me think".into(), retries: 2 });
}

#[test]
fn flat_mode_expects_action_lines() {
    let url = stub_server(vec![chat("ACTION: walk to drawer")]);
    let client =
        LlmClient::new(TransportMode::Live, Some(endpoint(url, Duration::from_secs(5))), Arc::new(Cassette::new()))
            .unwrap();
    let reply = LlmPolicy::new(Arc::new(client)).next_subgoal(&first_context(ContextMode::FlatBaseline)).unwrap();
    assert_eq!(reply.output, DecomposerOutput::Subgoal("walk to drawer".into()));
}

#[test]
fn verdict_tokens() {
    assert_eq!(parse_verdict("YES"), Ok(true));
    assert_eq!(parse_verdict("  no \n"), Ok(false));
    assert!(parse_verdict("maybe").is_err());
}

#[test]
fn bundle_keys_are_stable_and_content_addressed() {
    let a = subgoal_bundle(&first_context(ContextMode::FullStep));
    let b = subgoal_bundle(&first_context(ContextMode::FullStep));
    let c = subgoal_bundle(&first_context(ContextMode::NoSubgoalTree));
    assert_eq!(a.key(), b.key());
    assert_ne!(a.key(), c.key());
    assert_eq!(a.key().len(), 64);
}
