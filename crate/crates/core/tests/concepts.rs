use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use cgbc_core::concepts::llm::{request_digest, FixtureEntry, HttpTransport};
use cgbc_core::concepts::prompts::{format_reply, render_contrastive_prompt_n};
use cgbc_core::concepts::{
    compose, dedup_insert, generate_atoms, parse_concepts, ConceptError, ConceptPool,
    GenerateOptions, InsertOutcome, LlmClient, LlmClientConfig, LlmError, LlmMode, PromptStyle,
};
use cgbc_core::fixtures::HashEmbedder;

fn words(range: std::ops::Range<usize>) -> Vec<String> {
    range.map(|i| format!("feature{i}")).collect()
}

fn reply(items: &[String]) -> String {
    format_reply(&items.iter().map(String::as_str).collect::<Vec<_>>())
}

fn scripted_client(class: &str, neighbors: &[String], replies: Vec<String>) -> LlmClient {
    let prompt = render_contrastive_prompt_n(class, neighbors, 10).unwrap();
    let digest = request_digest(&prompt.system, &prompt.user, "m");
    let entries = replies
        .into_iter()
        .map(|response| FixtureEntry {
            digest: digest.clone(),
            response,
        })
        .collect();
    LlmClient::replay_from_entries("m", entries)
}

fn opts(max_calls: usize) -> GenerateOptions {
    GenerateOptions {
        capacity: 50,
        max_calls,
        per_call: 10,
        ..GenerateOptions::default()
    }
}

#[test]
fn duplicates_do_not_count_toward_capacity() {
    let neighbors = vec!["pug".to_string()];
    let mut replies = vec![reply(&words(0..10)), reply(&words(0..10))];
    for c in 1..5 {
        replies.push(reply(&words(c * 10..c * 10 + 10)));
    }
    let llm = scripted_client("beagle", &neighbors, replies);
    let emb = HashEmbedder::new(256, 1);
    let style = PromptStyle::Contrastive { neighbors };
    let pool = generate_atoms("beagle", &style, &llm, &emb, &opts(20)).unwrap();
    assert_eq!(pool.len(), 50);
    assert_eq!(pool.call_log.len(), 6);
    assert_eq!(pool.atoms, words(0..50));
}

#[test]
fn a_small_budget_returns_a_partial_pool() {
    let neighbors = vec!["pug".to_string()];
    let llm = scripted_client("beagle", &neighbors, vec![reply(&words(0..10))]);
    let emb = HashEmbedder::new(256, 1);
    let style = PromptStyle::Contrastive { neighbors };
    let pool = generate_atoms("beagle", &style, &llm, &emb, &opts(1)).unwrap();
    assert_eq!(pool.len(), 10);
    assert!(!pool.is_full());
}

#[test]
fn replay_without_a_matching_entry_fails() {
    let neighbors = vec!["pug".to_string()];
    let llm = scripted_client("beagle", &neighbors, vec![reply(&words(0..10))]);
    let emb = HashEmbedder::new(256, 1);
    let style = PromptStyle::Contrastive { neighbors };
    let err = generate_atoms("beagle", &style, &llm, &emb, &opts(2)).unwrap_err();
    assert!(matches!(
        err,
        ConceptError::Llm(LlmError::MissingFixture { occurrence: 1, .. })
    ));
}

#[test]
fn repeated_garbage_aborts_generation() {
    let neighbors = vec!["pug".to_string()];
    let llm = scripted_client("beagle", &neighbors, vec!["no".into(); 5]);
    let emb = HashEmbedder::new(256, 1);
    let style = PromptStyle::Contrastive { neighbors };
    let o = GenerateOptions {
        max_parse_failures: 2,
        ..opts(5)
    };
    let err = generate_atoms("beagle", &style, &llm, &emb, &o).unwrap_err();
    assert!(matches!(err, ConceptError::TooManyParseFailures(3)));
}

#[test]
fn dedup_rejects_near_copies_and_respects_capacity() {
    let emb = HashEmbedder::new(256, 1);
    let mut pool = ConceptPool::new("beagle", 2);
    let cands: Vec<String> = [
        "floppy ears",
        "Floppy  ears",
        "",
        "short coat",
        "tricolor coat",
    ]
    .map(String::from)
    .to_vec();
    let out = dedup_insert(&mut pool, &cands, &emb, 0.9).unwrap();
    assert_eq!(out[0], InsertOutcome::Inserted);
    assert!(matches!(out[1], InsertOutcome::Duplicate { of: 0, .. }));
    assert_eq!(out[2], InsertOutcome::Empty);
    assert_eq!(out[3], InsertOutcome::Inserted);
    assert_eq!(out[4], InsertOutcome::Capacity);
    assert_eq!(pool.atoms, vec!["floppy ears", "short coat"]);
    assert!(dedup_insert(&mut pool, &[], &emb, 1.5).is_err());
}

#[test]
fn parse_round_trips_formatted_replies() {
    let items = words(0..4);
    assert_eq!(parse_concepts(&reply(&items)).unwrap(), items);
    assert!(matches!(
        parse_concepts("nothing here"),
        Err(ConceptError::Parse { .. })
    ));
}

#[test]
fn composites_are_distinct_sorted_and_seeded() {
    let pool = ConceptPool::from_atoms("beagle", words(0..12));
    let a = compose(&pool, 3, 100, 5).unwrap();
    let b = compose(&pool, 3, 100, 5).unwrap();
    assert_eq!(a, b);
    let mut seen = std::collections::HashSet::new();
    for c in &a.composites {
        assert!(c.atom_indices.windows(2).all(|w| w[0] < w[1]));
        assert!(seen.insert(c.atom_indices.clone()));
        assert_eq!(c.text.matches(" or ").count(), 2);
    }
    let all = compose(&pool, 2, 1000, 5).unwrap();
    assert!(all.exhausted);
    assert_eq!(all.composites.len(), 66);
    assert!(matches!(
        compose(&pool, 13, 1, 0),
        Err(ConceptError::PoolTooSmall { .. })
    ));
}

fn chat_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
        .to_string()
}

/// Answers each request with the next scripted `(status, body)` and counts hits.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let Ok((stream, _)) = listener.accept() else {
                return;
            };
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut buf = vec![0; len];
            let _ = reader.read_exact(&mut buf);
            counter.fetch_add(1, Ordering::SeqCst);
            let mut stream = reader.into_inner();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (format!("http://{addr}/v1/chat/completions"), hits)
}

fn live_config(
    endpoint: String,
    mode: LlmMode,
    fixture: Option<std::path::PathBuf>,
) -> LlmClientConfig {
    LlmClientConfig {
        endpoint,
        model: "m".into(),
        mode,
        fixture_path: fixture,
        api_key: None,
        backoff_ms: 1,
        timeout_secs: 5,
        ..LlmClientConfig::default()
    }
}

#[test]
fn live_transport_retries_server_errors() {
    let (endpoint, hits) = serve(vec![(500, "oops".into()), (200, chat_body("hello"))]);
    let t = HttpTransport::new(&live_config(endpoint, LlmMode::Live, None)).unwrap();
    let client = LlmClient::with_transport("m", LlmMode::Live, None, Some(Box::new(t))).unwrap();
    assert_eq!(
        client.complete("s", "u", Some(1)).unwrap().response,
        "hello"
    );
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, hits) = serve(vec![(400, "bad".into()), (200, chat_body("late"))]);
    let client = LlmClient::from_config(&live_config(endpoint, LlmMode::Live, None)).unwrap();
    let err = client.complete("s", "u", None).unwrap_err();
    assert!(matches!(err, LlmError::Status { status: 400, .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn recorded_calls_replay_identically() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("llm.json");
    let (endpoint, _) = serve(vec![(200, chat_body("first")), (200, chat_body("second"))]);
    let rec = LlmClient::from_config(&live_config(
        endpoint,
        LlmMode::Record,
        Some(fixture.clone()),
    ))
    .unwrap();
    rec.complete("s", "u", None).unwrap();
    rec.complete("s", "u", None).unwrap();
    let replay =
        LlmClient::from_config(&live_config(String::new(), LlmMode::Replay, Some(fixture)))
            .unwrap();
    assert_eq!(replay.complete("s", "u", None).unwrap().response, "first");
    assert_eq!(replay.complete("s", "u", None).unwrap().response, "second");
    assert!(replay.complete("s", "u", None).is_err());
}

#[test]
fn replay_needs_a_fixture_file() {
    let cfg = live_config(
        String::new(),
        LlmMode::Replay,
        Some("/nonexistent/llm.json".into()),
    );
    assert!(matches!(
        LlmClient::from_config(&cfg),
        Err(LlmError::NoFixtureFile)
    ));
}
