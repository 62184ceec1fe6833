//! OpenAI-compatible client against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use memloop_core::llm::{
    AgentTag, CallMeta, ChatMessage, ChatRequest, ContentPart, LlmBackend, LlmError, OpenAiBackend, OpenAiConfig, Role,
};
use serde_json::{json, Value};

struct Stub {
    base_url: String,
    bodies: Arc<Mutex<Vec<(String, Value)>>>,
}

/// Serves `replies` in order, one connection each, recording request paths
/// and bodies.
fn stub(replies: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            let parsed = serde_json::from_slice(&buf).unwrap_or(Value::Null);
            seen.lock().unwrap().push((path, parsed));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    Stub { base_url, bodies }
}

fn completion(text: &str, usage: Option<(u64, u64)>) -> String {
    let mut body = json!({
        "id": "x",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
    });
    if let Some((p, c)) = usage {
        body["usage"] = json!({"prompt_tokens": p, "completion_tokens": c, "total_tokens": p + c});
    }
    body.to_string()
}

fn backend(base_url: &str) -> OpenAiBackend {
    let mut config = OpenAiConfig::new(base_url, "stub-model");
    config.api_key = Some("sk-test".into());
    config.backoff_base = Duration::from_millis(5);
    config.timeout = Duration::from_secs(5);
    OpenAiBackend::new(config)
}

fn request(text: &str) -> ChatRequest {
    ChatRequest::single(AgentTag::Judge, text, 0.0, CallMeta::default())
}

#[test]
fn reads_usage_from_response() {
    let s = stub(vec![(200, completion("{\"can_answer\": true}", Some((10, 5))))]);
    let resp = backend(&s.base_url).chat(&request("hello")).unwrap();
    assert_eq!(resp.text, "{\"can_answer\": true}");
    assert_eq!(resp.usage.total(), 15);

    let bodies = s.bodies.lock().unwrap();
    let (path, body) = &bodies[0];
    assert_eq!(path, "/v1/chat/completions");
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "hello");
}

#[test]
fn estimates_usage_when_absent() {
    let s = stub(vec![(200, completion("abcdefgh", None))]);
    let resp = backend(&s.base_url).chat(&request("12345678")).unwrap();
    assert_eq!((resp.usage.prompt_tokens, resp.usage.completion_tokens), (2, 2));
}

#[test]
fn retries_transient_failures() {
    let s = stub(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (200, completion("ok", Some((3, 1)))),
    ]);
    let b = backend(&s.base_url);
    let resp = b.chat(&request("hi")).unwrap();
    assert_eq!(resp.text, "ok");
    assert_eq!(b.retry_count(), 2);
    assert_eq!(s.bodies.lock().unwrap().len(), 3);
}

#[test]
fn exhausts_retries() {
    let s = stub(vec![(429, "{}".into()); 4]);
    let b = backend(&s.base_url);
    let err = b.chat(&request("hi")).unwrap_err();
    assert!(matches!(err, LlmError::Exhausted { attempts: 4, .. }), "{err}");
    assert_eq!(b.retry_count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let s = stub(vec![(400, "{\"error\":\"bad\"}".into())]);
    let b = backend(&s.base_url);
    assert!(matches!(b.chat(&request("hi")), Err(LlmError::Status { status: 400, .. })));
    assert_eq!(b.retry_count(), 0);
}

#[test]
fn images_go_out_as_content_parts() {
    let s = stub(vec![(200, completion("{}", Some((1, 1))))]);
    let mut config = OpenAiConfig::new(s.base_url.as_str(), "vision-model");
    config.vision = true;
    let b = OpenAiBackend::new(config);
    let req = ChatRequest {
        messages: vec![ChatMessage {
            role: Role::User,
            parts: vec![
                ContentPart::Text { text: "look".into() },
                ContentPart::Image {
                    url: "data:image/png;base64,AAAA".into(),
                },
            ],
        }],
        temperature: 1.0,
        max_tokens: Some(64),
        tag: AgentTag::Visual,
        meta: CallMeta::default(),
    };
    b.chat(&req).unwrap();
    let bodies = s.bodies.lock().unwrap();
    let content = &bodies[0].1["messages"][0]["content"];
    assert_eq!(content[0]["type"], "text");
    assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,AAAA");
    assert_eq!(bodies[0].1["max_tokens"], 64);
}

#[test]
fn rejects_oversized_prompts_and_images_without_vision() {
    let mut config = OpenAiConfig::new("http://127.0.0.1:9/v1", "m");
    config.max_context_tokens = 4;
    let b = OpenAiBackend::new(config);
    assert!(matches!(
        b.chat(&request(&"x".repeat(100))),
        Err(LlmError::ContextOverflow { .. })
    ));
    let mut req = request("hi");
    req.messages[0].parts.push(ContentPart::Image { url: "http://x/y.png".into() });
    assert!(b.chat(&req).is_err());
}

#[test]
fn embeddings_follow_index_order() {
    let body = json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]},
    ]})
    .to_string();
    let s = stub(vec![(200, body)]);
    let vectors = backend(&s.base_url).embed(&["a".into(), "b".into()]).unwrap();
    assert_eq!(vectors, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(s.bodies.lock().unwrap()[0].0, "/v1/embeddings");
}
