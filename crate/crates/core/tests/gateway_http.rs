//! Wire-level tests against a local HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use refer_core::corpus::ValueScheme;
use refer_core::llmgateway::openai::{OpenAiConfig, OpenAiProvider};
use refer_core::llmgateway::{Gateway, GatewayError, GenerationParams, Provider, RetryPolicy};
use refer_core::promptkit::{Framework, PromptFrame, RenderedPrompt};
use refer_core::valuation::{Classifier, RemoteScorer, ScoreRequest, ValuationError};

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    headers: Vec<(String, String)>,
    body: String,
}

/// Serves canned `(status, body)` replies in order, then repeats the last.
struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl Stub {
    fn start(replies: Vec<(u16, &str)>) -> Self {
        let replies: Vec<(u16, String)> = replies.into_iter().map(|(s, b)| (s, b.into())).collect();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or_default().to_string();
                let path = parts.next().unwrap_or_default().to_string();
                let mut headers = Vec::new();
                let mut len = 0;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    let (k, v) = h.split_once(':').unwrap();
                    let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
                    if k == "content-length" {
                        len = v.parse().unwrap();
                    }
                    headers.push((k, v));
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen {
                    method,
                    path,
                    headers,
                    body: String::from_utf8(body).unwrap(),
                });
                let (status, text) = &replies[i.min(replies.len() - 1)];
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        Self { url, seen }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn prompt(text: &str) -> RenderedPrompt {
    RenderedPrompt {
        system_text: None,
        user_text: text.into(),
        frame: PromptFrame::base(Framework::Direct),
        collection_id: "c1".into(),
    }
}

fn provider(url: &str, key: Option<&str>) -> OpenAiProvider {
    let config = OpenAiConfig {
        base_url: format!("{url}/v1"),
        timeout_secs: 5,
        ..OpenAiConfig::default()
    };
    OpenAiProvider::with_api_key(config, key.map(str::to_string)).unwrap()
}

const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"A short summary."}}],"usage":{"prompt_tokens":11,"completion_tokens":4,"total_tokens":15}}"#;

#[test]
fn chat_completion_sends_the_expected_request() {
    let stub = Stub::start(vec![(200, OK_BODY)]);
    let mut params = GenerationParams::new("gpt-test");
    params.seed = Some(3);
    let reply = provider(&stub.url, Some("sk-test"))
        .complete(&prompt("Summarise these."), &params)
        .unwrap();
    assert_eq!(reply.text, "A short summary.");
    assert_eq!(reply.usage.unwrap().total_tokens, 15);

    let seen = stub.seen();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].method, "POST");
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert!(seen[0]
        .headers
        .iter()
        .any(|(k, v)| k == "authorization" && v == "Bearer sk-test"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "gpt-test");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "Summarise these.");
    assert_eq!(body["max_tokens"], params.max_new_tokens);
    assert_eq!(body["seed"], 3);
    // not sent unless the endpoint is known to accept it
    assert!(body.get("repetition_penalty").is_none());
}

#[test]
fn unauthorised_is_an_auth_error() {
    let stub = Stub::start(vec![(401, r#"{"error":"bad key"}"#)]);
    let err = provider(&stub.url, Some("k"))
        .complete(&prompt("x"), &GenerationParams::default())
        .unwrap_err();
    assert!(matches!(err, GatewayError::Auth(_)), "{err:?}");
}

#[test]
fn missing_key_fails_before_any_request() {
    let stub = Stub::start(vec![(200, OK_BODY)]);
    let err = provider(&stub.url, None)
        .complete(&prompt("x"), &GenerationParams::default())
        .unwrap_err();
    assert!(matches!(err, GatewayError::Auth(_)));
    assert!(stub.seen().is_empty());
}

#[test]
fn server_error_is_a_provider_error_and_not_retried() {
    let stub = Stub::start(vec![(500, "boom")]);
    let gw = Gateway::new(Arc::new(provider(&stub.url, Some("k"))))
        .with_retry(RetryPolicy::immediate(3));
    let err = gw
        .complete(&prompt("x"), &GenerationParams::new("m"))
        .unwrap_err();
    assert_eq!(
        err,
        GatewayError::Provider {
            status: 500,
            body: "boom".into()
        }
    );
    assert_eq!(stub.seen().len(), 1);
}

#[test]
fn rate_limit_is_retried_until_success() {
    let stub = Stub::start(vec![(429, "slow down"), (429, "slow down"), (200, OK_BODY)]);
    let gw = Gateway::new(Arc::new(provider(&stub.url, Some("k"))))
        .with_retry(RetryPolicy::immediate(3));
    let rec = gw
        .complete(&prompt("x"), &GenerationParams::new("m"))
        .unwrap();
    assert_eq!(rec.output_text, "A short summary.");
    assert_eq!(stub.seen().len(), 3);
    assert_eq!(gw.stats().provider_calls, 3);
}

#[test]
fn persistent_rate_limit_reports_every_attempt() {
    let stub = Stub::start(vec![(429, "slow down")]);
    let gw = Gateway::new(Arc::new(provider(&stub.url, Some("k"))))
        .with_retry(RetryPolicy::immediate(3));
    let err = gw
        .complete(&prompt("x"), &GenerationParams::new("m"))
        .unwrap_err();
    assert_eq!(err, GatewayError::RateLimited { attempts: 4 });
    assert_eq!(stub.seen().len(), 4);
}

#[test]
fn unparseable_success_body_is_a_provider_error() {
    let stub = Stub::start(vec![(200, "not json")]);
    let err = provider(&stub.url, Some("k"))
        .complete(&prompt("x"), &GenerationParams::default())
        .unwrap_err();
    assert!(matches!(err, GatewayError::Provider { status: 200, .. }));
}

fn scorer(url: &str) -> RemoteScorer {
    RemoteScorer::new(url, Duration::from_secs(5)).unwrap()
}

#[test]
fn score_request_and_response_follow_the_wire_contract() {
    let stub = Stub::start(vec![(
        200,
        r#"{"scores":[[2.0,0.0],[-1.0,1.0]],"model_id":"nli-test"}"#,
    )]);
    let scheme = ValueScheme::sentiment();
    let props = vec![
        "This kettle is excellent.".to_string(),
        "It broke.".to_string(),
    ];
    let out = scorer(&stub.url).classify(&props, &scheme).unwrap();

    let seen = stub.seen();
    assert_eq!(seen[0].method, "POST");
    assert_eq!(seen[0].path, "/score");
    let req: ScoreRequest = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(req.propositions, props);
    assert_eq!(
        req.descriptors,
        scheme
            .values
            .iter()
            .map(|v| v.descriptor.clone())
            .collect::<Vec<_>>()
    );

    assert_eq!(out.len(), 2);
    assert_eq!(out[0].label, "positive");
    assert_eq!(out[1].label, "negative");
    // softmax of (2, 0)
    let e = (2.0f64).exp();
    assert!((out[0].scores[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!(out.iter().all(|p| p.soft));
}

#[test]
fn health_endpoint_is_probed() {
    let stub = Stub::start(vec![(200, "{}")]);
    scorer(&stub.url).health().unwrap();
    let seen = stub.seen();
    assert_eq!(
        (seen[0].method.as_str(), seen[0].path.as_str()),
        ("GET", "/health")
    );

    let down = Stub::start(vec![(503, "loading")]);
    assert!(matches!(
        scorer(&down.url).health(),
        Err(ValuationError::BackendUnavailable(_))
    ));
}

#[test]
fn scorer_shape_errors_are_reported() {
    let scheme = ValueScheme::sentiment();
    let props = vec!["a".to_string(), "b".to_string()];

    let rows = Stub::start(vec![(200, r#"{"scores":[[1.0,0.0]],"model_id":"m"}"#)]);
    assert!(matches!(
        scorer(&rows.url).classify(&props, &scheme),
        Err(ValuationError::MalformedResponse(_))
    ));

    let width = Stub::start(vec![(
        200,
        r#"{"scores":[[1.0,0.0],[1.0]],"model_id":"m"}"#,
    )]);
    assert!(matches!(
        scorer(&width.url).classify(&props, &scheme),
        Err(ValuationError::Scorer { index: 1, .. })
    ));

    let garbage = Stub::start(vec![(200, r#"{"scores":"nope"}"#)]);
    assert!(matches!(
        scorer(&garbage.url).classify(&props, &scheme),
        Err(ValuationError::MalformedResponse(_))
    ));

    let bad_request = Stub::start(vec![(422, "bad descriptors")]);
    assert!(matches!(
        scorer(&bad_request.url).classify(&props, &scheme),
        Err(ValuationError::MalformedResponse(_))
    ));
}

#[test]
fn scorer_overload_is_unavailable() {
    let stub = Stub::start(vec![(503, "busy")]);
    let err = scorer(&stub.url)
        .classify(&["a".into()], &ValueScheme::sentiment())
        .unwrap_err();
    assert!(matches!(err, ValuationError::BackendUnavailable(_)));
}
