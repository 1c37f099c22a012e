//! Gateway, page fetcher and tracker client against local mock servers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use atgen_core::gateway::{Backend, Cassette, Gateway, GatewayConfig, GatewayError, RetryPolicy, Usage};
use atgen_core::page::{FetchConfig, HttpFetcher, PageError, PageSource};
use atgen_core::prompt::{Stage, TemplateStore};
use atgen_core::story::{fetch_issue, StoryError, StorySource, TrackerConfig};
use atgen_core::{PromptBundle, UserStory};
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

async fn serve(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn bundle() -> PromptBundle {
    TemplateStore::builtin()
        .build_scenario_prompt(&UserStory::new("Sign-up", "As a user I want to sign up"))
        .unwrap()
}

fn fast(mut config: GatewayConfig) -> GatewayConfig {
    config.retry = RetryPolicy {
        max_attempts: 3,
        initial_backoff_ms: 5,
    };
    config.model_id = "test-model".into();
    config
}

/// Authorization header and body of each request.
type Seen = Arc<Mutex<Vec<(Option<String>, Value)>>>;

#[derive(Clone, Default)]
struct Provider {
    calls: Arc<AtomicUsize>,
    fail_first: usize,
    status: u16,
    seen: Seen,
}

async fn completions(State(p): State<Provider>, headers: HeaderMap, Json(body): Json<Value>) -> impl IntoResponse {
    let n = p.calls.fetch_add(1, Ordering::SeqCst);
    let auth = headers
        .get("authorization")
        .map(|v| v.to_str().unwrap().to_string());
    p.seen.lock().unwrap().push((auth, body));
    if n < p.fail_first {
        let status = StatusCode::from_u16(p.status).unwrap();
        return (status, Json(json!({"error": {"message": "try later"}})));
    }
    (
        StatusCode::OK,
        Json(json!({
            "model": "test-model-0613",
            "choices": [{"message": {"role": "assistant", "content": "Feature: Sign-up\n\nScenario: ok\nGiven x\n"}}],
            "usage": {"prompt_tokens": 120, "completion_tokens": 30}
        })),
    )
}

async fn provider(p: Provider) -> String {
    let app = Router::new()
        .route("/v1/chat/completions", post(completions))
        .with_state(p);
    serve(app).await + "/v1/chat/completions"
}

#[tokio::test]
async fn live_call_sends_openai_shaped_request() {
    let p = Provider::default();
    let endpoint = provider(p.clone()).await;
    let gateway = Gateway::new(fast(GatewayConfig::live(endpoint, "k-123"))).unwrap();
    let b = bundle();
    let response = gateway.complete(&b).await.unwrap();
    assert!(response.text.starts_with("Feature: Sign-up"));
    assert_eq!(response.usage, Usage::new(120, 30));
    assert_eq!(response.model_id, "test-model-0613");
    assert_eq!(gateway.totals(), (1, Usage::new(120, 30)));

    let seen = p.seen.lock().unwrap();
    let (auth, body) = &seen[0];
    assert_eq!(auth.as_deref(), Some("Bearer k-123"));
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], b.system.as_str());
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], b.user.as_str());
}

#[tokio::test]
async fn retries_server_errors_then_succeeds() {
    let p = Provider {
        fail_first: 2,
        status: 503,
        ..Provider::default()
    };
    let endpoint = provider(p.clone()).await;
    let gateway = Gateway::new(fast(GatewayConfig::live(endpoint, "k"))).unwrap();
    assert!(gateway.complete(&bundle()).await.is_ok());
    assert_eq!(p.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn gives_up_after_three_attempts() {
    let p = Provider {
        fail_first: usize::MAX,
        status: 429,
        ..Provider::default()
    };
    let endpoint = provider(p.clone()).await;
    let gateway = Gateway::new(fast(GatewayConfig::live(endpoint, "k"))).unwrap();
    match gateway.complete(&bundle()).await {
        Err(GatewayError::Transport { attempts, message }) => {
            assert_eq!(attempts, 3);
            assert!(message.contains("429"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(p.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let p = Provider {
        fail_first: usize::MAX,
        status: 400,
        ..Provider::default()
    };
    let endpoint = provider(p.clone()).await;
    let gateway = Gateway::new(fast(GatewayConfig::live(endpoint, "k"))).unwrap();
    match gateway.complete(&bundle()).await {
        Err(GatewayError::Provider { status, message }) => {
            assert_eq!(status, 400);
            assert_eq!(message, "try later");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(p.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let gateway = Gateway::new(fast(GatewayConfig::live(format!("http://{addr}/v1/chat/completions"), "k"))).unwrap();
    assert!(matches!(
        gateway.complete(&bundle()).await,
        Err(GatewayError::Transport { attempts: 3, .. })
    ));
}

#[tokio::test]
async fn empty_completion() {
    let app = Router::new().route(
        "/c",
        post(|| async { Json(json!({"choices": [{"message": {"content": ""}}]})) }),
    );
    let base = serve(app).await;
    let gateway = Gateway::new(fast(GatewayConfig::live(format!("{base}/c"), "k"))).unwrap();
    assert!(matches!(gateway.complete(&bundle()).await, Err(GatewayError::EmptyCompletion)));
}

#[tokio::test]
async fn record_then_replay() {
    let p = Provider::default();
    let endpoint = provider(p.clone()).await;
    let dir = tempfile::tempdir().unwrap();
    let cassette_path = dir.path().join("c.json");

    let mut config = fast(GatewayConfig::live(endpoint, "k"));
    config.backend = Backend::Record;
    config.cassette = Some(cassette_path.clone());
    let recorder = Gateway::new(config).unwrap();
    let live = recorder.complete(&bundle()).await.unwrap();
    assert_eq!(Cassette::load(&cassette_path).unwrap().len(), 1);

    let mut replay_config = fast(GatewayConfig::replay(&cassette_path));
    replay_config.model_id = "test-model".into();
    let replay = Gateway::new(replay_config).unwrap();
    let replayed = replay.complete(&bundle()).await.unwrap();
    assert_eq!(replayed, live);
    assert_eq!(p.calls.load(Ordering::SeqCst), 1);

    let mut other = bundle();
    other.user.push(' ');
    assert!(matches!(replay.complete(&other).await, Err(GatewayError::CacheMiss { .. })));
    let crlf = PromptBundle {
        system: bundle().system.replace('\n', "\r\n"),
        user: bundle().user.replace('\n', "\r\n"),
        stage: Stage::Scenarios,
        token_estimate: 0,
    };
    assert_eq!(replay.complete(&crlf).await.unwrap(), live);
}

// ---------------------------------------------------------------------------
// Pages

async fn page_server() -> String {
    let app = Router::new()
        .route(
            "/pdp",
            get(|headers: HeaderMap| async move {
                let lang = headers
                    .get("accept-language")
                    .map(|v| v.to_str().unwrap().to_string())
                    .unwrap_or_default();
                let cookie = headers
                    .get("cookie")
                    .map(|v| v.to_str().unwrap().to_string())
                    .unwrap_or_default();
                (
                    [("content-type", "text/html; charset=utf-8")],
                    format!("<html lang=\"{lang}\"><body data-testid=\"{cookie}\"><script>x()</script></body></html>"),
                )
            }),
        )
        .route("/json", get(|| async { Json(json!({"a": 1})) }))
        .route(
            "/slow",
            get(|| async {
                tokio::time::sleep(Duration::from_secs(3)).await;
                "late"
            }),
        );
    serve(app).await
}

#[tokio::test]
async fn fetches_with_headers_and_cookies() {
    let base = page_server().await;
    let mut config = FetchConfig::default();
    config.headers.insert("Accept-Language".into(), "de-DE".into());
    config.cookies.insert("consent".into(), "yes".into());
    let fetcher = HttpFetcher::new(config).unwrap();
    fetcher.set_cookie("session", "abc").await;
    let url = format!("{base}/pdp");
    let page = fetcher.fetch(&url).await.unwrap();
    assert_eq!(page.url, url);
    assert_eq!(page.byte_len, page.html.len());
    assert!(page.html.contains("lang=\"de-DE\""));
    assert!(page.html.contains("consent=yes; session=abc"));
}

#[tokio::test]
async fn fetch_errors() {
    let base = page_server().await;
    let source = PageSource::http(FetchConfig {
        timeout_secs: 1,
        ..FetchConfig::default()
    })
    .unwrap();

    let missing = format!("{base}/missing");
    match source.fetch(&missing).await {
        Err(PageError::Status { url, status }) => {
            assert_eq!(status, 404);
            assert_eq!(url, missing);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        source.fetch(&format!("{base}/json")).await,
        Err(PageError::ContentType { .. })
    ));
    assert!(matches!(
        source.fetch(&format!("{base}/slow")).await,
        Err(PageError::Timeout { .. })
    ));
    assert!(matches!(
        source.fetch("http://unknown-host.invalid/").await,
        Err(PageError::Network { .. })
    ));
    assert!(matches!(source.fetch("ftp://x/y").await, Err(PageError::InvalidUrl { .. })));
}

// ---------------------------------------------------------------------------
// Tracker

async fn issue(Path(key): Path<String>, headers: HeaderMap) -> impl IntoResponse {
    let authed = headers.get("authorization").is_some();
    match key.as_str() {
        "SHOP-101" => (
            StatusCode::OK,
            Json(json!({
                "key": "SHOP-101",
                "fields": {
                    "summary": "Product details on the detail page",
                    "description": "As a customer,\nI want to see detailed information of physical products,\nSo that I can see specific details of the product.",
                    "customfield_10400": "Feature: Accordion\n\nScenario: First section unfolded\nGiven the customer is on the product detail page\n",
                    "authed": authed
                }
            })),
        ),
        "SHOP-102" => (
            StatusCode::OK,
            Json(json!({"fields": {
                "summary": "Wish list badge",
                "description": "Story text\n\n```gherkin\nFeature: Badge\n\nScenario: Count shown\nGiven a wish list\n```\n"
            }})),
        ),
        "SHOP-103" => (StatusCode::OK, Json(json!({"fields": {"summary": "No description"}}))),
        "LOCK-1" => (StatusCode::UNAUTHORIZED, Json(json!({}))),
        _ => (StatusCode::NOT_FOUND, Json(json!({"errorMessages": ["Issue does not exist"]}))),
    }
}

async fn tracker() -> TrackerConfig {
    let base = serve(Router::new().route("/rest/api/2/issue/{key}", get(issue))).await;
    let mut config = TrackerConfig::new(base);
    config.gherkin_field = Some("fields.customfield_10400".into());
    config.token_env = "ATGEN_TEST_UNSET_TRACKER_TOKEN".into();
    config
}

#[tokio::test]
async fn tracker_issue_with_custom_field() {
    let config = tracker().await;
    let bundle = fetch_issue("SHOP-101", &config).await.unwrap();
    assert_eq!(bundle.issue_key, "SHOP-101");
    assert_eq!(bundle.story.title, "Product details on the detail page");
    assert_eq!(bundle.story.source_key.as_deref(), Some("SHOP-101"));
    assert!(bundle.feature_text.unwrap().starts_with("Feature: Accordion"));
}

#[tokio::test]
async fn tracker_gherkin_from_description_block() {
    let config = tracker().await;
    let bundle = StorySource::Tracker(config).fetch("SHOP-102").await.unwrap();
    assert!(bundle.feature_text.unwrap().starts_with("Feature: Badge"));
}

#[tokio::test]
async fn tracker_errors() {
    let config = tracker().await;
    assert!(matches!(fetch_issue("NOPE-1", &config).await, Err(StoryError::NotFound(k)) if k == "NOPE-1"));
    assert!(matches!(fetch_issue("LOCK-1", &config).await, Err(StoryError::Auth(401))));
    assert!(matches!(
        fetch_issue("SHOP-103", &config).await,
        Err(StoryError::MissingField { field, .. }) if field == "fields.description"
    ));
    assert!(matches!(fetch_issue("shop 101", &config).await, Err(StoryError::InvalidKey(_))));
}
