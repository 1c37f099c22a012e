#![allow(dead_code)]

//! Request/response checks against a service running on a loopback port,
//! backed by the replay cassette and fixture pages.

use std::path::PathBuf;
use std::sync::Arc;

use atgen_core::config::AppConfig;
use atgen_core::gateway::{Backend, RetryPolicy};
use atgen_core::gherkin::parse_feature;
use atgen_core::ledger::{Ledger, LedgerEvent};
use atgen_core::story::load_local;
use atgen_server::{router, AppState, ScenariosResponse, ScriptResponse};
use reqwest::StatusCode;
use serde_json::{json, Value};

pub const PDP_URL: &str = "http://shop.test/dp/physical-goods/900653";

pub type Check = Result<(), String>;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn ensure(cond: bool, msg: impl Into<String>) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

pub struct Service {
    pub base: String,
    pub ledger: Arc<Ledger>,
    pub http: reqwest::Client,
    _dir: tempfile::TempDir,
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Value,
    pub new_events: Vec<LedgerEvent>,
}

impl Service {
    pub async fn start() -> Service {
        Self::start_with(|_| {}, None).await
    }

    pub async fn start_with(tweak: impl FnOnce(&mut AppConfig), token: Option<&str>) -> Service {
        let dir = tempfile::tempdir().unwrap();
        let mut config = AppConfig::load(&fixtures().join("atgen.toml")).unwrap();
        tweak(&mut config);
        let ledger = Arc::new(Ledger::open(dir.path()).unwrap());
        let state = AppState::new(config.build_pipeline().unwrap(), ledger.clone())
            .with_bearer_token(token.map(str::to_string));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, router(state)).await.unwrap();
        });
        Service {
            base: format!("http://{addr}"),
            ledger,
            http: reqwest::Client::builder().no_proxy().build().unwrap(),
            _dir: dir,
        }
    }

    fn event_count(&self) -> usize {
        self.ledger.events().unwrap().len()
    }

    async fn finish(&self, before: usize, response: reqwest::Response) -> Reply {
        let status = response.status();
        let text = response.text().await.unwrap();
        let body = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        let new_events = self.ledger.events().unwrap().split_off(before);
        Reply {
            status,
            body,
            new_events,
        }
    }

    pub async fn post(&self, path: &str, body: &Value) -> Reply {
        self.post_raw(path, body.to_string(), None).await
    }

    pub async fn post_raw(&self, path: &str, body: String, token: Option<&str>) -> Reply {
        let before = self.event_count();
        let mut req = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let response = req.send().await.unwrap();
        self.finish(before, response).await
    }

    pub async fn get(&self, path: &str) -> Reply {
        let before = self.event_count();
        let response = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        self.finish(before, response).await
    }
}

impl Reply {
    pub fn expect(&self, status: u16) -> Check {
        ensure(
            self.status.as_u16() == status,
            format!("expected {status}, got {} with {}", self.status, self.body),
        )
    }

    /// Success appends exactly one non-error event.
    pub fn one_event(&self) -> Check {
        ensure(
            self.new_events.len() == 1 && !matches!(self.new_events[0], LedgerEvent::Error(_)),
            format!("expected one recorded event, got {:?}", self.new_events.len()),
        )
    }

    /// Failure appends exactly one error event carrying the response status.
    pub fn one_error_event(&self) -> Check {
        match self.new_events.as_slice() {
            [LedgerEvent::Error(e)] if e.status == self.status.as_u16() => Ok(()),
            other => Err(format!("expected one error event with status {}, got {other:?}", self.status)),
        }
    }

    pub fn field(&self) -> Option<&str> {
        self.body.get("field").and_then(Value::as_str)
    }
}

fn story_json(key: &str) -> Value {
    let story = load_local(&fixtures().join("stories").join(key)).unwrap().story;
    json!({"title": story.title, "description": story.description})
}

// ---------------------------------------------------------------------------
// Scenarios

pub async fn scenarios_ok() -> Check {
    let svc = Service::start().await;
    let reply = svc.post("/v1/scenarios", &story_json("SHOP-100")).await;
    reply.expect(200)?;
    reply.one_event()?;
    let body: ScenariosResponse = serde_json::from_value(reply.body.clone()).map_err(|e| e.to_string())?;
    let expected = std::fs::read_to_string(fixtures().join("responses/scenarios_shop100.feature")).unwrap();
    ensure(body.feature_text == expected, "feature text differs from fixture")?;
    let feature = parse_feature(&body.feature_text).map_err(|e| e.to_string())?;
    ensure(feature.scenarios.len() == 4, format!("{} scenarios", feature.scenarios.len()))?;
    ensure(
        reply.new_events[0].generation_id() == Some(body.generation_id.as_str()),
        "ledger event does not carry the returned generation id",
    )?;
    ensure(body.usage.input_tokens > 0 && !body.cost.is_empty(), "usage and cost are reported")
}

pub async fn scenarios_missing_description() -> Check {
    let svc = Service::start().await;
    let reply = svc.post("/v1/scenarios", &json!({"title": "Sign-up"})).await;
    reply.expect(400)?;
    ensure(reply.field() == Some("description"), format!("field-level message: {}", reply.body))?;
    reply.one_error_event()
}

pub async fn scenarios_malformed_json() -> Check {
    let svc = Service::start().await;
    let reply = svc.post_raw("/v1/scenarios", "{\"title\": ".into(), None).await;
    reply.expect(400)?;
    reply.one_error_event()
}

/// The model answered in prose: the output is unusable, reported as an
/// upstream failure.
pub async fn scenarios_unusable_output() -> Check {
    let svc = Service::start().await;
    let reply = svc.post("/v1/scenarios", &story_json("SHOP-102")).await;
    reply.expect(502)?;
    ensure(reply.body["stage"] == "scenarios", format!("stage named: {}", reply.body))?;
    reply.one_error_event()
}

/// Live backend pointed at a closed loopback port.
pub async fn scenarios_gateway_down() -> Check {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let svc = Service::start_with(
        |c| {
            c.model.backend = Backend::Live;
            c.model.endpoint = Some(format!("http://127.0.0.1:{port}/v1/chat/completions"));
            c.model.api_key = Some("test-key".into());
            c.model.retry = RetryPolicy {
                max_attempts: 2,
                initial_backoff_ms: 5,
            };
        },
        None,
    )
    .await;
    let reply = svc.post("/v1/scenarios", &story_json("SHOP-100")).await;
    reply.expect(502)?;
    reply.one_error_event()
}

// ---------------------------------------------------------------------------
// Scripts

pub async fn scripts_ok() -> Check {
    let svc = Service::start().await;
    let reply = svc
        .post("/v1/scripts", &json!({"issue_key": "SHOP-101", "page_urls": [PDP_URL]}))
        .await;
    reply.expect(200)?;
    reply.one_event()?;
    let body: ScriptResponse = serde_json::from_value(reply.body.clone()).map_err(|e| e.to_string())?;
    ensure(body.structure.valid, format!("{:?}", body.structure.findings))?;
    ensure(body.mapping.matched.len() == 2, "two scenarios matched")?;
    ensure(body.mapping.missing_scenarios.is_empty() && body.mapping.extra_tests.is_empty(), "nothing missing or extra")?;
    ensure(body.mapping.comment_coverage == 1.0, "full comment coverage")?;
    ensure(body.issue_key == "SHOP-101", "issue key echoed")?;
    ensure(body.script_text.starts_with("describe("), "script text is code")
}

pub async fn scripts_inline_ok() -> Check {
    let svc = Service::start().await;
    let feature_text = std::fs::read_to_string(fixtures().join("stories/SHOP-101/tests.feature")).unwrap();
    let story = load_local(&fixtures().join("stories/SHOP-101")).unwrap().story;
    let reply = svc
        .post(
            "/v1/scripts",
            &json!({
                "story": {"title": story.title, "description": story.description},
                "feature_text": feature_text,
                "page_urls": [PDP_URL],
            }),
        )
        .await;
    // The issue key is not part of the prompt, so this replays the same
    // cassette entry as the tracker-resolved request.
    reply.expect(200)?;
    reply.one_event()?;
    ensure(reply.body["issue_key"] == atgen_server::INLINE_KEY, "inline key reported")?;
    ensure(reply.body["mapping"]["comment_coverage"] == 1.0, format!("{}", reply.body["mapping"]))
}

pub async fn scripts_missing_gherkin() -> Check {
    let svc = Service::start().await;
    let reply = svc
        .post("/v1/scripts", &json!({"issue_key": "SHOP-102", "page_urls": [PDP_URL]}))
        .await;
    reply.expect(422)?;
    reply.one_error_event()
}

pub async fn scripts_unknown_issue() -> Check {
    let svc = Service::start().await;
    let reply = svc
        .post("/v1/scripts", &json!({"issue_key": "NOPE-1", "page_urls": [PDP_URL]}))
        .await;
    reply.expect(404)?;
    reply.one_error_event()
}

pub async fn scripts_empty_pages() -> Check {
    let svc = Service::start().await;
    let reply = svc
        .post("/v1/scripts", &json!({"issue_key": "SHOP-101", "page_urls": []}))
        .await;
    reply.expect(400)?;
    ensure(reply.field() == Some("page_urls"), format!("{}", reply.body))?;
    reply.one_error_event()
}

pub async fn scripts_malformed() -> Check {
    let svc = Service::start().await;
    let cases = [
        json!({"page_urls": [PDP_URL]}),
        json!({"issue_key": "SHOP-101", "page_urls": "not-a-list"}),
        json!({"issue_key": "SHOP-101", "feature_text": "Feature: x", "page_urls": [PDP_URL]}),
        json!({"issue_key": 7, "page_urls": [PDP_URL]}),
        json!({"issue_key": "shop 101", "page_urls": [PDP_URL]}),
        json!({"issue_key": "SHOP-101", "page_urls": ["not a url"]}),
        json!(["SHOP-101"]),
    ];
    for body in cases {
        let reply = svc.post("/v1/scripts", &body).await;
        reply.expect(400).map_err(|e| format!("{body}: {e}"))?;
        reply.one_error_event()?;
    }
    Ok(())
}

/// A page URL with no fixture file cannot be fetched.
pub async fn scripts_missing_page() -> Check {
    let svc = Service::start().await;
    let reply = svc
        .post(
            "/v1/scripts",
            &json!({"issue_key": "SHOP-101", "page_urls": ["http://shop.test/missing"]}),
        )
        .await;
    reply.expect(502)?;
    reply.one_error_event()
}

// ---------------------------------------------------------------------------
// Feedback, summary, health, auth

pub async fn feedback_flow() -> Check {
    let svc = Service::start().await;
    let generated = svc.post("/v1/scenarios", &story_json("SHOP-100")).await;
    generated.expect(200)?;
    let id = generated.body["generation_id"].as_str().unwrap_or_default().to_string();

    let first = svc
        .post("/v1/feedback", &json!({"generation_id": id, "helpful": true}))
        .await;
    first.expect(204)?;
    first.one_event()?;

    // Duplicates are kept.
    let second = svc
        .post("/v1/feedback", &json!({"generation_id": id, "helpful": false, "comment": "too generic"}))
        .await;
    second.expect(204)?;
    second.one_event()?;

    let stored = svc
        .ledger
        .events()
        .unwrap()
        .into_iter()
        .filter(|e| matches!(e, LedgerEvent::Feedback(f) if f.generation_id == id))
        .count();
    ensure(stored == 2, format!("{stored} feedback records stored"))?;

    let summary = svc.get("/v1/reports/summary").await;
    summary.expect(200)?;
    ensure(summary.body["feedback"]["records"] == 2, format!("{}", summary.body))?;
    ensure(summary.body["feedback"]["helpful"] == 1, format!("{}", summary.body))?;
    ensure(summary.new_events.is_empty(), "reads append nothing")
}

pub async fn feedback_unknown_id() -> Check {
    let svc = Service::start().await;
    let reply = svc
        .post("/v1/feedback", &json!({"generation_id": "0123456789abcdef0123", "helpful": true}))
        .await;
    reply.expect(404)?;
    reply.one_error_event()
}

pub async fn feedback_malformed() -> Check {
    let svc = Service::start().await;
    let reply = svc
        .post("/v1/feedback", &json!({"generation_id": "abc", "helpful": "yes"}))
        .await;
    reply.expect(400)?;
    ensure(reply.field() == Some("helpful"), format!("{}", reply.body))?;
    reply.one_error_event()
}

pub async fn summary_after_script() -> Check {
    let svc = Service::start().await;
    let empty = svc.get("/v1/reports/summary").await;
    empty.expect(200)?;
    ensure(empty.body["metrics"].is_null(), "no metrics without cases")?;

    svc.post("/v1/scripts", &json!({"issue_key": "SHOP-101", "page_urls": [PDP_URL]}))
        .await
        .expect(200)?;
    let summary = svc.get("/v1/reports/summary").await;
    summary.expect(200)?;
    ensure(summary.body["metrics"]["total_cases"] == 2, format!("{}", summary.body["metrics"]))?;

    let text = svc.get("/v1/reports/summary?format=text").await;
    text.expect(200)?;
    ensure(
        text.body.as_str().is_some_and(|t| t.contains("test cases: 2")),
        format!("{}", text.body),
    )?;
    svc.get("/v1/reports/summary?format=xml").await.expect(400)
}

pub async fn healthz() -> Check {
    let svc = Service::start_with(|_| {}, Some("s3cret")).await;
    let reply = svc.get("/healthz").await;
    reply.expect(200)?;
    ensure(reply.body["status"] == "ok", format!("{}", reply.body))?;
    ensure(reply.new_events.is_empty(), "health checks append nothing")
}

pub async fn bearer_token() -> Check {
    let svc = Service::start_with(|_| {}, Some("s3cret")).await;
    let body = story_json("SHOP-100").to_string();
    let missing = svc.post_raw("/v1/scenarios", body.clone(), None).await;
    missing.expect(401)?;
    missing.one_error_event()?;
    svc.post_raw("/v1/scenarios", body.clone(), Some("wrong")).await.expect(401)?;
    let ok = svc.post_raw("/v1/scenarios", body, Some("s3cret")).await;
    ok.expect(200)?;
    ok.one_event()
}

pub type CheckFn = fn() -> std::pin::Pin<Box<dyn std::future::Future<Output = Check> + Send>>;

macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        pub fn all_checks() -> Vec<(&'static str, CheckFn)> {
            vec![$((stringify!($name), (|| Box::pin($name())) as CheckFn)),*]
        }
    };
}

checks!(
    scenarios_ok,
    scenarios_missing_description,
    scenarios_malformed_json,
    scenarios_unusable_output,
    scenarios_gateway_down,
    scripts_ok,
    scripts_inline_ok,
    scripts_missing_gherkin,
    scripts_unknown_issue,
    scripts_empty_pages,
    scripts_malformed,
    scripts_missing_page,
    feedback_flow,
    feedback_unknown_id,
    feedback_malformed,
    summary_after_script,
    healthz,
    bearer_token,
);
