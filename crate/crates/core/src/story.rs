//! Where user stories and their Gherkin come from: an issue tracker's REST
//! API, a local fixture directory, or a pull-request description.

use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gherkin::{parse_feature, GherkinError};
use crate::page::check_url;
use crate::prompt::UserStory;

#[derive(Debug, Error)]
pub enum StoryError {
    #[error("`{0}` is not a valid issue key")]
    InvalidKey(String),
    #[error("issue {0} not found")]
    NotFound(String),
    #[error("tracker rejected credentials (HTTP {0})")]
    Auth(u16),
    #[error("tracker error: {0}")]
    Tracker(String),
    #[error("issue {key}: field `{field}` missing or empty")]
    MissingField { key: String, field: String },
    #[error("issue {0} has no Gherkin scenarios")]
    MissingGherkin(String),
    #[error("issue {key}: Gherkin does not parse: {source}")]
    BadGherkin {
        key: String,
        #[source]
        source: GherkinError,
    },
    #[error("{path}: {message}")]
    Local { path: PathBuf, message: String },
    #[error("PR description has no `Issue:` line")]
    MissingIssue,
    #[error("PR description lists no page URLs")]
    NoPages,
    #[error("invalid page URL `{0}`")]
    BadUrl(String),
}

/// `[A-Z][A-Z0-9]+-[0-9]+`
pub fn is_issue_key(key: &str) -> bool {
    let Some((project, number)) = key.split_once('-') else {
        return false;
    };
    let mut chars = project.chars();
    chars.next().is_some_and(|c| c.is_ascii_uppercase())
        && project.len() >= 2
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
        && !number.is_empty()
        && number.chars().all(|c| c.is_ascii_digit())
}

fn check_key(key: &str) -> Result<(), StoryError> {
    if is_issue_key(key) {
        Ok(())
    } else {
        Err(StoryError::InvalidKey(key.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryBundle {
    pub story: UserStory,
    pub feature_text: Option<String>,
    pub issue_key: String,
    pub fetched_at: DateTime<Utc>,
}

impl StoryBundle {
    pub fn new(key: &str, story: UserStory, feature_text: Option<String>) -> Result<Self, StoryError> {
        check_key(key)?;
        if let Some(text) = &feature_text {
            parse_feature(text).map_err(|source| StoryError::BadGherkin {
                key: key.to_string(),
                source,
            })?;
        }
        Ok(Self {
            story,
            feature_text,
            issue_key: key.to_string(),
            fetched_at: Utc::now(),
        })
    }
}

/// First fenced block tagged `gherkin` (or holding a `Feature:` line).
pub fn gherkin_section(text: &str) -> Option<String> {
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let t = line.trim_start();
        let Some(info) = t.strip_prefix("```").or_else(|| t.strip_prefix("{code")) else {
            continue;
        };
        let body: Vec<&str> = lines
            .by_ref()
            .take_while(|l| {
                let l = l.trim();
                !(l.starts_with("```") || l.starts_with("{code"))
            })
            .collect();
        let tagged = info.to_ascii_lowercase().contains("gherkin");
        if tagged || body.iter().any(|l| l.trim_start().starts_with("Feature:")) {
            return Some(body.join("\n"));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Tracker

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub base_url: String,
    /// Path template; `{key}` is replaced by the issue key.
    #[serde(default = "default_issue_path")]
    pub issue_path: String,
    /// Dotted JSON paths into the issue document.
    #[serde(default = "default_summary_field")]
    pub summary_field: String,
    #[serde(default = "default_description_field")]
    pub description_field: String,
    #[serde(default)]
    pub gherkin_field: Option<String>,
    #[serde(default = "default_token_env")]
    pub token_env: String,
    /// When set, basic auth with this user and the token as password.
    #[serde(default)]
    pub user_env: Option<String>,
    #[serde(default = "default_tracker_timeout")]
    pub timeout_secs: u64,
}

fn default_issue_path() -> String {
    "/rest/api/2/issue/{key}".into()
}
fn default_summary_field() -> String {
    "fields.summary".into()
}
fn default_description_field() -> String {
    "fields.description".into()
}
fn default_token_env() -> String {
    "ATGEN_TRACKER_TOKEN".into()
}
fn default_tracker_timeout() -> u64 {
    30
}

impl TrackerConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            issue_path: default_issue_path(),
            summary_field: default_summary_field(),
            description_field: default_description_field(),
            gherkin_field: None,
            token_env: default_token_env(),
            user_env: None,
            timeout_secs: default_tracker_timeout(),
        }
    }
}

fn lookup<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(doc, |v, part| v.get(part))
}

fn text_at(doc: &Value, path: &str) -> Option<String> {
    match lookup(doc, path)? {
        Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
        _ => None,
    }
}

pub async fn fetch_issue(key: &str, tracker: &TrackerConfig) -> Result<StoryBundle, StoryError> {
    check_key(key)?;
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(tracker.timeout_secs.max(1)))
        .build()
        .map_err(|e| StoryError::Tracker(e.to_string()))?;
    let url = format!(
        "{}{}",
        tracker.base_url.trim_end_matches('/'),
        tracker.issue_path.replace("{key}", key)
    );
    let mut request = client.get(&url).header("Accept", "application/json");
    if let Ok(token) = std::env::var(&tracker.token_env) {
        request = match tracker.user_env.as_ref().and_then(|v| std::env::var(v).ok()) {
            Some(user) => request.basic_auth(user, Some(token)),
            None => request.bearer_auth(token),
        };
    }
    let response = request
        .send()
        .await
        .map_err(|e| StoryError::Tracker(e.to_string()))?;
    match response.status().as_u16() {
        200..=299 => {}
        404 => return Err(StoryError::NotFound(key.to_string())),
        s @ (401 | 403) => return Err(StoryError::Auth(s)),
        s => return Err(StoryError::Tracker(format!("HTTP {s} from {url}"))),
    }
    let doc: Value = response
        .json()
        .await
        .map_err(|e| StoryError::Tracker(format!("malformed issue JSON: {e}")))?;
    issue_from_json(key, &doc, tracker)
}

/// Maps a tracker issue document onto a bundle using the configured fields.
pub fn issue_from_json(key: &str, doc: &Value, tracker: &TrackerConfig) -> Result<StoryBundle, StoryError> {
    let missing = |field: &str| StoryError::MissingField {
        key: key.to_string(),
        field: field.to_string(),
    };
    let title = text_at(doc, &tracker.summary_field).ok_or_else(|| missing(&tracker.summary_field))?;
    let description =
        text_at(doc, &tracker.description_field).ok_or_else(|| missing(&tracker.description_field))?;
    let feature_text = tracker
        .gherkin_field
        .as_deref()
        .and_then(|f| text_at(doc, f))
        .or_else(|| gherkin_section(&description));
    let mut story = UserStory::new(title.trim(), description.trim());
    story.source_key = Some(key.to_string());
    StoryBundle::new(key, story, feature_text)
}

// ---------------------------------------------------------------------------
// Local fixtures

/// Reads `story.md` (first heading is the title, the rest the description)
/// and an optional `tests.feature`. The directory name is the issue key.
pub fn load_local(path: &Path) -> Result<StoryBundle, StoryError> {
    let local = |p: &Path, message: String| StoryError::Local {
        path: p.to_path_buf(),
        message,
    };
    let key = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| local(path, "directory has no usable name".into()))?;
    check_key(key)?;

    let story_path = path.join("story.md");
    let text = std::fs::read_to_string(&story_path).map_err(|e| local(&story_path, e.to_string()))?;
    let (title, description) = split_story_markdown(&text)
        .ok_or_else(|| local(&story_path, "expected a `# Title` heading followed by a description".into()))?;

    let feature_path = path.join("tests.feature");
    let feature_text = match std::fs::read_to_string(&feature_path) {
        Ok(t) => Some(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(local(&feature_path, e.to_string())),
    };

    let mut story = UserStory::new(title, description);
    story.source_key = Some(key.to_string());
    StoryBundle::new(key, story, feature_text)
}

fn split_story_markdown(text: &str) -> Option<(String, String)> {
    let mut lines = text.lines();
    let title = lines
        .by_ref()
        .find(|l| !l.trim().is_empty())?
        .trim()
        .strip_prefix('#')?
        .trim_start_matches('#')
        .trim()
        .to_string();
    let description = lines.collect::<Vec<_>>().join("\n").trim().to_string();
    (!title.is_empty() && !description.is_empty()).then_some((title, description))
}

/// Resolves issue keys against a tracker or a fixture root directory.
#[derive(Debug, Clone)]
pub enum StorySource {
    Tracker(TrackerConfig),
    Local(PathBuf),
}

impl StorySource {
    pub async fn fetch(&self, key: &str) -> Result<StoryBundle, StoryError> {
        match self {
            StorySource::Tracker(cfg) => fetch_issue(key, cfg).await,
            StorySource::Local(root) => {
                check_key(key)?;
                let dir = root.join(key);
                if !dir.is_dir() {
                    return Err(StoryError::NotFound(key.to_string()));
                }
                load_local(&dir)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pull-request descriptions

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrInputs {
    pub issue_key: String,
    pub page_urls: Vec<String>,
}

fn marker<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let t = line.trim();
    let head = t.get(..name.len())?;
    if head.eq_ignore_ascii_case(name) {
        t[name.len()..].strip_prefix(':').map(str::trim)
    } else {
        None
    }
}

fn looks_like_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

/// Recognizes `Issue: KEY` and `Pages:` followed by URLs, either
/// comma-separated on the same line or one per following line. The first
/// `Issue:` and the first `Pages:` win; other lines are ignored.
pub fn parse_pr_description(text: &str) -> Result<PrInputs, StoryError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut issue_key = None;
    let mut page_urls: Option<Vec<String>> = None;

    for (i, line) in lines.iter().enumerate() {
        if issue_key.is_none() {
            if let Some(key) = marker(line, "Issue") {
                issue_key = Some(key.split_whitespace().next().unwrap_or_default().to_string());
                continue;
            }
        }
        if page_urls.is_none() {
            if let Some(rest) = marker(line, "Pages") {
                let mut urls: Vec<String> = rest
                    .split([',', ' '])
                    .map(|s| s.trim().trim_start_matches("- ").trim())
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                if urls.is_empty() {
                    for next in &lines[i + 1..] {
                        let item = next.trim().trim_start_matches(['-', '*']).trim();
                        if item.is_empty() && urls.is_empty() {
                            continue;
                        }
                        if !looks_like_url(item) {
                            break;
                        }
                        urls.extend(item.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()));
                    }
                }
                page_urls = Some(urls);
            }
        }
    }

    let issue_key = issue_key.ok_or(StoryError::MissingIssue)?;
    check_key(&issue_key)?;
    let page_urls = page_urls.unwrap_or_default();
    if page_urls.is_empty() {
        return Err(StoryError::NoPages);
    }
    for url in &page_urls {
        check_url(url).map_err(|_| StoryError::BadUrl(url.clone()))?;
    }
    Ok(PrInputs { issue_key, page_urls })
}
