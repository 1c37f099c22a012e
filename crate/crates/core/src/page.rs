//! Page HTML retrieval and distillation.
//!
//! `purge` removes `<script>` and `<style>` elements (tags and content) with a
//! tolerant span scanner. Everything outside the removed spans is kept
//! byte-for-byte, so malformed markup passes through untouched.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use reqwest::header::{HeaderMap, HeaderName, HeaderValue, CONTENT_TYPE, COOKIE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Mutex;

#[derive(Debug, Error)]
pub enum PageError {
    #[error("{url}: not an absolute http(s) URL")]
    InvalidUrl { url: String },
    #[error("{url}: request timed out")]
    Timeout { url: String },
    #[error("{url}: HTTP status {status}")]
    Status { url: String, status: u16 },
    #[error("{url}: unsupported content type `{content_type}`")]
    ContentType { url: String, content_type: String },
    #[error("{url}: network error: {message}")]
    Network { url: String, message: String },
    #[error("{url}: no fixture file {path}")]
    FixtureMissing { url: String, path: PathBuf },
    #[error("{url}: {source}")]
    Io {
        url: String,
        #[source]
        source: std::io::Error,
    },
}

impl PageError {
    pub fn url(&self) -> &str {
        match self {
            PageError::InvalidUrl { url }
            | PageError::Timeout { url }
            | PageError::Status { url, .. }
            | PageError::ContentType { url, .. }
            | PageError::Network { url, .. }
            | PageError::FixtureMissing { url, .. }
            | PageError::Io { url, .. } => url,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPage {
    pub url: String,
    pub html: String,
    pub fetched_at: DateTime<Utc>,
    pub byte_len: usize,
}

impl RawPage {
    pub fn new(url: impl Into<String>, html: impl Into<String>) -> Self {
        let html = html.into();
        Self {
            url: url.into(),
            byte_len: html.len(),
            html,
            fetched_at: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgedPage {
    pub url: String,
    pub html: String,
    pub removed_elements: BTreeMap<String, usize>,
    pub testids: Vec<String>,
    pub byte_len: usize,
}

impl PurgedPage {
    pub fn from_raw(raw: &RawPage, options: PurgeOptions) -> Self {
        let mut page = purge(&raw.html, options);
        page.url = raw.url.clone();
        page
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgeOptions {
    #[serde(default)]
    pub strip_comments: bool,
    #[serde(default)]
    pub strip_inline_style_attrs: bool,
}

// ---------------------------------------------------------------------------
// Scanning helpers

const REMOVED_TAGS: [&str; 2] = ["script", "style"];

fn starts_with_ci(hay: &[u8], at: usize, needle: &str) -> bool {
    hay.len() >= at + needle.len() && hay[at..at + needle.len()].eq_ignore_ascii_case(needle.as_bytes())
}

fn find_ci(hay: &[u8], from: usize, needle: &str) -> Option<usize> {
    (from..hay.len()).find(|&i| starts_with_ci(hay, i, needle))
}

fn is_tag_boundary(b: Option<&u8>) -> bool {
    matches!(b, None | Some(b'>' | b'/' | b' ' | b'\t' | b'\n' | b'\r' | b'\x0c'))
}

/// End (exclusive) of the tag starting at `start` (which points at `<`),
/// honoring quoted attribute values. `None` when the tag never closes.
fn tag_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut quote: Option<u8> = None;
    for (i, &b) in bytes.iter().enumerate().skip(start + 1) {
        match quote {
            Some(q) if b == q => quote = None,
            Some(_) => {}
            None if b == b'"' || b == b'\'' => quote = Some(b),
            None if b == b'>' => return Some(i + 1),
            None if b == b'<' => return None,
            None => {}
        }
    }
    None
}

/// If a removable element opens at `i`, return (tag name, span end).
fn removable_element_at(bytes: &[u8], i: usize) -> Option<(&'static str, usize)> {
    for tag in REMOVED_TAGS {
        if starts_with_ci(bytes, i + 1, tag) && is_tag_boundary(bytes.get(i + 1 + tag.len())) {
            let Some(open_end) = tag_end(bytes, i) else {
                return Some((tag, bytes.len()));
            };
            if bytes[open_end - 2] == b'/' {
                return Some((tag, open_end));
            }
            let close = format!("</{tag}");
            let mut from = open_end;
            while let Some(pos) = find_ci(bytes, from, &close) {
                if is_tag_boundary(bytes.get(pos + close.len())) {
                    let end = bytes[pos..]
                        .iter()
                        .position(|&b| b == b'>')
                        .map_or(bytes.len(), |p| pos + p + 1);
                    return Some((tag, end));
                }
                from = pos + 1;
            }
            return Some((tag, bytes.len()));
        }
    }
    None
}

fn purge_once(html: &str, options: PurgeOptions, removed: &mut BTreeMap<String, usize>) -> String {
    let bytes = html.as_bytes();
    let mut out = String::with_capacity(html.len());
    let mut copied = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        if starts_with_ci(bytes, i, "<!--") {
            let end = find_ci(bytes, i + 4, "-->").map_or(bytes.len(), |p| p + 3);
            if options.strip_comments {
                out.push_str(&html[copied..i]);
                copied = end;
                *removed.entry("comment".into()).or_default() += 1;
            }
            i = end;
            continue;
        }
        if let Some((tag, end)) = removable_element_at(bytes, i) {
            out.push_str(&html[copied..i]);
            copied = end;
            *removed.entry(tag.into()).or_default() += 1;
            i = end;
            continue;
        }
        if bytes.get(i + 1).is_some_and(u8::is_ascii_alphabetic) {
            if let Some(end) = tag_end(bytes, i) {
                if options.strip_inline_style_attrs {
                    let tag = &html[i..end];
                    let stripped = strip_style_attrs(tag);
                    if stripped.len() != tag.len() {
                        out.push_str(&html[copied..i]);
                        out.push_str(&stripped);
                        copied = end;
                        *removed.entry("style-attribute".into()).or_default() += 1;
                    }
                }
                i = end;
                continue;
            }
        }
        i += 1;
    }
    out.push_str(&html[copied..]);
    out
}

/// One parsed attribute inside a start tag, as byte offsets into the tag.
struct Attr {
    start: usize,
    end: usize,
    name: String,
    value: Option<String>,
}

fn attributes(tag: &str) -> Vec<Attr> {
    let bytes = tag.as_bytes();
    let mut attrs = Vec::new();
    // skip `<name`
    let mut i = 1;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'>' && bytes[i] != b'/' {
        i += 1;
    }
    loop {
        let ws_start = i;
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'/') {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] == b'>' {
            break;
        }
        let name_start = i;
        while i < bytes.len()
            && !bytes[i].is_ascii_whitespace()
            && !matches!(bytes[i], b'=' | b'>' | b'/')
        {
            i += 1;
        }
        let name = tag[name_start..i].to_ascii_lowercase();
        let mut j = i;
        while j < bytes.len() && bytes[j].is_ascii_whitespace() {
            j += 1;
        }
        let mut value = None;
        if j < bytes.len() && bytes[j] == b'=' {
            j += 1;
            while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            if j < bytes.len() && (bytes[j] == b'"' || bytes[j] == b'\'') {
                let q = bytes[j];
                let vstart = j + 1;
                let vend = bytes[vstart..].iter().position(|&b| b == q).map_or(bytes.len(), |p| vstart + p);
                value = Some(tag[vstart..vend].to_string());
                j = (vend + 1).min(bytes.len());
            } else {
                let vstart = j;
                while j < bytes.len() && !bytes[j].is_ascii_whitespace() && bytes[j] != b'>' {
                    j += 1;
                }
                value = Some(tag[vstart..j].to_string());
            }
            i = j;
        }
        if name.is_empty() {
            i += 1;
            continue;
        }
        attrs.push(Attr {
            start: ws_start,
            end: i,
            name,
            value,
        });
    }
    attrs
}

fn strip_style_attrs(tag: &str) -> String {
    let mut out = String::with_capacity(tag.len());
    let mut copied = 0;
    for attr in attributes(tag).into_iter().filter(|a| a.name == "style") {
        out.push_str(&tag[copied..attr.start]);
        copied = attr.end;
    }
    out.push_str(&tag[copied..]);
    out
}

/// `data-testid` / `data-test-id` values found in start tags, deduplicated,
/// in order of first occurrence.
pub fn scan_testids(html: &str) -> Vec<String> {
    let bytes = html.as_bytes();
    let mut ids: Vec<String> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        if starts_with_ci(bytes, i, "<!--") {
            i = find_ci(bytes, i + 4, "-->").map_or(bytes.len(), |p| p + 3);
            continue;
        }
        if !bytes.get(i + 1).is_some_and(u8::is_ascii_alphabetic) {
            i += 1;
            continue;
        }
        let Some(end) = tag_end(bytes, i) else { break };
        for attr in attributes(&html[i..end]) {
            if attr.name == "data-testid" || attr.name == "data-test-id" {
                if let Some(v) = attr.value {
                    if !ids.contains(&v) {
                        ids.push(v);
                    }
                }
            }
        }
        i = end;
    }
    ids
}

/// Remove script and style elements. Repeats until no further span is found,
/// so the result is a fixed point.
pub fn purge(html: &str, options: PurgeOptions) -> PurgedPage {
    let mut removed = BTreeMap::new();
    let mut current = purge_once(html, options, &mut removed);
    loop {
        let next = purge_once(&current, options, &mut removed);
        if next.len() == current.len() {
            break;
        }
        current = next;
    }
    PurgedPage {
        url: String::new(),
        testids: scan_testids(&current),
        byte_len: current.len(),
        html: current,
        removed_elements: removed,
    }
}

pub fn testid_inventory(page: &PurgedPage) -> &[String] {
    &page.testids
}

// ---------------------------------------------------------------------------
// Fetching

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FetchConfig {
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    /// Cookies sent with every request, as `name -> value`.
    #[serde(default)]
    pub cookies: BTreeMap<String, String>,
}

fn default_timeout_secs() -> u64 {
    30
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            timeout_secs: default_timeout_secs(),
            headers: BTreeMap::new(),
            cookies: BTreeMap::new(),
        }
    }
}

pub fn check_url(url: &str) -> Result<url::Url, PageError> {
    let invalid = || PageError::InvalidUrl { url: url.to_string() };
    let parsed = url::Url::parse(url).map_err(|_| invalid())?;
    match parsed.scheme() {
        "http" | "https" if parsed.host().is_some() => Ok(parsed),
        _ => Err(invalid()),
    }
}

/// File name a fixture page is stored under: hex SHA-256 of the URL.
pub fn fixture_file_name(url: &str) -> String {
    format!("{}.html", hex::encode(Sha256::digest(url.as_bytes())))
}

/// Where page HTML comes from.
#[derive(Debug, Clone)]
pub enum PageSource {
    Http(HttpFetcher),
    Fixtures(PathBuf),
}

impl PageSource {
    pub fn http(config: FetchConfig) -> Result<Self, PageError> {
        Ok(PageSource::Http(HttpFetcher::new(config)?))
    }

    pub fn fixtures(dir: impl Into<PathBuf>) -> Self {
        PageSource::Fixtures(dir.into())
    }

    pub async fn fetch(&self, url: &str) -> Result<RawPage, PageError> {
        match self {
            PageSource::Http(fetcher) => fetcher.fetch(url).await,
            PageSource::Fixtures(dir) => load_fixture(dir, url).await,
        }
    }
}

async fn load_fixture(dir: &Path, url: &str) -> Result<RawPage, PageError> {
    check_url(url)?;
    let path = dir.join(fixture_file_name(url));
    match tokio::fs::read_to_string(&path).await {
        Ok(html) => Ok(RawPage::new(url, html)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PageError::FixtureMissing {
            url: url.to_string(),
            path,
        }),
        Err(source) => Err(PageError::Io {
            url: url.to_string(),
            source,
        }),
    }
}

#[derive(Debug, Clone)]
pub struct HttpFetcher {
    client: reqwest::Client,
    headers: HeaderMap,
    cookies: Arc<Mutex<BTreeMap<String, String>>>,
}

impl HttpFetcher {
    pub fn new(config: FetchConfig) -> Result<Self, PageError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| PageError::Network {
                url: String::new(),
                message: e.to_string(),
            })?;
        let mut headers = HeaderMap::new();
        for (name, value) in &config.headers {
            let (Ok(name), Ok(value)) = (
                HeaderName::from_bytes(name.as_bytes()),
                HeaderValue::from_str(value),
            ) else {
                return Err(PageError::Network {
                    url: String::new(),
                    message: format!("invalid header `{name}`"),
                });
            };
            headers.insert(name, value);
        }
        Ok(Self {
            client,
            headers,
            cookies: Arc::new(Mutex::new(config.cookies)),
        })
    }

    /// Adds or replaces a cookie for subsequent requests.
    pub async fn set_cookie(&self, name: impl Into<String>, value: impl Into<String>) {
        self.cookies.lock().await.insert(name.into(), value.into());
    }

    pub async fn fetch(&self, url: &str) -> Result<RawPage, PageError> {
        check_url(url)?;
        let mut request = self.client.get(url).headers(self.headers.clone());
        {
            let jar = self.cookies.lock().await;
            if !jar.is_empty() {
                let cookie = jar
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join("; ");
                request = request.header(COOKIE, cookie);
            }
        }
        let network = |e: reqwest::Error| {
            if e.is_timeout() {
                PageError::Timeout { url: url.to_string() }
            } else {
                PageError::Network {
                    url: url.to_string(),
                    message: e.to_string(),
                }
            }
        };
        let response = request.send().await.map_err(network)?;
        let status = response.status();
        if !status.is_success() {
            return Err(PageError::Status {
                url: url.to_string(),
                status: status.as_u16(),
            });
        }
        if let Some(ct) = response.headers().get(CONTENT_TYPE) {
            let ct = ct.to_str().unwrap_or_default().to_ascii_lowercase();
            if !(ct.starts_with("text/") || ct.contains("xhtml") || ct.contains("xml")) {
                return Err(PageError::ContentType {
                    url: url.to_string(),
                    content_type: ct,
                });
            }
        }
        let html = response.text().await.map_err(network)?;
        Ok(RawPage::new(url, html))
    }
}
