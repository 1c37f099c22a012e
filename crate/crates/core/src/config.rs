//! TOML configuration shared by the CLI and the service.
//!
//! ```toml
//! ledger_dir = "runs/default"
//! prompts_dir = "prompts"            # optional, built-in templates otherwise
//! product_context = "context.toml"   # optional
//! dialect = "dialect.toml"           # optional, Cypress/TypeScript otherwise
//! stories_dir = "fixtures/stories"   # or a [tracker] table
//!
//! [model]
//! backend = "replay"
//! cassette = "fixtures/cassettes/golden.json"
//!
//! [rates]
//! per_1k_input = "0.01"
//! per_1k_output = "0.03"
//!
//! [pages]
//! fixtures_dir = "fixtures/pages"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Secrets come from environment variables named in the config.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{DialectProfile, ExtractError};
use crate::gateway::{CostRates, Gateway, GatewayConfig, GatewayError};
use crate::ledger::{Ledger, LedgerError};
use crate::page::{FetchConfig, PageError, PageSource, PurgeOptions};
use crate::pipeline::Pipeline;
use crate::prompt::{ProductContext, PromptError, TemplateStore};
use crate::story::{StorySource, TrackerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dialect(#[from] ExtractError),
    #[error(transparent)]
    Page(#[from] PageError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PagesConfig {
    /// Serve pages from `<sha256(url)>.html` files instead of HTTP.
    #[serde(default)]
    pub fixtures_dir: Option<PathBuf>,
    #[serde(default, flatten)]
    pub fetch: FetchConfig,
    #[serde(default)]
    pub purge: PurgeOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Environment variable with a static bearer token; unset disables auth.
    #[serde(default)]
    pub bearer_token_env: Option<String>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            bearer_token_env: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AppConfig {
    #[serde(default)]
    pub model: GatewayConfig,
    #[serde(default)]
    pub rates: CostRates,
    #[serde(default)]
    pub tracker: Option<TrackerConfig>,
    #[serde(default)]
    pub stories_dir: Option<PathBuf>,
    #[serde(default)]
    pub pages: PagesConfig,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub product_context: Option<PathBuf>,
    #[serde(default)]
    pub dialect: Option<PathBuf>,
    #[serde(default)]
    pub ledger_dir: Option<PathBuf>,
    #[serde(default)]
    pub service: ServiceConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let file = |message: String| ConfigError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file(e.to_string()))?;
        let mut config: AppConfig = toml::from_str(&text).map_err(|e| file(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.model.cassette);
        resolve(base, &mut self.stories_dir);
        resolve(base, &mut self.pages.fixtures_dir);
        resolve(base, &mut self.prompts_dir);
        resolve(base, &mut self.product_context);
        resolve(base, &mut self.dialect);
        resolve(base, &mut self.ledger_dir);
    }

    pub fn open_ledger(&self) -> Result<Option<Arc<Ledger>>, ConfigError> {
        Ok(match &self.ledger_dir {
            Some(dir) => Some(Arc::new(Ledger::open(dir)?)),
            None => None,
        })
    }

    pub fn build_pipeline(&self) -> Result<Pipeline, ConfigError> {
        let gateway = Arc::new(Gateway::new(self.model.clone())?);
        let pages = match &self.pages.fixtures_dir {
            Some(dir) => PageSource::fixtures(dir),
            None => PageSource::http(self.pages.fetch.clone())?,
        };
        let templates = match &self.prompts_dir {
            Some(dir) => TemplateStore::load(dir)?,
            None => TemplateStore::builtin(),
        };
        let context = match &self.product_context {
            Some(path) => ProductContext::load(path)?,
            None => ProductContext::default(),
        };
        let dialect = match &self.dialect {
            Some(path) => DialectProfile::load(path)?,
            None => DialectProfile::default(),
        };
        let mut pipeline = Pipeline::new(gateway, pages)
            .with_templates(templates)
            .with_context(context)
            .with_dialect(dialect)
            .with_rates(self.rates.clone())
            .with_purge_options(self.pages.purge);
        if let Some(tracker) = &self.tracker {
            pipeline = pipeline.with_stories(StorySource::Tracker(tracker.clone()));
        } else if let Some(dir) = &self.stories_dir {
            pipeline = pipeline.with_stories(StorySource::Local(dir.clone()));
        }
        if let Some(ledger) = self.open_ledger()? {
            pipeline = pipeline.with_ledger(ledger);
        }
        Ok(pipeline)
    }
}
