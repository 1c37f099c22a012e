//! Prompt assembly for both generation stages.
//!
//! Templates are plain text with `{{name}}` placeholders. The defaults are
//! compiled in; a template directory with the same four file names overrides
//! them at runtime.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gherkin::{serialize_feature, FeatureAst};
use crate::page::PurgedPage;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("user story title is empty")]
    EmptyTitle,
    #[error("user story description is empty")]
    EmptyDescription,
    #[error("feature has no scenarios")]
    NoScenarios,
    #[error("no pages supplied")]
    NoPages,
    #[error("template `{template}`: unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}`: unclosed placeholder")]
    UnclosedPlaceholder { template: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("product context {path}: {message}")]
    ProductContext { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserStory {
    pub title: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_key: Option<String>,
}

impl UserStory {
    pub fn new(title: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            description: description.into(),
            source_key: None,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.title.trim().is_empty() {
            return Err(PromptError::EmptyTitle);
        }
        if self.description.trim().is_empty() {
            return Err(PromptError::EmptyDescription);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Scenarios,
    Script,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Scenarios => "scenarios",
            Stage::Script => "script",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub stage: Stage,
    pub token_estimate: usize,
}

impl PromptBundle {
    fn new(system: String, user: String, stage: Stage, estimator: &dyn TokenEstimator) -> Self {
        let token_estimate = estimator.estimate(&system) + estimator.estimate(&user);
        Self {
            system,
            user,
            stage,
            token_estimate,
        }
    }
}

/// Product-specific part of the script-generation system prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductContext {
    #[serde(default = "default_context_text")]
    pub context_text: String,
    #[serde(default)]
    pub custom_commands_text: String,
    #[serde(default = "default_good_practices")]
    pub good_practices: Vec<String>,
}

fn default_context_text() -> String {
    "(Product context: describe the application under test, its main pages and naming conventions here.)".into()
}

pub fn default_good_practices() -> Vec<String> {
    vec![
        "You generate the test to be as complete as possible for the scenario.".into(),
        "You use the data-test-id to locate the element if you need to interact with it.".into(),
        "Keep tests independent, so they can run in any order.".into(),
        "Use Cypress built-in assertions.".into(),
    ]
}

impl Default for ProductContext {
    fn default() -> Self {
        Self {
            context_text: default_context_text(),
            custom_commands_text: String::new(),
            good_practices: default_good_practices(),
        }
    }
}

impl ProductContext {
    /// Loads a TOML product context file. Missing keys take the defaults.
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| PromptError::ProductContext {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Token estimation

pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteQuarterEstimator;

impl TokenEstimator for ByteQuarterEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    ByteQuarterEstimator.estimate(text)
}

// ---------------------------------------------------------------------------
// Templates

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(name: &str, source: &str, allowed: &[&str]) -> Result<Self, PromptError> {
        let mut pieces = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_string()));
            }
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| PromptError::UnclosedPlaceholder {
                template: name.to_string(),
            })?;
            let slot = after[..close].trim();
            if !allowed.contains(&slot) {
                return Err(PromptError::UnknownPlaceholder {
                    template: name.to_string(),
                    name: slot.to_string(),
                });
            }
            pieces.push(Piece::Slot(slot.to_string()));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            pieces,
        })
    }

    /// Single pass: substituted values are never re-expanded.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .unwrap_or_default();
                    out.push_str(value);
                }
            }
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

const SCENARIOS_SYSTEM: &str = "scenarios.system.txt";
const SCENARIOS_USER: &str = "scenarios.user.txt";
const SCRIPT_SYSTEM: &str = "script.system.txt";
const SCRIPT_USER: &str = "script.user.txt";

const TITLE_SLOT: &str = "item.inputs.title";
const DESCRIPTION_SLOT: &str = "item.inputs.description";

/// The four prompt templates. Read-only once loaded.
#[derive(Clone)]
pub struct TemplateStore {
    scenarios_system: Template,
    scenarios_user: Template,
    script_system: Template,
    script_user: Template,
    estimator: Arc<dyn TokenEstimator>,
}

impl std::fmt::Debug for TemplateStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TemplateStore").finish_non_exhaustive()
    }
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix('\n').map(|s| s.strip_suffix('\r').unwrap_or(s)).unwrap_or(s)
}

impl TemplateStore {
    fn from_sources(sources: [&str; 4]) -> Result<Self, PromptError> {
        let [ss, su, cs, cu] = sources.map(strip_final_newline);
        Ok(Self {
            scenarios_system: Template::parse(SCENARIOS_SYSTEM, ss, &[])?,
            scenarios_user: Template::parse(SCENARIOS_USER, su, &[TITLE_SLOT, DESCRIPTION_SLOT])?,
            script_system: Template::parse(
                SCRIPT_SYSTEM,
                cs,
                &["product_context", "good_practices", "custom_commands"],
            )?,
            script_user: Template::parse(
                SCRIPT_USER,
                cu,
                &["story", "feature", "pages", "extra_context"],
            )?,
            estimator: Arc::new(ByteQuarterEstimator),
        })
    }

    pub fn builtin() -> Self {
        Self::from_sources([
            include_str!("../prompts/scenarios.system.txt"),
            include_str!("../prompts/scenarios.user.txt"),
            include_str!("../prompts/script.system.txt"),
            include_str!("../prompts/script.user.txt"),
        ])
        .expect("built-in templates are valid")
    }

    /// Loads `scenarios.{system,user}.txt` and `script.{system,user}.txt`
    /// from `dir`.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let sources = [
            read(SCENARIOS_SYSTEM)?,
            read(SCENARIOS_USER)?,
            read(SCRIPT_SYSTEM)?,
            read(SCRIPT_USER)?,
        ];
        Self::from_sources([&sources[0], &sources[1], &sources[2], &sources[3]])
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn estimator(&self) -> &dyn TokenEstimator {
        self.estimator.as_ref()
    }

    pub fn build_scenario_prompt(&self, story: &UserStory) -> Result<PromptBundle, PromptError> {
        story.validate()?;
        let system = self.scenarios_system.render(&[]);
        let user = self.scenarios_user.render(&[
            (TITLE_SLOT, story.title.trim()),
            (DESCRIPTION_SLOT, story.description.trim()),
        ]);
        Ok(PromptBundle::new(system, user, Stage::Scenarios, self.estimator()))
    }

    pub fn build_script_prompt(
        &self,
        story: &UserStory,
        feature: &FeatureAst,
        pages: &[PurgedPage],
        ctx: &ProductContext,
        extra_context: Option<&str>,
    ) -> Result<PromptBundle, PromptError> {
        if feature.scenarios.is_empty() {
            return Err(PromptError::NoScenarios);
        }
        if pages.is_empty() {
            return Err(PromptError::NoPages);
        }

        let practices = ctx
            .good_practices
            .iter()
            .map(|p| format!("- {p}"))
            .collect::<Vec<_>>()
            .join("\n");
        let system = self.script_system.render(&[
            ("product_context", ctx.context_text.trim()),
            ("good_practices", &practices),
            ("custom_commands", ctx.custom_commands_text.trim()),
        ]);

        let story_text = format!("Title: {}\n\n{}", story.title.trim(), story.description.trim());
        let feature_text = serialize_feature(feature);
        let pages_text = pages
            .iter()
            .map(|p| format!("Page: {}\n```html\n{}\n```", p.url, p.html.trim_end()))
            .collect::<Vec<_>>()
            .join("\n\n");
        let extra = match extra_context.map(str::trim) {
            Some(text) if !text.is_empty() => format!("\n\nAdditional context:\n{text}"),
            _ => String::new(),
        };
        let user = self.script_user.render(&[
            ("story", &story_text),
            ("feature", feature_text.trim_end()),
            ("pages", &pages_text),
            ("extra_context", &extra),
        ]);
        Ok(PromptBundle::new(system, user, Stage::Script, self.estimator()))
    }
}

impl Default for TemplateStore {
    fn default() -> Self {
        Self::builtin()
    }
}
