//! End-to-end orchestration of both generation stages.
//!
//! Stage one turns a user story into Gherkin scenarios. Stage two turns a
//! story, its scenarios and the pages under test into a test script, then
//! validates the script and maps its test cases back onto the scenarios.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extract::{
    check_scenario_mapping, extract_fenced_code, validate_script_structure, CodeBlock,
    DialectProfile, MappingReport, StructureReport,
};
use crate::gateway::{cost_of, CostRates, Gateway, GatewayError, ModelResponse, Usage};
use crate::gherkin::{lint_feature, parse_feature, FeatureAst, GherkinError, LintReport};
use crate::ledger::{Ledger, LedgerError, LedgerEvent};
use crate::page::{PageError, PageSource, PurgeOptions, PurgedPage};
use crate::prompt::{ProductContext, PromptError, Stage, TemplateStore, UserStory};
use crate::story::{StoryBundle, StoryError, StorySource};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Prompt(#[from] PromptError),
    #[error("{stage} stage: {source}")]
    Gateway {
        stage: &'static str,
        #[source]
        source: GatewayError,
    },
    #[error("model output is not parsable Gherkin: {source}")]
    UnparsableOutput {
        raw_response: String,
        #[source]
        source: GherkinError,
    },
    #[error("model output has no code block")]
    NoCodeBlock { raw_response: String },
    #[error("fetching page {url}: {source}")]
    Page {
        url: String,
        #[source]
        source: PageError,
    },
    #[error("story {0} has no Gherkin scenarios")]
    MissingGherkin(String),
    #[error("stored Gherkin does not parse: {0}")]
    BadGherkin(GherkinError),
    #[error("at least one page URL is required")]
    NoPages,
    #[error("regeneration needs non-empty extra context")]
    EmptyContext,
    #[error("no story source configured")]
    NoStorySource,
    #[error(transparent)]
    Story(#[from] StoryError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl PipelineError {
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Gateway { stage, .. } => Some(stage),
            PipelineError::UnparsableOutput { .. } => Some(Stage::Scenarios.as_str()),
            PipelineError::NoCodeBlock { .. } | PipelineError::Page { .. } => {
                Some(Stage::Script.as_str())
            }
            _ => None,
        }
    }
}

static GENERATION_SEQ: AtomicU64 = AtomicU64::new(0);

/// Hash of the request digest, creation time and a process-wide sequence.
fn generation_id(request_digest: &str, at: DateTime<Utc>) -> String {
    let seq = GENERATION_SEQ.fetch_add(1, Ordering::SeqCst);
    let mut h = Sha256::new();
    h.update(request_digest.as_bytes());
    h.update(at.to_rfc3339_opts(chrono::SecondsFormat::Nanos, true).as_bytes());
    h.update(seq.to_le_bytes());
    hex::encode(&h.finalize()[..10])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub generation_id: String,
    pub created_at: DateTime<Utc>,
    pub story: UserStory,
    /// Gherkin text as extracted from the response.
    pub feature_text: String,
    pub feature: FeatureAst,
    pub raw_response: String,
    pub lint: LintReport,
    pub usage: Usage,
    pub cost: Decimal,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptInputs {
    pub bundle: StoryBundle,
    pub page_urls: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_context: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSummary {
    pub url: String,
    pub raw_bytes: usize,
    pub purged_bytes: usize,
    pub testids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptResult {
    pub generation_id: String,
    /// The generation this one regenerates, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    /// First generation of the regeneration chain (itself for a fresh run).
    pub root_id: String,
    pub created_at: DateTime<Utc>,
    pub inputs: ScriptInputs,
    pub feature: FeatureAst,
    pub pages: Vec<PageSummary>,
    pub prompt_token_estimate: usize,
    pub raw_response: String,
    pub code: CodeBlock,
    pub structure: StructureReport,
    pub mapping: MappingReport,
    pub usage: Usage,
    pub cost: Decimal,
    pub model_id: String,
}

impl ScriptResult {
    pub fn script_text(&self) -> &str {
        &self.code.code
    }
}

/// Takes the first fenced block when there is one, else the whole response.
pub fn gherkin_from_response(text: &str) -> String {
    match extract_fenced_code(text) {
        Ok(block) => block.code,
        Err(_) => text.to_string(),
    }
}

pub struct Pipeline {
    templates: TemplateStore,
    gateway: Arc<Gateway>,
    pages: PageSource,
    stories: Option<StorySource>,
    context: ProductContext,
    dialect: DialectProfile,
    rates: CostRates,
    purge_options: PurgeOptions,
    ledger: Option<Arc<Ledger>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("gateway", &self.gateway)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(gateway: Arc<Gateway>, pages: PageSource) -> Self {
        Self {
            templates: TemplateStore::builtin(),
            gateway,
            pages,
            stories: None,
            context: ProductContext::default(),
            dialect: DialectProfile::default(),
            rates: CostRates::default(),
            purge_options: PurgeOptions::default(),
            ledger: None,
        }
    }

    pub fn with_templates(mut self, templates: TemplateStore) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_stories(mut self, stories: StorySource) -> Self {
        self.stories = Some(stories);
        self
    }

    pub fn with_context(mut self, context: ProductContext) -> Self {
        self.context = context;
        self
    }

    pub fn with_dialect(mut self, dialect: DialectProfile) -> Self {
        self.dialect = dialect;
        self
    }

    pub fn with_rates(mut self, rates: CostRates) -> Self {
        self.rates = rates;
        self
    }

    pub fn with_purge_options(mut self, options: PurgeOptions) -> Self {
        self.purge_options = options;
        self
    }

    pub fn with_ledger(mut self, ledger: Arc<Ledger>) -> Self {
        self.ledger = Some(ledger);
        self
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn rates(&self) -> &CostRates {
        &self.rates
    }

    pub fn ledger(&self) -> Option<&Ledger> {
        self.ledger.as_deref()
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    fn append(&self, event: LedgerEvent) -> Result<(), PipelineError> {
        if let Some(ledger) = &self.ledger {
            ledger.append(&event)?;
        }
        Ok(())
    }

    async fn complete(
        &self,
        stage: Stage,
        bundle: &crate::prompt::PromptBundle,
    ) -> Result<(ModelResponse, String), PipelineError> {
        let digest = self.gateway.digest(bundle, &self.gateway.params());
        let response = self
            .gateway
            .complete(bundle)
            .await
            .map_err(|source| PipelineError::Gateway {
                stage: stage.as_str(),
                source,
            })?;
        Ok((response, digest))
    }

    pub async fn generate_scenarios(&self, story: &UserStory) -> Result<ScenarioResult, PipelineError> {
        let prompt = self.templates.build_scenario_prompt(story)?;
        let (response, digest) = self.complete(Stage::Scenarios, &prompt).await?;
        let feature_text = gherkin_from_response(&response.text);
        let feature = parse_feature(&feature_text).map_err(|source| PipelineError::UnparsableOutput {
            raw_response: response.text.clone(),
            source,
        })?;
        let lint = lint_feature(&feature);
        let created_at = Utc::now();
        let result = ScenarioResult {
            generation_id: generation_id(&digest, created_at),
            created_at,
            story: story.clone(),
            feature_text,
            feature,
            lint,
            cost: cost_of(response.usage, &self.rates),
            usage: response.usage,
            model_id: response.model_id,
            raw_response: response.text,
        };
        self.append(LedgerEvent::ScenarioGeneration(Box::new(result.clone())))?;
        Ok(result)
    }

    pub async fn resolve_issue(&self, key: &str) -> Result<StoryBundle, PipelineError> {
        let source = self.stories.as_ref().ok_or(PipelineError::NoStorySource)?;
        Ok(source.fetch(key).await?)
    }

    pub async fn generate_script(
        &self,
        bundle: &StoryBundle,
        page_urls: &[String],
        extra_context: Option<&str>,
    ) -> Result<ScriptResult, PipelineError> {
        self.run_script(bundle, page_urls, extra_context, None).await
    }

    /// Reruns stage two with `extra_context` appended to whatever context the
    /// previous generation already carried.
    pub async fn regenerate_with_context(
        &self,
        prev: &ScriptResult,
        extra_context: &str,
    ) -> Result<ScriptResult, PipelineError> {
        let extra = extra_context.trim();
        if extra.is_empty() {
            return Err(PipelineError::EmptyContext);
        }
        let combined = match prev.inputs.extra_context.as_deref() {
            Some(old) if !old.trim().is_empty() => format!("{}\n\n{extra}", old.trim()),
            _ => extra.to_string(),
        };
        self.run_script(&prev.inputs.bundle, &prev.inputs.page_urls, Some(&combined), Some(prev))
            .await
    }

    async fn run_script(
        &self,
        bundle: &StoryBundle,
        page_urls: &[String],
        extra_context: Option<&str>,
        parent: Option<&ScriptResult>,
    ) -> Result<ScriptResult, PipelineError> {
        let feature_text = bundle
            .feature_text
            .as_deref()
            .ok_or_else(|| PipelineError::MissingGherkin(bundle.issue_key.clone()))?;
        let feature = parse_feature(feature_text).map_err(PipelineError::BadGherkin)?;
        if page_urls.is_empty() {
            return Err(PipelineError::NoPages);
        }

        let mut pages: Vec<PurgedPage> = Vec::with_capacity(page_urls.len());
        let mut summaries = Vec::with_capacity(page_urls.len());
        for url in page_urls {
            let raw = self.pages.fetch(url).await.map_err(|source| PipelineError::Page {
                url: url.clone(),
                source,
            })?;
            let purged = PurgedPage::from_raw(&raw, self.purge_options);
            summaries.push(PageSummary {
                url: url.clone(),
                raw_bytes: raw.byte_len,
                purged_bytes: purged.byte_len,
                testids: purged.testids.clone(),
            });
            pages.push(purged);
        }

        let prompt = self.templates.build_script_prompt(
            &bundle.story,
            &feature,
            &pages,
            &self.context,
            extra_context,
        )?;
        let (response, digest) = self.complete(Stage::Script, &prompt).await?;
        let code = extract_fenced_code(&response.text).map_err(|_| PipelineError::NoCodeBlock {
            raw_response: response.text.clone(),
        })?;
        let structure = validate_script_structure(&code.code, &self.dialect);
        let mapping = check_scenario_mapping(&feature, &structure);

        let created_at = Utc::now();
        let generation_id = generation_id(&digest, created_at);
        let root_id = parent.map_or_else(|| generation_id.clone(), |p| p.root_id.clone());
        let result = ScriptResult {
            parent_id: parent.map(|p| p.generation_id.clone()),
            root_id,
            generation_id,
            created_at,
            inputs: ScriptInputs {
                bundle: bundle.clone(),
                page_urls: page_urls.to_vec(),
                extra_context: extra_context.map(str::to_string),
            },
            feature,
            pages: summaries,
            prompt_token_estimate: prompt.token_estimate,
            code,
            structure,
            mapping,
            cost: cost_of(response.usage, &self.rates),
            usage: response.usage,
            model_id: response.model_id,
            raw_response: response.text,
        };
        self.append(LedgerEvent::ScriptGeneration(Box::new(result.clone())))?;
        Ok(result)
    }
}
