//! Acceptance-test generation for web applications.
//!
//! Two stages: user stories become Gherkin scenarios, and Gherkin scenarios
//! plus distilled page HTML become browser test scripts. Around them sit
//! the parsing, validation, replayable model access and evaluation pieces.

pub mod cases;
pub mod config;
pub mod eval;
pub mod extract;
pub mod gateway;
pub mod gherkin;
pub mod ledger;
pub mod page;
pub mod pipeline;
pub mod prompt;
pub mod story;

pub use cases::{record_verdict, CaseState, CaseStatus, Verdict};
pub use eval::{compute_metrics, feedback_rate, render_report, MetricsReport, ReportFormat};
pub use extract::{
    check_scenario_mapping, extract_fenced_code, validate_script_structure, CodeBlock,
    DialectProfile, MappingReport, StructureReport,
};
pub use gateway::{cost_of, Backend, CostRates, Gateway, GatewayConfig, GatewayError, ModelResponse, Usage};
pub use gherkin::{lint_feature, parse_feature, scenario_titles, serialize_feature, FeatureAst, LintReport};
pub use ledger::{Ledger, LedgerEvent};
pub use page::{purge, testid_inventory, PageSource, PurgeOptions, PurgedPage, RawPage};
pub use pipeline::{Pipeline, PipelineError, ScenarioResult, ScriptResult};
pub use prompt::{estimate_tokens, ProductContext, PromptBundle, TemplateStore, UserStory};
pub use story::{load_local, parse_pr_description, PrInputs, StoryBundle, StorySource};
