//! Metrics over a run ledger: syntactic correctness, semantic relevance
//! before and after remediation, comment accessibility, token and cost
//! averages, and the final classification of every test case.

use std::collections::{BTreeMap, HashMap};

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cases::{CaseError, CaseState, CaseStatus};
use crate::ledger::{FeedbackRecord, LedgerEvent};
use crate::pipeline::ScriptResult;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ledger holds no test cases")]
    EmptyLedger,
    #[error("no feedback records")]
    NoFeedback,
    #[error("verdict for unknown case `{0}`")]
    UnknownCase(String),
    #[error("case `{case_id}`: {source}")]
    Transition {
        case_id: String,
        #[source]
        source: CaseError,
    },
}

/// Case id of the `index`-th (0-based) scenario of a root script generation.
pub fn case_id(root_id: &str, index: usize) -> String {
    format!("{root_id}#{}", index + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub root_id: String,
    pub scenario_title: String,
    pub syntactically_valid: bool,
    pub commented: bool,
    pub state: CaseState,
}

/// Replays a ledger into per-case states. One case per scenario of every
/// fresh (non-regenerated) script generation.
pub fn case_book(events: &[LedgerEvent], min_comment_lines: usize) -> Result<Vec<CaseRecord>, EvalError> {
    let mut cases: Vec<CaseRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for event in events {
        match event {
            LedgerEvent::ScriptGeneration(script) if script.parent_id.is_none() => {
                for (i, case) in script_cases(script, min_comment_lines).into_iter().enumerate() {
                    index.insert(case_id(&script.root_id, i), cases.len());
                    cases.push(case);
                }
            }
            LedgerEvent::ScriptGeneration(script) => {
                for case in cases.iter_mut().filter(|c| {
                    c.root_id == script.root_id && c.state.state == CaseStatus::AwaitingRegeneration
                }) {
                    case.state = std::mem::take(&mut case.state)
                        .record_regeneration(&script.generation_id)
                        .map_err(|source| EvalError::Transition {
                            case_id: case.case_id.clone(),
                            source,
                        })?;
                }
            }
            LedgerEvent::Verdict(v) => {
                let &i = index
                    .get(&v.case_id)
                    .ok_or_else(|| EvalError::UnknownCase(v.case_id.clone()))?;
                let case = &mut cases[i];
                case.state = std::mem::take(&mut case.state)
                    .record_verdict(v.verdict, &v.detail)
                    .map_err(|source| EvalError::Transition {
                        case_id: v.case_id.clone(),
                        source,
                    })?;
            }
            _ => {}
        }
    }
    Ok(cases)
}

fn script_cases(script: &ScriptResult, min_comment_lines: usize) -> Vec<CaseRecord> {
    let comments: HashMap<&str, usize> = script
        .structure
        .test_blocks
        .iter()
        .map(|b| (b.title.as_str(), b.comment_lines))
        .collect();
    script
        .feature
        .scenarios
        .iter()
        .enumerate()
        .map(|(i, sc)| {
            let title = crate::gherkin::normalize_title(&sc.title);
            let commented = script
                .mapping
                .matched
                .iter()
                .find(|(s, _)| *s == title)
                .and_then(|(_, t)| comments.get(t.as_str()))
                .is_some_and(|&n| n >= min_comment_lines);
            CaseRecord {
                case_id: case_id(&script.root_id, i),
                root_id: script.root_id.clone(),
                scenario_title: title,
                syntactically_valid: script.structure.valid,
                commented,
                state: CaseState::new(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEntry {
    pub state: CaseStatus,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_cases: usize,
    pub scripts: usize,
    pub syntactic_correctness: f64,
    pub semantic_relevance_initial: f64,
    pub semantic_relevance_after_remediation: f64,
    pub accessibility: f64,
    pub avg_input_tokens: f64,
    pub avg_output_tokens: f64,
    pub total_cost: Decimal,
    pub avg_cost_per_story: Decimal,
    pub distribution: Vec<DistributionEntry>,
}

impl MetricsReport {
    pub fn count(&self, state: CaseStatus) -> usize {
        self.distribution
            .iter()
            .find(|d| d.state == state)
            .map_or(0, |d| d.count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsOptions {
    /// Comment lines a test block needs to count as accessible.
    pub min_comment_lines: usize,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self { min_comment_lines: 1 }
    }
}

pub fn compute_metrics(events: &[LedgerEvent]) -> Result<MetricsReport, EvalError> {
    compute_metrics_with(events, MetricsOptions::default())
}

pub fn compute_metrics_with(events: &[LedgerEvent], options: MetricsOptions) -> Result<MetricsReport, EvalError> {
    let cases = case_book(events, options.min_comment_lines)?;
    if cases.is_empty() {
        return Err(EvalError::EmptyLedger);
    }
    let total = cases.len();
    let ratio = |n: usize| n as f64 / total as f64;

    let mut counts: BTreeMap<CaseStatus, usize> = BTreeMap::new();
    for case in &cases {
        *counts.entry(case.state.state).or_default() += 1;
    }
    let distribution = CaseStatus::ALL
        .iter()
        .filter_map(|&state| {
            let count = *counts.get(&state)?;
            Some(DistributionEntry {
                state,
                count,
                percent: ratio(count) * 100.0,
            })
        })
        .collect();

    let scripts: Vec<&ScriptResult> = events
        .iter()
        .filter_map(|e| match e {
            LedgerEvent::ScriptGeneration(s) => Some(s.as_ref()),
            _ => None,
        })
        .collect();
    let fresh_scripts = scripts.iter().filter(|s| s.parent_id.is_none()).count();
    let (avg_input_tokens, avg_output_tokens) = if scripts.is_empty() {
        (0.0, 0.0)
    } else {
        let n = scripts.len() as f64;
        (
            scripts.iter().map(|s| s.usage.input_tokens as f64).sum::<f64>() / n,
            scripts.iter().map(|s| s.usage.output_tokens as f64).sum::<f64>() / n,
        )
    };
    let script_cost: Decimal = scripts.iter().map(|s| s.cost).sum();
    let scenario_cost: Decimal = events
        .iter()
        .filter_map(|e| match e {
            LedgerEvent::ScenarioGeneration(s) => Some(s.cost),
            _ => None,
        })
        .sum();
    let avg_cost_per_story = if fresh_scripts == 0 {
        Decimal::ZERO
    } else {
        (script_cost / Decimal::from(fresh_scripts))
            .round_dp_with_strategy(4, RoundingStrategy::MidpointAwayFromZero)
    };

    let count_of = |s: CaseStatus| counts.get(&s).copied().unwrap_or(0);
    Ok(MetricsReport {
        total_cases: total,
        scripts: fresh_scripts,
        syntactic_correctness: ratio(cases.iter().filter(|c| c.syntactically_valid).count()),
        semantic_relevance_initial: ratio(count_of(CaseStatus::ValidAsGenerated)),
        semantic_relevance_after_remediation: ratio(
            cases.iter().filter(|c| c.state.state.is_valid()).count(),
        ),
        accessibility: ratio(cases.iter().filter(|c| c.commented).count()),
        avg_input_tokens,
        avg_output_tokens,
        total_cost: (script_cost + scenario_cost).normalize(),
        avg_cost_per_story: avg_cost_per_story.normalize(),
        distribution,
    })
}

pub fn feedback_records(events: &[LedgerEvent]) -> Vec<FeedbackRecord> {
    events
        .iter()
        .filter_map(|e| match e {
            LedgerEvent::Feedback(f) => Some(f.clone()),
            _ => None,
        })
        .collect()
}

/// Share of feedback marked helpful.
pub fn feedback_rate(records: &[FeedbackRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoFeedback);
    }
    let helpful = records.iter().filter(|r| r.helpful).count();
    Ok(helpful as f64 / records.len() as f64)
}

/// Integer percent, rounding ties to even: 62/65 renders as "95%".
pub fn render_percent(ratio: f64) -> String {
    format!("{}%", (ratio * 100.0).round_ties_even() as i64)
}

/// Percent with one decimal, e.g. "95.4%".
pub fn render_percent_1dp(ratio: f64) -> String {
    format!("{:.1}%", ratio * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown format `{other}` (text, json, csv)")),
        }
    }
}

/// Fixed CSV columns, in order.
pub const CSV_HEADER: &str = "total_cases,scripts,syntactic_correctness,semantic_relevance_initial,semantic_relevance_after_remediation,accessibility,avg_input_tokens,avg_output_tokens,total_cost,avg_cost_per_story,valid_as_generated,minor_fixed,regenerated_valid,discarded,awaiting_regeneration,generated";

pub fn render_report(metrics: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(metrics).expect("metrics serialize") + "\n",
        ReportFormat::Csv => {
            let mut row = vec![
                metrics.total_cases.to_string(),
                metrics.scripts.to_string(),
                metrics.syntactic_correctness.to_string(),
                metrics.semantic_relevance_initial.to_string(),
                metrics.semantic_relevance_after_remediation.to_string(),
                metrics.accessibility.to_string(),
                metrics.avg_input_tokens.to_string(),
                metrics.avg_output_tokens.to_string(),
                metrics.total_cost.to_string(),
                metrics.avg_cost_per_story.to_string(),
            ];
            row.extend(CaseStatus::ALL.iter().map(|&s| metrics.count(s).to_string()));
            format!("{CSV_HEADER}\n{}\n", row.join(","))
        }
        ReportFormat::Text => {
            let mut out = String::new();
            let mut line = |s: String| {
                out.push_str(&s);
                out.push('\n');
            };
            line(format!("test cases: {} (from {} scripts)", metrics.total_cases, metrics.scripts));
            line(format!("syntactic correctness: {}", render_percent(metrics.syntactic_correctness)));
            line(format!(
                "semantic relevance (initial): {}",
                render_percent(metrics.semantic_relevance_initial)
            ));
            line(format!(
                "semantic relevance (after remediation): {}",
                render_percent(metrics.semantic_relevance_after_remediation)
            ));
            line(format!("accessibility: {}", render_percent(metrics.accessibility)));
            line(format!("average input tokens: {:.0}", metrics.avg_input_tokens));
            line(format!("average output tokens: {:.0}", metrics.avg_output_tokens));
            line(format!("total cost: {}", metrics.total_cost));
            line(format!("average cost per story: {}", metrics.avg_cost_per_story));
            line("classification:".into());
            for d in &metrics.distribution {
                line(format!(
                    "  {}: {} ({})",
                    d.state,
                    d.count,
                    render_percent(d.percent / 100.0)
                ));
            }
            out
        }
    }
}
