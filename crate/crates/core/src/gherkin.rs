//! Gherkin feature files: parsing, linting and canonical serialization.
//!
//! The supported grammar is the subset generated scenario text actually uses:
//! `Feature`, an optional `Background`, `Scenario` / `Scenario Outline` with
//! `Examples` tables, the five step keywords and `#` comments. Tags and `Rule`
//! lines are accepted and ignored. Only English keywords are recognized.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A parse failure, positioned at the 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GherkinError {
    #[error("missing `Feature:` header")]
    MissingFeatureHeader,
    #[error("line {line}: feature name is empty")]
    EmptyFeatureName { line: usize },
    #[error("line {line}: step appears before any scenario")]
    StepOutsideScenario { line: usize },
    #[error("line {line}: unterminated Examples table")]
    UnterminatedExamples { line: usize },
    #[error("line {line}: Examples block outside a Scenario Outline")]
    ExamplesOutsideOutline { line: usize },
    #[error("line {line}: scenario title is empty")]
    EmptyScenarioTitle { line: usize },
}

impl GherkinError {
    pub fn code(&self) -> &'static str {
        match self {
            GherkinError::MissingFeatureHeader => "missing-feature-header",
            GherkinError::EmptyFeatureName { .. } => "empty-feature-name",
            GherkinError::StepOutsideScenario { .. } => "step-outside-scenario",
            GherkinError::UnterminatedExamples { .. } => "unterminated-examples",
            GherkinError::ExamplesOutsideOutline { .. } => "examples-outside-outline",
            GherkinError::EmptyScenarioTitle { .. } => "empty-scenario-title",
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            GherkinError::MissingFeatureHeader => None,
            GherkinError::EmptyFeatureName { line }
            | GherkinError::StepOutsideScenario { line }
            | GherkinError::UnterminatedExamples { line }
            | GherkinError::ExamplesOutsideOutline { line }
            | GherkinError::EmptyScenarioTitle { line } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKeyword {
    Given,
    When,
    Then,
    And,
    But,
}

impl StepKeyword {
    pub const ALL: [StepKeyword; 5] = [
        StepKeyword::Given,
        StepKeyword::When,
        StepKeyword::Then,
        StepKeyword::And,
        StepKeyword::But,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StepKeyword::Given => "Given",
            StepKeyword::When => "When",
            StepKeyword::Then => "Then",
            StepKeyword::And => "And",
            StepKeyword::But => "But",
        }
    }

    pub fn is_conjunction(self) -> bool {
        matches!(self, StepKeyword::And | StepKeyword::But)
    }
}

impl fmt::Display for StepKeyword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAst {
    pub keyword: StepKeyword,
    pub text: String,
    /// 1-based source line; 0 for programmatically built steps.
    #[serde(default)]
    pub line: usize,
}

impl StepAst {
    pub fn new(keyword: StepKeyword, text: impl Into<String>) -> Self {
        Self {
            keyword,
            text: text.into(),
            line: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Scenario,
    ScenarioOutline,
}

/// An `Examples` table: the first row is the header.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExamplesTable {
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioAst {
    pub title: String,
    pub kind: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub steps: Vec<StepAst>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub examples: Option<ExamplesTable>,
    #[serde(default)]
    pub line: usize,
}

impl ScenarioAst {
    pub fn new(title: impl Into<String>, steps: Vec<StepAst>) -> Self {
        Self {
            title: title.into(),
            kind: ScenarioKind::Scenario,
            description: None,
            steps,
            examples: None,
            line: 0,
        }
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.title == other.title
            && self.kind == other.kind
            && self.description == other.description
            && self.examples == other.examples
            && self.steps.len() == other.steps.len()
            && self
                .steps
                .iter()
                .zip(&other.steps)
                .all(|(a, b)| a.keyword == b.keyword && a.text == b.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LineRange {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureAst {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<ScenarioAst>,
    pub scenarios: Vec<ScenarioAst>,
    #[serde(default)]
    pub source_span: LineRange,
    /// Lines of any further `Feature:` headers found in the same source.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_feature_lines: Vec<usize>,
}

impl FeatureAst {
    pub fn new(name: impl Into<String>, scenarios: Vec<ScenarioAst>) -> Self {
        Self {
            name: name.into(),
            description: None,
            background: None,
            scenarios,
            source_span: LineRange::default(),
            extra_feature_lines: Vec::new(),
        }
    }

    /// Equality over names, descriptions, scenarios and steps, ignoring source
    /// positions.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.name == other.name
            && self.description == other.description
            && match (&self.background, &other.background) {
                (None, None) => true,
                (Some(a), Some(b)) => a.same_structure(b),
                _ => false,
            }
            && self.scenarios.len() == other.scenarios.len()
            && self
                .scenarios
                .iter()
                .zip(&other.scenarios)
                .all(|(a, b)| a.same_structure(b))
    }
}

/// Trim and collapse internal whitespace runs to a single space.
pub fn normalize_title(title: &str) -> String {
    title.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn scenario_titles(ast: &FeatureAst) -> Vec<String> {
    ast.scenarios
        .iter()
        .map(|s| normalize_title(&s.title))
        .collect()
}

// ---------------------------------------------------------------------------
// Parsing

enum Line<'a> {
    Blank,
    Comment,
    Ignored,
    Feature(&'a str),
    Background(&'a str),
    Scenario(ScenarioKind, &'a str),
    Examples,
    Step(StepKeyword, &'a str),
    TableRow(&'a str),
    Text(&'a str),
}

fn strip_keyword<'a>(line: &'a str, keyword: &str) -> Option<&'a str> {
    line.strip_prefix(keyword)
        .and_then(|rest| rest.strip_prefix(':'))
        .map(str::trim)
}

fn classify(raw: &str) -> Line<'_> {
    let line = raw.trim();
    if line.is_empty() {
        return Line::Blank;
    }
    if line.starts_with('#') {
        return Line::Comment;
    }
    if line.starts_with('@') || strip_keyword(line, "Rule").is_some() {
        return Line::Ignored;
    }
    if line.starts_with('|') {
        return Line::TableRow(line);
    }
    if let Some(rest) = strip_keyword(line, "Feature") {
        return Line::Feature(rest);
    }
    if let Some(rest) = strip_keyword(line, "Background") {
        return Line::Background(rest);
    }
    for kw in ["Scenario Outline", "Scenario Template"] {
        if let Some(rest) = strip_keyword(line, kw) {
            return Line::Scenario(ScenarioKind::ScenarioOutline, rest);
        }
    }
    for kw in ["Scenario", "Example"] {
        if let Some(rest) = strip_keyword(line, kw) {
            return Line::Scenario(ScenarioKind::Scenario, rest);
        }
    }
    if strip_keyword(line, "Examples").is_some() || strip_keyword(line, "Scenarios").is_some() {
        return Line::Examples;
    }
    for kw in StepKeyword::ALL {
        if let Some(rest) = line.strip_prefix(kw.as_str()) {
            if rest.starts_with(char::is_whitespace) {
                let text = rest.trim();
                if !text.is_empty() {
                    return Line::Step(kw, text);
                }
            }
        }
    }
    Line::Text(line)
}

/// Split a `| a | b |` row into trimmed cells. `None` when the row is not
/// closed by a trailing pipe.
fn split_row(row: &str) -> Option<Vec<String>> {
    let inner = row.strip_prefix('|')?;
    let mut cells = Vec::new();
    let mut cell = String::new();
    let mut chars = inner.chars().peekable();
    let mut closed = false;
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some('|') => cell.push('|'),
                Some('n') => cell.push('\n'),
                Some('\\') => cell.push('\\'),
                Some(other) => {
                    cell.push('\\');
                    cell.push(other);
                }
                None => cell.push('\\'),
            },
            '|' => {
                cells.push(cell.trim().to_string());
                cell.clear();
                let rest: String = chars.clone().collect();
                closed = rest.trim().is_empty();
                if closed {
                    break;
                }
            }
            _ => cell.push(c),
        }
    }
    closed.then_some(cells)
}

fn push_description(target: &mut Option<String>, text: &str) {
    match target {
        Some(existing) => {
            existing.push('\n');
            existing.push_str(text);
        }
        None => *target = Some(text.to_string()),
    }
}

/// Which block the next free text or step attaches to.
enum Cursor {
    Feature,
    Background,
    Scenario,
    Examples,
}

pub fn parse_feature(text: &str) -> Result<FeatureAst, GherkinError> {
    let mut feature: Option<FeatureAst> = None;
    let mut cursor = Cursor::Feature;
    let mut examples_open: Option<usize> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let line = classify(raw);

        // An `Examples:` header must be followed by at least one row.
        if let Some(open_line) = examples_open {
            match line {
                Line::TableRow(_) => {}
                Line::Blank | Line::Comment => {}
                _ => return Err(GherkinError::UnterminatedExamples { line: open_line }),
            }
        }

        let Some(ast) = feature.as_mut() else {
            match line {
                Line::Blank | Line::Comment | Line::Ignored => continue,
                Line::Feature(name) => {
                    if name.is_empty() {
                        return Err(GherkinError::EmptyFeatureName { line: lineno });
                    }
                    let mut ast = FeatureAst::new(name, Vec::new());
                    ast.source_span = LineRange {
                        start: lineno,
                        end: lineno,
                    };
                    feature = Some(ast);
                    last_line = lineno;
                    continue;
                }
                Line::Step(..) => return Err(GherkinError::StepOutsideScenario { line: lineno }),
                _ => return Err(GherkinError::MissingFeatureHeader),
            }
        };

        if !matches!(line, Line::Blank | Line::Comment) {
            last_line = lineno;
        }

        match line {
            Line::Blank | Line::Comment | Line::Ignored => {}
            Line::Feature(_) => ast.extra_feature_lines.push(lineno),
            Line::Background(title) => {
                let mut bg = ScenarioAst::new(title, Vec::new());
                bg.line = lineno;
                ast.background = Some(bg);
                cursor = Cursor::Background;
            }
            Line::Scenario(kind, title) => {
                if title.is_empty() {
                    return Err(GherkinError::EmptyScenarioTitle { line: lineno });
                }
                let mut sc = ScenarioAst::new(title, Vec::new());
                sc.kind = kind;
                sc.line = lineno;
                ast.scenarios.push(sc);
                cursor = Cursor::Scenario;
            }
            Line::Examples => {
                let outline = match (&cursor, ast.scenarios.last_mut()) {
                    (Cursor::Scenario, Some(sc)) if sc.kind == ScenarioKind::ScenarioOutline => sc,
                    _ => return Err(GherkinError::ExamplesOutsideOutline { line: lineno }),
                };
                outline.examples.get_or_insert_with(ExamplesTable::default);
                examples_open = Some(lineno);
                cursor = Cursor::Examples;
            }
            Line::TableRow(row) => {
                let Cursor::Examples = cursor else {
                    let target = description_target(ast, &cursor);
                    push_description(target, row);
                    continue;
                };
                let cells =
                    split_row(row).ok_or(GherkinError::UnterminatedExamples { line: lineno })?;
                let table = ast
                    .scenarios
                    .last_mut()
                    .and_then(|sc| sc.examples.as_mut())
                    .expect("examples cursor implies an open table");
                table.rows.push(cells);
                examples_open = None;
            }
            Line::Step(keyword, step_text) => {
                let mut step = StepAst::new(keyword, step_text);
                step.line = lineno;
                match cursor {
                    Cursor::Feature => {
                        return Err(GherkinError::StepOutsideScenario { line: lineno })
                    }
                    Cursor::Background => ast
                        .background
                        .as_mut()
                        .expect("background cursor implies a background")
                        .steps
                        .push(step),
                    Cursor::Scenario | Cursor::Examples => {
                        cursor = Cursor::Scenario;
                        ast.scenarios
                            .last_mut()
                            .expect("scenario cursor implies a scenario")
                            .steps
                            .push(step)
                    }
                }
            }
            Line::Text(content) => {
                let target = description_target(ast, &cursor);
                push_description(target, content);
            }
        }
    }

    if let Some(open_line) = examples_open {
        return Err(GherkinError::UnterminatedExamples { line: open_line });
    }
    let mut ast = feature.ok_or(GherkinError::MissingFeatureHeader)?;
    ast.source_span.end = last_line;
    Ok(ast)
}

fn description_target<'a>(ast: &'a mut FeatureAst, cursor: &Cursor) -> &'a mut Option<String> {
    match cursor {
        Cursor::Feature => &mut ast.description,
        Cursor::Background => &mut ast.background.as_mut().expect("background").description,
        Cursor::Scenario | Cursor::Examples => {
            &mut ast.scenarios.last_mut().expect("scenario").description
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization

const INDENT: &str = "  ";

fn escape_cell(cell: &str) -> String {
    cell.replace('\\', "\\\\")
        .replace('|', "\\|")
        .replace('\n', "\\n")
}

fn write_block(out: &mut String, header: &str, sc: &ScenarioAst) {
    out.push_str(INDENT);
    out.push_str(header);
    if !sc.title.is_empty() {
        out.push(' ');
        out.push_str(&sc.title);
    }
    out.push('\n');
    if let Some(desc) = &sc.description {
        for line in desc.lines() {
            out.push_str(&INDENT.repeat(2));
            out.push_str(line);
            out.push('\n');
        }
    }
    for step in &sc.steps {
        out.push_str(&INDENT.repeat(2));
        out.push_str(step.keyword.as_str());
        out.push(' ');
        out.push_str(&step.text);
        out.push('\n');
    }
    if let Some(table) = &sc.examples {
        out.push('\n');
        out.push_str(&INDENT.repeat(2));
        out.push_str("Examples:\n");
        for row in &table.rows {
            out.push_str(&INDENT.repeat(3));
            out.push('|');
            for cell in row {
                out.push(' ');
                out.push_str(&escape_cell(cell));
                out.push_str(" |");
            }
            out.push('\n');
        }
    }
}

/// Canonical text: feature at column 0, scenarios indented one unit, steps two.
pub fn serialize_feature(ast: &FeatureAst) -> String {
    let mut out = format!("Feature: {}\n", ast.name);
    if let Some(desc) = &ast.description {
        for line in desc.lines() {
            out.push_str(INDENT);
            out.push_str(line);
            out.push('\n');
        }
    }
    if let Some(bg) = &ast.background {
        out.push('\n');
        write_block(&mut out, "Background:", bg);
    }
    for sc in &ast.scenarios {
        out.push('\n');
        let header = match sc.kind {
            ScenarioKind::Scenario => "Scenario:",
            ScenarioKind::ScenarioOutline => "Scenario Outline:",
        };
        write_block(&mut out, header, sc);
    }
    out
}

impl fmt::Display for FeatureAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_feature(self))
    }
}

// ---------------------------------------------------------------------------
// Linting

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintFinding {
    pub severity: Severity,
    pub code: String,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LintReport {
    pub findings: Vec<LintFinding>,
}

impl LintReport {
    pub fn errors(&self) -> usize {
        self.count(Severity::Error)
    }

    pub fn warnings(&self) -> usize {
        self.count(Severity::Warning)
    }

    fn count(&self, severity: Severity) -> usize {
        self.findings
            .iter()
            .filter(|f| f.severity == severity)
            .count()
    }

    /// A feature with lint errors must not be sent to script generation.
    pub fn blocks_script_generation(&self) -> bool {
        self.errors() > 0
    }
}

pub fn lint_feature(ast: &FeatureAst) -> LintReport {
    let mut findings = Vec::new();
    let mut finding = |severity, code: &str, line, message: String| {
        findings.push(LintFinding {
            severity,
            code: code.to_string(),
            line,
            message,
        })
    };

    for &line in &ast.extra_feature_lines {
        finding(
            Severity::Warning,
            "multiple-features",
            line,
            "only one Feature per generation is expected; extra header merged".into(),
        );
    }
    if ast.scenarios.is_empty() {
        finding(
            Severity::Error,
            "no-scenarios",
            ast.source_span.start,
            format!("feature `{}` has no scenarios", ast.name),
        );
    }

    let mut seen: Vec<String> = Vec::new();
    for sc in &ast.scenarios {
        let title = normalize_title(&sc.title);
        if seen.contains(&title) {
            finding(
                Severity::Warning,
                "duplicate-title",
                sc.line,
                format!("duplicate scenario title `{title}`"),
            );
        } else {
            seen.push(title.clone());
        }

        match sc.steps.first() {
            None => finding(
                Severity::Error,
                "empty-scenario",
                sc.line,
                format!("scenario `{title}` has no steps"),
            ),
            Some(step) if step.keyword.is_conjunction() && ast.background.is_none() => finding(
                Severity::Warning,
                "leading-conjunction",
                step.line.max(sc.line),
                format!(
                    "scenario `{title}` starts with `{}` without a Background",
                    step.keyword
                ),
            ),
            Some(_) => {}
        }

        if sc.kind == ScenarioKind::ScenarioOutline
            && sc.examples.as_ref().is_none_or(|t| t.rows.len() < 2)
        {
            finding(
                Severity::Warning,
                "outline-without-examples",
                sc.line,
                format!("scenario outline `{title}` has no example rows"),
            );
        }
    }

    findings.sort_by_key(|f| f.line);
    LintReport { findings }
}
