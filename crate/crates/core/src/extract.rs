//! Generated-code extraction and structural checks.
//!
//! The validator is lexical: it tracks delimiters, string and template
//! literals, comments and the suite/test skeleton named by a
//! [`DialectProfile`]. It does not parse the target language.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gherkin::{normalize_title, FeatureAst};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("response contains no fenced code block")]
    NoCodeBlock,
    #[error("dialect profile {path}: {message}")]
    Dialect { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBlock {
    pub code: String,
    pub fence_language_tag: Option<String>,
    pub fence_count_in_source: usize,
}

impl CodeBlock {
    /// More than one block means the model ignored the single-block instruction.
    pub fn has_extra_blocks(&self) -> bool {
        self.fence_count_in_source > 1
    }
}

fn fence_open(line: &str) -> Option<(usize, &str)> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let ticks = rest.len() - rest.trim_start_matches('`').len();
    if ticks < 3 {
        return None;
    }
    let info = rest[ticks..].trim();
    if info.contains('`') {
        return None;
    }
    Some((ticks, info))
}

fn fence_close(line: &str, ticks: usize) -> bool {
    let t = line.trim();
    t.len() >= ticks && t.bytes().all(|b| b == b'`')
}

/// Content of the first triple-backtick block, plus how many blocks the
/// response holds. An unclosed fence runs to the end of the text.
pub fn extract_fenced_code(response_text: &str) -> Result<CodeBlock, ExtractError> {
    let mut first: Option<(String, Option<String>)> = None;
    let mut count = 0;
    let mut lines = response_text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
    while let Some(line) = lines.next() {
        let Some((ticks, info)) = fence_open(line) else {
            continue;
        };
        count += 1;
        let mut body = Vec::new();
        for inner in lines.by_ref() {
            if fence_close(inner, ticks) {
                break;
            }
            body.push(inner);
        }
        if first.is_none() {
            let tag = info.split_whitespace().next().map(str::to_string);
            first = Some((body.join("\n"), tag));
        }
    }
    let (code, fence_language_tag) = first.ok_or(ExtractError::NoCodeBlock)?;
    Ok(CodeBlock {
        code,
        fence_language_tag,
        fence_count_in_source: count,
    })
}

// ---------------------------------------------------------------------------
// Dialect profiles

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialectProfile {
    pub name: String,
    pub suite_keywords: Vec<String>,
    pub test_keywords: Vec<String>,
    pub line_comment: String,
    pub block_comment: (String, String),
    /// Single-line string delimiters.
    pub string_delimiters: Vec<char>,
    /// Multi-line template delimiter with `${...}` interpolation, if any.
    pub template_delimiter: Option<char>,
}

impl Default for DialectProfile {
    /// Cypress on TypeScript: `describe` suites holding `it` test cases.
    fn default() -> Self {
        Self {
            name: "cypress-typescript".into(),
            suite_keywords: vec!["describe".into(), "context".into()],
            test_keywords: vec!["it".into(), "specify".into()],
            line_comment: "//".into(),
            block_comment: ("/*".into(), "*/".into()),
            string_delimiters: vec!['\'', '"'],
            template_delimiter: Some('`'),
        }
    }
}

impl DialectProfile {
    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        let err = |message: String| ExtractError::Dialect {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let profile: DialectProfile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        if profile.suite_keywords.is_empty() || profile.test_keywords.is_empty() {
            return Err(err("suite and test keywords must be non-empty".into()));
        }
        if profile.line_comment.is_empty() || profile.block_comment.0.is_empty() || profile.block_comment.1.is_empty() {
            return Err(err("comment markers must be non-empty".into()));
        }
        Ok(profile)
    }
}

// ---------------------------------------------------------------------------
// Lexing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    /// Template literal; `None` when it contains interpolation.
    Template(Option<String>),
    Open(char),
    Close(char),
    Punct(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    /// For `Open`, index of the matching `Close` token.
    partner: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: String,
    pub line: usize,
    pub message: String,
}

#[derive(Default)]
struct Lexed {
    tokens: Vec<Token>,
    comment_lines: Vec<usize>,
    findings: Vec<Finding>,
}

fn delimiter_code(c: char) -> &'static str {
    match c {
        '(' | ')' => "unbalanced-paren",
        '[' | ']' => "unbalanced-bracket",
        _ => "unbalanced-brace",
    }
}

fn closer(open: char) -> char {
    match open {
        '(' => ')',
        '[' => ']',
        _ => '}',
    }
}

enum Frame {
    Delim { ch: char, token: usize, line: usize },
    /// `${` inside a template literal; `}` resumes the template.
    Interp { line: usize },
}

struct Lexer<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    dialect: &'a DialectProfile,
    out: Lexed,
    stack: Vec<Frame>,
    /// Template literals suspended by an interpolation: (start line, has interp).
    templates: Vec<(usize, String)>,
}

impl<'a> Lexer<'a> {
    fn new(code: &str, dialect: &'a DialectProfile) -> Self {
        Self {
            chars: code.chars().collect(),
            pos: 0,
            line: 1,
            dialect,
            out: Lexed::default(),
            stack: Vec::new(),
            templates: Vec::new(),
        }
    }

    fn peek(&self, off: usize) -> Option<char> {
        self.chars.get(self.pos + off).copied()
    }

    fn at(&self, s: &str) -> bool {
        s.chars().enumerate().all(|(i, c)| self.peek(i) == Some(c))
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.get(self.pos).copied()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
        }
        Some(c)
    }

    fn finding(&mut self, code: &str, line: usize, message: String) {
        self.out.findings.push(Finding {
            code: code.to_string(),
            line: line.max(1),
            message,
        });
    }

    fn push(&mut self, tok: Tok, line: usize) -> usize {
        self.out.tokens.push(Token {
            tok,
            line,
            partner: None,
        });
        self.out.tokens.len() - 1
    }

    fn mark_comment_line(&mut self, line: usize) {
        if self.out.comment_lines.last() != Some(&line) {
            self.out.comment_lines.push(line);
        }
    }

    /// Whether a `/` here starts a regular expression literal.
    fn regex_allowed(&self) -> bool {
        match self.out.tokens.last().map(|t| &t.tok) {
            None => true,
            Some(Tok::Open(_)) => true,
            Some(Tok::Punct(c)) => !matches!(c, '.'),
            Some(Tok::Ident(word)) => matches!(
                word.as_str(),
                "return" | "typeof" | "case" | "do" | "else" | "in" | "of" | "new" | "delete" | "void" | "throw" | "yield" | "await"
            ),
            _ => false,
        }
    }

    fn lex_regex(&mut self) {
        let line = self.line;
        self.bump();
        let mut in_class = false;
        loop {
            match self.peek(0) {
                None | Some('\n') => {
                    self.finding("unterminated-regex", line, "regular expression literal is not terminated".into());
                    return;
                }
                Some('\\') => {
                    self.bump();
                    if self.peek(0) != Some('\n') {
                        self.bump();
                    }
                }
                Some('[') => {
                    in_class = true;
                    self.bump();
                }
                Some(']') => {
                    in_class = false;
                    self.bump();
                }
                Some('/') if !in_class => {
                    self.bump();
                    while self.peek(0).is_some_and(|c| c.is_ascii_alphabetic()) {
                        self.bump();
                    }
                    self.push(Tok::Punct('/'), line);
                    return;
                }
                Some(_) => {
                    self.bump();
                }
            }
        }
    }

    fn lex_string(&mut self, quote: char) {
        let line = self.line;
        self.bump();
        let mut value = String::new();
        loop {
            match self.peek(0) {
                None | Some('\n') => {
                    self.finding(
                        "unterminated-string",
                        line,
                        format!("string literal starting with {quote} is not terminated"),
                    );
                    return;
                }
                Some('\\') => {
                    self.bump();
                    match self.bump() {
                        Some('n') => value.push('\n'),
                        Some('t') => value.push('\t'),
                        Some('\n') | None => {}
                        Some(c) => value.push(c),
                    }
                }
                Some(c) if c == quote => {
                    self.bump();
                    self.push(Tok::Str(value), line);
                    return;
                }
                Some(c) => {
                    value.push(c);
                    self.bump();
                }
            }
        }
    }

    /// Scans template text until the closing delimiter or `${`.
    fn lex_template_body(&mut self, delim: char, start_line: usize, mut value: String, interpolated: bool) {
        loop {
            match self.peek(0) {
                None => {
                    self.finding(
                        "unterminated-template",
                        start_line,
                        "template literal is not terminated".into(),
                    );
                    return;
                }
                Some('\\') => {
                    self.bump();
                    if let Some(c) = self.bump() {
                        value.push(c);
                    }
                }
                Some(c) if c == delim => {
                    self.bump();
                    let tok = if interpolated { None } else { Some(value) };
                    self.push(Tok::Template(tok), start_line);
                    return;
                }
                Some('$') if self.peek(1) == Some('{') => {
                    let line = self.line;
                    self.bump();
                    self.bump();
                    self.templates.push((start_line, value));
                    self.stack.push(Frame::Interp { line });
                    return;
                }
                Some(c) => {
                    value.push(c);
                    self.bump();
                }
            }
        }
    }

    fn close_delimiter(&mut self, c: char) {
        let line = self.line;
        match self.stack.last() {
            Some(Frame::Interp { .. }) if c == '}' => {
                self.stack.pop();
                self.bump();
                let (start_line, value) = self.templates.pop().expect("interp frame has a template");
                let delim = self.dialect.template_delimiter.unwrap_or('`');
                self.lex_template_body(delim, start_line, value, true);
            }
            Some(Frame::Delim { ch, token, .. }) if closer(*ch) == c => {
                let open = *token;
                self.stack.pop();
                self.bump();
                let idx = self.push(Tok::Close(c), line);
                self.out.tokens[open].partner = Some(idx);
            }
            _ => {
                self.bump();
                self.finding(delimiter_code(c), line, format!("unexpected `{c}`"));
                self.push(Tok::Close(c), line);
            }
        }
    }

    fn run(mut self) -> Lexed {
        let (block_open, block_close) = self.dialect.block_comment.clone();
        let line_comment = self.dialect.line_comment.clone();
        while let Some(c) = self.peek(0) {
            if self.at(&line_comment) {
                let line = self.line;
                self.mark_comment_line(line);
                while self.peek(0).is_some_and(|c| c != '\n') {
                    self.bump();
                }
                continue;
            }
            if self.at(&block_open) {
                let start = self.line;
                for _ in block_open.chars() {
                    self.bump();
                }
                self.mark_comment_line(start);
                let mut closed = false;
                while self.peek(0).is_some() {
                    if self.at(&block_close) {
                        for _ in block_close.chars() {
                            self.bump();
                        }
                        closed = true;
                        break;
                    }
                    if self.bump() == Some('\n') {
                        let l = self.line;
                        self.mark_comment_line(l);
                    }
                }
                if !closed {
                    self.finding("unterminated-comment", start, "block comment is not terminated".into());
                }
                continue;
            }
            if self.dialect.string_delimiters.contains(&c) {
                self.lex_string(c);
                continue;
            }
            if self.dialect.template_delimiter == Some(c) {
                let line = self.line;
                self.bump();
                self.lex_template_body(c, line, String::new(), false);
                continue;
            }
            match c {
                '(' | '[' | '{' => {
                    let line = self.line;
                    self.bump();
                    let token = self.push(Tok::Open(c), line);
                    self.stack.push(Frame::Delim { ch: c, token, line });
                }
                ')' | ']' | '}' => self.close_delimiter(c),
                '/' if self.regex_allowed() => self.lex_regex(),
                c if c.is_alphanumeric() || c == '_' || c == '$' => {
                    let line = self.line;
                    let mut word = String::new();
                    while let Some(ch) = self.peek(0) {
                        if ch.is_alphanumeric() || ch == '_' || ch == '$' || (ch == '.' && word.chars().all(|d| d.is_ascii_digit())) {
                            word.push(ch);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    self.push(Tok::Ident(word), line);
                }
                c if c.is_whitespace() => {
                    self.bump();
                }
                c => {
                    let line = self.line;
                    self.bump();
                    self.push(Tok::Punct(c), line);
                }
            }
        }
        while let Some(frame) = self.stack.pop() {
            match frame {
                Frame::Delim { ch, line, .. } => {
                    self.finding(delimiter_code(ch), line, format!("`{ch}` is never closed"));
                }
                Frame::Interp { line } => {
                    self.finding("unterminated-template", line, "template interpolation is never closed".into());
                }
            }
        }
        self.out
    }
}

// ---------------------------------------------------------------------------
// Structure

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestBlock {
    pub title: String,
    pub line: usize,
    pub comment_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    pub valid: bool,
    pub findings: Vec<Finding>,
    pub test_block_titles: Vec<String>,
    pub test_blocks: Vec<TestBlock>,
    pub comment_lines: usize,
}

/// A `keyword(` or `keyword.modifier(` call whose first argument is a string.
struct Call {
    title: String,
    line: usize,
    open: usize,
    close: usize,
}

fn calls(tokens: &[Token], keywords: &[String]) -> Vec<Call> {
    let mut found = Vec::new();
    for i in 0..tokens.len() {
        let Tok::Ident(name) = &tokens[i].tok else { continue };
        if !keywords.iter().any(|k| k == name) {
            continue;
        }
        if i > 0 && tokens[i - 1].tok == Tok::Punct('.') {
            continue;
        }
        let mut j = i + 1;
        if tokens.get(j).map(|t| &t.tok) == Some(&Tok::Punct('.'))
            && matches!(tokens.get(j + 1).map(|t| &t.tok), Some(Tok::Ident(_)))
        {
            j += 2;
        }
        if tokens.get(j).map(|t| &t.tok) != Some(&Tok::Open('(')) {
            continue;
        }
        let title = match tokens.get(j + 1).map(|t| &t.tok) {
            Some(Tok::Str(s)) | Some(Tok::Template(Some(s))) => s.clone(),
            _ => continue,
        };
        let close = tokens[j].partner.unwrap_or(tokens.len().saturating_sub(1));
        found.push(Call {
            title,
            line: tokens[i].line,
            open: j,
            close,
        });
    }
    found
}

pub fn validate_script_structure(code: &str, dialect: &DialectProfile) -> StructureReport {
    let lexed = Lexer::new(code, dialect).run();
    let mut findings = lexed.findings;
    let tokens = &lexed.tokens;

    let suites = calls(tokens, &dialect.suite_keywords);
    let tests: Vec<Call> = calls(tokens, &dialect.test_keywords)
        .into_iter()
        .filter(|t| suites.iter().any(|s| s.open < t.open && t.open < s.close))
        .collect();

    if suites.is_empty() {
        findings.push(Finding {
            code: "missing-suite".into(),
            line: 1,
            message: format!(
                "no `{}(...)` suite with a string title",
                dialect.suite_keywords.join("`/`")
            ),
        });
    } else if tests.is_empty() {
        findings.push(Finding {
            code: "missing-test".into(),
            line: suites[0].line,
            message: format!(
                "suite contains no `{}(...)` test case with a string title",
                dialect.test_keywords.join("`/`")
            ),
        });
    }

    let test_blocks: Vec<TestBlock> = tests
        .iter()
        .map(|t| {
            let last_line = tokens.get(t.close).map_or(usize::MAX, |tok| tok.line);
            let comment_lines = lexed
                .comment_lines
                .iter()
                .filter(|&&l| l >= t.line && l <= last_line)
                .count();
            TestBlock {
                title: t.title.clone(),
                line: t.line,
                comment_lines,
            }
        })
        .collect();

    findings.sort_by_key(|f| f.line);
    StructureReport {
        valid: findings.is_empty(),
        findings,
        test_block_titles: test_blocks.iter().map(|b| b.title.clone()).collect(),
        test_blocks,
        comment_lines: lexed.comment_lines.len(),
    }
}

// ---------------------------------------------------------------------------
// Mapping

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingReport {
    pub matched: Vec<(String, String)>,
    pub missing_scenarios: Vec<String>,
    pub extra_tests: Vec<String>,
    pub comment_coverage: f64,
}

fn mapping_key(title: &str) -> String {
    normalize_title(title).to_lowercase()
}

/// Pairs scenarios with test blocks: exact normalized-title matches first,
/// then containment in either direction. Each test is used at most once.
pub fn check_scenario_mapping(feature: &FeatureAst, report: &StructureReport) -> MappingReport {
    let scenarios: Vec<(String, String)> = feature
        .scenarios
        .iter()
        .map(|s| (normalize_title(&s.title), mapping_key(&s.title)))
        .collect();
    let tests: Vec<String> = report.test_blocks.iter().map(|b| mapping_key(&b.title)).collect();

    let mut test_for: Vec<Option<usize>> = vec![None; scenarios.len()];
    let mut used = vec![false; tests.len()];
    let passes: [fn(&str, &str) -> bool; 2] = [
        |s, t| s == t,
        |s, t| !s.is_empty() && !t.is_empty() && (s.contains(t) || t.contains(s)),
    ];
    for pass in passes {
        for (si, (_, skey)) in scenarios.iter().enumerate() {
            if test_for[si].is_some() {
                continue;
            }
            if let Some(ti) = (0..tests.len()).find(|&ti| !used[ti] && pass(skey, &tests[ti])) {
                used[ti] = true;
                test_for[si] = Some(ti);
            }
        }
    }

    let mut matched = Vec::new();
    let mut missing_scenarios = Vec::new();
    let mut commented = 0;
    for (si, (title, _)) in scenarios.iter().enumerate() {
        match test_for[si] {
            Some(ti) => {
                let block = &report.test_blocks[ti];
                if block.comment_lines > 0 {
                    commented += 1;
                }
                matched.push((title.clone(), block.title.clone()));
            }
            None => missing_scenarios.push(title.clone()),
        }
    }
    let extra_tests = report
        .test_blocks
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(b, _)| b.title.clone())
        .collect();
    let comment_coverage = if matched.is_empty() {
        1.0
    } else {
        commented as f64 / matched.len() as f64
    };
    MappingReport {
        matched,
        missing_scenarios,
        extra_tests,
        comment_coverage,
    }
}
