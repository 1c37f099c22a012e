//! Strategies and property checks shared by the property suite and the
//! acceptance target.

#![allow(dead_code)]

use std::collections::BTreeSet;

use atgen_core::cases::{CaseState, CaseStatus, Transition, Verdict};
use atgen_core::extract::{check_scenario_mapping, validate_script_structure, DialectProfile};
use atgen_core::gherkin::{
    normalize_title, parse_feature, serialize_feature, ExamplesTable, FeatureAst, ScenarioAst, ScenarioKind,
    StepAst, StepKeyword,
};
use atgen_core::page::{purge, scan_testids, PurgeOptions};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub const CASES: u32 = 256;

// ---------------------------------------------------------------------------
// Gherkin

const LEAD: &[&str] = &["customer", "user", "page", "cart", "toggle", "section", "order", "product"];
const WORDS: &[&str] = &[
    "customer", "opens", "the", "cart", "page", "with", "two", "items", "price", "shows", "19,99", "€",
    "\"Produktdetails\"", "<count>", "toggle", "green", "data-testid", "section", "#3", "&", "a/b", "(draft)",
    "given", "then", "is", "unfolded", "Ärger", "ß",
];

fn phrase(min: usize, max: usize) -> impl Strategy<Value = String> {
    (
        proptest::sample::select(LEAD),
        proptest::collection::vec(proptest::sample::select(WORDS), min..max),
    )
        .prop_map(|(lead, rest)| {
            let mut v = vec![lead];
            v.extend(rest);
            v.join(" ")
        })
}

fn description() -> impl Strategy<Value = Option<String>> {
    proptest::option::of(proptest::collection::vec(phrase(0, 6), 1..3).prop_map(|l| l.join("\n")))
}

fn step() -> impl Strategy<Value = StepAst> {
    (proptest::sample::select(StepKeyword::ALL.to_vec()), phrase(0, 8))
        .prop_map(|(k, text)| StepAst::new(k, text))
}

fn cell() -> impl Strategy<Value = String> {
    prop_oneof![
        proptest::sample::select(WORDS).prop_map(str::to_string),
        Just(String::new()),
        Just("a | b".to_string()),
        Just("back\\slash".to_string()),
    ]
}

fn examples() -> impl Strategy<Value = ExamplesTable> {
    (1usize..4).prop_flat_map(|width| {
        proptest::collection::vec(proptest::collection::vec(cell(), width), 1..4)
            .prop_map(|rows| ExamplesTable { rows })
    })
}

fn scenario() -> impl Strategy<Value = ScenarioAst> {
    (
        phrase(0, 6),
        any::<bool>(),
        description(),
        proptest::collection::vec(step(), 0..6),
        proptest::option::of(examples()),
    )
        .prop_map(|(title, outline, description, steps, examples)| {
            let mut sc = ScenarioAst::new(title, steps);
            sc.description = description;
            if outline {
                sc.kind = ScenarioKind::ScenarioOutline;
                sc.examples = examples;
            }
            sc
        })
}

pub fn feature_ast() -> impl Strategy<Value = FeatureAst> {
    (
        phrase(0, 6),
        description(),
        proptest::option::of((proptest::option::of(phrase(0, 3)), proptest::collection::vec(step(), 0..3))),
        proptest::collection::vec(scenario(), 0..6),
    )
        .prop_map(|(name, description, background, scenarios)| {
            let mut ast = FeatureAst::new(name, scenarios);
            ast.description = description;
            ast.background = background.map(|(title, steps)| ScenarioAst::new(title.unwrap_or_default(), steps));
            ast
        })
}

pub fn check_roundtrip(ast: &FeatureAst) -> Result<(), TestCaseError> {
    let text = serialize_feature(ast);
    let back = parse_feature(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
    prop_assert!(back.same_structure(ast), "round trip changed the AST:\n{text}\n{back:#?}");
    prop_assert_eq!(serialize_feature(&back), text);
    Ok(())
}

// ---------------------------------------------------------------------------
// Purge

#[derive(Debug, Clone)]
pub enum Fragment {
    Kept { html: String, testid: Option<String> },
    Removed(String),
}

fn fragment(i: usize) -> impl Strategy<Value = Fragment> {
    let kept_id = format!("tid-{i}");
    let gone_id = format!("gone-{i}");
    prop_oneof![
        (proptest::sample::select(vec!["div", "span", "button", "section"]), phrase(0, 4), any::<bool>()).prop_map(
            move |(tag, text, quoted)| {
                let attr = if quoted {
                    format!("data-testid=\"{kept_id}\"")
                } else {
                    format!("data-test-id='{kept_id}'")
                };
                Fragment::Kept {
                    html: format!("<{tag} class=\"x\" {attr}>{text}</{tag}>"),
                    testid: Some(kept_id.clone()),
                }
            }
        ),
        phrase(0, 5).prop_map(|text| Fragment::Kept {
            html: format!("<p title=\"a > b\">{text} &amp; 3 > 2</p>"),
            testid: None,
        }),
        Just(Fragment::Kept {
            html: "<!-- a comment with <b>markup</b> -->".into(),
            testid: None,
        }),
        proptest::sample::select(vec!["script", "SCRIPT", "style", "Style"]).prop_map(move |tag| {
            Fragment::Removed(format!(
                "<{tag} type=\"text/x\">var s = '<div data-testid=\"{gone_id}\">' + \"</div>\"; a < b && c > d;</{tag}>"
            ))
        }),
        Just(Fragment::Removed("<script src=\"/app.js\" defer></script>".into())),
        Just(Fragment::Removed("<style/>".into())),
    ]
}

pub fn page_fragments() -> impl Strategy<Value = Vec<Fragment>> {
    (0usize..12).prop_flat_map(|n| (0..n).map(fragment).collect::<Vec<_>>())
}

pub fn assemble(fragments: &[Fragment]) -> String {
    fragments
        .iter()
        .map(|f| match f {
            Fragment::Kept { html, .. } => html.as_str(),
            Fragment::Removed(html) => html.as_str(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn html_soup() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            Just("<script>"),
            Just("</script>"),
            Just("<style"),
            Just("</style >"),
            Just("<scr"),
            Just("ipt>"),
            Just("<!--"),
            Just("-->"),
            Just("<div data-testid=\"d\">"),
            Just("\""),
            Just("'"),
            Just(">"),
            Just("<"),
            Just("text"),
            Just(" "),
        ],
        0..30,
    )
    .prop_map(|parts| parts.concat())
}

pub fn check_purge(fragments: &[Fragment]) -> Result<(), TestCaseError> {
    let html = assemble(fragments);
    let once = purge(&html, PurgeOptions::default());
    prop_assert!(once.html.len() <= html.len());
    let twice = purge(&once.html, PurgeOptions::default());
    prop_assert_eq!(&twice.html, &once.html);

    let expected: BTreeSet<String> = fragments
        .iter()
        .filter_map(|f| match f {
            Fragment::Kept { testid, .. } => testid.clone(),
            Fragment::Removed(_) => None,
        })
        .collect();
    let found: BTreeSet<String> = once.testids.iter().cloned().collect();
    prop_assert_eq!(found, expected);
    for f in fragments {
        if let Fragment::Kept { html, .. } = f {
            prop_assert!(once.html.contains(html.as_str()), "kept fragment lost: {}", html);
        }
    }
    Ok(())
}

pub fn check_purge_soup(html: &str) -> Result<(), TestCaseError> {
    let once = purge(html, PurgeOptions::default());
    prop_assert!(once.html.len() <= html.len());
    prop_assert_eq!(&purge(&once.html, PurgeOptions::default()).html, &once.html);
    prop_assert_eq!(once.testids.clone(), scan_testids(&once.html));
    Ok(())
}

// ---------------------------------------------------------------------------
// Script structure

const STATEMENTS: &[&str] = &[
    "cy.get('#accordion-item-0').click();",
    "cy.get('h2').should('have.text', 'Produktdetails');",
    "cy.wrap([1, 2, 3]).each((n) => { cy.log(`item`, n); });",
    "const total = items.map((i) => i.price).reduce((a, b) => a + b, 0);",
    "expect({ a: [1, 2] }).to.deep.equal({ a: [1, 2] });",
    "cy.get('.accordion-item-children').should('be.visible');",
];

/// Valid scripts whose every bracket and quote is syntactically active: no
/// brackets inside strings, no quotes nested in other quotes.
pub fn valid_script() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        (
            proptest::sample::select(vec!["first case", "second case", "third case"]),
            proptest::collection::vec(proptest::sample::select(STATEMENTS), 1..4),
        ),
        1..4,
    )
    .prop_map(|tests| {
        let mut s = String::from("describe('suite', () => {\n  beforeEach(() => {\n    cy.visit('/');\n  });\n");
        for (title, body) in tests {
            s.push_str(&format!("  it('{title}', () => {{\n"));
            for stmt in body {
                s.push_str("    ");
                s.push_str(stmt);
                s.push('\n');
            }
            s.push_str("  });\n");
        }
        s.push_str("});\n");
        s
    })
}

pub fn delimiter_positions(code: &str) -> Vec<usize> {
    code.char_indices()
        .filter(|(_, c)| matches!(c, '(' | ')' | '[' | ']' | '{' | '}' | '\'' | '"' | '`'))
        .map(|(i, _)| i)
        .collect()
}

pub fn mutated_script() -> impl Strategy<Value = (String, usize, bool)> {
    valid_script().prop_flat_map(|code| {
        let n = delimiter_positions(&code).len();
        (Just(code), 0..n, any::<bool>())
    })
}

/// Deletes or duplicates the `index`-th delimiter.
pub fn mutate(code: &str, index: usize, duplicate: bool) -> String {
    let at = delimiter_positions(code)[index];
    let ch = &code[at..at + 1];
    let mut out = String::with_capacity(code.len() + 1);
    out.push_str(&code[..at]);
    if duplicate {
        out.push_str(ch);
        out.push_str(ch);
    }
    out.push_str(&code[at + 1..]);
    out
}

pub fn check_mutation(code: &str, index: usize, duplicate: bool) -> Result<(), TestCaseError> {
    let dialect = DialectProfile::default();
    let original = validate_script_structure(code, &dialect);
    prop_assert!(original.valid, "generator produced an invalid script: {:?}", original.findings);
    let mutated = mutate(code, index, duplicate);
    let report = validate_script_structure(&mutated, &dialect);
    prop_assert!(!report.valid, "mutation went unnoticed:\n{}", mutated);
    Ok(())
}

// ---------------------------------------------------------------------------
// Mapping

const TITLES: &[&str] = &[
    "Open the page",
    "open the  page",
    "Open the page twice",
    "Close the dialog",
    "Add to cart",
    "Remove from cart",
    "Checkout",
];

pub fn mapping_inputs() -> impl Strategy<Value = (Vec<&'static str>, Vec<&'static str>)> {
    (
        proptest::collection::vec(proptest::sample::select(TITLES), 0..6),
        proptest::collection::vec(proptest::sample::select(TITLES), 0..6),
    )
}

pub fn check_mapping(scenarios: &[&str], tests: &[&str]) -> Result<(), TestCaseError> {
    let feature = FeatureAst::new(
        "f",
        scenarios
            .iter()
            .map(|t| ScenarioAst::new(*t, vec![StepAst::new(StepKeyword::Given, "x")]))
            .collect(),
    );
    let mut code = String::from("describe('s', () => {\n");
    for t in tests {
        code.push_str(&format!("  it('{t}', () => {{\n    // step\n  }});\n"));
    }
    code.push_str("});\n");
    let structure = validate_script_structure(&code, &DialectProfile::default());
    let mapping = check_scenario_mapping(&feature, &structure);
    prop_assert_eq!(mapping.matched.len() + mapping.missing_scenarios.len(), scenarios.len());
    prop_assert_eq!(mapping.matched.len() + mapping.extra_tests.len(), tests.len());

    // every matched pair is related by equality or containment
    for (s, t) in &mapping.matched {
        let (s, t) = (normalize_title(s).to_lowercase(), normalize_title(t).to_lowercase());
        prop_assert!(s == t || s.contains(&t) || t.contains(&s), "{} / {}", s, t);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Case state machine

#[derive(Debug, Clone)]
pub enum CaseEvent {
    Verdict(Verdict, &'static str),
    Regenerate,
}

pub fn case_events() -> impl Strategy<Value = Vec<CaseEvent>> {
    proptest::collection::vec(
        prop_oneof![
            4 => (
                proptest::sample::select(vec![
                    Verdict::Pass,
                    Verdict::MinorError,
                    Verdict::LackOfContext,
                    Verdict::ComplexError
                ]),
                proptest::sample::select(vec!["", "fix selector"]),
            )
                .prop_map(|(v, d)| CaseEvent::Verdict(v, d)),
            1 => Just(CaseEvent::Regenerate),
        ],
        0..12,
    )
}

pub fn check_state_machine(events: &[CaseEvent]) -> Result<(), TestCaseError> {
    let mut case = CaseState::new();
    let mut regenerated = false;
    for (n, event) in events.iter().enumerate() {
        let before = case.state;
        let next = match event {
            CaseEvent::Verdict(v, d) => case.clone().record_verdict(*v, d),
            CaseEvent::Regenerate => case.clone().record_regeneration(&format!("g{n}")),
        };
        match next {
            Ok(c) => {
                prop_assert!(!before.is_terminal(), "left terminal state {}", before);
                if matches!(event, CaseEvent::Regenerate) {
                    regenerated = true;
                }
                case = c;
            }
            Err(_) => prop_assert_eq!(case.state, before),
        }
        if case.state == CaseStatus::RegeneratedValid {
            prop_assert!(regenerated);
            let has_regen = case.history.iter().any(|t| matches!(t, Transition::Regenerated { .. }));
            prop_assert!(has_regen);
        }
    }
    Ok(())
}
