//! Per-test-case review lifecycle.
//!
//! A generated test case is reviewed and classified: valid as generated,
//! fixed with a minor (one line) patch, regenerated with extra context, or
//! discarded. Verdicts are external inputs; this module only enforces which
//! transitions are legal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaseError {
    #[error("illegal transition: {verdict} on a case in state {state}")]
    IllegalTransition { state: CaseStatus, verdict: String },
    #[error("a minor fix needs a note describing the patch")]
    MissingFixNote,
    #[error("a minor fix changes at most one line; this patch changes {0}")]
    PatchTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Generated,
    AwaitingRegeneration,
    ValidAsGenerated,
    MinorFixed,
    RegeneratedValid,
    Discarded,
}

impl CaseStatus {
    pub const ALL: [CaseStatus; 6] = [
        CaseStatus::ValidAsGenerated,
        CaseStatus::MinorFixed,
        CaseStatus::RegeneratedValid,
        CaseStatus::Discarded,
        CaseStatus::AwaitingRegeneration,
        CaseStatus::Generated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseStatus::Generated => "generated",
            CaseStatus::AwaitingRegeneration => "awaiting_regeneration",
            CaseStatus::ValidAsGenerated => "valid_as_generated",
            CaseStatus::MinorFixed => "minor_fixed",
            CaseStatus::RegeneratedValid => "regenerated_valid",
            CaseStatus::Discarded => "discarded",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            CaseStatus::ValidAsGenerated
                | CaseStatus::MinorFixed
                | CaseStatus::RegeneratedValid
                | CaseStatus::Discarded
        )
    }

    /// Counts toward semantic relevance after remediation.
    pub fn is_valid(self) -> bool {
        matches!(
            self,
            CaseStatus::ValidAsGenerated | CaseStatus::MinorFixed | CaseStatus::RegeneratedValid
        )
    }
}

impl fmt::Display for CaseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    MinorError,
    LackOfContext,
    ComplexError,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::MinorError => "minor_error",
            Verdict::LackOfContext => "lack_of_context",
            Verdict::ComplexError => "complex_error",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "pass" => Ok(Verdict::Pass),
            "minor_error" => Ok(Verdict::MinorError),
            "lack_of_context" => Ok(Verdict::LackOfContext),
            "complex_error" => Ok(Verdict::ComplexError),
            _ => Err(format!(
                "unknown verdict `{s}` (pass, minor-error, lack-of-context, complex-error)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Verdict {
        verdict: Verdict,
        detail: String,
        from: CaseStatus,
        to: CaseStatus,
    },
    Regenerated {
        generation_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseState {
    pub state: CaseStatus,
    pub history: Vec<Transition>,
}

impl Default for CaseState {
    fn default() -> Self {
        Self::new()
    }
}

impl CaseState {
    pub fn new() -> Self {
        Self {
            state: CaseStatus::Generated,
            history: Vec::new(),
        }
    }

    pub fn regenerations(&self) -> usize {
        self.history
            .iter()
            .filter(|t| matches!(t, Transition::Regenerated { .. }))
            .count()
    }

    pub fn record_verdict(mut self, verdict: Verdict, detail: &str) -> Result<Self, CaseError> {
        if self.state != CaseStatus::Generated {
            return Err(CaseError::IllegalTransition {
                state: self.state,
                verdict: verdict.to_string(),
            });
        }
        let to = match verdict {
            Verdict::Pass if self.regenerations() > 0 => CaseStatus::RegeneratedValid,
            Verdict::Pass => CaseStatus::ValidAsGenerated,
            Verdict::MinorError if detail.trim().is_empty() => return Err(CaseError::MissingFixNote),
            Verdict::MinorError => CaseStatus::MinorFixed,
            Verdict::LackOfContext => CaseStatus::AwaitingRegeneration,
            Verdict::ComplexError => CaseStatus::Discarded,
        };
        self.history.push(Transition::Verdict {
            verdict,
            detail: detail.to_string(),
            from: self.state,
            to,
        });
        self.state = to;
        Ok(self)
    }

    /// Only a case awaiting regeneration may be regenerated; it re-enters
    /// review as `generated`.
    pub fn record_regeneration(mut self, generation_id: &str) -> Result<Self, CaseError> {
        if self.state != CaseStatus::AwaitingRegeneration {
            return Err(CaseError::IllegalTransition {
                state: self.state,
                verdict: "regeneration".into(),
            });
        }
        self.history.push(Transition::Regenerated {
            generation_id: generation_id.to_string(),
        });
        self.state = CaseStatus::Generated;
        Ok(self)
    }
}

pub fn record_verdict(case: CaseState, verdict: Verdict, detail: &str) -> Result<CaseState, CaseError> {
    case.record_verdict(verdict, detail)
}

/// Lines changed between two versions of a script: whatever remains after
/// stripping the common leading and trailing lines.
pub fn changed_lines(before: &str, after: &str) -> usize {
    let a: Vec<&str> = before.lines().collect();
    let b: Vec<&str> = after.lines().collect();
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let max_suffix = a.len().min(b.len()) - prefix;
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    a.len().max(b.len()) - prefix - suffix
}

/// A manual fix recorded against a minor-error case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinorPatch {
    pub note: String,
    pub before: String,
    pub after: String,
}

impl MinorPatch {
    pub fn new(note: &str, before: &str, after: &str) -> Result<Self, CaseError> {
        if note.trim().is_empty() {
            return Err(CaseError::MissingFixNote);
        }
        let n = changed_lines(before, after);
        if n > 1 {
            return Err(CaseError::PatchTooLarge(n));
        }
        Ok(Self {
            note: note.to_string(),
            before: before.to_string(),
            after: after.to_string(),
        })
    }
}
