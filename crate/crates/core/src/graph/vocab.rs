//! Action and label vocabularies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::GraphError;

/// A high-level ego action.
///
/// The ten named variants form the closed benchmark vocabulary. `FreeText`
/// carries phrases proposed during counterfactual exploration that fall
/// outside it; they are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DrivingAction {
    MergeLeft,
    TurnLeft,
    NudgeLeft,
    Straight,
    Stop,
    Accelerate,
    Decelerate,
    NudgeRight,
    TurnRight,
    MergeRight,
    FreeText(String),
}

impl DrivingAction {
    /// The closed vocabulary in its canonical listing order.
    pub const ALL: [DrivingAction; 10] = [
        DrivingAction::MergeLeft,
        DrivingAction::TurnLeft,
        DrivingAction::NudgeLeft,
        DrivingAction::Straight,
        DrivingAction::Stop,
        DrivingAction::Accelerate,
        DrivingAction::Decelerate,
        DrivingAction::NudgeRight,
        DrivingAction::TurnRight,
        DrivingAction::MergeRight,
    ];

    /// Canonical upper-case phrase for named actions; the trimmed phrase for
    /// free text.
    pub fn canonical(&self) -> &str {
        match self {
            DrivingAction::MergeLeft => "MERGE LEFT",
            DrivingAction::TurnLeft => "TURN LEFT",
            DrivingAction::NudgeLeft => "NUDGE LEFT",
            DrivingAction::Straight => "STRAIGHT",
            DrivingAction::Stop => "STOP",
            DrivingAction::Accelerate => "ACCELERATE",
            DrivingAction::Decelerate => "DECELERATE",
            DrivingAction::NudgeRight => "NUDGE RIGHT",
            DrivingAction::TurnRight => "TURN RIGHT",
            DrivingAction::MergeRight => "MERGE RIGHT",
            DrivingAction::FreeText(text) => text.as_str(),
        }
    }

    pub fn is_free_text(&self) -> bool {
        matches!(self, DrivingAction::FreeText(_))
    }

    /// Lower-cased, whitespace-collapsed rendering used for repetition checks.
    pub fn normalized_text(&self) -> String {
        normalize_phrase(self.canonical())
    }

    /// True when both actions render to the same normalized text.
    pub fn same_as(&self, other: &DrivingAction) -> bool {
        self.normalized_text() == other.normalized_text()
    }
}

impl fmt::Display for DrivingAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical())
    }
}

pub(crate) fn normalize_phrase(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses an action phrase.
///
/// Matching against the ten canonical phrases ignores case and collapses
/// runs of whitespace. Anything else becomes [`DrivingAction::FreeText`]
/// holding the trimmed input.
pub fn parse_action(text: &str) -> Result<DrivingAction, GraphError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(GraphError::EmptyAction);
    }
    let normalized = normalize_phrase(trimmed);
    Ok(DrivingAction::ALL
        .iter()
        .find(|a| normalize_phrase(a.canonical()) == normalized)
        .cloned()
        .unwrap_or_else(|| DrivingAction::FreeText(trimmed.to_string())))
}

impl FromStr for DrivingAction {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action(s)
    }
}

impl Serialize for DrivingAction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical())
    }
}

impl<'de> Deserialize<'de> for DrivingAction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_action(&text).map_err(serde::de::Error::custom)
    }
}

/// Verdict for a (scene, action) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OutcomeLabel {
    Unsafe,
    Safe,
    Reasonable,
}

impl OutcomeLabel {
    /// Row/column order used by confusion matrices.
    pub const ALL: [OutcomeLabel; 3] = [OutcomeLabel::Unsafe, OutcomeLabel::Safe, OutcomeLabel::Reasonable];

    pub fn canonical(self) -> &'static str {
        match self {
            OutcomeLabel::Unsafe => "UNSAFE",
            OutcomeLabel::Safe => "SAFE",
            OutcomeLabel::Reasonable => "REASONABLE",
        }
    }

    pub fn index(self) -> usize {
        match self {
            OutcomeLabel::Unsafe => 0,
            OutcomeLabel::Safe => 1,
            OutcomeLabel::Reasonable => 2,
        }
    }

    /// Exact match against a canonical rendering, as used by data files.
    pub fn from_canonical(text: &str) -> Option<OutcomeLabel> {
        OutcomeLabel::ALL.into_iter().find(|l| l.canonical() == text)
    }
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical())
    }
}

/// Extracts the verdict from free-form engine output.
///
/// Label tokens are matched case-sensitively on word boundaries, so
/// `UNSAFE` never counts as `SAFE` and prose such as "a safe distance" is
/// ignored. The last token in the text wins: responses carry a justification
/// that may mention labels before the final label line.
pub fn parse_outcome_label(text: &str) -> Result<OutcomeLabel, GraphError> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter_map(OutcomeLabel::from_canonical)
        .next_back()
        .ok_or_else(|| GraphError::UnparseableLabel {
            excerpt: excerpt(text),
        })
}

fn excerpt(text: &str) -> String {
    const MAX: usize = 120;
    let trimmed = text.trim();
    match trimmed.char_indices().nth(MAX) {
        Some((idx, _)) => format!("{}...", &trimmed[..idx]),
        None => trimmed.to_string(),
    }
}
