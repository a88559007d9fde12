//! Offline rule-based normalization and extraction.
//!
//! Regex entity substitution and keyword sectioning. This is a test fixture
//! that keeps the pipeline runnable without a language model; it makes no
//! claim of matching model-quality extraction.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::json;

use super::{IngestError, TextTransformer};
use crate::graph::{DataClass, NodeType};

pub const RULES_VERSION: &str = "rules-v1";

fn tag_or_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bV(\d+)\b|(?i:\b(east|west|north|south)bound\b)").expect("regex"))
}

fn entity_tag() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bV\d+\b").expect("regex"))
}

fn heading_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:east|west|north|south)bound\b").expect("regex"))
}

/// Entity tags and compass headings that must not survive normalization.
pub fn residual_tokens(text: &str) -> Vec<String> {
    entity_tag()
        .find_iter(text)
        .chain(heading_token().find_iter(text))
        .map(|m| m.as_str().to_string())
        .collect()
}

fn heading_degrees(word: &str) -> u32 {
    match word.to_ascii_lowercase().as_str() {
        "north" => 0,
        "east" => 90,
        "south" => 180,
        _ => 270,
    }
}

fn tag_phrase(n: u32) -> &'static str {
    match n {
        1 => "the ego vehicle",
        2 => "the other vehicle",
        3 => "the third vehicle",
        4 => "the fourth vehicle",
        _ => "another vehicle",
    }
}

fn relative_heading(reference: u32, other: u32) -> &'static str {
    match (other + 360 - reference) % 360 {
        0 => "in the same direction as the ego vehicle",
        180 => "in the opposite direction",
        90 => "crossing from left to right",
        _ => "crossing from right to left",
    }
}

fn at_sentence_start(text: &str, pos: usize) -> bool {
    let before = text[..pos].trim_end_matches([' ', '\t']);
    before.is_empty() || before.ends_with(['.', '!', '?', '\n'])
}

fn capitalize(phrase: &str) -> String {
    let mut chars = phrase.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn sentence_break(between: &str) -> bool {
    between.contains(". ") || between.contains(".\n") || between.contains('\n') || between.ends_with('.')
}

/// Rewrites V-tags as relational phrases and compass headings relative to
/// the ego vehicle. Text without tags or headings is returned unchanged.
pub fn normalize_rule_based(text: &str) -> String {
    let matches: Vec<regex::Captures> = tag_or_heading().captures_iter(text).collect();

    // the ego heading is the first heading attributed to V1
    let mut reference = None;
    let mut first_heading = None;
    let mut owner: Option<u32> = None;
    let mut last_end = 0;
    let mut owners = Vec::with_capacity(matches.len());
    for caps in &matches {
        let m = caps.get(0).expect("match");
        if sentence_break(&text[last_end..m.start()]) {
            owner = None;
        }
        last_end = m.end();
        if let Some(n) = caps.get(1) {
            owner = n.as_str().parse().ok();
            owners.push(None);
        } else {
            let deg = heading_degrees(caps.get(2).expect("heading").as_str());
            first_heading.get_or_insert(deg);
            if owner == Some(1) && reference.is_none() {
                reference = Some(deg);
            }
            owners.push(owner);
        }
    }
    let reference = reference.or(first_heading);

    let mut out = String::with_capacity(text.len() + 64);
    let mut cursor = 0;
    for (caps, owner) in matches.iter().zip(owners) {
        let m = caps.get(0).expect("match");
        out.push_str(&text[cursor..m.start()]);
        let replacement = if let Some(n) = caps.get(1) {
            tag_phrase(n.as_str().parse().unwrap_or(0)).to_string()
        } else {
            let deg = heading_degrees(caps.get(2).expect("heading").as_str());
            if owner == Some(1) {
                "straight ahead".to_string()
            } else {
                relative_heading(reference.unwrap_or(deg), deg).to_string()
            }
        };
        if at_sentence_start(text, m.start()) {
            out.push_str(&capitalize(&replacement));
        } else {
            out.push_str(&replacement);
        }
        cursor = m.end();
    }
    out.push_str(&text[cursor..]);
    out
}

/// Splits on sentence-ending punctuation followed by whitespace, and on
/// newlines.
pub(crate) fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut start = 0;
        let bytes = line.as_bytes();
        for (i, &b) in bytes.iter().enumerate() {
            if matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace()) {
                push_sentence(&mut out, &line[start..=i]);
                start = i + 1;
            }
        }
        push_sentence(&mut out, &line[start..]);
    }
    out
}

fn push_sentence(out: &mut Vec<String>, s: &str) {
    let s = s.trim().trim_end_matches(['.', '!', '?']).trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

const COLLISION_WORDS: &[&str] = &[
    "collid", "collision", "struck", "crash", "impact", "contacted", "rear-ended", "sideswip", " hit ",
];
const OBSTACLE_WORDS: &[&str] = &[
    "vehicle", "car", "truck", "suv", "van", "bus", "pedestrian", "cyclist", "bicycl", "motorcycl",
    "agent", "pickup", "trailer",
];
const MAP_WORDS: &[&str] = &[
    "road", "lane", "intersection", "junction", "highway", "freeway", "interstate", "street",
    "merger", "crosswalk", "curve", "ramp", "shoulder", "median", "parking", "urban", "signal",
    "stop sign", "weather", "rain", "wet", "dark", "daylight",
];

struct ActionPattern {
    action: &'static str,
    re: Regex,
}

fn action_patterns() -> &'static [ActionPattern] {
    static PATTERNS: OnceLock<Vec<ActionPattern>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let side = |verb: &str, dir: &str| format!(r"\b{verb}\w*\s+(?:\w+\s+){{0,3}}?{dir}\b");
        let table: Vec<(&str, String)> = vec![
            ("MERGE LEFT", format!("{}|{}", side("merg", "left"), side("chang\\w*\\s+lanes?", "left"))),
            ("TURN LEFT", r"\bturn(?:ed|ing|s)?\s+(?:to\s+the\s+)?left\b|\bleft[- ]turn".to_string()),
            ("NUDGE LEFT", format!("{}|{}|{}", side("nudg", "left"), side("veer", "left"), side("swerv", "left"))),
            ("STOP", r"\bstop(?:ped|ping|s)?\b|\bhalt\w*".to_string()),
            ("ACCELERATE", r"\baccelerat\w*|\bspeed(?:ing|s)?\s+up\b|\bsped\s+up\b".to_string()),
            ("DECELERATE", r"\bbrak\w*|\bslow(?:ed|ing|s)?\b|\bdecelerat\w*|\breduc\w*\s+(?:its\s+|their\s+)?speed".to_string()),
            ("NUDGE RIGHT", format!("{}|{}|{}", side("nudg", "right"), side("veer", "right"), side("swerv", "right"))),
            ("TURN RIGHT", r"\bturn(?:ed|ing|s)?\s+(?:to\s+the\s+)?right\b|\bright[- ]turn".to_string()),
            ("MERGE RIGHT", format!("{}|{}", side("merg", "right"), side("chang\\w*\\s+lanes?", "right"))),
            ("STRAIGHT", r"\bstraight\b|\bproceed\w*|\btravel\w*|\bcontinu\w*|\bcruis\w*|\bdriv\w*|\bnavigat\w*".to_string()),
        ];
        table
            .into_iter()
            .map(|(action, pattern)| ActionPattern {
                action,
                re: Regex::new(&pattern).expect("action regex"),
            })
            .collect()
    })
}

/// Canonical actions mentioned in a sentence, ordered by first position.
fn actions_in(sentence_lower: &str) -> Vec<&'static str> {
    let text = sentence_lower.replace("stop sign", "sign");
    let mut found: Vec<(usize, &'static str)> = action_patterns()
        .iter()
        .filter_map(|p| p.re.find(&text).map(|m| (m.start(), p.action)))
        .collect();
    found.sort();
    found.into_iter().map(|(_, a)| a).collect()
}

fn first_obstacle(haystack: &str) -> Option<(usize, &'static str)> {
    OBSTACLE_WORDS
        .iter()
        .filter_map(|w| haystack.find(w).map(|p| (p, *w)))
        .min()
}

fn ego_word() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bego\b").expect("regex"))
}

/// The part of an ego-first sentence that describes the ego vehicle: up to
/// the first obstacle mentioned after it.
fn ego_clause(lower: &str) -> &str {
    let Some(m) = ego_word().find(lower) else {
        return lower;
    };
    let rest = &lower[m.end()..];
    let skip = [" vehicle", " agent"]
        .iter()
        .find(|p| rest.starts_with(*p))
        .map_or(0, |p| p.len());
    let after = m.end() + skip;
    let cut = first_obstacle(&lower[after..]).map_or(lower.len(), |(p, _)| after + p);
    &lower[..cut]
}

fn mentions(haystack: &str, needles: &[&str]) -> bool {
    needles.iter().any(|n| haystack.contains(n))
}

/// Keyword-sectioning extractor. Emits one schema entry per classified
/// sentence; merging is left to the pipeline.
pub fn extract_rule_based(text: &str, data_class: DataClass) -> String {
    let mut entries: Vec<(NodeType, String, String)> = Vec::new();
    let mut ego_sentences = Vec::new();
    let mut ego_actions: Vec<&'static str> = Vec::new();

    for sentence in sentences(text) {
        let lower = sentence.to_lowercase();
        let ego_pos = ego_word().find(&lower).map(|m| m.start());
        // "ego vehicle" must not count as an obstacle mention
        let without_ego = lower.replace("ego vehicle", "").replace("ego agent", "");
        let obstacle = first_obstacle(&without_ego);
        // positions in the two strings agree up to the first "ego"
        let ego_first = match (ego_pos, obstacle) {
            (Some(e), Some((o, _))) => e <= o,
            (Some(_), None) => true,
            _ => false,
        };
        if ego_first {
            for a in actions_in(ego_clause(&lower)) {
                if !ego_actions.contains(&a) {
                    ego_actions.push(a);
                }
            }
        }
        // pad so " hit " matches at the edges
        let padded = format!(" {lower} ");
        if data_class == DataClass::Negative && mentions(&padded, COLLISION_WORDS) {
            entries.push((NodeType::Outcome, "outcome".into(), sentence.clone()));
            continue;
        }
        if mentions(&lower, MAP_WORDS) {
            entries.push((NodeType::Map, "road context".into(), sentence.clone()));
        }
        if ego_first {
            entries.push((NodeType::Ego, "ego vehicle".into(), sentence.clone()));
            ego_sentences.push(sentence.clone());
            if let Some((_, word)) = obstacle {
                entries.push((NodeType::Obstacles, word.into(), sentence.clone()));
            }
        } else if let Some((_, word)) = obstacle {
            entries.push((NodeType::Obstacles, word.into(), sentence.clone()));
            if !actions_in(&without_ego).is_empty() {
                entries.push((NodeType::ObstaclesAction, format!("{word} behaviour"), sentence.clone()));
            }
        }
    }

    if ego_actions.len() > 1 {
        ego_actions.retain(|a| *a != "STRAIGHT");
    }
    if ego_actions.is_empty() {
        for s in &ego_sentences {
            entries.push((NodeType::EgoAction, "ego action".into(), s.clone()));
        }
    } else {
        for a in ego_actions {
            entries.push((NodeType::EgoAction, "ego action".into(), a.to_string()));
        }
    }

    let nodes: Vec<_> = entries
        .into_iter()
        .map(|(t, name, description)| json!({"type": t.as_str(), "name": name, "description": description}))
        .collect();
    json!({ "nodes": nodes }).to_string()
}

/// The offline [`TextTransformer`].
#[derive(Debug, Clone, Default)]
pub struct RuleBasedTransformer;

impl TextTransformer for RuleBasedTransformer {
    fn normalize(&self, narrative: &str) -> Result<String, IngestError> {
        Ok(normalize_rule_based(narrative))
    }

    fn extract(&self, text: &str, data_class: DataClass, _repair: Option<&str>) -> Result<String, IngestError> {
        Ok(extract_rule_based(text, data_class))
    }

    fn pipeline_version(&self) -> String {
        "rule-based/1".into()
    }

    fn prompt_version(&self) -> String {
        RULES_VERSION.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_become_relational_terms() {
        let out = normalize_rule_based("V1 was traveling eastbound when V2 turned left in front of V1.");
        assert_eq!(
            out,
            "The ego vehicle was traveling straight ahead when the other vehicle turned left in front of the ego vehicle."
        );
        assert!(residual_tokens(&out).is_empty());
    }

    #[test]
    fn headings_are_relative_to_ego() {
        let out = normalize_rule_based(
            "V1 was northbound. V2 was southbound. V3 was eastbound and V4 was westbound.",
        );
        assert_eq!(
            out,
            "The ego vehicle was straight ahead. The other vehicle was in the opposite direction. \
             The third vehicle was crossing from left to right and the fourth vehicle was crossing from right to left."
        );
    }

    #[test]
    fn clean_text_is_unchanged() {
        let text = "The ego vehicle slowed for the car in front. Nothing else happened.";
        assert_eq!(normalize_rule_based(text), text);
        assert_eq!(normalize_rule_based(&normalize_rule_based(text)), text);
    }

    #[test]
    fn tags_inside_words_are_left_alone() {
        let text = "The SUV12 model and EV1 charger.";
        assert_eq!(normalize_rule_based(text), text);
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(
            sentences("A car. It was 2.5 m away!\nNew line? yes"),
            vec!["A car", "It was 2.5 m away", "New line", "yes"]
        );
    }

    #[test]
    fn action_detection() {
        assert_eq!(actions_in("the ego vehicle was traveling and attempted to turn left"), vec!["STRAIGHT", "TURN LEFT"]);
        assert_eq!(actions_in("the ego vehicle stopped at the stop sign"), vec!["STOP"]);
        assert_eq!(actions_in("approaching a stop sign"), Vec::<&str>::new());
        assert_eq!(actions_in("it changed lanes to the right"), vec!["MERGE RIGHT"]);
        assert_eq!(actions_in("it veered slightly left"), vec!["NUDGE LEFT"]);
    }

    #[test]
    fn extraction_sections_sentences() {
        let raw = extract_rule_based(
            "The ego vehicle was traveling in the left lane and turned left. \
             The other vehicle was traveling in the opposite direction. \
             The front of the ego vehicle struck the other vehicle.",
            DataClass::Negative,
        );
        let v: serde_json::Value = serde_json::from_str(&raw).unwrap();
        let types: Vec<&str> = v["nodes"].as_array().unwrap().iter().map(|n| n["type"].as_str().unwrap()).collect();
        assert_eq!(types, ["MAP", "EGO", "OBSTACLES", "OBSTACLES_ACTION", "OUTCOME", "EGO_ACTION"]);
        assert_eq!(v["nodes"][5]["description"], "TURN LEFT");
    }
}
