use serde::{Deserialize, Serialize};

use super::{Entity, Term, Triplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LintKind {
    RelationWhitespace,
    RelationNotCamelCase,
    TenseMarker,
    NewEntity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintFinding {
    pub kind: LintKind,
    pub severity: Severity,
    pub message: String,
}

// Leading relation words that mark a non-present tense.
const PAST_AUXILIARIES: &[&str] = &["was", "were", "had", "did"];

/// Non-fatal style checks on a triplet, recursing into nested objects.
///
/// Entity membership is an exact, case-sensitive comparison of trimmed names.
pub fn lint_triplet(t: &Triplet, entities: &[Entity]) -> Vec<LintFinding> {
    let mut out = Vec::new();
    lint_into(t, entities, &mut out);
    out
}

fn lint_into(t: &Triplet, entities: &[Entity], out: &mut Vec<LintFinding>) {
    let rel = t.relation.as_str();
    if rel.chars().any(char::is_whitespace) {
        out.push(LintFinding {
            kind: LintKind::RelationWhitespace,
            severity: Severity::Warning,
            message: format!("relation {rel:?} contains whitespace"),
        });
    } else if !is_camel_case(rel) {
        out.push(LintFinding {
            kind: LintKind::RelationNotCamelCase,
            severity: Severity::Warning,
            message: format!("relation {rel:?} is not camelCase"),
        });
    }
    if let Some(word) = past_tense_marker(rel) {
        out.push(LintFinding {
            kind: LintKind::TenseMarker,
            severity: Severity::Warning,
            message: format!("relation {rel:?} starts with past-tense {word:?}"),
        });
    }

    let known = |name: &str| entities.iter().any(|e| e.name.trim() == name.trim());
    if !known(&t.subject) {
        out.push(new_entity(&t.subject));
    }
    match &t.object {
        Term::Entity(name) if !known(name) => out.push(new_entity(name)),
        Term::Nested(inner) => lint_into(inner, entities, out),
        _ => {}
    }
}

fn new_entity(name: &str) -> LintFinding {
    LintFinding {
        kind: LintKind::NewEntity,
        severity: Severity::Info,
        message: format!("new entity {name:?}"),
    }
}

fn is_camel_case(rel: &str) -> bool {
    let mut chars = rel.chars();
    matches!(chars.next(), Some(c) if c.is_lowercase()) && rel.chars().all(char::is_alphanumeric)
}

fn first_word(rel: &str) -> &str {
    let end = rel
        .char_indices()
        .skip(1)
        .find(|(_, c)| c.is_uppercase() || c.is_whitespace())
        .map(|(i, _)| i)
        .unwrap_or(rel.len());
    &rel[..end]
}

fn past_tense_marker(rel: &str) -> Option<&str> {
    let word = first_word(rel);
    let lower = word.to_lowercase();
    if PAST_AUXILIARIES.contains(&lower.as_str()) || (lower.len() > 4 && lower.ends_with("ed")) {
        Some(word)
    } else {
        None
    }
}
