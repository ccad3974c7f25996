use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("no binding for placeholder [{0}]")]
    MissingBinding(String),
    #[error("binding {0:?} is not a placeholder of this template")]
    UnknownPlaceholder(String),
    #[error("template {id} placeholders {found:?} do not match {expected:?}")]
    PlaceholderMismatch {
        id: TemplateId,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

/// One prompt per pipeline step. The id doubles as the step id in
/// transcripts and replay files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    EntityExtraction,
    ExplicitExtraction,
    ImplicitExtraction,
    InferenceChallenge,
    InferenceCorrection,
    InferenceExplanation,
    DuplicateRemoval,
    EventStateGrounding,
    TemporalRelations,
}

pub const CONTEXT_SENTENCE: &str = "context sentence";
pub const EXTRACTED_ENTITIES: &str = "extracted entities";
pub const TRIPLET_TO_ANALYZE: &str = "implicit triplet to analyze";
pub const TRIPLET_TO_CORRECT: &str = "implicit triplet to correct";
pub const DISCARD_REASON: &str = "reason for discarding the triplet";
pub const TRIPLET_TO_EXPLAIN: &str = "implicit triplet to explain";
pub const EXPLICIT_RELATIONSHIPS: &str = "extracted explicit relationships";
pub const EXTRACTED_RELATIONSHIPS: &str = "extracted relationships";
pub const TRIPLET_PAIRS: &str = "pairs of extracted triplets";

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::EntityExtraction,
        TemplateId::ExplicitExtraction,
        TemplateId::ImplicitExtraction,
        TemplateId::InferenceChallenge,
        TemplateId::InferenceCorrection,
        TemplateId::InferenceExplanation,
        TemplateId::DuplicateRemoval,
        TemplateId::EventStateGrounding,
        TemplateId::TemporalRelations,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::EntityExtraction => "entity_extraction",
            TemplateId::ExplicitExtraction => "explicit_extraction",
            TemplateId::ImplicitExtraction => "implicit_extraction",
            TemplateId::InferenceChallenge => "inference_challenge",
            TemplateId::InferenceCorrection => "inference_correction",
            TemplateId::InferenceExplanation => "inference_explanation",
            TemplateId::DuplicateRemoval => "duplicate_removal",
            TemplateId::EventStateGrounding => "event_state_grounding",
            TemplateId::TemporalRelations => "temporal_relations",
        }
    }

    /// Declared placeholder names, without brackets.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::EntityExtraction => &[CONTEXT_SENTENCE],
            TemplateId::ExplicitExtraction | TemplateId::ImplicitExtraction => &[CONTEXT_SENTENCE, EXTRACTED_ENTITIES],
            TemplateId::InferenceChallenge => &[CONTEXT_SENTENCE, TRIPLET_TO_ANALYZE],
            TemplateId::InferenceCorrection => &[CONTEXT_SENTENCE, TRIPLET_TO_CORRECT, DISCARD_REASON],
            TemplateId::InferenceExplanation => &[CONTEXT_SENTENCE, TRIPLET_TO_EXPLAIN, EXPLICIT_RELATIONSHIPS],
            TemplateId::DuplicateRemoval => &[CONTEXT_SENTENCE, EXTRACTED_RELATIONSHIPS, TRIPLET_TO_ANALYZE],
            TemplateId::EventStateGrounding => &[CONTEXT_SENTENCE, EXTRACTED_RELATIONSHIPS],
            TemplateId::TemporalRelations => &[CONTEXT_SENTENCE, TRIPLET_PAIRS],
        }
    }

    /// Corrective line appended when the first reply did not parse.
    pub fn format_hint(self) -> &'static str {
        match self {
            TemplateId::EntityExtraction => {
                "Reply only with the entity list in the form entity1 <type1>; entity2 <type2>; ..."
            }
            TemplateId::ExplicitExtraction => {
                "Reply only with the list in the form [(sub1, rel1, obj1) `snippet`; (sub2, rel2, obj2) `snippet`; ...]"
            }
            TemplateId::ImplicitExtraction | TemplateId::InferenceExplanation => {
                "Reply only with the list in the form [(sub1, rel1, obj1); (sub2, rel2, obj2); ...]"
            }
            TemplateId::InferenceChallenge => {
                "Reply only with yes, or with no; followed by a short explanation."
            }
            TemplateId::InferenceCorrection => {
                "Reply only with one triplet in the form (Subject, Relation, Object), or with none."
            }
            TemplateId::DuplicateRemoval => "Reply only with yes or no.",
            TemplateId::EventStateGrounding => {
                "Reply only with the list in the form [(sub1, rel1, obj1) <event> `none`; (sub2, rel2, obj2) <state> `time`; ...]"
            }
            TemplateId::TemporalRelations => {
                "Reply only with the list in the form [((s1, r1, o1), (s2, r2, o2)) -> <tag>; ...]"
            }
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::EntityExtraction => include_str!("../../assets/prompts/entity_extraction.txt"),
            TemplateId::ExplicitExtraction => include_str!("../../assets/prompts/explicit_extraction.txt"),
            TemplateId::ImplicitExtraction => include_str!("../../assets/prompts/implicit_extraction.txt"),
            TemplateId::InferenceChallenge => include_str!("../../assets/prompts/inference_challenge.txt"),
            TemplateId::InferenceCorrection => include_str!("../../assets/prompts/inference_correction.txt"),
            TemplateId::InferenceExplanation => include_str!("../../assets/prompts/inference_explanation.txt"),
            TemplateId::DuplicateRemoval => include_str!("../../assets/prompts/duplicate_removal.txt"),
            TemplateId::EventStateGrounding => include_str!("../../assets/prompts/event_state_grounding.txt"),
            TemplateId::TemporalRelations => include_str!("../../assets/prompts/temporal_relations.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
}

impl PromptTemplate {
    /// Validates that the bracketed lowercase tokens in `body` are exactly the
    /// declared placeholders of `id`.
    pub fn new(id: TemplateId, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let found = scan_placeholders(&body);
        let expected: BTreeSet<&str> = id.placeholders().iter().copied().collect();
        if found.iter().map(String::as_str).collect::<BTreeSet<_>>() != expected {
            return Err(TemplateError::PlaceholderMismatch {
                id,
                expected: expected.into_iter().map(String::from).collect(),
                found: found.into_iter().collect(),
            });
        }
        Ok(PromptTemplate { id, body })
    }

    /// Literal substitution of `[name]` tokens. Bound values are copied as-is
    /// and never re-scanned.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let declared = self.id.placeholders();
        if let Some(extra) = bindings.keys().find(|k| !declared.contains(k)) {
            return Err(TemplateError::UnknownPlaceholder(extra.to_string()));
        }
        if let Some(missing) = declared.iter().find(|p| !bindings.contains_key(*p)) {
            return Err(TemplateError::MissingBinding(missing.to_string()));
        }
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('[') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            let hit = declared.iter().find(|p| {
                tail.len() > p.len() + 1 && tail[1..].starts_with(*p) && tail.as_bytes()[p.len() + 1] == b']'
            });
            match hit {
                Some(p) => {
                    out.push_str(&bindings[p]);
                    rest = &tail[p.len() + 2..];
                }
                None => {
                    out.push('[');
                    rest = &tail[1..];
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Tokens of the form `[lowercase words]`.
fn scan_placeholders(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('[') {
        let tail = &rest[open + 1..];
        let end = tail
            .find(|c: char| !(c.is_ascii_lowercase() || c == ' '))
            .unwrap_or(tail.len());
        let word = &tail[..end];
        if tail[end..].starts_with(']') && word.starts_with(|c: char| c.is_ascii_lowercase()) {
            out.push(word.to_string());
        }
        rest = tail;
    }
    out
}

/// The nine step prompts, built in or loaded from a directory of
/// `<template_id>.txt` files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .iter()
            .map(|&id| {
                let t =
                    PromptTemplate::new(id, id.builtin_body()).expect("shipped templates declare their placeholders");
                (id, t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Built-in set with any `<template_id>.txt` found in `dir` replacing the
    /// shipped body. Files are read verbatim.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.as_str()));
            if !path.exists() {
                continue;
            }
            let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            set.templates.insert(id, PromptTemplate::new(id, body)?);
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        self.get(id).render(bindings)
    }
}

/// Renders a built-in template.
pub fn render_prompt(id: TemplateId, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    TemplateSet::builtin().render(id, bindings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn builtin_bodies_declare_exact_placeholders() {
        let set = TemplateSet::builtin();
        for id in TemplateId::ALL {
            let mut found = scan_placeholders(&set.get(id).body);
            found.sort();
            let mut expected: Vec<String> = id.placeholders().iter().map(|s| s.to_string()).collect();
            expected.sort();
            assert_eq!(found, expected, "{id}");
        }
    }

    #[test]
    fn entity_prompt_ends_with_sentence() {
        let out = render_prompt(TemplateId::EntityExtraction, &bind(&[(CONTEXT_SENTENCE, "S")])).unwrap();
        assert!(out.ends_with("Text: S\nEntities:"));
        assert!(out.starts_with("Given a piece of text, extract all relevant entities"));
        assert!(!out.contains("[context sentence]"));
    }

    #[test]
    fn missing_and_unknown_bindings() {
        assert_eq!(
            render_prompt(TemplateId::ExplicitExtraction, &bind(&[(CONTEXT_SENTENCE, "S")])),
            Err(TemplateError::MissingBinding(EXTRACTED_ENTITIES.into()))
        );
        assert_eq!(
            render_prompt(
                TemplateId::EntityExtraction,
                &bind(&[(CONTEXT_SENTENCE, "S"), ("bogus", "x")])
            ),
            Err(TemplateError::UnknownPlaceholder("bogus".into()))
        );
    }

    #[test]
    fn no_re_expansion() {
        let out = render_prompt(
            TemplateId::ExplicitExtraction,
            &bind(&[
                (CONTEXT_SENTENCE, "[extracted entities] [x]"),
                (EXTRACTED_ENTITIES, "[context sentence]"),
            ]),
        )
        .unwrap();
        assert!(out.ends_with("Text: [extracted entities] [x]\nEntities: [context sentence]\nTriplets:"));
        // literal list brackets in the body survive untouched
        assert!(out.contains("[(sub1, rel1, obj1) `...`; (sub2, rel2, obj2) `...`; ...]"));
    }

    #[test]
    fn example_prompt_byte_matches_appendix_shape() {
        let sentence = "Jesse was pet sitting for Addison, so Jesse came to Addison’s house and walked their dog.";
        let out = render_prompt(
            TemplateId::ImplicitExtraction,
            &bind(&[
                (CONTEXT_SENTENCE, sentence),
                (EXTRACTED_ENTITIES, "[Jesse, Addison, house, dog]"),
            ]),
        )
        .unwrap();
        let set = TemplateSet::builtin();
        let expected = set
            .get(TemplateId::ImplicitExtraction)
            .body
            .replace("[context sentence]", sentence)
            .replace("[extracted entities]", "[Jesse, Addison, house, dog]");
        assert_eq!(out, expected);
        let tail = format!("Text: {sentence}\nEntities: [Jesse, Addison, house, dog]\nTriplets:");
        assert!(out.ends_with(&tail));
    }

    #[test]
    fn override_validation() {
        assert!(matches!(
            PromptTemplate::new(TemplateId::EntityExtraction, "no placeholder"),
            Err(TemplateError::PlaceholderMismatch { .. })
        ));
        assert!(PromptTemplate::new(TemplateId::EntityExtraction, "T: [context sentence]\nE:").is_ok());
        assert!(matches!(
            PromptTemplate::new(TemplateId::EntityExtraction, "[context sentence] [surprise]"),
            Err(TemplateError::PlaceholderMismatch { .. })
        ));
    }

    #[test]
    fn overrides_from_directory() {
        let dir = std::env::temp_dir().join(format!("iie-templates-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("duplicate_removal.txt"),
            "[context sentence]|[extracted relationships]|[implicit triplet to analyze]",
        )
        .unwrap();
        let set = TemplateSet::with_overrides(&dir).unwrap();
        let out = set
            .render(
                TemplateId::DuplicateRemoval,
                &bind(&[
                    (CONTEXT_SENTENCE, "a"),
                    (EXTRACTED_RELATIONSHIPS, "b"),
                    (TRIPLET_TO_ANALYZE, "c"),
                ]),
            )
            .unwrap();
        assert_eq!(out, "a|b|c");
        assert_eq!(
            set.get(TemplateId::EntityExtraction),
            TemplateSet::builtin().get(TemplateId::EntityExtraction)
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn ids_round_trip() {
        for id in TemplateId::ALL {
            assert_eq!(id.as_str().parse::<TemplateId>().unwrap(), id);
        }
        assert!("nope".parse::<TemplateId>().is_err());
    }
}
