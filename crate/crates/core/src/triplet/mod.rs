//! Triplet and entity domain types plus the textual grammar the model speaks.
//!
//! Every reply format used by the pipeline has a strict parser in [`parse`]
//! and a canonical renderer in [`render`]; `parse(render(x)) == x` holds for
//! every well-formed value.

mod lint;
mod parse;
mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lint::{lint_triplet, LintFinding, LintKind, Severity};
pub use parse::{
    isolate_structure, parse_correction, parse_entity_list, parse_entity_list_renaming, parse_judgment,
    parse_pair_tags, parse_tagged_list, parse_triplet, parse_triplet_list, ParseError, Parser, DEFAULT_MAX_DEPTH,
};
pub use render::{
    render_entity_list, render_pair_tags, render_tagged_list, render_triplet_list, render_triplets, Canonical,
};

/// Entity type tags from the entity-extraction prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    /// A distinct person or set of people.
    Per,
    /// An animal or set of animals.
    Ani,
    /// A formally established organization.
    Org,
    /// Geographical, social or political entity.
    Gpe,
    /// Facility, building or infrastructure.
    Fac,
    /// Man-made object that is not a facility.
    Obj,
    /// Occupation or role.
    Occ,
    /// Time or duration.
    Tim,
    /// Number, with or without a unit.
    Num,
    /// Anything else.
    Msc,
}

impl EntityType {
    pub const ALL: [EntityType; 10] = [
        EntityType::Per,
        EntityType::Ani,
        EntityType::Org,
        EntityType::Gpe,
        EntityType::Fac,
        EntityType::Obj,
        EntityType::Occ,
        EntityType::Tim,
        EntityType::Num,
        EntityType::Msc,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EntityType::Per => "per",
            EntityType::Ani => "ani",
            EntityType::Org => "org",
            EntityType::Gpe => "gpe",
            EntityType::Fac => "fac",
            EntityType::Obj => "obj",
            EntityType::Occ => "occ",
            EntityType::Tim => "tim",
            EntityType::Num => "num",
            EntityType::Msc => "msc",
        }
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .iter()
            .copied()
            .find(|t| t.tag() == s)
            .ok_or_else(|| s.to_string())
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    #[serde(rename = "type")]
    pub etype: EntityType,
}

impl Entity {
    pub fn new(name: impl Into<String>, etype: EntityType) -> Self {
        Entity {
            name: name.into(),
            etype,
        }
    }
}

/// Object slot of a triplet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    /// Reference to an entity (or an attribute used as object) by name.
    Entity(String),
    /// The `<none>` marker of a unary relation.
    None,
    /// A reified triplet used as object.
    Nested(Box<Triplet>),
}

impl Term {
    pub fn entity(name: impl Into<String>) -> Self {
        Term::Entity(name.into())
    }

    pub fn nested(t: Triplet) -> Self {
        Term::Nested(Box::new(t))
    }

    pub fn as_nested(&self) -> Option<&Triplet> {
        match self {
            Term::Nested(t) => Some(t),
            _ => None,
        }
    }
}

/// A (subject, relation, object) statement. The subject is always an entity
/// name; the object may be an entity, `<none>`, or another triplet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: Term,
}

impl Triplet {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: Term) -> Self {
        Triplet {
            subject: subject.into(),
            relation: relation.into(),
            object,
        }
    }

    /// Convenience constructor for a triplet whose object is an entity.
    pub fn simple(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Triplet::new(subject, relation, Term::Entity(object.into()))
    }

    pub fn unary(subject: impl Into<String>, relation: impl Into<String>) -> Self {
        Triplet::new(subject, relation, Term::None)
    }

    /// Number of triplet levels, 1 for a flat triplet.
    pub fn depth(&self) -> usize {
        match &self.object {
            Term::Nested(inner) => 1 + inner.depth(),
            _ => 1,
        }
    }

    /// Nested object triplets, outermost first, excluding `self`.
    pub fn nested(&self) -> Vec<&Triplet> {
        let mut out = Vec::new();
        let mut cur = self;
        while let Term::Nested(inner) = &cur.object {
            out.push(inner.as_ref());
            cur = inner;
        }
        out
    }

    /// Entity names mentioned anywhere in the triplet, in reading order.
    pub fn entity_names(&self) -> Vec<&str> {
        let mut out = vec![self.subject.as_str()];
        match &self.object {
            Term::Entity(name) => out.push(name),
            Term::None => {}
            Term::Nested(inner) => out.extend(inner.entity_names()),
        }
        out
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl Serialize for Triplet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for Triplet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_triplet(&text).map_err(serde::de::Error::custom)
    }
}

/// Inference categories for implicit triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceType {
    Fact,
    PreCondition,
    PostCondition,
    Intent,
    Reaction,
    Attribute,
}

/// Pairwise temporal relation between two triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalTag {
    Before,
    After,
    While,
    None,
}

impl TemporalTag {
    pub const ALL: [TemporalTag; 4] = [
        TemporalTag::Before,
        TemporalTag::After,
        TemporalTag::While,
        TemporalTag::None,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TemporalTag::Before => "before",
            TemporalTag::After => "after",
            TemporalTag::While => "while",
            TemporalTag::None => "none",
        }
    }

    /// The tag describing the same relation with the pair reversed.
    pub fn inverse(self) -> TemporalTag {
        match self {
            TemporalTag::Before => TemporalTag::After,
            TemporalTag::After => TemporalTag::Before,
            other => other,
        }
    }
}

impl FromStr for TemporalTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemporalTag::ALL
            .iter()
            .copied()
            .find(|t| t.tag() == s)
            .ok_or_else(|| s.to_string())
    }
}

impl fmt::Display for TemporalTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventState {
    Event,
    State,
}

impl EventState {
    pub fn tag(self) -> &'static str {
        match self {
            EventState::Event => "event",
            EventState::State => "state",
        }
    }
}

/// Event/state classification plus an optional absolute time reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventStateTag {
    pub kind: EventState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

/// Reply to a yes/no judgment prompt (inference challenge, duplicate check).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentReply {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl JudgmentReply {
    pub fn word_count(&self) -> usize {
        self.explanation
            .as_deref()
            .map(|e| e.split_whitespace().count())
            .unwrap_or(0)
    }
}

/// Separator used between list items. Replies use both; the parser keeps
/// whichever it saw so rendering reproduces the reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Separator {
    #[default]
    Semicolon,
    Comma,
}

impl Separator {
    pub fn as_str(self) -> &'static str {
        match self {
            Separator::Semicolon => "; ",
            Separator::Comma => ", ",
        }
    }
}

/// A triplet with the source snippet quoted after it, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnippetTriplet {
    pub triplet: Triplet,
    pub snippet: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletList {
    pub items: Vec<SnippetTriplet>,
    pub separator: Separator,
}

impl TripletList {
    pub fn triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.items.iter().map(|i| &i.triplet)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedTriplet {
    pub triplet: Triplet,
    pub tag: EventStateTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaggedList {
    pub items: Vec<TaggedTriplet>,
    pub separator: Separator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTag {
    pub first: Triplet,
    pub second: Triplet,
    pub tag: TemporalTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairTagList {
    pub items: Vec<PairTag>,
    pub separator: Separator,
}
