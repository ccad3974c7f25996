//! Annotation forms and the response schema.
//!
//! A form bundle groups several sentence runs into five sections: triplet
//! classification (a), inference correction review (b), event/state
//! classification (c), timing comparison (d) and model error correction (e).
//! Attention checks are fabricated false triplets mixed into section a.
//! The bundle keeps the model's own answers so evaluation can compare them
//! with the human consensus; [`AnnotationBundle::public_view`] strips them
//! before a form is shown to annotators.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{Provenance, RecordStatus};
use crate::pipeline::SentenceRun;
use crate::triplet::{Canonical, EventState, InferenceType, TemporalTag, Triplet};

pub const BUNDLE_SCHEMA_VERSION: &str = "1";
pub const RESPONSE_SCHEMA_VERSION: &str = "1";
pub const ATTENTION_ITEMS: usize = 5;
pub const DEFAULT_GROUP_SIZE: usize = 5;
/// Cap on any free-text field of a submission, in characters.
pub const MAX_TEXT_LEN: usize = 500;
/// Cap on the rendered length of an added triplet, in characters.
pub const MAX_TRIPLET_LEN: usize = 200;
pub const MAX_ADDITIONS_PER_FORM: usize = 100;

/// Fabricated, obviously false statements used as attention checks.
pub const ATTENTION_POOL: [&str; 12] = [
    "(sun, isMadeOf, cheese)",
    "(fish, climbs, mountain)",
    "(house, eats, breakfast)",
    "(moon, livesIn, teapot)",
    "(chair, sings, opera)",
    "(river, flowsInto, pocket)",
    "(cloud, owns, bicycle)",
    "(pebble, writes, novel)",
    "(carrot, drives, truck)",
    "(snow, is, hot)",
    "(umbrella, speaks, French)",
    "(stone, feels, hungry)",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletLabel {
    Factual,
    Deducible,
    Wrong,
}

impl TripletLabel {
    pub const ALL: [TripletLabel; 3] = [TripletLabel::Factual, TripletLabel::Deducible, TripletLabel::Wrong];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TripletLabel::Factual => "factual",
            TripletLabel::Deducible => "deducible",
            TripletLabel::Wrong => "wrong",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardAgreement {
    FullyAgree,
    SomewhatAgree,
    Disagree,
}

impl DiscardAgreement {
    /// Agreement score: 1, 0 or -1.
    pub fn score(self) -> i32 {
        match self {
            DiscardAgreement::FullyAgree => 1,
            DiscardAgreement::SomewhatAgree => 0,
            DiscardAgreement::Disagree => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingLabel {
    Before,
    After,
    While,
    NoClearRelation,
}

impl From<TemporalTag> for TimingLabel {
    fn from(tag: TemporalTag) -> Self {
        match tag {
            TemporalTag::Before => TimingLabel::Before,
            TemporalTag::After => TimingLabel::After,
            TemporalTag::While => TimingLabel::While,
            TemporalTag::None => TimingLabel::NoClearRelation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationItem {
    pub id: String,
    pub triplet: Triplet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_label: Option<TripletLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardItem {
    pub id: String,
    pub triplet: Triplet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<Triplet>,
    /// Whether reason/correction follow-up questions are asked for this item.
    pub follow_up: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStateItem {
    pub id: String,
    pub triplet: Triplet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_label: Option<EventState>,
}

/// Question: how is `first` placed in time relative to `second`?
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingItem {
    pub id: String,
    pub first: Triplet,
    pub second: Triplet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_label: Option<TimingLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalItem {
    pub id: String,
    pub triplet: Triplet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSentence {
    pub sentence_id: String,
    pub sentence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub section_a: Vec<ClassificationItem>,
    pub section_b: Vec<DiscardItem>,
    pub section_c: Vec<EventStateItem>,
    pub section_d: Vec<TimingItem>,
    pub section_e: Vec<FinalItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionItem {
    pub item_id: String,
    pub triplet: Triplet,
    pub sentence: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationBundle {
    pub schema_version: String,
    pub form_id: String,
    pub seed: u64,
    pub sentences: Vec<BundleSentence>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention_items: Vec<AttentionItem>,
}

impl AnnotationBundle {
    /// The form as shown to annotators: no model answers, no attention key.
    pub fn public_view(&self) -> AnnotationBundle {
        let mut view = self.clone();
        view.attention_items.clear();
        for s in &mut view.sentences {
            s.model_id = None;
            s.section_a.iter_mut().for_each(|i| i.model_label = None);
            s.section_c.iter_mut().for_each(|i| i.model_label = None);
            s.section_d.iter_mut().for_each(|i| i.model_label = None);
        }
        view
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn is_attention(&self, item_id: &str) -> bool {
        self.attention_items.iter().any(|a| a.item_id == item_id)
    }

    pub fn section_a(&self) -> impl Iterator<Item = &ClassificationItem> {
        self.sentences.iter().flat_map(|s| &s.section_a)
    }

    pub fn section_b(&self) -> impl Iterator<Item = &DiscardItem> {
        self.sentences.iter().flat_map(|s| &s.section_b)
    }

    pub fn section_c(&self) -> impl Iterator<Item = &EventStateItem> {
        self.sentences.iter().flat_map(|s| &s.section_c)
    }

    pub fn section_d(&self) -> impl Iterator<Item = &TimingItem> {
        self.sentences.iter().flat_map(|s| &s.section_d)
    }

    pub fn section_e(&self) -> impl Iterator<Item = &FinalItem> {
        self.sentences.iter().flat_map(|s| &s.section_e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormConfig {
    pub group_size: usize,
    /// Accept fewer sentences than `group_size`.
    pub allow_short: bool,
}

impl Default for FormConfig {
    fn default() -> Self {
        FormConfig {
            group_size: DEFAULT_GROUP_SIZE,
            allow_short: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormError {
    #[error("{got} sentences given, form needs {needed}")]
    InsufficientSentences { got: usize, needed: usize },
    #[error("{got} sentences given, form holds at most {max}")]
    TooManySentences { got: usize, max: usize },
    #[error("attention pool exhausted: every fabricated triplet occurs in the form")]
    AttentionPoolExhausted,
}

/// A completed run plus the sentence id it came from.
#[derive(Debug, Clone, Copy)]
pub struct FormSource<'a> {
    pub sentence_id: &'a str,
    /// Source dataset label carried into reports.
    pub dataset: Option<&'a str>,
    pub run: &'a SentenceRun,
}

fn item_id(form_id: &str, section: char, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(form_id.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    format!("{section}-{}", &hex::encode(h.finalize())[..12])
}

fn model_label(run: &SentenceRun, t: &Triplet) -> TripletLabel {
    let mut label = TripletLabel::Wrong;
    for r in run.records.iter().filter(|r| &r.triplet == t) {
        if r.status == RecordStatus::Validated {
            match r.provenance {
                Provenance::Explicit { .. } => return TripletLabel::Factual,
                Provenance::Implicit { .. } => label = TripletLabel::Deducible,
            }
        }
    }
    label
}

fn build_sentence(form_id: &str, index: usize, src: &FormSource<'_>, rng: &mut ChaCha8Rng) -> BundleSentence {
    let run = src.run;
    let key = index.to_string();
    let mut seen = BTreeSet::new();
    let mut section_a: Vec<ClassificationItem> = run
        .records
        .iter()
        .filter(|r| r.status != RecordStatus::Candidate && seen.insert(r.triplet.canonical()))
        .map(|r| ClassificationItem {
            id: item_id(form_id, 'a', &[&key, &r.triplet.canonical()]),
            triplet: r.triplet.clone(),
            model_label: Some(model_label(run, &r.triplet)),
        })
        .collect();
    section_a.shuffle(rng);

    let mut section_b: Vec<DiscardItem> = run
        .records
        .iter()
        .filter(|r| r.status == RecordStatus::DiscardedRejected)
        .map(|r| {
            let last = r.challenge_rounds.last();
            DiscardItem {
                id: item_id(form_id, 'b', &[&key, &r.triplet.canonical()]),
                triplet: r.triplet.clone(),
                reason: last.and_then(|c| c.explanation.clone()),
                correction: last.and_then(|c| c.correction.clone()),
                follow_up: false,
            }
        })
        .collect();
    if !section_b.is_empty() {
        let pick = rng.random_range(0..section_b.len());
        section_b[pick].follow_up = true;
    }

    let mut seen = BTreeSet::new();
    let validated: Vec<&Triplet> = run
        .validated()
        .map(|r| &r.triplet)
        .filter(|t| seen.insert(t.canonical()))
        .collect();
    let section_c = validated
        .iter()
        .map(|t| EventStateItem {
            id: item_id(form_id, 'c', &[&key, &t.canonical()]),
            triplet: (*t).clone(),
            model_label: run
                .event_state_tags
                .iter()
                .find(|g| &g.triplet == *t)
                .map(|g| g.tag.kind),
        })
        .collect();

    // every related pair plus as many unrelated ones, in run order
    let related: Vec<usize> = (0..run.temporal_relations.len())
        .filter(|&i| run.temporal_relations[i].reconciled != TemporalTag::None)
        .collect();
    let unrelated: Vec<usize> = (0..run.temporal_relations.len())
        .filter(|&i| run.temporal_relations[i].reconciled == TemporalTag::None)
        .collect();
    let mut chosen: BTreeSet<usize> = related.iter().copied().collect();
    chosen.extend(unrelated.choose_multiple(rng, related.len()).copied());
    let section_d = chosen
        .into_iter()
        .map(|i| {
            let rel = &run.temporal_relations[i];
            TimingItem {
                id: item_id(form_id, 'd', &[&key, &rel.first.canonical(), &rel.second.canonical()]),
                first: rel.first.clone(),
                second: rel.second.clone(),
                model_label: Some(rel.reconciled.into()),
            }
        })
        .collect();

    let section_e = validated
        .iter()
        .map(|t| FinalItem {
            id: item_id(form_id, 'e', &[&key, &t.canonical()]),
            triplet: (*t).clone(),
        })
        .collect();

    BundleSentence {
        sentence_id: src.sentence_id.to_string(),
        sentence: run.sentence.clone(),
        dataset: src.dataset.map(str::to_string),
        model_id: Some(run.model_id.clone()),
        section_a,
        section_b,
        section_c,
        section_d,
        section_e,
    }
}

/// Builds one form from `sources`. The same inputs and seed always give the
/// same bundle.
pub fn generate_form_bundle(
    form_id: &str,
    sources: &[FormSource<'_>],
    seed: u64,
    config: &FormConfig,
) -> Result<AnnotationBundle, FormError> {
    if sources.len() < config.group_size && !config.allow_short {
        return Err(FormError::InsufficientSentences {
            got: sources.len(),
            needed: config.group_size,
        });
    }
    if sources.len() > config.group_size {
        return Err(FormError::TooManySentences {
            got: sources.len(),
            max: config.group_size,
        });
    }
    if sources.is_empty() {
        return Err(FormError::InsufficientSentences {
            got: 0,
            needed: config.group_size.max(1),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences: Vec<BundleSentence> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| build_sentence(form_id, i, s, &mut rng))
        .collect();

    let real: BTreeSet<String> = sentences
        .iter()
        .flat_map(|s| {
            s.section_a
                .iter()
                .map(|i| &i.triplet)
                .chain(s.section_b.iter().filter_map(|i| i.correction.as_ref()))
        })
        .map(Canonical::canonical)
        .collect();
    let pool: Vec<Triplet> = ATTENTION_POOL
        .iter()
        .map(|s| crate::triplet::parse_triplet(s).expect("attention pool parses"))
        .filter(|t| !real.contains(&t.canonical()))
        .collect();
    if pool.len() < ATTENTION_ITEMS {
        return Err(FormError::AttentionPoolExhausted);
    }
    let picked: Vec<Triplet> = pool.choose_multiple(&mut rng, ATTENTION_ITEMS).cloned().collect();
    let mut ids = Vec::with_capacity(ATTENTION_ITEMS);
    for t in picked {
        let s = rng.random_range(0..sentences.len());
        let section = &mut sentences[s].section_a;
        let pos = rng.random_range(0..=section.len());
        let id = item_id(form_id, 'a', &[&s.to_string(), &t.canonical()]);
        section.insert(
            pos,
            ClassificationItem {
                id: id.clone(),
                triplet: t,
                model_label: None,
            },
        );
        ids.push(id);
    }
    let attention_items = ids
        .into_iter()
        .map(|id| {
            sentences
                .iter()
                .enumerate()
                .find_map(|(s, sent)| {
                    sent.section_a.iter().position(|i| i.id == id).map(|p| AttentionItem {
                        item_id: id.clone(),
                        triplet: sent.section_a[p].triplet.clone(),
                        sentence: s,
                        position: p,
                    })
                })
                .expect("attention item was inserted")
        })
        .collect();

    Ok(AnnotationBundle {
        schema_version: BUNDLE_SCHEMA_VERSION.into(),
        form_id: form_id.to_string(),
        seed,
        sentences,
        attention_items,
    })
}

/// Splits `sources` into consecutive forms of `config.group_size`
/// sentences, named `{prefix}-01`, `{prefix}-02`, ... Form `k` uses seed
/// `seed + k`.
pub fn generate_forms(
    prefix: &str,
    sources: &[FormSource<'_>],
    seed: u64,
    config: &FormConfig,
) -> Result<Vec<AnnotationBundle>, FormError> {
    let size = config.group_size.max(1);
    sources
        .chunks(size)
        .enumerate()
        .map(|(k, chunk)| {
            generate_form_bundle(
                &format!("{prefix}-{:02}", k + 1),
                chunk,
                seed.wrapping_add(k as u64),
                config,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcrAnswer {
    pub discard_agreement: DiscardAgreement,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason_agreement: Option<DiscardAgreement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction_agreement: Option<DiscardAgreement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Addition {
    /// Sentence the added triplet belongs to.
    pub sentence_id: String,
    pub triplet: Triplet,
    pub inference_type: InferenceType,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MecAnswer {
    #[serde(default)]
    pub removals: BTreeSet<String>,
    #[serde(default)]
    pub additions: Vec<Addition>,
}

/// The answers posted by an annotator, keyed by item id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSubmission {
    #[serde(default)]
    pub triplet_classification: BTreeMap<String, TripletLabel>,
    #[serde(default)]
    pub icr: BTreeMap<String, IcrAnswer>,
    #[serde(default)]
    pub event_state: BTreeMap<String, EventState>,
    #[serde(default)]
    pub timing: BTreeMap<String, TimingLabel>,
    #[serde(default)]
    pub mec: MecAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

/// A stored response: the submission plus server-side fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub schema_version: String,
    pub response_id: String,
    pub annotator_id: String,
    pub form_id: String,
    pub triplet_classification: BTreeMap<String, TripletLabel>,
    pub icr: BTreeMap<String, IcrAnswer>,
    pub event_state: BTreeMap<String, EventState>,
    pub timing: BTreeMap<String, TimingLabel>,
    pub mec: MecAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub attention_outcomes: Vec<bool>,
}

impl AnnotationResponse {
    pub fn passed_attention(&self) -> bool {
        self.attention_outcomes.len() == ATTENTION_ITEMS && self.attention_outcomes.iter().all(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubmissionError {
    #[error("submission rejected: {} field error(s)", .0.len())]
    Invalid(Vec<FieldError>),
}

fn check_keys<V>(
    errors: &mut Vec<FieldError>,
    section: &str,
    answers: &BTreeMap<String, V>,
    expected: &BTreeSet<&str>,
) {
    for id in expected {
        if !answers.contains_key(*id) {
            errors.push(FieldError::new(format!("{section}.{id}"), "missing answer"));
        }
    }
    for id in answers.keys() {
        if !expected.contains(id.as_str()) {
            errors.push(FieldError::new(format!("{section}.{id}"), "unknown item"));
        }
    }
}

/// Checks a submission against the full bundle. All problems are reported,
/// not just the first.
pub fn validate_submission(bundle: &AnnotationBundle, sub: &ResponseSubmission) -> Result<(), Vec<FieldError>> {
    let mut errors = Vec::new();
    let a: BTreeSet<&str> = bundle.section_a().map(|i| i.id.as_str()).collect();
    let b: BTreeSet<&str> = bundle.section_b().map(|i| i.id.as_str()).collect();
    let c: BTreeSet<&str> = bundle.section_c().map(|i| i.id.as_str()).collect();
    let d: BTreeSet<&str> = bundle.section_d().map(|i| i.id.as_str()).collect();
    let e: BTreeSet<&str> = bundle.section_e().map(|i| i.id.as_str()).collect();
    check_keys(&mut errors, "triplet_classification", &sub.triplet_classification, &a);
    check_keys(&mut errors, "icr", &sub.icr, &b);
    check_keys(&mut errors, "event_state", &sub.event_state, &c);
    check_keys(&mut errors, "timing", &sub.timing, &d);

    for item in bundle.section_b() {
        let Some(ans) = sub.icr.get(&item.id) else { continue };
        let unlocked = item.follow_up && ans.discard_agreement != DiscardAgreement::Disagree;
        let field = format!("icr.{}", item.id);
        match (unlocked, ans.reason_agreement) {
            (true, None) => errors.push(FieldError::new(format!("{field}.reason_agreement"), "missing answer")),
            (false, Some(_)) => errors.push(FieldError::new(
                format!("{field}.reason_agreement"),
                "follow-up not asked",
            )),
            _ => {}
        }
        let asks_correction = unlocked && item.correction.is_some();
        match (asks_correction, ans.correction_agreement) {
            (true, None) => errors.push(FieldError::new(
                format!("{field}.correction_agreement"),
                "missing answer",
            )),
            (false, Some(_)) => errors.push(FieldError::new(
                format!("{field}.correction_agreement"),
                "follow-up not asked",
            )),
            _ => {}
        }
    }

    for id in &sub.mec.removals {
        if !e.contains(id.as_str()) {
            errors.push(FieldError::new(format!("mec.removals.{id}"), "unknown item"));
        }
    }
    if sub.mec.additions.len() > MAX_ADDITIONS_PER_FORM {
        errors.push(FieldError::new(
            "mec.additions",
            format!("at most {MAX_ADDITIONS_PER_FORM} additions"),
        ));
    }
    let sentence_ids: BTreeSet<&str> = bundle.sentences.iter().map(|s| s.sentence_id.as_str()).collect();
    for (k, add) in sub.mec.additions.iter().enumerate() {
        if !sentence_ids.contains(add.sentence_id.as_str()) {
            errors.push(FieldError::new(
                format!("mec.additions.{k}.sentence_id"),
                "unknown sentence",
            ));
        }
        if add.triplet.canonical().chars().count() > MAX_TRIPLET_LEN {
            errors.push(FieldError::new(
                format!("mec.additions.{k}.triplet"),
                format!("longer than {MAX_TRIPLET_LEN} characters"),
            ));
        }
    }
    if let Some(c) = &sub.comment {
        if c.chars().count() > MAX_TEXT_LEN {
            errors.push(FieldError::new(
                "comment",
                format!("longer than {MAX_TEXT_LEN} characters"),
            ));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Validates `sub` and turns it into a stored response. Attention outcomes
/// are computed here: an attention item passes iff it was labeled wrong.
pub fn accept_submission(
    bundle: &AnnotationBundle,
    sub: ResponseSubmission,
    response_id: &str,
    annotator_id: &str,
) -> Result<AnnotationResponse, SubmissionError> {
    validate_submission(bundle, &sub).map_err(SubmissionError::Invalid)?;
    let attention_outcomes = bundle
        .attention_items
        .iter()
        .map(|a| sub.triplet_classification.get(&a.item_id) == Some(&TripletLabel::Wrong))
        .collect();
    Ok(AnnotationResponse {
        schema_version: RESPONSE_SCHEMA_VERSION.into(),
        response_id: response_id.to_string(),
        annotator_id: annotator_id.to_string(),
        form_id: bundle.form_id.clone(),
        triplet_classification: sub.triplet_classification,
        icr: sub.icr,
        event_state: sub.event_state,
        timing: sub.timing,
        mec: sub.mec,
        comment: sub.comment,
        attention_outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{ChallengeRound, ExtractionRecord, GroundedTriplet, TemporalRelation};
    use crate::triplet::{parse_triplet, EventStateTag, Verdict};

    fn t(s: &str) -> Triplet {
        parse_triplet(s).unwrap()
    }

    fn record(s: &str, explicit: bool, status: RecordStatus) -> ExtractionRecord {
        ExtractionRecord {
            triplet: t(s),
            provenance: if explicit {
                Provenance::Explicit { snippet: "x".into() }
            } else {
                Provenance::Implicit { inference_type: None }
            },
            status,
            chain: None,
            round: None,
            duplicate_check: None,
            challenge_rounds: Vec::new(),
            premises: Vec::new(),
        }
    }

    pub(crate) fn sample_run(n: usize) -> SentenceRun {
        let mut rejected = record(&format!("(A{n}, hates, B)"), false, RecordStatus::DiscardedRejected);
        rejected.challenge_rounds.push(ChallengeRound {
            round: 1,
            verdict: Verdict::No,
            explanation: Some("not supported".into()),
            correction: Some(t(&format!("(A{n}, dislikes, B)"))),
        });
        let records = vec![
            record(&format!("(A{n}, meets, B)"), true, RecordStatus::Validated),
            record(&format!("(A{n}, knows, B)"), false, RecordStatus::Validated),
            record(&format!("(A{n}, meets, B)"), false, RecordStatus::DiscardedDuplicate),
            rejected,
        ];
        let tag = |s: &str, kind| GroundedTriplet {
            triplet: t(s),
            tag: EventStateTag { kind, time_ref: None },
        };
        let rel = |a: &str, b: &str, r: TemporalTag| TemporalRelation {
            first: t(a),
            second: t(b),
            forward: r,
            backward: r.inverse(),
            reconciled: r,
        };
        SentenceRun {
            sentence: format!("A{n} meets B."),
            model_id: "m".into(),
            records,
            event_state_tags: vec![
                tag(&format!("(A{n}, meets, B)"), EventState::Event),
                tag(&format!("(A{n}, knows, B)"), EventState::State),
            ],
            temporal_relations: vec![
                rel(
                    &format!("(A{n}, meets, B)"),
                    &format!("(A{n}, knows, B)"),
                    TemporalTag::After,
                ),
                rel(
                    &format!("(A{n}, knows, B)"),
                    &format!("(A{n}, meets, B)"),
                    TemporalTag::None,
                ),
                rel(
                    &format!("(A{n}, meets, B)"),
                    &format!("(A{n}, meets, B)"),
                    TemporalTag::None,
                ),
            ],
            ..SentenceRun::default()
        }
    }

    fn bundle(seed: u64) -> AnnotationBundle {
        let runs: Vec<SentenceRun> = (0..5).map(sample_run).collect();
        let ids: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let sources: Vec<FormSource> = runs
            .iter()
            .zip(&ids)
            .map(|(run, id)| FormSource {
                sentence_id: id,
                dataset: Some("toy"),
                run,
            })
            .collect();
        generate_form_bundle("f1", &sources, seed, &FormConfig::default()).unwrap()
    }

    pub(crate) fn answer_all(b: &AnnotationBundle, label: TripletLabel) -> ResponseSubmission {
        let mut sub = ResponseSubmission::default();
        for i in b.section_a() {
            let l = if b.is_attention(&i.id) {
                TripletLabel::Wrong
            } else {
                label
            };
            sub.triplet_classification.insert(i.id.clone(), l);
        }
        for i in b.section_b() {
            sub.icr.insert(
                i.id.clone(),
                IcrAnswer {
                    discard_agreement: DiscardAgreement::FullyAgree,
                    reason_agreement: i.follow_up.then_some(DiscardAgreement::FullyAgree),
                    correction_agreement: (i.follow_up && i.correction.is_some())
                        .then_some(DiscardAgreement::SomewhatAgree),
                },
            );
        }
        for i in b.section_c() {
            sub.event_state.insert(i.id.clone(), EventState::Event);
        }
        for i in b.section_d() {
            sub.timing.insert(i.id.clone(), TimingLabel::Before);
        }
        sub
    }

    #[test]
    fn bundle_shape() {
        let b = bundle(42);
        assert_eq!(b.sentences.len(), 5);
        assert_eq!(b.attention_items.len(), ATTENTION_ITEMS);
        let s = &b.sentences[0];
        // explicit meets, implicit knows, rejected hates; duplicate collapsed
        let real: Vec<_> = s.section_a.iter().filter(|i| !b.is_attention(&i.id)).collect();
        assert_eq!(real.len(), 3);
        let label = |name: &str| real.iter().find(|i| i.triplet.relation == name).unwrap().model_label;
        assert_eq!(label("meets"), Some(TripletLabel::Factual));
        assert_eq!(label("knows"), Some(TripletLabel::Deducible));
        assert_eq!(label("hates"), Some(TripletLabel::Wrong));
        assert_eq!(s.section_b.len(), 1);
        assert!(s.section_b[0].follow_up);
        assert_eq!(s.section_c.len(), 2);
        assert_eq!(s.section_c[1].model_label, Some(EventState::State));
        assert_eq!(s.section_d.len(), 2, "one related pair plus one unrelated");
        assert_eq!(s.section_e.len(), 2);
        for a in &b.attention_items {
            assert_eq!(b.sentences[a.sentence].section_a[a.position].id, a.item_id);
            assert!(ATTENTION_POOL.contains(&a.triplet.canonical().as_str()));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(bundle(42).to_json(), bundle(42).to_json());
        assert_ne!(bundle(42).to_json(), bundle(43).to_json());
    }

    #[test]
    fn public_view_hides_answers() {
        let v = bundle(1).public_view();
        let json = v.to_json();
        assert!(!json.contains("model_label"));
        assert!(!json.contains("attention_items"));
        assert!(!json.contains("model_id"));
    }

    #[test]
    fn group_size_rules() {
        let run = sample_run(0);
        let one = [FormSource {
            sentence_id: "s",
            dataset: None,
            run: &run,
        }];
        assert_eq!(
            generate_form_bundle("f", &one, 0, &FormConfig::default()),
            Err(FormError::InsufficientSentences { got: 1, needed: 5 })
        );
        let cfg = FormConfig {
            allow_short: true,
            ..FormConfig::default()
        };
        let b = generate_form_bundle("f", &one, 0, &cfg).unwrap();
        assert_eq!(b.attention_items.len(), 5);
        assert!(b.attention_items.iter().all(|a| a.sentence == 0));
    }

    #[test]
    fn no_discards_means_empty_section_b() {
        let mut run = sample_run(0);
        run.records.retain(|r| r.status != RecordStatus::DiscardedRejected);
        let src = [FormSource {
            sentence_id: "s",
            dataset: None,
            run: &run,
        }];
        let cfg = FormConfig {
            allow_short: true,
            ..FormConfig::default()
        };
        let b = generate_form_bundle("f", &src, 0, &cfg).unwrap();
        assert!(b.sentences[0].section_b.is_empty());
    }

    #[test]
    fn attention_never_overlaps_real_triplets() {
        let mut run = sample_run(0);
        for s in &ATTENTION_POOL[..7] {
            run.records.push(record(s, true, RecordStatus::Validated));
        }
        let src = [FormSource {
            sentence_id: "s",
            dataset: None,
            run: &run,
        }];
        let cfg = FormConfig {
            allow_short: true,
            ..FormConfig::default()
        };
        let b = generate_form_bundle("f", &src, 9, &cfg).unwrap();
        for a in &b.attention_items {
            assert!(!ATTENTION_POOL[..7].contains(&a.triplet.canonical().as_str()));
        }
        for s in &ATTENTION_POOL[7..9] {
            run.records.push(record(s, true, RecordStatus::Validated));
        }
        let src = [FormSource {
            sentence_id: "s",
            dataset: None,
            run: &run,
        }];
        assert_eq!(
            generate_form_bundle("f", &src, 9, &cfg),
            Err(FormError::AttentionPoolExhausted)
        );
    }

    #[test]
    fn accepted_submission_computes_attention() {
        let b = bundle(5);
        let sub = answer_all(&b, TripletLabel::Factual);
        let r = accept_submission(&b, sub.clone(), "r1", "anon").unwrap();
        assert_eq!(r.attention_outcomes, vec![true; 5]);
        assert!(r.passed_attention());

        let mut bad = sub;
        let first = b.attention_items[0].item_id.clone();
        bad.triplet_classification.insert(first, TripletLabel::Factual);
        let r = accept_submission(&b, bad, "r2", "anon").unwrap();
        assert_eq!(r.attention_outcomes.iter().filter(|&&x| !x).count(), 1);
        assert!(!r.passed_attention());
    }

    #[test]
    fn missing_section_is_rejected() {
        let b = bundle(5);
        let mut sub = answer_all(&b, TripletLabel::Factual);
        sub.timing.clear();
        let Err(SubmissionError::Invalid(errs)) = accept_submission(&b, sub, "r", "a") else {
            panic!("accepted")
        };
        assert_eq!(errs.len(), b.section_d().count());
        assert!(errs.iter().all(|e| e.field.starts_with("timing.")));
    }

    #[test]
    fn disagree_locks_follow_ups() {
        let b = bundle(5);
        let item = b.section_b().find(|i| i.follow_up).unwrap().id.clone();
        let mut sub = answer_all(&b, TripletLabel::Factual);
        sub.icr.get_mut(&item).unwrap().discard_agreement = DiscardAgreement::Disagree;
        let errs = validate_submission(&b, &sub).unwrap_err();
        assert_eq!(errs.len(), 2);
        let ans = sub.icr.get_mut(&item).unwrap();
        ans.reason_agreement = None;
        ans.correction_agreement = None;
        assert!(validate_submission(&b, &sub).is_ok());

        // follow-ups are required when unlocked
        let mut sub = answer_all(&b, TripletLabel::Factual);
        sub.icr.get_mut(&item).unwrap().reason_agreement = None;
        assert_eq!(
            validate_submission(&b, &sub).unwrap_err()[0].field,
            format!("icr.{item}.reason_agreement")
        );
    }

    #[test]
    fn free_text_and_unknown_ids() {
        let b = bundle(5);
        let mut sub = answer_all(&b, TripletLabel::Factual);
        sub.comment = Some("x".repeat(MAX_TEXT_LEN + 1));
        sub.mec.removals.insert("e-nope".into());
        sub.triplet_classification.insert("a-nope".into(), TripletLabel::Wrong);
        sub.mec.additions.push(Addition {
            sentence_id: "s0".into(),
            triplet: Triplet::simple("a", "r", "b".repeat(MAX_TRIPLET_LEN)),
            inference_type: InferenceType::Fact,
        });
        let errs = validate_submission(&b, &sub).unwrap_err();
        let fields: BTreeSet<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains("comment"));
        assert!(fields.contains("mec.removals.e-nope"));
        assert!(fields.contains("triplet_classification.a-nope"));
        assert!(fields.contains("mec.additions.0.triplet"));
    }

    #[test]
    fn response_json_round_trip() {
        let b = bundle(5);
        let r = accept_submission(&b, answer_all(&b, TripletLabel::Wrong), "r", "a").unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<AnnotationResponse>(&json).unwrap(), r);
        let back: AnnotationBundle = serde_json::from_str(&b.to_json()).unwrap();
        assert_eq!(back, b);
    }
}
