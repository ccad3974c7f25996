//! Per-sentence orchestration: entity and relation extraction, the
//! duplicate/challenge/correction loop for implicit triplets, premises,
//! event/state grounding and pairwise temporal relations.

mod input;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    Gateway, GatewayError, TemplateId, Transcript, CONTEXT_SENTENCE, DISCARD_REASON, EXPLICIT_RELATIONSHIPS,
    EXTRACTED_ENTITIES, EXTRACTED_RELATIONSHIPS, TRIPLET_PAIRS, TRIPLET_TO_ANALYZE, TRIPLET_TO_CORRECT,
    TRIPLET_TO_EXPLAIN,
};
use crate::kg::{build_graph, AuditEntry, GraphTriplet, KgError, Provenance, RecordStatus, TwoTierKg};
use crate::triplet::{
    isolate_structure, lint_triplet, parse_entity_list_renaming, parse_judgment, Canonical, Entity, EventStateTag,
    JudgmentReply, PairTagList, ParseError, Parser, TemporalTag, Triplet, Verdict,
};

pub use input::{parse_input, InputError, InputSentence, SourceTag};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty context sentence")]
    EmptySentence,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("event/state reply does not echo the triplets: {0}")]
    EchoMismatch(String),
    #[error(transparent)]
    Graph(#[from] KgError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Ordered pairs per temporal-relation prompt.
    pub pair_batch_size: usize,
    /// Keep the two orders of a pair in different batches.
    pub split_pair_orders: bool,
    /// Challenge rounds per correction chain.
    pub max_strikes: u32,
    pub max_depth: usize,
    /// Advisory explanation length; longer ones are linted.
    pub explanation_word_cap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            pair_batch_size: 12,
            split_pair_orders: true,
            max_strikes: 3,
            max_depth: crate::triplet::DEFAULT_MAX_DEPTH,
            explanation_word_cap: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeRound {
    pub round: u32,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<Triplet>,
}

/// One triplet version. Corrections are new records on the same `chain`;
/// `round` numbers versions within the chain and each version is
/// challenged at most once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub triplet: Triplet,
    pub provenance: Provenance,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_check: Option<Verdict>,
    pub challenge_rounds: Vec<ChallengeRound>,
    pub premises: Vec<Triplet>,
}

impl ExtractionRecord {
    fn explicit(triplet: Triplet, snippet: String) -> Self {
        ExtractionRecord {
            triplet,
            provenance: Provenance::Explicit { snippet },
            status: RecordStatus::Validated,
            chain: None,
            round: None,
            duplicate_check: None,
            challenge_rounds: Vec::new(),
            premises: Vec::new(),
        }
    }

    fn candidate(triplet: Triplet) -> Self {
        ExtractionRecord {
            triplet,
            provenance: Provenance::Implicit { inference_type: None },
            status: RecordStatus::Candidate,
            chain: None,
            round: None,
            duplicate_check: None,
            challenge_rounds: Vec::new(),
            premises: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLint {
    pub step: TemplateId,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedTriplet {
    pub triplet: Triplet,
    pub tag: EventStateTag,
}

/// Both directional tags of an unordered pair and the reconciled result,
/// read as `first <reconciled> second`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalRelation {
    pub first: Triplet,
    pub second: Triplet,
    pub forward: TemporalTag,
    pub backward: TemporalTag,
    pub reconciled: TemporalTag,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SentenceRun {
    pub sentence: String,
    pub model_id: String,
    pub entities: Vec<Entity>,
    /// Explicit records first, then implicit versions in processing order.
    pub records: Vec<ExtractionRecord>,
    pub event_state_tags: Vec<GroundedTriplet>,
    pub temporal_relations: Vec<TemporalRelation>,
    pub lints: Vec<RunLint>,
    pub transcript: Transcript,
}

impl SentenceRun {
    pub fn validated(&self) -> impl Iterator<Item = &ExtractionRecord> {
        self.records.iter().filter(|r| r.status == RecordStatus::Validated)
    }

    pub fn discarded(&self) -> impl Iterator<Item = &ExtractionRecord> {
        self.records.iter().filter(|r| {
            matches!(
                r.status,
                RecordStatus::DiscardedDuplicate | RecordStatus::DiscardedRejected
            )
        })
    }

    /// Records of one correction chain, in round order.
    pub fn chain(&self, chain: usize) -> Vec<&ExtractionRecord> {
        self.records.iter().filter(|r| r.chain == Some(chain)).collect()
    }

    fn lint(&mut self, step: TemplateId, message: impl Into<String>) {
        self.lints.push(RunLint {
            step,
            message: message.into(),
        });
    }
}

/// A failed run with everything recorded up to the failing step.
#[derive(Debug)]
pub struct RunFailure {
    pub error: PipelineError,
    pub partial: SentenceRun,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run: SentenceRun,
    pub kg: TwoTierKg,
}

/// Combines the tags given for (a, b) and (b, a) into one relation for
/// (a, b). Only mirrored answers survive.
pub fn reconcile_relation_pair(tag_ab: TemporalTag, tag_ba: TemporalTag) -> TemporalTag {
    use TemporalTag::*;
    match (tag_ab, tag_ba) {
        (Before, After) => Before,
        (After, Before) => After,
        (While, While) => While,
        _ => None,
    }
}

/// All ordered pairs over `n` items, grouped into prompt batches.
///
/// With `split_orders`, the forward pairs (i < j) are batched before all
/// reversed pairs, so both orders of a pair never share a batch.
pub fn pair_batches(n: usize, batch_size: usize, split_orders: bool) -> Vec<Vec<(usize, usize)>> {
    let batch_size = batch_size.max(1);
    let chunk = |pairs: Vec<(usize, usize)>| -> Vec<Vec<(usize, usize)>> {
        pairs.chunks(batch_size).map(<[_]>::to_vec).collect()
    };
    if split_orders {
        let forward: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let backward: Vec<_> = forward.iter().map(|&(i, j)| (j, i)).collect();
        let mut out = chunk(forward);
        out.extend(chunk(backward));
        out
    } else {
        let all: Vec<_> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        chunk(all)
    }
}

fn bind(pairs: &[(&'static str, String)]) -> BTreeMap<&'static str, String> {
    pairs.iter().cloned().collect()
}

fn list(triplets: &[Triplet], separator: &str) -> String {
    crate::triplet::render_triplets(triplets, separator)
}

/// Strips a leading `Label:` echo.
fn strip_label<'a>(text: &'a str, label: &str) -> &'a str {
    let t = text.trim();
    match t.get(..label.len()) {
        Some(head) if head.eq_ignore_ascii_case(label) && t[label.len()..].starts_with(':') => {
            t[label.len() + 1..].trim()
        }
        _ => t,
    }
}

fn reply_label(step: TemplateId) -> &'static str {
    match step {
        TemplateId::EntityExtraction => "Entities",
        TemplateId::ExplicitExtraction | TemplateId::ImplicitExtraction => "Triplets",
        TemplateId::InferenceChallenge => "CanBeInferred",
        TemplateId::InferenceCorrection => "Correction",
        TemplateId::InferenceExplanation => "Premise",
        TemplateId::DuplicateRemoval => "IsDuplicate",
        TemplateId::EventStateGrounding | TemplateId::TemporalRelations => "Tags",
    }
}

/// Label-stripped reply cut down to its bracketed block.
fn structured(text: &str, step: TemplateId) -> (&str, bool) {
    isolate_structure(strip_label(text, reply_label(step)))
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    gateway: Gateway,
    config: PipelineConfig,
    parser: Parser,
}

impl Pipeline {
    pub fn new(gateway: Gateway, config: PipelineConfig) -> Self {
        let parser = Parser::new(config.max_depth);
        Pipeline {
            gateway,
            config,
            parser,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Step 1.
    pub fn extract_entities(&self, run: &mut SentenceRun) -> Result<Vec<Entity>, PipelineError> {
        let step = TemplateId::EntityExtraction;
        if run.sentence.trim().is_empty() {
            return Err(PipelineError::EmptySentence);
        }
        let mut renamed = Vec::new();
        let b = bind(&[(CONTEXT_SENTENCE, run.sentence.clone())]);
        let parsed = self.gateway.ask(step, &run.sentence, &b, &mut run.transcript, |text| {
            let (entities, r) = parse_entity_list_renaming(strip_label(text, reply_label(step)))?;
            renamed = r;
            Ok::<_, ParseError>(entities)
        })?;
        for name in renamed {
            run.lint(step, format!("duplicate entity name renamed to {name:?}"));
        }
        Ok(parsed.value)
    }

    fn entity_binding(entities: &[Entity]) -> String {
        let names: Vec<&str> = entities.iter().map(|e| e.name.as_str()).collect();
        format!("[{}]", names.join(", "))
    }

    /// Steps 2/3, explicit half. Records are validated on creation.
    pub fn extract_explicit(
        &self,
        run: &mut SentenceRun,
        entities: &[Entity],
    ) -> Result<Vec<ExtractionRecord>, PipelineError> {
        let step = TemplateId::ExplicitExtraction;
        let b = bind(&[
            (CONTEXT_SENTENCE, run.sentence.clone()),
            (EXTRACTED_ENTITIES, Self::entity_binding(entities)),
        ]);
        let mut trimmed = false;
        let parsed = self.gateway.ask(step, &run.sentence, &b, &mut run.transcript, |text| {
            let (body, dropped) = structured(text, step);
            trimmed = dropped;
            self.parser.triplet_list(body)
        })?;
        if trimmed {
            run.lint(step, "prose around the triplet list was ignored");
        }
        let mut records = Vec::new();
        for item in parsed.value.items {
            self.lint_against(run, step, &item.triplet, entities);
            let snippet = match item.snippet {
                Some(s) => s,
                None => {
                    run.lint(step, format!("{} has no snippet; using the sentence", item.triplet));
                    run.sentence.clone()
                }
            };
            records.push(ExtractionRecord::explicit(item.triplet, snippet));
        }
        Ok(records)
    }

    /// Steps 2/3, implicit half. Conditioned on the sentence and entities
    /// only.
    pub fn extract_implicit(
        &self,
        run: &mut SentenceRun,
        entities: &[Entity],
    ) -> Result<Vec<ExtractionRecord>, PipelineError> {
        let step = TemplateId::ImplicitExtraction;
        let b = bind(&[
            (CONTEXT_SENTENCE, run.sentence.clone()),
            (EXTRACTED_ENTITIES, Self::entity_binding(entities)),
        ]);
        let mut trimmed = false;
        let parsed = self.gateway.ask(step, &run.sentence, &b, &mut run.transcript, |text| {
            let (body, dropped) = structured(text, step);
            trimmed = dropped;
            self.parser.triplet_list(body)
        })?;
        if trimmed {
            run.lint(step, "prose around the triplet list was ignored");
        }
        let mut records = Vec::new();
        for item in parsed.value.items {
            if item.snippet.is_some() {
                run.lint(step, format!("snippet on implicit {} ignored", item.triplet));
            }
            self.lint_against(run, step, &item.triplet, entities);
            records.push(ExtractionRecord::candidate(item.triplet));
        }
        Ok(records)
    }

    fn lint_against(&self, run: &mut SentenceRun, step: TemplateId, t: &Triplet, entities: &[Entity]) {
        for finding in lint_triplet(t, entities) {
            run.lint(step, format!("{t}: {}", finding.message));
        }
    }

    /// Step 4. Unparseable verdicts count as "not a duplicate".
    pub fn remove_duplicate(
        &self,
        run: &mut SentenceRun,
        candidate: &Triplet,
        accepted: &[Triplet],
    ) -> Result<bool, PipelineError> {
        let step = TemplateId::DuplicateRemoval;
        let b = bind(&[
            (CONTEXT_SENTENCE, run.sentence.clone()),
            (EXTRACTED_RELATIONSHIPS, list(accepted, ", ")),
            (TRIPLET_TO_ANALYZE, candidate.canonical()),
        ]);
        let result = self.gateway.ask(step, &run.sentence, &b, &mut run.transcript, |text| {
            parse_judgment(strip_label(text, reply_label(step)))
        });
        match result {
            Ok(p) => Ok(p.value.verdict == Verdict::Yes),
            Err(GatewayError::FormatUnrecoverable { error, .. }) => {
                run.lint(step, format!("{candidate}: unreadable verdict ({error}); kept"));
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Step 5. A `no` must carry an explanation.
    pub fn challenge_inference(
        &self,
        run: &mut SentenceRun,
        candidate: &Triplet,
    ) -> Result<JudgmentReply, PipelineError> {
        let step = TemplateId::InferenceChallenge;
        let b = bind(&[
            (CONTEXT_SENTENCE, run.sentence.clone()),
            (TRIPLET_TO_ANALYZE, candidate.canonical()),
        ]);
        let parsed = self.gateway.ask(step, &run.sentence, &b, &mut run.transcript, |text| {
            let reply = parse_judgment(strip_label(text, reply_label(step))).map_err(|e| e.to_string())?;
            if reply.verdict == Verdict::No && reply.explanation.is_none() {
                return Err("a no verdict needs an explanation".to_string());
            }
            Ok(reply)
        })?;
        let reply = parsed.value;
        if reply.word_count() > self.config.explanation_word_cap {
            run.lint(
                step,
                format!("{candidate}: explanation has {} words", reply.word_count()),
            );
        }
        Ok(reply)
    }

    /// Step 6. `None` ends the chain.
    pub fn correct_inference(
        &self,
        run: &mut SentenceRun,
        discarded: &Triplet,
        explanation: &str,
    ) -> Result<Option<Triplet>, PipelineError> {
        let step = TemplateId::InferenceCorrection;
        let b = bind(&[
            (CONTEXT_SENTENCE, run.sentence.clone()),
            (TRIPLET_TO_CORRECT, discarded.canonical()),
            (DISCARD_REASON, explanation.to_string()),
        ]);
        let parsed = self.gateway.ask(step, &run.sentence, &b, &mut run.transcript, |text| {
            let body = strip_label(text, reply_label(step));
            let bare = body.trim_end_matches('.').trim();
            if bare.eq_ignore_ascii_case("none") {
                return Ok(None);
            }
            self.parser.correction(isolate_structure(bare).0)
        })?;
        Ok(parsed.value)
    }

    /// Step 7. Premises not in the explicit set are dropped.
    pub fn explain_inference(
        &self,
        run: &mut SentenceRun,
        implicit: &Triplet,
        explicit: &[Triplet],
    ) -> Result<Vec<Triplet>, PipelineError> {
        let step = TemplateId::InferenceExplanation;
        let b = bind(&[
            (CONTEXT_SENTENCE, run.sentence.clone()),
            (TRIPLET_TO_EXPLAIN, implicit.canonical()),
            (EXPLICIT_RELATIONSHIPS, list(explicit, ", ")),
        ]);
        let parsed = self.gateway.ask(step, &run.sentence, &b, &mut run.transcript, |text| {
            self.parser.triplet_list(structured(text, step).0)
        })?;
        let known: HashSet<String> = explicit.iter().map(Canonical::canonical).collect();
        let mut premises = Vec::new();
        for t in parsed.value.triplets() {
            if known.contains(&t.canonical()) {
                if !premises.contains(t) {
                    premises.push(t.clone());
                }
            } else {
                run.lint(
                    step,
                    format!("premise {t} of {implicit} is not an explicit triplet; dropped"),
                );
            }
        }
        Ok(premises)
    }

    /// Steps 8/9. The reply must repeat the triplets in order.
    pub fn classify_and_ground(
        &self,
        run: &mut SentenceRun,
        validated: &[Triplet],
    ) -> Result<Vec<GroundedTriplet>, PipelineError> {
        let step = TemplateId::EventStateGrounding;
        if validated.is_empty() {
            return Ok(Vec::new());
        }
        let b = bind(&[
            (CONTEXT_SENTENCE, run.sentence.clone()),
            (EXTRACTED_RELATIONSHIPS, list(validated, "; ")),
        ]);
        let mut echo_failed = false;
        let result = self.gateway.ask(step, &run.sentence, &b, &mut run.transcript, |text| {
            echo_failed = false;
            let tagged = self
                .parser
                .tagged_list(structured(text, step).0)
                .map_err(|e| e.to_string())?;
            let echoed: Vec<&Triplet> = tagged.items.iter().map(|i| &i.triplet).collect();
            if echoed.len() != validated.len() || echoed.iter().zip(validated).any(|(a, b)| *a != b) {
                echo_failed = true;
                return Err(format!(
                    "expected {} triplets in order, got {}",
                    validated.len(),
                    echoed.len()
                ));
            }
            Ok(tagged)
        });
        match result {
            Ok(p) => Ok(p
                .value
                .items
                .into_iter()
                .map(|i| GroundedTriplet {
                    triplet: i.triplet,
                    tag: i.tag,
                })
                .collect()),
            Err(GatewayError::FormatUnrecoverable { error, .. }) if echo_failed => {
                Err(PipelineError::EchoMismatch(error))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Step 10. Every ordered pair of distinct indices gets a tag; pairs the
    /// model leaves out (after one re-prompt) default to `none`.
    pub fn extract_pairwise_relations(
        &self,
        run: &mut SentenceRun,
        validated: &[Triplet],
    ) -> Result<BTreeMap<(usize, usize), TemporalTag>, PipelineError> {
        let step = TemplateId::TemporalRelations;
        let mut tags = BTreeMap::new();
        if validated.len() < 2 {
            return Ok(tags);
        }
        for batch in pair_batches(
            validated.len(),
            self.config.pair_batch_size,
            self.config.split_pair_orders,
        ) {
            let pairs: Vec<String> = batch
                .iter()
                .map(|&(i, j)| format!("({}, {})", validated[i].canonical(), validated[j].canonical()))
                .collect();
            let b = bind(&[
                (CONTEXT_SENTENCE, run.sentence.clone()),
                (TRIPLET_PAIRS, format!("[{}]", pairs.join(", "))),
            ]);
            let prompt = self.gateway.render(step, &b)?;
            let first = self
                .gateway
                .complete(step, &run.sentence, &prompt, &mut run.transcript)?;
            let mut outcome = self.match_pairs(&first.text, &batch, validated);
            let retry = match &outcome {
                Ok(m) => !m.missing.is_empty(),
                Err(_) => true,
            };
            if retry {
                let second =
                    self.gateway
                        .reprompt_on_parse_failure(step, &run.sentence, &prompt, &mut run.transcript)?;
                match (self.match_pairs(&second.text, &batch, validated), outcome) {
                    (Ok(m), _) => outcome = Ok(m),
                    (Err(_), Ok(m)) => outcome = Ok(m),
                    (Err(e), Err(_)) => {
                        return Err(GatewayError::FormatUnrecoverable {
                            step,
                            error: e.to_string(),
                        }
                        .into())
                    }
                }
            }
            let matched = outcome.expect("errors returned above");
            if matched.extra > 0 {
                run.lint(step, format!("{} unrequested pairs ignored", matched.extra));
            }
            for &(i, j) in &matched.missing {
                run.lint(
                    step,
                    format!("no tag for ({}, {}); using none", validated[i], validated[j]),
                );
                tags.insert((i, j), TemporalTag::None);
            }
            tags.extend(matched.tags);
        }
        Ok(tags)
    }

    fn match_pairs(
        &self,
        text: &str,
        batch: &[(usize, usize)],
        validated: &[Triplet],
    ) -> Result<PairMatch, ParseError> {
        let parsed: PairTagList = self
            .parser
            .pair_tags(structured(text, TemplateId::TemporalRelations).0)?;
        let mut tags = BTreeMap::new();
        let mut extra = 0;
        for item in parsed.items {
            let hit = batch
                .iter()
                .find(|&&(i, j)| validated[i] == item.first && validated[j] == item.second);
            match hit {
                Some(&key) => {
                    tags.entry(key).or_insert(item.tag);
                }
                None => extra += 1,
            }
        }
        let missing = batch.iter().copied().filter(|k| !tags.contains_key(k)).collect();
        Ok(PairMatch { tags, missing, extra })
    }

    /// Runs all steps for one sentence and builds the graph.
    pub fn run_sentence(&self, sentence: &str) -> Result<RunOutput, Box<RunFailure>> {
        let mut run = SentenceRun {
            sentence: sentence.trim().to_string(),
            model_id: self.gateway.config().model_id.clone(),
            ..SentenceRun::default()
        };
        match self.run_steps(&mut run) {
            Ok(kg) => Ok(RunOutput { run, kg }),
            Err(error) => Err(Box::new(RunFailure { error, partial: run })),
        }
    }

    fn run_steps(&self, run: &mut SentenceRun) -> Result<TwoTierKg, PipelineError> {
        let entities = self.extract_entities(run)?;
        run.entities = entities.clone();

        let explicit = self.extract_explicit(run, &entities)?;
        let explicit_triplets: Vec<Triplet> = explicit.iter().map(|r| r.triplet.clone()).collect();
        run.records.extend(explicit);

        let candidates = self.extract_implicit(run, &entities)?;
        self.validate_candidates(run, candidates)?;

        let implicit_validated: Vec<usize> = (0..run.records.len())
            .filter(|&i| {
                let r = &run.records[i];
                r.status == RecordStatus::Validated && !r.provenance.is_explicit()
            })
            .collect();
        for i in implicit_validated {
            let t = run.records[i].triplet.clone();
            let premises = self.explain_inference(run, &t, &explicit_triplets)?;
            run.records[i].premises = premises;
        }

        let validated: Vec<Triplet> = run.validated().map(|r| r.triplet.clone()).collect();
        run.event_state_tags = self.classify_and_ground(run, &validated)?;

        let tags = self.extract_pairwise_relations(run, &validated)?;
        for i in 0..validated.len() {
            for j in i + 1..validated.len() {
                let forward = tags.get(&(i, j)).copied().unwrap_or(TemporalTag::None);
                let backward = tags.get(&(j, i)).copied().unwrap_or(TemporalTag::None);
                run.temporal_relations.push(TemporalRelation {
                    first: validated[i].clone(),
                    second: validated[j].clone(),
                    forward,
                    backward,
                    reconciled: reconcile_relation_pair(forward, backward),
                });
            }
        }

        Ok(self.graph(run)?)
    }

    /// Steps 4-6 over the implicit candidates, in generation order.
    fn validate_candidates(
        &self,
        run: &mut SentenceRun,
        candidates: Vec<ExtractionRecord>,
    ) -> Result<(), PipelineError> {
        let mut accepted: Vec<Triplet> = run.validated().map(|r| r.triplet.clone()).collect();
        for (chain, candidate) in candidates.into_iter().enumerate() {
            let mut current = candidate.triplet;
            let mut round = 0u32;
            loop {
                round += 1;
                let idx = run.records.len();
                let mut record = ExtractionRecord::candidate(current.clone());
                record.chain = Some(chain);
                record.round = Some(round);
                run.records.push(record);

                let model_says_dup = self.remove_duplicate(run, &current, &accepted)?;
                let exact = accepted.contains(&current);
                if exact && !model_says_dup {
                    run.lint(
                        TemplateId::DuplicateRemoval,
                        format!("{current} repeats an accepted triplet verbatim; discarded"),
                    );
                }
                run.records[idx].duplicate_check = Some(if model_says_dup { Verdict::Yes } else { Verdict::No });
                if model_says_dup || exact {
                    run.records[idx].status = RecordStatus::DiscardedDuplicate;
                    break;
                }

                let reply = self.challenge_inference(run, &current)?;
                if reply.verdict == Verdict::Yes {
                    run.records[idx].status = RecordStatus::Validated;
                    run.records[idx].challenge_rounds.push(ChallengeRound {
                        round,
                        verdict: Verdict::Yes,
                        explanation: None,
                        correction: None,
                    });
                    accepted.push(current);
                    break;
                }

                run.records[idx].status = RecordStatus::DiscardedRejected;
                let explanation = reply.explanation.unwrap_or_default();
                let correction = if round < self.config.max_strikes {
                    self.correct_inference(run, &current, &explanation)?
                } else {
                    None
                };
                run.records[idx].challenge_rounds.push(ChallengeRound {
                    round,
                    verdict: Verdict::No,
                    explanation: Some(explanation),
                    correction: correction.clone(),
                });
                match correction {
                    Some(next) => current = next,
                    None => break,
                }
            }
        }
        Ok(())
    }

    fn graph(&self, run: &SentenceRun) -> Result<TwoTierKg, KgError> {
        let triplets: Vec<GraphTriplet> = run
            .records
            .iter()
            .filter(|r| r.status == RecordStatus::Validated)
            .map(|r| GraphTriplet {
                triplet: r.triplet.clone(),
                provenance: r.provenance.clone(),
                premises: r.premises.clone(),
                audit: audit_trail(run, r),
            })
            .collect();
        let event_states: Vec<(Triplet, EventStateTag)> = run
            .event_state_tags
            .iter()
            .map(|g| (g.triplet.clone(), g.tag.clone()))
            .collect();
        let temporal: Vec<(Triplet, Triplet, TemporalTag)> = run
            .temporal_relations
            .iter()
            .map(|r| (r.first.clone(), r.second.clone(), r.reconciled))
            .collect();
        build_graph(
            &run.sentence,
            &run.model_id,
            &run.entities,
            &triplets,
            &event_states,
            &temporal,
        )
    }
}

struct PairMatch {
    tags: BTreeMap<(usize, usize), TemporalTag>,
    missing: Vec<(usize, usize)>,
    extra: usize,
}

/// Model decisions for `record` and the earlier versions of its chain.
fn audit_trail(run: &SentenceRun, record: &ExtractionRecord) -> Vec<AuditEntry> {
    let Some(chain) = record.chain else {
        return Vec::new();
    };
    let last = record.round.unwrap_or(0);
    let mut out = Vec::new();
    for r in run.chain(chain).into_iter().filter(|r| r.round.unwrap_or(0) <= last) {
        let round = r.round.unwrap_or(0);
        if let Some(v) = r.duplicate_check {
            out.push(AuditEntry {
                step: TemplateId::DuplicateRemoval.as_str().into(),
                round,
                verdict: v,
                explanation: None,
            });
        }
        for c in &r.challenge_rounds {
            out.push(AuditEntry {
                step: TemplateId::InferenceChallenge.as_str().into(),
                round: c.round,
                verdict: c.verdict,
                explanation: c.explanation.clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests;
