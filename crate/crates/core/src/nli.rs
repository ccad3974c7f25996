//! Entailment probe: verbalized triplets scored against their sentence by an
//! external NLI model, aggregated by human label, by pipeline label, and
//! over the two disagreement groups.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationBundle, AnnotationResponse, TripletLabel};
use crate::eval::majority_label;
use crate::triplet::Triplet;
use crate::verbalizer::{verbalize, VerbalizerConfig};

pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NliError {
    #[error("NLI endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("NLI reply is not a probability triple: ({0}, {1}, {2})")]
    NonProbabilisticReply(f64, f64, f64),
}

/// Request body of the scorer endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliRequest {
    pub premise: String,
    pub hypothesis: String,
}

/// Reply body of the scorer endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliReply {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliScore {
    pub p_ent: f64,
    pub p_neu: f64,
    pub p_con: f64,
}

impl NliScore {
    /// Accepts values in [0, 1] whose sum is within 1e-6 of 1.
    pub fn new(p_ent: f64, p_neu: f64, p_con: f64) -> Result<Self, NliError> {
        let parts = [p_ent, p_neu, p_con];
        let in_range = parts.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p));
        if !in_range || (parts.iter().sum::<f64>() - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(NliError::NonProbabilisticReply(p_ent, p_neu, p_con));
        }
        Ok(NliScore { p_ent, p_neu, p_con })
    }

    /// Entailment is the strict argmax. Ties count as non-entailment.
    pub fn is_entailment(&self) -> bool {
        self.p_ent > self.p_neu && self.p_ent > self.p_con
    }
}

impl TryFrom<NliReply> for NliScore {
    type Error = NliError;

    fn try_from(r: NliReply) -> Result<Self, NliError> {
        NliScore::new(r.entailment, r.neutral, r.contradiction)
    }
}

/// Anything that can score a premise/hypothesis pair.
pub trait NliScorer: Send + Sync {
    fn score(&self, request: &NliRequest) -> Result<NliReply, NliError>;
}

impl<F> NliScorer for F
where
    F: Fn(&NliRequest) -> Result<NliReply, NliError> + Send + Sync,
{
    fn score(&self, request: &NliRequest) -> Result<NliReply, NliError> {
        self(request)
    }
}

/// Scorer answering from a fixed table keyed by hypothesis.
#[derive(Debug, Clone, Default)]
pub struct StubScorer {
    pub replies: BTreeMap<String, NliReply>,
}

impl StubScorer {
    pub fn new<I: IntoIterator<Item = (String, (f64, f64, f64))>>(entries: I) -> Self {
        StubScorer {
            replies: entries
                .into_iter()
                .map(|(h, (e, n, c))| {
                    (
                        h,
                        NliReply {
                            entailment: e,
                            neutral: n,
                            contradiction: c,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl NliScorer for StubScorer {
    fn score(&self, request: &NliRequest) -> Result<NliReply, NliError> {
        self.replies
            .get(&request.hypothesis)
            .copied()
            .ok_or_else(|| NliError::EndpointUnreachable(format!("no stub reply for {:?}", request.hypothesis)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisPair {
    pub triplet: Triplet,
    pub premise: String,
    pub hypothesis: String,
}

pub fn build_hypothesis_pairs(sentence: &str, triplets: &[Triplet], config: &VerbalizerConfig) -> Vec<HypothesisPair> {
    triplets
        .iter()
        .map(|t| HypothesisPair {
            triplet: t.clone(),
            premise: sentence.to_string(),
            hypothesis: verbalize(t, config),
        })
        .collect()
}

pub fn score_pair(scorer: &dyn NliScorer, pair: &HypothesisPair) -> Result<NliScore, NliError> {
    let reply = scorer.score(&NliRequest {
        premise: pair.premise.clone(),
        hypothesis: pair.hypothesis.clone(),
    })?;
    reply.try_into()
}

/// One triplet to probe, with its labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeInput {
    pub dataset: String,
    pub model: String,
    pub sentence: String,
    pub triplet: Triplet,
    /// Human consensus label; absent when the vote tied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_label: Option<TripletLabel>,
    /// `wrong` means the pipeline discarded the triplet.
    pub pipeline_label: TripletLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    #[serde(flatten)]
    pub input: ProbeInput,
    pub hypothesis: String,
    pub score: NliScore,
}

impl ProbeItem {
    pub fn kept(&self) -> bool {
        self.input.pipeline_label != TripletLabel::Wrong
    }
}

/// Probe inputs for every real section-a item of a form, labeled with the
/// consensus of `responses` (already attention-filtered).
pub fn inputs_from_bundle(bundle: &AnnotationBundle, responses: &[AnnotationResponse]) -> Vec<ProbeInput> {
    let mine: Vec<&AnnotationResponse> = responses.iter().filter(|r| r.form_id == bundle.form_id).collect();
    let mut out = Vec::new();
    for s in &bundle.sentences {
        for item in s.section_a.iter().filter(|i| !bundle.is_attention(&i.id)) {
            let Some(pipeline_label) = item.model_label else {
                continue;
            };
            let votes: Vec<TripletLabel> = mine
                .iter()
                .filter_map(|r| r.triplet_classification.get(&item.id).copied())
                .collect();
            out.push(ProbeInput {
                dataset: s.dataset.clone().unwrap_or_else(|| "unknown".into()),
                model: s.model_id.clone().unwrap_or_else(|| "unknown".into()),
                sentence: s.sentence.clone(),
                triplet: item.triplet.clone(),
                human_label: majority_label(&votes),
                pipeline_label,
            });
        }
    }
    out
}

/// Scores every input, using up to `concurrency` worker threads. Output
/// order follows input order.
pub fn run_probe(
    inputs: &[ProbeInput],
    scorer: &dyn NliScorer,
    config: &VerbalizerConfig,
    concurrency: usize,
) -> Result<Vec<ProbeItem>, NliError> {
    let score_one = |input: &ProbeInput| -> Result<ProbeItem, NliError> {
        let pair = build_hypothesis_pairs(&input.sentence, std::slice::from_ref(&input.triplet), config)
            .pop()
            .expect("one pair per triplet");
        let score = score_pair(scorer, &pair)?;
        Ok(ProbeItem {
            input: input.clone(),
            hypothesis: pair.hypothesis,
            score,
        })
    };
    let workers = concurrency.clamp(1, inputs.len().max(1));
    if workers == 1 {
        return inputs.iter().map(score_one).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ProbeItem, NliError>>>> = Mutex::new(vec![None; inputs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(input) = inputs.get(i) else { break };
                let r = score_one(input);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    ByHumanLabel,
    ByPipelineLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLabel {
    Factual,
    Deducible,
    Wrong,
    A,
    B,
}

impl From<TripletLabel> for GroupLabel {
    fn from(l: TripletLabel) -> Self {
        match l {
            TripletLabel::Factual => GroupLabel::Factual,
            TripletLabel::Deducible => GroupLabel::Deducible,
            TripletLabel::Wrong => GroupLabel::Wrong,
        }
    }
}

impl GroupLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::Factual => "Factual",
            GroupLabel::Deducible => "Deducible",
            GroupLabel::Wrong => "Wrong",
            GroupLabel::A => "A",
            GroupLabel::B => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub dataset: String,
    pub model: String,
    pub group: GroupLabel,
    pub mean_p_ent: f64,
    pub mean_p_neu: f64,
    pub mean_p_con: f64,
    pub entail_rate: f64,
    pub n: usize,
}

fn aggregate<'a, I>(keyed: I) -> Vec<GroupAggregate>
where
    I: IntoIterator<Item = ((String, String, GroupLabel), &'a NliScore)>,
{
    let mut groups: BTreeMap<(String, String, GroupLabel), Vec<NliScore>> = BTreeMap::new();
    for (k, s) in keyed {
        groups.entry(k).or_default().push(*s);
    }
    groups
        .into_iter()
        .map(|((dataset, model, group), mut scores)| {
            // a fixed summation order makes the means independent of input order
            scores.sort_by(|a, b| {
                a.p_ent
                    .total_cmp(&b.p_ent)
                    .then(a.p_neu.total_cmp(&b.p_neu))
                    .then(a.p_con.total_cmp(&b.p_con))
            });
            let n = scores.len();
            let mean = |f: fn(&NliScore) -> f64| scores.iter().map(f).sum::<f64>() / n as f64;
            GroupAggregate {
                dataset,
                model,
                group,
                mean_p_ent: mean(|s| s.p_ent),
                mean_p_neu: mean(|s| s.p_neu),
                mean_p_con: mean(|s| s.p_con),
                entail_rate: scores.iter().filter(|s| s.is_entailment()).count() as f64 / n as f64,
                n,
            }
        })
        .collect()
}

/// Per-(dataset, model, label) means. Empty groups do not appear; items
/// without a human consensus are skipped when grouping by human label.
pub fn aggregate_check(items: &[ProbeItem], grouping: Grouping) -> Vec<GroupAggregate> {
    aggregate(items.iter().filter_map(|i| {
        let label = match grouping {
            Grouping::ByHumanLabel => i.input.human_label?,
            Grouping::ByPipelineLabel => i.input.pipeline_label,
        };
        Some(((i.input.dataset.clone(), i.input.model.clone(), label.into()), &i.score))
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisagreementGroups {
    /// Indices of items humans kept (factual or deducible) that the
    /// pipeline discarded.
    pub group_a: Vec<usize>,
    /// Indices of items humans labeled wrong that the pipeline kept.
    pub group_b: Vec<usize>,
}

pub fn select_disagreement_groups(items: &[ProbeItem]) -> DisagreementGroups {
    let mut g = DisagreementGroups::default();
    for (i, item) in items.iter().enumerate() {
        match (item.input.human_label, item.kept()) {
            (Some(TripletLabel::Factual | TripletLabel::Deducible), false) => g.group_a.push(i),
            (Some(TripletLabel::Wrong), true) => g.group_b.push(i),
            _ => {}
        }
    }
    g
}

pub fn aggregate_disagreement(items: &[ProbeItem]) -> Vec<GroupAggregate> {
    let g = select_disagreement_groups(items);
    let tagged = g
        .group_a
        .iter()
        .map(|&i| (i, GroupLabel::A))
        .chain(g.group_b.iter().map(|&i| (i, GroupLabel::B)));
    aggregate(tagged.map(|(i, label)| {
        let it = &items[i];
        ((it.input.dataset.clone(), it.input.model.clone(), label), &it.score)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub check1_by_human_label: Vec<GroupAggregate>,
    pub check2_by_pipeline_label: Vec<GroupAggregate>,
    pub check3_disagreement: Vec<GroupAggregate>,
    /// Group A and B items, for manual review.
    pub flagged: Vec<ProbeItem>,
}

impl ProbeReport {
    pub fn new(items: &[ProbeItem]) -> Self {
        let g = select_disagreement_groups(items);
        ProbeReport {
            check1_by_human_label: aggregate_check(items, Grouping::ByHumanLabel),
            check2_by_pipeline_label: aggregate_check(items, Grouping::ByPipelineLabel),
            check3_disagreement: aggregate_disagreement(items),
            flagged: g.group_a.iter().chain(&g.group_b).map(|&i| items[i].clone()).collect(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let sections = [
            ("Check 1: by human label", &self.check1_by_human_label),
            ("Check 2: by pipeline label", &self.check2_by_pipeline_label),
            ("Check 3: disagreement groups", &self.check3_disagreement),
        ];
        for (title, rows) in sections {
            let _ = writeln!(out, "{title}");
            let _ = writeln!(
                out,
                "{:<12} {:<20} {:<10} {:>8} {:>8} {:>8} {:>12} {:>5}",
                "dataset", "model", "group", "p_ent", "p_neu", "p_con", "entail_rate", "n"
            );
            for r in rows {
                let _ = writeln!(
                    out,
                    "{:<12} {:<20} {:<10} {:>8.3} {:>8.3} {:>8.3} {:>12.3} {:>5}",
                    r.dataset,
                    r.model,
                    r.group.as_str(),
                    r.mean_p_ent,
                    r.mean_p_neu,
                    r.mean_p_con,
                    r.entail_rate,
                    r.n
                );
            }
            out.push('\n');
        }
        out
    }
}
