use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    binomial_one_sided, categorize_additions, chi_squared_homogeneity, compute_mha, confusion_matrix,
    filter_attention_checks, majority_label, majority_share, polarity_consensus, removal_agreement, t_test_vs_chance,
    AdditionCategory, ConfusionMatrix3, EvalError, SemanticOracle, Tail, TestResult,
};
use crate::annotation::{
    AnnotationBundle, AnnotationResponse, BundleSentence, DiscardAgreement, TripletLabel, ATTENTION_ITEMS,
    RESPONSE_SCHEMA_VERSION,
};
use crate::triplet::{InferenceType, Triplet};

pub const REPORT_SCHEMA_VERSION: &str = "1";

/// Reads one response per non-blank line. `schema_version` is mandatory.
pub fn ingest_responses(text: &str) -> Result<Vec<AnnotationResponse>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Ingest { line: line_no, message };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_str()) {
            None => return Err(err("missing schema_version".into())),
            Some(v) if v != RESPONSE_SCHEMA_VERSION => return Err(err(format!("unsupported schema_version {v:?}"))),
            Some(_) => {}
        }
        let r: AnnotationResponse = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        if r.attention_outcomes.len() != ATTENTION_ITEMS {
            return Err(err(format!(
                "attention_outcomes has {} entries, expected {ATTENTION_ITEMS}",
                r.attention_outcomes.len()
            )));
        }
        out.push(r);
    }
    Ok(out)
}

/// A closed question type compared by majority vote.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosedSection {
    pub n_items: usize,
    pub n_consensus: usize,
    pub mha: Option<f64>,
    pub kappa: Option<f64>,
    /// Mean share of votes held by each item's most frequent answer.
    pub consensus_rate: Option<f64>,
    pub chance: f64,
    pub t_test: Option<TestResult>,
    /// Share of items where the model answered "no clear relation", and
    /// the same for the human consensus. Timing only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_no_relation_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_no_relation_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix3>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolaritySection {
    pub n_items: usize,
    pub n_answers: usize,
    /// Share of items whose annotators concur with the model decision.
    pub mha: Option<f64>,
    /// Normalized polarity over all answers.
    pub mean_polarity: Option<f64>,
    pub fully_agree: Option<f64>,
    pub somewhat_agree: Option<f64>,
    pub disagree: Option<f64>,
    pub consensus_rate: Option<f64>,
    pub t_test: Option<TestResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemovalSection {
    pub n_items: usize,
    pub mha: Option<f64>,
    /// Share of items a majority flagged for removal.
    pub removal_rate: Option<f64>,
    pub consensus_rate: Option<f64>,
    pub t_test: Option<TestResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdditionSummary {
    pub total: usize,
    /// Median over (annotator, sentence) of the number of additions.
    pub median_per_sentence: Option<f64>,
    pub counts: BTreeMap<AdditionCategory, usize>,
    pub by_inference_type: BTreeMap<InferenceType, usize>,
    pub overlap_with_discarded: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StrictnessTests {
    pub model_wrong_rate: Option<f64>,
    pub human_wrong_rate: Option<f64>,
    /// Model label split vs human consensus split.
    pub chi_squared: Option<TestResult>,
    /// Human wrong count as successes against the model wrong rate, lower
    /// tail.
    pub binomial_p: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub dataset: String,
    pub model_id: String,
    pub n_sentences: usize,
    pub n_responses: usize,
    pub median_generated: Option<f64>,
    pub triplet_classification: ClosedSection,
    pub event_state: ClosedSection,
    pub timing: ClosedSection,
    pub icr_discard: PolaritySection,
    pub icr_reason: PolaritySection,
    pub icr_correction: PolaritySection,
    pub mec_removal: RemovalSection,
    pub additions: AdditionSummary,
    pub strictness: StrictnessTests,
    /// Metrics that could not be computed and why.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub retained_responses: usize,
    pub excluded_responses: usize,
    /// Responses naming a form no bundle was given for.
    pub unmatched_responses: usize,
    pub groups: Vec<GroupReport>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn ok_or_note<T>(r: Result<T, EvalError>, what: &str, notes: &mut Vec<String>) -> Option<T> {
    r.map_err(|e| notes.push(format!("{what}: {e}"))).ok()
}

/// Collected votes of one closed question.
struct Votes<L> {
    model: L,
    votes: Vec<L>,
}

#[derive(Default)]
struct Accumulator {
    sentences: usize,
    responses: BTreeSet<String>,
    generated: Vec<f64>,
    triplets: Vec<Votes<TripletLabel>>,
    events: Vec<Votes<crate::triplet::EventState>>,
    timing: Vec<Votes<crate::annotation::TimingLabel>>,
    discard: Vec<Vec<DiscardAgreement>>,
    reason: Vec<Vec<DiscardAgreement>>,
    correction: Vec<Vec<DiscardAgreement>>,
    removal: Vec<Vec<bool>>,
    additions: Vec<(Triplet, InferenceType, usize)>,
    per_sentence_additions: Vec<f64>,
    kept: Vec<Vec<Triplet>>,
    discarded: Vec<Vec<Triplet>>,
}

fn closed<L: Ord + Copy>(items: &[Votes<L>], options: usize, notes: &mut Vec<String>, what: &str) -> ClosedSection {
    let pairs: Vec<(L, Option<L>)> = items.iter().map(|v| (v.model, majority_label(&v.votes))).collect();
    let shares: Vec<f64> = items.iter().filter_map(|v| majority_share(&v.votes)).collect();
    let chance = 1.0 / options as f64;
    let mut s = ClosedSection {
        n_items: items.len(),
        n_consensus: pairs.iter().filter(|p| p.1.is_some()).count(),
        chance,
        consensus_rate: mean(&shares),
        ..ClosedSection::default()
    };
    if items.is_empty() {
        return s;
    }
    s.mha = ok_or_note(compute_mha(&pairs), &format!("{what} mha"), notes);
    let labels: BTreeSet<L> = pairs.iter().flat_map(|(m, h)| std::iter::once(*m).chain(*h)).collect();
    let labels: Vec<L> = labels.into_iter().collect();
    if labels.len() > 0 && s.n_consensus > 0 {
        let mut m = vec![vec![0.0; labels.len()]; labels.len()];
        for (model, human) in &pairs {
            if let Some(h) = human {
                let i = labels.binary_search(model).expect("label collected");
                let j = labels.binary_search(h).expect("label collected");
                m[i][j] += 1.0;
            }
        }
        s.kappa = ok_or_note(super::cohen_kappa(&m), &format!("{what} kappa"), notes);
    }
    s.t_test = ok_or_note(t_test_vs_chance(&shares, chance), &format!("{what} t-test"), notes);
    s
}

fn polarity(items: &[Vec<DiscardAgreement>], notes: &mut Vec<String>, what: &str) -> PolaritySection {
    let items: Vec<&Vec<DiscardAgreement>> = items.iter().filter(|v| !v.is_empty()).collect();
    let all: Vec<DiscardAgreement> = items.iter().flat_map(|v| v.iter().copied()).collect();
    let mut s = PolaritySection {
        n_items: items.len(),
        n_answers: all.len(),
        ..PolaritySection::default()
    };
    if items.is_empty() {
        return s;
    }
    let concur: Vec<bool> = items
        .iter()
        .filter_map(|v| polarity_consensus(v).ok().map(|p| p.concur))
        .collect();
    s.mha = Some(concur.iter().filter(|&&c| c).count() as f64 / concur.len() as f64);
    let n = all.len() as f64;
    let share = |a| all.iter().filter(|&&x| x == a).count() as f64 / n;
    s.fully_agree = Some(share(DiscardAgreement::FullyAgree));
    s.somewhat_agree = Some(share(DiscardAgreement::SomewhatAgree));
    s.disagree = Some(share(DiscardAgreement::Disagree));
    s.mean_polarity = polarity_consensus(&all).ok().map(|p| p.normalized);
    let shares: Vec<f64> = items.iter().filter_map(|v| majority_share(v)).collect();
    s.consensus_rate = mean(&shares);
    s.t_test = ok_or_note(t_test_vs_chance(&shares, 1.0 / 3.0), &format!("{what} t-test"), notes);
    s
}

fn collect_sentence(
    acc: &mut Accumulator,
    bundle: &AnnotationBundle,
    sentence: &BundleSentence,
    responses: &[&AnnotationResponse],
) {
    acc.sentences += 1;
    acc.responses.extend(responses.iter().map(|r| r.response_id.clone()));
    let real = || sentence.section_a.iter().filter(|i| !bundle.is_attention(&i.id));
    acc.generated.push(real().count() as f64);

    for item in real() {
        let Some(model) = item.model_label else { continue };
        let votes: Vec<_> = responses
            .iter()
            .filter_map(|r| r.triplet_classification.get(&item.id).copied())
            .collect();
        if !votes.is_empty() {
            acc.triplets.push(Votes { model, votes });
        }
    }
    for item in &sentence.section_c {
        let Some(model) = item.model_label else { continue };
        let votes: Vec<_> = responses
            .iter()
            .filter_map(|r| r.event_state.get(&item.id).copied())
            .collect();
        if !votes.is_empty() {
            acc.events.push(Votes { model, votes });
        }
    }
    for item in &sentence.section_d {
        let Some(model) = item.model_label else { continue };
        let votes: Vec<_> = responses
            .iter()
            .filter_map(|r| r.timing.get(&item.id).copied())
            .collect();
        if !votes.is_empty() {
            acc.timing.push(Votes { model, votes });
        }
    }
    for item in &sentence.section_b {
        let answers: Vec<_> = responses.iter().filter_map(|r| r.icr.get(&item.id)).collect();
        acc.discard.push(answers.iter().map(|a| a.discard_agreement).collect());
        acc.reason
            .push(answers.iter().filter_map(|a| a.reason_agreement).collect());
        acc.correction
            .push(answers.iter().filter_map(|a| a.correction_agreement).collect());
    }
    if !responses.is_empty() {
        for item in &sentence.section_e {
            acc.removal
                .push(responses.iter().map(|r| r.mec.removals.contains(&item.id)).collect());
        }
    }

    let slot = acc.kept.len();
    acc.kept
        .push(sentence.section_e.iter().map(|i| i.triplet.clone()).collect());
    acc.discarded.push(
        real()
            .filter(|i| i.model_label == Some(TripletLabel::Wrong))
            .map(|i| i.triplet.clone())
            .chain(sentence.section_b.iter().map(|i| i.triplet.clone()))
            .collect(),
    );
    for r in responses {
        let mine: Vec<_> = r
            .mec
            .additions
            .iter()
            .filter(|a| a.sentence_id == sentence.sentence_id)
            .collect();
        acc.per_sentence_additions.push(mine.len() as f64);
        acc.additions
            .extend(mine.into_iter().map(|a| (a.triplet.clone(), a.inference_type, slot)));
    }
}

fn finish(key: (String, String), mut acc: Accumulator, oracle: &dyn SemanticOracle) -> Result<GroupReport, EvalError> {
    let mut notes = Vec::new();
    let mut triplet_classification = closed(&acc.triplets, 3, &mut notes, "triplet classification");
    let pairs: Vec<_> = acc
        .triplets
        .iter()
        .map(|v| (v.model, majority_label(&v.votes)))
        .collect();
    let confusion = confusion_matrix(&pairs);

    let mut strictness = StrictnessTests::default();
    if confusion.total() > 0 {
        triplet_classification.confusion = Some(confusion);
        strictness.model_wrong_rate = Some(confusion.model_rate(TripletLabel::Wrong) / 100.0);
        strictness.human_wrong_rate = Some(confusion.human_rate(TripletLabel::Wrong) / 100.0);
        strictness.chi_squared = ok_or_note(
            chi_squared_homogeneity(confusion.model_counts(), confusion.human_counts()),
            "strictness chi-squared",
            &mut notes,
        );
        let human_wrong = confusion.human_counts()[TripletLabel::Wrong.index()];
        strictness.binomial_p = ok_or_note(
            binomial_one_sided(
                human_wrong,
                confusion.total(),
                strictness.model_wrong_rate.unwrap_or(0.0),
                Tail::Lower,
            ),
            "strictness binomial",
            &mut notes,
        );
    }

    let event_state = closed(&acc.events, 2, &mut notes, "event/state");
    let mut timing = closed(&acc.timing, 4, &mut notes, "timing");
    if !acc.timing.is_empty() {
        use crate::annotation::TimingLabel::NoClearRelation;
        let n = acc.timing.len() as f64;
        timing.model_no_relation_rate =
            Some(acc.timing.iter().filter(|v| v.model == NoClearRelation).count() as f64 / n);
        let decided: Vec<_> = acc.timing.iter().filter_map(|v| majority_label(&v.votes)).collect();
        if !decided.is_empty() {
            timing.human_no_relation_rate =
                Some(decided.iter().filter(|&&l| l == NoClearRelation).count() as f64 / decided.len() as f64);
        }
    }

    let icr_discard = polarity(&acc.discard, &mut notes, "icr discard");
    let icr_reason = polarity(&acc.reason, &mut notes, "icr reason");
    let icr_correction = polarity(&acc.correction, &mut notes, "icr correction");

    let mut mec_removal = RemovalSection {
        n_items: acc.removal.len(),
        ..RemovalSection::default()
    };
    let agree: Vec<bool> = acc.removal.iter().filter_map(|f| removal_agreement(f).ok()).collect();
    if !agree.is_empty() {
        let share = agree.iter().filter(|&&a| a).count() as f64 / agree.len() as f64;
        mec_removal.mha = Some(share);
        mec_removal.removal_rate = Some(1.0 - share);
        let shares: Vec<f64> = acc.removal.iter().filter_map(|f| majority_share(f)).collect();
        mec_removal.consensus_rate = mean(&shares);
        mec_removal.t_test = ok_or_note(t_test_vs_chance(&shares, 0.5), "mec removal t-test", &mut notes);
    }

    let mut additions = AdditionSummary {
        total: acc.additions.len(),
        median_per_sentence: median(&mut acc.per_sentence_additions),
        ..AdditionSummary::default()
    };
    let mut over = 0usize;
    for (t, ty, slot) in &acc.additions {
        let r = categorize_additions(&[(t.clone(), *ty)], &acc.kept[*slot], &acc.discarded[*slot], oracle)?;
        for (cat, n) in r.counts {
            *additions.counts.entry(cat).or_insert(0) += n;
            if cat == AdditionCategory::OverPruned {
                over += n;
            }
        }
        *additions.by_inference_type.entry(*ty).or_insert(0) += 1;
    }
    if additions.total > 0 {
        additions.overlap_with_discarded = Some(over as f64 / additions.total as f64);
    }

    Ok(GroupReport {
        dataset: key.0,
        model_id: key.1,
        n_sentences: acc.sentences,
        n_responses: acc.responses.len(),
        median_generated: median(&mut acc.generated),
        triplet_classification,
        event_state,
        timing,
        icr_discard,
        icr_reason,
        icr_correction,
        mec_removal,
        additions,
        strictness,
        notes,
    })
}

/// Computes every section metric per (dataset, model) group. Responses
/// failing an attention check are dropped first.
pub fn evaluate(
    bundles: &[AnnotationBundle],
    responses: Vec<AnnotationResponse>,
    oracle: &dyn SemanticOracle,
) -> Result<EvalReport, EvalError> {
    let total = responses.len();
    let retained = filter_attention_checks(responses);
    let forms: BTreeSet<&str> = bundles.iter().map(|b| b.form_id.as_str()).collect();
    let unmatched = retained.iter().filter(|r| !forms.contains(r.form_id.as_str())).count();

    let mut groups: BTreeMap<(String, String), Accumulator> = BTreeMap::new();
    for bundle in bundles {
        let mine: Vec<&AnnotationResponse> = retained.iter().filter(|r| r.form_id == bundle.form_id).collect();
        for sentence in &bundle.sentences {
            let key = (
                sentence.dataset.clone().unwrap_or_else(|| "unknown".into()),
                sentence.model_id.clone().unwrap_or_else(|| "unknown".into()),
            );
            collect_sentence(groups.entry(key).or_default(), bundle, sentence, &mine);
        }
    }
    let groups = groups
        .into_iter()
        .map(|(k, acc)| finish(k, acc, oracle))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        retained_responses: retained.len(),
        excluded_responses: total - retained.len(),
        unmatched_responses: unmatched,
        groups,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn pval(v: Option<f64>) -> String {
    match v {
        Some(p) if p < 0.001 => "<0.001".into(),
        Some(p) => format!("{p:.4}"),
        None => "-".into(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text tables: section agreement, output statistics, confusion
    /// matrices and consensus rates, one column per group.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "responses retained: {}  excluded by attention checks: {}  unmatched: {}\n",
            self.retained_responses, self.excluded_responses, self.unmatched_responses
        );
        let heads: Vec<String> = self
            .groups
            .iter()
            .map(|g| format!("{}/{}", g.dataset, g.model_id))
            .collect();
        let width = heads.iter().map(String::len).max().unwrap_or(0).max(10);
        let row = |out: &mut String, label: &str, cells: Vec<String>| {
            let _ = write!(out, "{label:<34}");
            for c in cells {
                let _ = write!(out, " {c:>width$}");
            }
            out.push('\n');
        };
        let each = |f: &dyn Fn(&GroupReport) -> String| self.groups.iter().map(f).collect::<Vec<_>>();

        out.push_str("Agreement by section\n");
        row(&mut out, "", heads.clone());
        row(
            &mut out,
            "triplet classification MHA",
            each(&|g| pct(g.triplet_classification.mha)),
        );
        row(
            &mut out,
            "triplet classification kappa",
            each(&|g| num(g.triplet_classification.kappa)),
        );
        row(&mut out, "event/state MHA", each(&|g| pct(g.event_state.mha)));
        row(&mut out, "event/state kappa", each(&|g| num(g.event_state.kappa)));
        row(&mut out, "timing MHA", each(&|g| pct(g.timing.mha)));
        row(&mut out, "timing kappa", each(&|g| num(g.timing.kappa)));
        row(&mut out, "ICR discard MHA", each(&|g| pct(g.icr_discard.mha)));
        row(&mut out, "ICR reason MHA", each(&|g| pct(g.icr_reason.mha)));
        row(&mut out, "ICR correction MHA", each(&|g| pct(g.icr_correction.mha)));
        row(&mut out, "MEC removal MHA", each(&|g| pct(g.mec_removal.mha)));

        out.push_str("\nOutput statistics\n");
        row(&mut out, "", heads.clone());
        row(
            &mut out,
            "generated triplets (median)",
            each(&|g| num(g.median_generated)),
        );
        row(
            &mut out,
            "human additions (median)",
            each(&|g| num(g.additions.median_per_sentence)),
        );
        row(
            &mut out,
            "additions overlapping discarded",
            each(&|g| pct(g.additions.overlap_with_discarded)),
        );
        row(
            &mut out,
            "human removal rate",
            each(&|g| pct(g.mec_removal.removal_rate)),
        );
        row(
            &mut out,
            "ICR average polarity",
            each(&|g| pct(g.icr_discard.mean_polarity)),
        );

        out.push_str("\nStrictness\n");
        row(&mut out, "", heads.clone());
        row(
            &mut out,
            "model wrong rate",
            each(&|g| pct(g.strictness.model_wrong_rate)),
        );
        row(
            &mut out,
            "human wrong rate",
            each(&|g| pct(g.strictness.human_wrong_rate)),
        );
        row(
            &mut out,
            "chi-squared p",
            each(&|g| pval(g.strictness.chi_squared.map(|t| t.p_value))),
        );
        row(
            &mut out,
            "binomial p (lower tail)",
            each(&|g| pval(g.strictness.binomial_p)),
        );

        out.push_str("\nHuman consensus\n");
        row(&mut out, "", heads.clone());
        row(
            &mut out,
            "triplet classification",
            each(&|g| pct(g.triplet_classification.consensus_rate)),
        );
        row(
            &mut out,
            "inference correction review",
            each(&|g| pct(g.icr_discard.consensus_rate)),
        );
        row(
            &mut out,
            "event/state classification",
            each(&|g| pct(g.event_state.consensus_rate)),
        );
        row(&mut out, "timing comparison", each(&|g| pct(g.timing.consensus_rate)));
        row(
            &mut out,
            "model error correction",
            each(&|g| pct(g.mec_removal.consensus_rate)),
        );

        for g in &self.groups {
            let Some(m) = g.triplet_classification.confusion else {
                continue;
            };
            let _ = writeln!(
                out,
                "\nConfusion matrix {}/{} (rows: model, columns: human)",
                g.dataset, g.model_id
            );
            let p = m.percentages();
            let _ = writeln!(out, "{:<10}{:>10}{:>10}{:>10}", "", "factual", "deducible", "wrong");
            for l in TripletLabel::ALL {
                let r = p[l.index()];
                let _ = writeln!(out, "{:<10}{:>9.1}%{:>9.1}%{:>9.1}%", l.as_str(), r[0], r[1], r[2]);
            }
        }
        for g in self.groups.iter().filter(|g| !g.notes.is_empty()) {
            let _ = writeln!(out, "\nnotes {}/{}:", g.dataset, g.model_id);
            for n in &g.notes {
                let _ = writeln!(out, "  {n}");
            }
        }
        out
    }
}
