//! Agreement metrics, significance tests and output-overlap classification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationResponse, DiscardAgreement, TripletLabel};
use crate::triplet::{Canonical, InferenceType, Triplet};

mod stats;
mod study;

pub use stats::{binomial_one_sided, chi_squared_homogeneity, t_test_vs_chance, Tail, TestResult};
pub use study::{
    evaluate, ingest_responses, AdditionSummary, ClosedSection, EvalReport, GroupReport, PolaritySection,
    RemovalSection, StrictnessTests,
};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no question has a human consensus")]
    EmptyDenominator,
    #[error("matrix has no counts")]
    EmptyMatrix,
    #[error("matrix is not square")]
    NotSquare,
    #[error("matrix cell {0} is negative or not finite")]
    InvalidCount(f64),
    #[error("empty sample")]
    EmptySample,
    #[error("category {category} is empty in both samples")]
    DegenerateTable { category: usize },
    #[error("{successes} successes out of {n} trials")]
    SuccessesExceedTrials { successes: u64, n: u64 },
    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),
    #[error("{0} observations, at least 2 needed")]
    TooFewObservations(usize),
    #[error("sample variance is zero")]
    ZeroVariance,
    #[error("semantic oracle: {0}")]
    Oracle(String),
    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },
}

/// Keeps only responses whose five attention checks all passed.
pub fn filter_attention_checks(responses: Vec<AnnotationResponse>) -> Vec<AnnotationResponse> {
    responses
        .into_iter()
        .filter(AnnotationResponse::passed_attention)
        .collect()
}

fn tally<L: Ord + Copy>(votes: &[L]) -> BTreeMap<L, usize> {
    let mut counts = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_insert(0) += 1;
    }
    counts
}

/// Strict plurality winner; `None` on a tie for first place or no votes.
pub fn majority_label<L: Ord + Copy>(votes: &[L]) -> Option<L> {
    let counts = tally(votes);
    let best = *counts.values().max()?;
    let mut winners = counts.iter().filter(|(_, &c)| c == best);
    let (&label, _) = winners.next()?;
    winners.next().is_none().then_some(label)
}

/// Share of votes held by the most frequent label, tie or not.
pub fn majority_share<L: Ord + Copy>(votes: &[L]) -> Option<f64> {
    let best = *tally(votes).values().max()?;
    Some(best as f64 / votes.len() as f64)
}

/// Fraction of questions where the model answer equals the human
/// consensus. Questions without consensus are left out.
pub fn compute_mha<L: PartialEq>(pairs: &[(L, Option<L>)]) -> Result<f64, EvalError> {
    let decided: Vec<_> = pairs.iter().filter_map(|(m, h)| h.as_ref().map(|h| (m, h))).collect();
    if decided.is_empty() {
        return Err(EvalError::EmptyDenominator);
    }
    let hits = decided.iter().filter(|(m, h)| m == h).count();
    Ok(hits as f64 / decided.len() as f64)
}

/// Cohen's kappa of a k x k agreement matrix (rows: rater one, columns:
/// rater two). Returns 1 when both observed and chance agreement are 1.
pub fn cohen_kappa<R: AsRef<[f64]>>(matrix: &[R]) -> Result<f64, EvalError> {
    let k = matrix.len();
    if matrix.iter().any(|r| r.as_ref().len() != k) {
        return Err(EvalError::NotSquare);
    }
    if let Some(&bad) = matrix
        .iter()
        .flat_map(|r| r.as_ref())
        .find(|c| !c.is_finite() || **c < 0.0)
    {
        return Err(EvalError::InvalidCount(bad));
    }
    let total: f64 = matrix.iter().flat_map(|r| r.as_ref()).sum();
    if total <= 0.0 {
        return Err(EvalError::EmptyMatrix);
    }
    let p_o = (0..k).map(|i| matrix[i].as_ref()[i]).sum::<f64>() / total;
    let p_e = (0..k)
        .map(|i| {
            let row: f64 = matrix[i].as_ref().iter().sum();
            let col: f64 = matrix.iter().map(|r| r.as_ref()[i]).sum();
            row * col
        })
        .sum::<f64>()
        / (total * total);
    if (1.0 - p_e).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Counts indexed `[model_label][human_label]` over factual, deducible,
/// wrong. A model label of wrong means the pipeline discarded the triplet.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix3 {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix3 {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Cell percentages over the whole matrix; they sum to 100.
    pub fn percentages(&self) -> [[f64; 3]; 3] {
        let total = self.total() as f64;
        let mut out = [[0.0; 3]; 3];
        if total > 0.0 {
            for (i, row) in self.counts.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    out[i][j] = 100.0 * *c as f64 / total;
                }
            }
        }
        out
    }

    /// Percentage of items the humans gave `label` (a column sum).
    pub fn human_rate(&self, label: TripletLabel) -> f64 {
        self.percentages().iter().map(|r| r[label.index()]).sum()
    }

    /// Percentage of items the model gave `label` (a row sum).
    pub fn model_rate(&self, label: TripletLabel) -> f64 {
        self.percentages()[label.index()].iter().sum()
    }

    pub fn model_counts(&self) -> [u64; 3] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn human_counts(&self) -> [u64; 3] {
        [0, 1, 2].map(|j| self.counts.iter().map(|r| r[j]).sum())
    }

    pub fn kappa(&self) -> Result<f64, EvalError> {
        let m: Vec<Vec<f64>> = self
            .counts
            .iter()
            .map(|r| r.iter().map(|&c| c as f64).collect())
            .collect();
        cohen_kappa(&m)
    }
}

/// Builds the matrix from aligned (model, human consensus) pairs; pairs
/// without consensus are skipped.
pub fn confusion_matrix(pairs: &[(TripletLabel, Option<TripletLabel>)]) -> ConfusionMatrix3 {
    let mut m = ConfusionMatrix3::default();
    for (model, human) in pairs {
        if let Some(h) = human {
            m.counts[model.index()][h.index()] += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarityConsensus {
    /// Mean agreement score in [-1, 1].
    pub raw_mean: f64,
    /// `(raw_mean + 1) / 2`, in [0, 1].
    pub normalized: f64,
    /// Humans concur with the model decision iff the raw mean is positive.
    pub concur: bool,
}

impl PolarityConsensus {
    /// From the shares of fully-agree and disagree answers.
    pub fn from_proportions(fully: f64, disagree: f64) -> Self {
        let raw_mean = fully - disagree;
        PolarityConsensus {
            raw_mean,
            normalized: (raw_mean + 1.0) / 2.0,
            concur: raw_mean > 0.0,
        }
    }
}

pub fn polarity_consensus(answers: &[DiscardAgreement]) -> Result<PolarityConsensus, EvalError> {
    if answers.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let n = answers.len() as f64;
    let count = |a| answers.iter().filter(|&&x| x == a).count() as f64;
    Ok(PolarityConsensus::from_proportions(
        count(DiscardAgreement::FullyAgree) / n,
        count(DiscardAgreement::Disagree) / n,
    ))
}

/// Humans agree with keeping a triplet iff fewer than half flag it.
pub fn removal_agreement(flags: &[bool]) -> Result<bool, EvalError> {
    if flags.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let flagged = flags.iter().filter(|&&f| f).count();
    Ok(2 * flagged < flags.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Semantic,
    None,
}

/// Yes/no judge of whether two triplets state the same thing.
pub trait SemanticOracle {
    fn equivalent(&self, a: &Triplet, b: &Triplet) -> Result<bool, EvalError>;
}

impl<F> SemanticOracle for F
where
    F: Fn(&Triplet, &Triplet) -> Result<bool, EvalError>,
{
    fn equivalent(&self, a: &Triplet, b: &Triplet) -> Result<bool, EvalError> {
        self(a, b)
    }
}

/// Oracle that never reports a semantic match, leaving exact matching only.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactOnly;

impl SemanticOracle for ExactOnly {
    fn equivalent(&self, _: &Triplet, _: &Triplet) -> Result<bool, EvalError> {
        Ok(false)
    }
}

pub fn classify_match(
    triplet: &Triplet,
    others: &[Triplet],
    oracle: &dyn SemanticOracle,
) -> Result<MatchKind, EvalError> {
    let canon = triplet.canonical();
    if others.iter().any(|o| o.canonical() == canon) {
        return Ok(MatchKind::Exact);
    }
    for o in others {
        if oracle.equivalent(triplet, o)? {
            return Ok(MatchKind::Semantic);
        }
    }
    Ok(MatchKind::None)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub n: usize,
    pub exact: f64,
    pub semantic: f64,
    pub none: f64,
}

/// Match-type shares of model A's triplets against model B's output.
pub fn model_overlap(a: &[Triplet], b: &[Triplet], oracle: &dyn SemanticOracle) -> Result<OverlapReport, EvalError> {
    let mut counts = [0usize; 3];
    for t in a {
        counts[classify_match(t, b, oracle)? as usize] += 1;
    }
    let n = a.len();
    let share = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(OverlapReport {
        n,
        exact: share(counts[0]),
        semantic: share(counts[1]),
        none: share(counts[2]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdditionCategory {
    /// Fact-type addition with no counterpart in the output.
    MissingExplicit,
    /// Non-fact addition with no counterpart in the output.
    MissingImplicit,
    /// Matches a triplet the model generated and then discarded.
    OverPruned,
    /// Matches a kept triplet, i.e. rewrites existing output.
    Modification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedAddition {
    pub triplet: Triplet,
    pub inference_type: InferenceType,
    pub category: AdditionCategory,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdditionReport {
    pub items: Vec<CategorizedAddition>,
    pub counts: BTreeMap<AdditionCategory, usize>,
    /// Share of additions matching a discarded triplet; absent when there
    /// are no additions.
    pub overlap_with_discarded: Option<f64>,
}

/// Classifies human additions. A match against discarded output wins over
/// a match against kept output.
pub fn categorize_additions(
    additions: &[(Triplet, InferenceType)],
    kept: &[Triplet],
    discarded: &[Triplet],
    oracle: &dyn SemanticOracle,
) -> Result<AdditionReport, EvalError> {
    let mut report = AdditionReport::default();
    for (t, ty) in additions {
        let category = if classify_match(t, discarded, oracle)? != MatchKind::None {
            AdditionCategory::OverPruned
        } else if classify_match(t, kept, oracle)? != MatchKind::None {
            AdditionCategory::Modification
        } else if *ty == InferenceType::Fact {
            AdditionCategory::MissingExplicit
        } else {
            AdditionCategory::MissingImplicit
        };
        *report.counts.entry(category).or_insert(0) += 1;
        report.items.push(CategorizedAddition {
            triplet: t.clone(),
            inference_type: *ty,
            category,
        });
    }
    if !additions.is_empty() {
        let over = report.counts.get(&AdditionCategory::OverPruned).copied().unwrap_or(0);
        report.overlap_with_discarded = Some(over as f64 / additions.len() as f64);
    }
    Ok(report)
}
