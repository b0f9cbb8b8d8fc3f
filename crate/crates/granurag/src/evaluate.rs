//! Evaluation metrics: ROUGE-L, greedy embedding F1, the judge ensemble,
//! attribution metrics, element P/R/F1, Fleiss' kappa, win/loss
//! aggregation, and the three-way stage diagnosis.
//!
//! Degenerate denominators are reported as null rather than zero so that
//! aggregate tables exclude them instead of being biased by them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    chat_complete, BackendError, ChatBackend, ChatRequest, EmbedInput, EmbeddingBackend,
    ResponseCache, RetryPolicy,
};
use crate::corpus::ElementId;
use crate::generate::CitationExtraction;
use crate::ground::GroundedElementSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("text is empty after tokenization")]
    EmptyText,
    #[error("invalid rating matrix: {0}")]
    InvalidMatrix(String),
    #[error("all ratings fall in one category; agreement is degenerate")]
    DegenerateAgreement,
    #[error("no judge produced a parseable response")]
    JudgeFailure,
    #[error("judge list is empty")]
    NoJudges,
    #[error("votes list is empty")]
    EmptyVotes,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

/// Token unit for text metrics. Character tokenization is the default for
/// Chinese corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    #[default]
    Character,
    Whitespace,
}

pub fn tokenize(text: &str, tokenization: Tokenization) -> Vec<String> {
    match tokenization {
        Tokenization::Character => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        Tokenization::Whitespace => text.split_whitespace().map(String::from).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            current[j + 1] = if token_a == token_b {
                prev[j] + 1
            } else {
                prev[j + 1].max(current[j])
            };
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()]
}

/// ROUGE-L: longest-common-subsequence precision, recall, and F1 (beta = 1).
pub fn rouge_l(
    candidate: &str,
    reference: &str,
    tokenization: Tokenization,
) -> Result<RougeScores, EvalError> {
    let cand = tokenize(candidate, tokenization);
    let reference = tokenize(reference, tokenization);
    if cand.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyText);
    }
    let lcs = lcs_length(&cand, &reference) as f64;
    let precision = lcs / cand.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RougeScores {
        precision,
        recall,
        f1,
    })
}

// ---------------------------------------------------------------------------
// Greedy embedding F1
// ---------------------------------------------------------------------------

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += f64::from(*x) * f64::from(*y);
        norm_a += f64::from(*x) * f64::from(*x);
        norm_b += f64::from(*y) * f64::from(*y);
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        0.0
    } else {
        dot / (norm_a.sqrt() * norm_b.sqrt())
    }
}

/// Greedy token-matching F1 over embeddings: each candidate token matches
/// its max-cosine reference token (precision side) and vice versa (recall
/// side); F1 is their harmonic mean.
pub fn embedding_f1(
    candidate_tokens: &[String],
    reference_tokens: &[String],
    embedder: &dyn EmbeddingBackend,
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<RougeScores, EvalError> {
    if candidate_tokens.is_empty() || reference_tokens.is_empty() {
        return Err(EvalError::EmptyText);
    }
    let to_inputs = |tokens: &[String]| -> Vec<EmbedInput> {
        tokens.iter().cloned().map(EmbedInput::Text).collect()
    };
    let cand_vectors = crate::backends::embed(embedder, &to_inputs(candidate_tokens), policy, cache)?;
    let ref_vectors =
        crate::backends::embed(embedder, &to_inputs(reference_tokens), policy, cache)?;
    let best_against = |from: &[Vec<f32>], against: &[Vec<f32>]| -> f64 {
        from.iter()
            .map(|v| {
                against
                    .iter()
                    .map(|w| cosine(v, w))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let precision = best_against(&cand_vectors, &ref_vectors);
    let recall = best_against(&ref_vectors, &cand_vectors);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RougeScores {
        precision,
        recall,
        f1,
    })
}

// ---------------------------------------------------------------------------
// Judge ensemble
// ---------------------------------------------------------------------------

/// One judge's raw sub-scores, each on 0-100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricScores {
    pub coverage: f64,
    pub faithfulness: f64,
    pub cohesion: f64,
}

impl RubricScores {
    /// Rubric weighting: coverage 40%, faithfulness 40%, cohesion 20%.
    pub fn weighted(&self) -> f64 {
        0.4 * self.coverage + 0.4 * self.faithfulness + 0.2 * self.cohesion
    }
}

/// Ensemble judge score: per-judge sub-scores, their weighted values, and
/// the final mean across judges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub per_judge: Vec<RubricScores>,
    pub weighted_per_judge: Vec<f64>,
    #[serde(rename = "final")]
    pub final_score: f64,
    /// Ids of judges whose responses stayed unparseable after a retry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_judges: Vec<String>,
}

/// Extracts the three sub-scores from a judge response, tolerating
/// surrounding prose. Each rubric field must appear on some line with a
/// number in [0, 100].
pub fn parse_judge_response(text: &str) -> Option<RubricScores> {
    let find = |field: &str| -> Option<f64> {
        for line in text.lines() {
            let lower = line.to_lowercase();
            if let Some(pos) = lower.find(field) {
                let tail = &line[pos + field.len()..];
                let number: String = tail
                    .chars()
                    .skip_while(|c| !c.is_ascii_digit())
                    .take_while(|c| c.is_ascii_digit() || *c == '.')
                    .collect();
                if let Ok(value) = number.parse::<f64>() {
                    if (0.0..=100.0).contains(&value) {
                        return Some(value);
                    }
                }
            }
        }
        None
    };
    Some(RubricScores {
        coverage: find("coverage")?,
        faithfulness: find("faithfulness")?,
        cohesion: find("cohesion")?,
    })
}

/// Scores one output against its reference with a judge ensemble.
///
/// Each judge is prompted once with the pinned rubric template; an
/// unparseable response is retried once with a format reminder, then the
/// judge is excluded. The final score is the mean of the remaining judges'
/// weighted scores.
pub fn judge_score(
    output: &str,
    reference: &str,
    judges: &[&dyn ChatBackend],
    rubric_template: &str,
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<JudgeScore, EvalError> {
    if judges.is_empty() {
        return Err(EvalError::NoJudges);
    }
    let prompt = rubric_template
        .replace("{OUTPUT}", output)
        .replace("{REFERENCE}", reference);
    let mut per_judge = Vec::new();
    let mut excluded = Vec::new();
    for judge in judges {
        let response = chat_complete(*judge, &ChatRequest::text(prompt.clone()), policy, cache)?;
        let parsed = match parse_judge_response(&response) {
            Some(scores) => Some(scores),
            None => {
                // Retry with a format reminder; the changed prompt also
                // bypasses any cached unparseable response.
                let retry_prompt = format!(
                    "{prompt}\n\nYour previous reply could not be parsed. Reply with exactly the three lines in the requested form."
                );
                let retry =
                    chat_complete(*judge, &ChatRequest::text(retry_prompt), policy, cache)?;
                parse_judge_response(&retry)
            }
        };
        match parsed {
            Some(scores) => per_judge.push(scores),
            None => excluded.push(judge.id().to_string()),
        }
    }
    if per_judge.is_empty() {
        return Err(EvalError::JudgeFailure);
    }
    let weighted: Vec<f64> = per_judge.iter().map(RubricScores::weighted).collect();
    let final_score = weighted.iter().sum::<f64>() / weighted.len() as f64;
    Ok(JudgeScore {
        per_judge,
        weighted_per_judge: weighted,
        final_score,
        excluded_judges: excluded,
    })
}

// ---------------------------------------------------------------------------
// Attribution metrics
// ---------------------------------------------------------------------------

/// Attribution precision, recall, and unsupported claim rate. A field is
/// null when its denominator is empty (nothing cited, nothing grounded, or
/// zero sentences).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributionMetrics {
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    pub ucr: Option<f64>,
}

/// Computes attribution metrics from the grounded set and the citations
/// extracted from the same output text:
/// AP = |cited ∩ grounded| / |cited|, AR = |cited ∩ grounded| / |grounded|,
/// UCR = uncited sentences / sentences.
pub fn attribution_metrics(
    grounded: &GroundedElementSet,
    citations: &CitationExtraction,
) -> AttributionMetrics {
    attribution_metrics_sets(&grounded.elements, citations)
}

/// Set-level variant used by diagnostics and demos.
pub fn attribution_metrics_sets(
    grounded: &BTreeSet<ElementId>,
    citations: &CitationExtraction,
) -> AttributionMetrics {
    let cited = &citations.cited_union;
    let hits = cited.intersection(grounded).count() as f64;
    let ap = (!cited.is_empty()).then(|| hits / cited.len() as f64);
    let ar = (!grounded.is_empty()).then(|| hits / grounded.len() as f64);
    let total = citations.sentence_count();
    let ucr = (total > 0).then(|| citations.unsupported_count() as f64 / total as f64);
    AttributionMetrics { ap, ar, ucr }
}

// ---------------------------------------------------------------------------
// Element precision/recall/F1
// ---------------------------------------------------------------------------

/// Set precision/recall/F1 with null degenerate denominators; F1 treats
/// nulls as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: f64,
}

/// Standard set P/R/F1 between predicted and gold element sets. Both sets
/// must be canonical so equality is not defeated by lexical variants.
pub fn element_prf(predicted: &BTreeSet<ElementId>, gold: &BTreeSet<ElementId>) -> PrfScores {
    let hits = predicted.intersection(gold).count() as f64;
    let precision = (!predicted.is_empty()).then(|| hits / predicted.len() as f64);
    let recall = (!gold.is_empty()).then(|| hits / gold.len() as f64);
    let p = precision.unwrap_or(0.0);
    let r = recall.unwrap_or(0.0);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    PrfScores {
        precision,
        recall,
        f1,
    }
}

// ---------------------------------------------------------------------------
// Fleiss' kappa
// ---------------------------------------------------------------------------

/// Fleiss' kappa over an items x categories count matrix where every row
/// sums to the rater count.
///
/// Returns exactly 1.0 when observed agreement is perfect across more than
/// one used category; when all ratings fall into a single category,
/// expected agreement is 1 and the statistic is undefined
/// ([`EvalError::DegenerateAgreement`]).
pub fn fleiss_kappa(counts: &[Vec<usize>], raters_per_item: usize) -> Result<f64, EvalError> {
    if counts.len() < 2 {
        return Err(EvalError::InvalidMatrix(
            "need at least 2 items".to_string(),
        ));
    }
    if raters_per_item < 2 {
        return Err(EvalError::InvalidMatrix(
            "need at least 2 raters per item".to_string(),
        ));
    }
    let categories = counts[0].len();
    if categories == 0 {
        return Err(EvalError::InvalidMatrix("no categories".to_string()));
    }
    for (i, row) in counts.iter().enumerate() {
        if row.len() != categories {
            return Err(EvalError::InvalidMatrix(format!(
                "row {i} has {} categories, expected {categories}",
                row.len()
            )));
        }
        let sum: usize = row.iter().sum();
        if sum != raters_per_item {
            return Err(EvalError::InvalidMatrix(format!(
                "row {i} sums to {sum}, expected {raters_per_item}"
            )));
        }
    }
    let n_items = counts.len() as f64;
    let n = raters_per_item as f64;
    // Per-item observed agreement.
    let p_bar = counts
        .iter()
        .map(|row| {
            let sq: f64 = row.iter().map(|&c| (c * c) as f64).sum();
            (sq - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / n_items;
    // Category marginals.
    let p_e_bar: f64 = (0..categories)
        .map(|j| {
            let share = counts.iter().map(|row| row[j] as f64).sum::<f64>() / (n_items * n);
            share * share
        })
        .sum();
    if p_e_bar >= 1.0 {
        return Err(EvalError::DegenerateAgreement);
    }
    if p_bar == 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e_bar) / (1.0 - p_e_bar))
}

// ---------------------------------------------------------------------------
// Pairwise win/loss aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    System,
    Baseline,
}

/// One pairwise preference vote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub item: String,
    pub rater: String,
    pub winner: Winner,
}

/// Win/loss rates in percent; they sum to 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinLoss {
    pub win_rate: f64,
    pub loss_rate: f64,
    pub total_votes: usize,
}

pub fn win_loss_aggregate(votes: &[Vote]) -> Result<WinLoss, EvalError> {
    if votes.is_empty() {
        return Err(EvalError::EmptyVotes);
    }
    let wins = votes.iter().filter(|v| v.winner == Winner::System).count();
    let total = votes.len();
    let win_rate = wins as f64 / total as f64 * 100.0;
    Ok(WinLoss {
        win_rate,
        loss_rate: 100.0 - win_rate,
        total_votes: total,
    })
}

// ---------------------------------------------------------------------------
// Stage diagnosis
// ---------------------------------------------------------------------------

/// Per-stage error attribution from the three element sets: missing
/// information indicates detection failure, spurious grounded elements
/// indicate matching error, and uncited or uncovered claims indicate
/// generation problems.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiagnosisReport {
    /// In the gold visible set but never grounded.
    pub detection_misses: BTreeSet<ElementId>,
    /// Grounded but not actually visible per the gold labels.
    pub matching_false_positives: BTreeSet<ElementId>,
    /// Cited in the output without grounded evidence.
    pub hallucinated_citations: BTreeSet<ElementId>,
    /// Grounded but never cited in the output.
    pub omissions: BTreeSet<ElementId>,
}

impl DiagnosisReport {
    pub fn is_clean(&self) -> bool {
        self.detection_misses.is_empty()
            && self.matching_false_positives.is_empty()
            && self.hallucinated_citations.is_empty()
            && self.omissions.is_empty()
    }
}

/// Computes the four defining set differences from gold, grounded, and
/// cited element sets (all canonical).
pub fn diagnose_sets(
    gt_visible: &BTreeSet<ElementId>,
    grounded: &BTreeSet<ElementId>,
    cited: &BTreeSet<ElementId>,
) -> DiagnosisReport {
    DiagnosisReport {
        detection_misses: gt_visible.difference(grounded).cloned().collect(),
        matching_false_positives: grounded.difference(gt_visible).cloned().collect(),
        hallucinated_citations: cited.difference(grounded).cloned().collect(),
        omissions: grounded.difference(cited).cloned().collect(),
    }
}

/// Diagnosis over the pipeline's own record, grounded set, and citations.
pub fn diagnose(
    record: &crate::corpus::ImageRecord,
    grounded: &GroundedElementSet,
    citations: &CitationExtraction,
) -> DiagnosisReport {
    diagnose_sets(&record.gt_visible, &grounded.elements, &citations.cited_union)
}
