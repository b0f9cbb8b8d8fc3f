//! Browser demo bindings: overlap-filter exploration, ROUGE-L scoring, and
//! attribution auditing over JSON string APIs.
//!
//! Each exported function takes and returns JSON text so the page needs no
//! generated TypeScript glue beyond the wasm-bindgen loader. The logic
//! lives in plain functions that compile and test natively; the
//! `#[wasm_bindgen]` wrappers only forward strings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use granurag::corpus::{ElementId, SynonymTable, UnmappedPolicy};
use granurag::detect::{filter_redundant, overlap_ratio, Detection, FilterConfig};
use granurag::evaluate::{
    attribution_metrics_sets, diagnose_sets, element_prf, rouge_l, Tokenization,
};
use granurag::generate::extract_citations;

fn error_json(message: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": message.to_string() }).to_string()
}

// ---------------------------------------------------------------------------
// Overlap filter explorer
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RemovedDetection {
    detection: Detection,
    /// Index into `retained` of the smaller-or-equal box that suppressed it.
    blocked_by: usize,
    ratio: f64,
}

#[derive(Serialize)]
struct FilterOutcome {
    retained: Vec<Detection>,
    removed: Vec<RemovedDetection>,
}

pub fn filter_detections_impl(
    detections_json: &str,
    overlap_threshold: f64,
    confidence_threshold: f64,
) -> Result<String, String> {
    let detections: Vec<Detection> =
        serde_json::from_str(detections_json).map_err(|e| format!("bad detections: {e}"))?;
    let config = FilterConfig {
        overlap_threshold,
        confidence_threshold,
    };
    config.validate().map_err(|e| e.to_string())?;
    let above_cut: Vec<Detection> = detections
        .iter()
        .filter(|d| d.confidence >= config.confidence_threshold)
        .cloned()
        .collect();
    let retained = filter_redundant(&above_cut, &config);
    let removed: Vec<RemovedDetection> = above_cut
        .iter()
        .filter(|d| !retained.contains(d))
        .map(|d| {
            let (blocked_by, ratio) = retained
                .iter()
                .enumerate()
                .filter(|(_, kept)| kept.bbox.area() <= d.bbox.area())
                .map(|(i, kept)| (i, overlap_ratio(&kept.bbox, &d.bbox)))
                .filter(|(_, r)| *r > config.overlap_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("every removed box has a suppressor");
            RemovedDetection {
                detection: d.clone(),
                blocked_by,
                ratio,
            }
        })
        .collect();
    serde_json::to_string(&FilterOutcome { retained, removed }).map_err(|e| e.to_string())
}

/// Applies the confidence cut and overlap-based redundancy filter.
/// Input: JSON array of `{box: [x0,y0,x1,y1], confidence, label}`.
#[wasm_bindgen]
pub fn filter_detections(
    detections_json: &str,
    overlap_threshold: f64,
    confidence_threshold: f64,
) -> String {
    filter_detections_impl(detections_json, overlap_threshold, confidence_threshold)
        .unwrap_or_else(error_json)
}

// ---------------------------------------------------------------------------
// ROUGE-L explorer
// ---------------------------------------------------------------------------

pub fn score_rouge_l_impl(
    candidate: &str,
    reference: &str,
    char_mode: bool,
) -> Result<String, String> {
    let tokenization = if char_mode {
        Tokenization::Character
    } else {
        Tokenization::Whitespace
    };
    let scores = rouge_l(candidate, reference, tokenization).map_err(|e| e.to_string())?;
    serde_json::to_string(&scores).map_err(|e| e.to_string())
}

/// ROUGE-L precision/recall/F1 between two texts.
#[wasm_bindgen]
pub fn score_rouge_l(candidate: &str, reference: &str, char_mode: bool) -> String {
    score_rouge_l_impl(candidate, reference, char_mode).unwrap_or_else(error_json)
}

// ---------------------------------------------------------------------------
// Attribution auditor
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct AuditInput {
    text: String,
    inventory: Vec<String>,
    #[serde(default)]
    synonyms: BTreeMap<String, String>,
    #[serde(default)]
    grounded: Vec<String>,
    #[serde(default)]
    gold: Vec<String>,
}

#[derive(Serialize)]
struct SentenceAudit {
    text: String,
    cited: Vec<String>,
}

#[derive(Serialize)]
struct AuditOutcome {
    sentences: Vec<SentenceAudit>,
    cited_union: Vec<String>,
    ap: Option<f64>,
    ar: Option<f64>,
    ucr: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: f64,
    detection_misses: Vec<String>,
    matching_false_positives: Vec<String>,
    hallucinated_citations: Vec<String>,
    omissions: Vec<String>,
}

pub fn audit_attribution_impl(input_json: &str) -> Result<String, String> {
    let input: AuditInput =
        serde_json::from_str(input_json).map_err(|e| format!("bad audit input: {e}"))?;
    let table = SynonymTable::from_pairs(input.synonyms, UnmappedPolicy::PassthroughFlagged)
        .map_err(|e| e.to_string())?;
    let inventory: Vec<ElementId> = input
        .inventory
        .iter()
        .map(|e| ElementId::from_raw(e))
        .collect();
    let to_set = |names: &[String]| -> BTreeSet<ElementId> {
        names.iter().map(|e| ElementId::from_raw(e)).collect()
    };
    let grounded = to_set(&input.grounded);
    let gold = to_set(&input.gold);

    let extraction = extract_citations(&input.text, &inventory, &table);
    let attribution = attribution_metrics_sets(&grounded, &extraction);
    let prf = element_prf(&grounded, &gold);
    let diagnosis = diagnose_sets(&gold, &grounded, &extraction.cited_union);

    let names = |set: &BTreeSet<ElementId>| -> Vec<String> {
        set.iter().map(|e| e.to_string()).collect()
    };
    let sentences = extraction
        .sentences
        .iter()
        .enumerate()
        .map(|(i, span)| SentenceAudit {
            text: span.slice(&input.text).to_string(),
            cited: extraction
                .cited
                .get(&i)
                .map(|set| names(set))
                .unwrap_or_default(),
        })
        .collect();
    let outcome = AuditOutcome {
        sentences,
        cited_union: names(&extraction.cited_union),
        ap: attribution.ap,
        ar: attribution.ar,
        ucr: attribution.ucr,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        detection_misses: names(&diagnosis.detection_misses),
        matching_false_positives: names(&diagnosis.matching_false_positives),
        hallucinated_citations: names(&diagnosis.hallucinated_citations),
        omissions: names(&diagnosis.omissions),
    };
    serde_json::to_string(&outcome).map_err(|e| e.to_string())
}

/// Extracts citations from generated text and audits attribution against
/// grounded and gold element sets. Input: JSON object
/// `{text, inventory[], synonyms{}, grounded[], gold[]}`.
#[wasm_bindgen]
pub fn audit_attribution(input_json: &str) -> String {
    audit_attribution_impl(input_json).unwrap_or_else(error_json)
}
