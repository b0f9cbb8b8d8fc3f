//! Two-level knowledge corpus: landmarks with element inventories and
//! per-element descriptions, plus image records carrying ground-truth
//! visible-element sets.
//!
//! Landmark documents follow a fixed JSON layout (one object per landmark,
//! or an array of them):
//!
//! ```json
//! {
//!   "Landmarks": "Harbor Fort Lighthouse",
//!   "Summary": "...",
//!   "Style": "...",
//!   "Elements": ["lantern room", "granite base"],
//!   "ElementDescriptions": { "lantern room": "...", "granite base": "..." },
//!   "AppearanceDescriptions": { "lantern room": "...", "granite base": "..." },
//!   "Image": "images/fort_rep.png"
//! }
//! ```
//!
//! `AppearanceDescriptions` is optional; when absent, the element
//! descriptions double as appearance text. Image records live in a sidecar
//! JSON array of `{image_id, path, landmark, visible_elements, view_type?,
//! reference?}` objects.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Errors from corpus parsing, normalization, and statistics.
#[derive(Debug, Error)]
pub enum CorpusError {
    /// The input is not well-formed JSON. Carries the position serde reported.
    #[error("malformed corpus document at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    /// The document parsed but violates type invariants. Every violation is
    /// listed, not just the first.
    #[error("corpus validation failed with {} violation(s)", report.violations.len())]
    Validation { report: ValidationReport },
    /// A raw term was empty after trimming.
    #[error("element name is empty after trimming")]
    InvalidInput,
    /// A term was not in the synonym table and the table's policy rejects
    /// unmapped terms.
    #[error("term {0:?} is not in the synonym table (policy: reject)")]
    UnmappedTerm(String),
    /// A synonym mapping would break idempotence (a canonical key mapping to
    /// a different canonical key).
    #[error("synonym mapping {raw:?} -> {canonical:?} breaks idempotence via {conflict:?}")]
    IdempotenceViolation {
        raw: String,
        canonical: String,
        conflict: String,
    },
    /// coverage_ratio over a landmark whose element inventory is empty.
    #[error("landmark {0:?} has an empty element inventory")]
    DegenerateInventory(String),
    /// Statistics requested over a corpus with no landmarks.
    #[error("corpus contains no landmarks")]
    EmptyCorpus,
    /// An image record references a landmark id absent from the corpus.
    #[error("image {image_id:?} references unknown landmark {landmark_id:?}")]
    UnknownLandmark {
        image_id: String,
        landmark_id: String,
    },
}

/// Canonical identifier of an architectural element.
///
/// Always stored post-normalization: NFC, case-folded, internal whitespace
/// collapsed. Construct via [`ElementId::from_raw`] or a synonym-table lookup.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementId(String);

impl ElementId {
    /// Canonicalizes a raw term into an id (no synonym mapping applied).
    pub fn from_raw(raw: &str) -> Self {
        ElementId(canonical_key(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical key form: Unicode NFC, case-folded, internal whitespace
/// collapsed to single spaces, trimmed.
pub fn canonical_key(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Camera distance class of an image record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewType {
    Panoramic,
    MidRange,
    CloseUp,
    #[default]
    Unknown,
}

impl fmt::Display for ViewType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViewType::Panoramic => "panoramic",
            ViewType::MidRange => "mid_range",
            ViewType::CloseUp => "close_up",
            ViewType::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

/// One knowledge-corpus entry: metadata, element inventory, and per-element
/// description texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    /// Canonical string key (the canonicalized display name).
    pub id: String,
    /// Display name as written in the source document.
    pub name: String,
    pub summary: String,
    pub style: String,
    /// Ordered element inventory (insertion order is preserved and
    /// significant for deterministic output).
    pub elements: Vec<ElementId>,
    /// Expert-written paragraph per element, retrieved as generation evidence.
    pub element_descriptions: BTreeMap<ElementId, String>,
    /// Visual-attribute text per element, used for region matching. Falls
    /// back to `element_descriptions` when the source omits it.
    pub appearance_descriptions: BTreeMap<ElementId, String>,
    /// Optional representative image reference.
    pub representative_image: Option<String>,
}

impl Landmark {
    /// Appearance text for `element`, falling back to the element description.
    pub fn appearance_of(&self, element: &ElementId) -> Option<&str> {
        self.appearance_descriptions
            .get(element)
            .or_else(|| self.element_descriptions.get(element))
            .map(String::as_str)
    }
}

/// An image, its source landmark, and its ground-truth visible element set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// File path (or opaque handle) to the image bytes.
    pub image_ref: String,
    /// Canonical id of the owning landmark.
    pub landmark_id: String,
    /// Elements visually identifiable in this view (subset of the owning
    /// landmark's inventory).
    pub gt_visible: BTreeSet<ElementId>,
    #[serde(default)]
    pub view_type: ViewType,
    /// Optional gold reference text for this view; reference-based metrics
    /// are skipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

/// What to do with terms absent from a [`SynonymTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnmappedPolicy {
    /// Unknown terms pass through in canonical key form, flagged as unmapped.
    #[default]
    PassthroughFlagged,
    /// Unknown terms are rejected with [`CorpusError::UnmappedTerm`].
    Reject,
}

/// Raw-term to canonical-element mapping with enforced idempotence: a mapped
/// canonical key never maps onward to a different key.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynonymTable {
    canonical_of: BTreeMap<String, ElementId>,
    #[serde(default)]
    pub unmapped_policy: UnmappedPolicy,
}

impl SynonymTable {
    pub fn new(policy: UnmappedPolicy) -> Self {
        SynonymTable {
            canonical_of: BTreeMap::new(),
            unmapped_policy: policy,
        }
    }

    /// Builds a table from (raw, canonical) pairs, canonicalizing both sides.
    pub fn from_pairs<I, A, B>(pairs: I, policy: UnmappedPolicy) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut table = SynonymTable::new(policy);
        for (raw, canonical) in pairs {
            table.insert(raw.as_ref(), canonical.as_ref())?;
        }
        Ok(table)
    }

    /// Parses a JSON object of raw -> canonical strings.
    pub fn from_json(bytes: &[u8], policy: UnmappedPolicy) -> Result<Self, CorpusError> {
        let map: BTreeMap<String, String> = serde_json::from_slice(bytes).map_err(parse_error)?;
        Self::from_pairs(map, policy)
    }

    /// Inserts one mapping, rejecting anything that would break idempotence.
    pub fn insert(&mut self, raw: &str, canonical: &str) -> Result<(), CorpusError> {
        let key = canonical_key(raw);
        let target = ElementId::from_raw(canonical);
        // The target, looked up as a key, must not map away from itself.
        if let Some(existing) = self.canonical_of.get(target.as_str()) {
            if existing != &target {
                return Err(CorpusError::IdempotenceViolation {
                    raw: raw.to_string(),
                    canonical: canonical.to_string(),
                    conflict: existing.to_string(),
                });
            }
        }
        // No existing entry may target the new key unless the new entry is
        // the identity for it.
        if key != target.as_str() {
            if let Some((prior_raw, _)) = self
                .canonical_of
                .iter()
                .find(|(k, v)| v.as_str() == key && *k != v.as_str())
            {
                return Err(CorpusError::IdempotenceViolation {
                    raw: raw.to_string(),
                    canonical: canonical.to_string(),
                    conflict: prior_raw.clone(),
                });
            }
        }
        self.canonical_of.insert(key, target);
        Ok(())
    }

    pub fn lookup(&self, canonical_key: &str) -> Option<&ElementId> {
        self.canonical_of.get(canonical_key)
    }

    pub fn len(&self) -> usize {
        self.canonical_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical_of.is_empty()
    }

    /// Iterates (raw key, canonical id) pairs in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &ElementId)> {
        self.canonical_of.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Maps a raw term to a canonical element id.
///
/// The raw term is canonicalized (NFC, case fold, whitespace collapse) before
/// the table lookup. Returns the mapped id and whether the table contained
/// it; unmapped terms follow the table's [`UnmappedPolicy`].
pub fn normalize_element_name(
    raw: &str,
    table: &SynonymTable,
) -> Result<(ElementId, bool), CorpusError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(CorpusError::InvalidInput);
    }
    let key = canonical_key(trimmed);
    if let Some(canonical) = table.lookup(&key) {
        return Ok((canonical.clone(), true));
    }
    match table.unmapped_policy {
        UnmappedPolicy::PassthroughFlagged => Ok((ElementId(key), false)),
        UnmappedPolicy::Reject => Err(CorpusError::UnmappedTerm(raw.to_string())),
    }
}

/// One invariant violation, addressed by field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Dotted path to the offending field, e.g. `meta.summary` or
    /// `images[img_3].visible_elements`.
    pub path: String,
    pub message: String,
}

/// Collected invariant violations; empty iff every invariant holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn extend_prefixed(&mut self, prefix: &str, other: ValidationReport) {
        for v in other.violations {
            self.violations.push(Violation {
                path: format!("{prefix}.{}", v.path),
                message: v.message,
            });
        }
    }
}

/// Corpus-level summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub landmark_count: usize,
    pub image_count: usize,
    pub avg_images_per_landmark: f64,
    pub unique_element_count: usize,
    pub avg_elements_per_landmark: f64,
    /// Mean of per-image coverage ratios |gt_visible| / |elements|.
    pub coverage_mean: f64,
    pub coverage_median: f64,
    pub coverage_by_view: BTreeMap<ViewType, f64>,
}

/// Rounds to two decimals, the precision used in reports.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RawLandmark {
    #[serde(rename = "Landmarks")]
    name: String,
    #[serde(rename = "Summary")]
    summary: String,
    #[serde(rename = "Style")]
    style: String,
    #[serde(rename = "Elements")]
    elements: Vec<String>,
    #[serde(rename = "ElementDescriptions")]
    element_descriptions: BTreeMap<String, String>,
    #[serde(rename = "AppearanceDescriptions", default)]
    appearance_descriptions: Option<BTreeMap<String, String>>,
    #[serde(rename = "Image", default)]
    image: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCorpus {
    One(RawLandmark),
    Many(Vec<RawLandmark>),
}

#[derive(Serialize, Deserialize)]
struct RawImageRecord {
    image_id: String,
    path: String,
    landmark: String,
    visible_elements: Vec<String>,
    #[serde(default)]
    view_type: ViewType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
}

fn parse_error(err: serde_json::Error) -> CorpusError {
    CorpusError::Parse {
        line: err.line(),
        column: err.column(),
        message: err.to_string(),
    }
}

impl From<RawLandmark> for Landmark {
    fn from(raw: RawLandmark) -> Self {
        let elements: Vec<ElementId> = raw
            .elements
            .iter()
            .map(|e| ElementId::from_raw(e))
            .collect();
        let canon_map = |m: BTreeMap<String, String>| {
            m.into_iter()
                .map(|(k, v)| (ElementId::from_raw(&k), v))
                .collect::<BTreeMap<_, _>>()
        };
        let element_descriptions = canon_map(raw.element_descriptions);
        let appearance_descriptions = match raw.appearance_descriptions {
            Some(m) => canon_map(m),
            None => element_descriptions.clone(),
        };
        Landmark {
            id: canonical_key(&raw.name),
            name: raw.name,
            summary: raw.summary,
            style: raw.style,
            elements,
            element_descriptions,
            appearance_descriptions,
            representative_image: raw.image,
        }
    }
}

/// Parses landmark documents (a single object or an array) without
/// validating invariants.
pub fn parse_landmarks(bytes: &[u8]) -> Result<Vec<Landmark>, CorpusError> {
    let raw: RawCorpus = serde_json::from_slice(bytes).map_err(parse_error)?;
    let raws = match raw {
        RawCorpus::One(l) => vec![l],
        RawCorpus::Many(ls) => ls,
    };
    Ok(raws.into_iter().map(Landmark::from).collect())
}

/// Parses the image-record sidecar (a JSON array) without validation.
pub fn parse_image_records(bytes: &[u8]) -> Result<Vec<ImageRecord>, CorpusError> {
    let raws: Vec<RawImageRecord> = serde_json::from_slice(bytes).map_err(parse_error)?;
    Ok(raws
        .into_iter()
        .map(|r| ImageRecord {
            image_id: r.image_id,
            image_ref: r.path,
            landmark_id: canonical_key(&r.landmark),
            gt_visible: r
                .visible_elements
                .iter()
                .map(|e| ElementId::from_raw(e))
                .collect(),
            view_type: r.view_type,
            reference: r.reference,
        })
        .collect())
}

/// Parses and validates a corpus document plus an optional image sidecar.
///
/// Either every returned record satisfies its type invariants, or a
/// [`CorpusError::Validation`] carrying *every* violation is returned.
pub fn parse_corpus(
    landmark_bytes: &[u8],
    image_bytes: Option<&[u8]>,
) -> Result<(Vec<Landmark>, Vec<ImageRecord>), CorpusError> {
    let landmarks = parse_landmarks(landmark_bytes)?;
    let images = match image_bytes {
        Some(bytes) => parse_image_records(bytes)?,
        None => Vec::new(),
    };
    let report = validate_corpus(&landmarks, &images);
    if report.is_clean() {
        Ok((landmarks, images))
    } else {
        Err(CorpusError::Validation { report })
    }
}

/// Serializes landmarks back to the documented JSON layout (array form).
pub fn serialize_landmarks(landmarks: &[Landmark]) -> serde_json::Value {
    let docs: Vec<serde_json::Value> = landmarks
        .iter()
        .map(|l| {
            let mut obj = serde_json::Map::new();
            obj.insert("Landmarks".into(), l.name.clone().into());
            obj.insert("Summary".into(), l.summary.clone().into());
            obj.insert("Style".into(), l.style.clone().into());
            obj.insert(
                "Elements".into(),
                l.elements
                    .iter()
                    .map(|e| serde_json::Value::from(e.as_str()))
                    .collect::<Vec<_>>()
                    .into(),
            );
            obj.insert(
                "ElementDescriptions".into(),
                l.element_descriptions
                    .iter()
                    .map(|(k, v)| (k.to_string(), serde_json::Value::from(v.as_str())))
                    .collect::<serde_json::Map<_, _>>()
                    .into(),
            );
            obj.insert(
                "AppearanceDescriptions".into(),
                l.appearance_descriptions
                    .iter()
                    .map(|(k, v)| (k.to_string(), serde_json::Value::from(v.as_str())))
                    .collect::<serde_json::Map<_, _>>()
                    .into(),
            );
            if let Some(img) = &l.representative_image {
                obj.insert("Image".into(), img.clone().into());
            }
            serde_json::Value::Object(obj)
        })
        .collect();
    serde_json::Value::Array(docs)
}

/// Serializes image records to the sidecar layout.
pub fn serialize_image_records(images: &[ImageRecord]) -> serde_json::Value {
    let raws: Vec<RawImageRecord> = images
        .iter()
        .map(|r| RawImageRecord {
            image_id: r.image_id.clone(),
            path: r.image_ref.clone(),
            landmark: r.landmark_id.clone(),
            visible_elements: r.gt_visible.iter().map(|e| e.to_string()).collect(),
            view_type: r.view_type,
            reference: r.reference.clone(),
        })
        .collect();
    serde_json::to_value(raws).expect("image records serialize")
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Checks every landmark invariant, reporting all violations with field paths.
pub fn validate_landmark(landmark: &Landmark) -> ValidationReport {
    let mut report = ValidationReport::default();
    if landmark.name.trim().is_empty() {
        report.push("meta.name", "empty");
    }
    if landmark.summary.trim().is_empty() {
        report.push("meta.summary", "empty");
    }
    if landmark.style.trim().is_empty() {
        report.push("meta.style", "empty");
    }
    let inventory: BTreeSet<&ElementId> = landmark.elements.iter().collect();
    if inventory.len() != landmark.elements.len() {
        report.push("elements", "duplicate element ids after normalization");
    }
    for (i, e) in landmark.elements.iter().enumerate() {
        if e.as_str().is_empty() {
            report.push(format!("elements[{i}]"), "empty element id");
        } else if e.as_str() != canonical_key(e.as_str()) {
            report.push(format!("elements[{i}]"), "element id is not canonical");
        }
    }
    check_key_consistency(
        &mut report,
        "element_descriptions",
        &inventory,
        &landmark.element_descriptions,
    );
    check_key_consistency(
        &mut report,
        "appearance_descriptions",
        &inventory,
        &landmark.appearance_descriptions,
    );
    report
}

fn check_key_consistency(
    report: &mut ValidationReport,
    field: &str,
    inventory: &BTreeSet<&ElementId>,
    map: &BTreeMap<ElementId, String>,
) {
    for e in inventory {
        if !map.contains_key(*e) {
            report.push(format!("{field}[{e}]"), "missing entry for inventory element");
        }
    }
    for (k, text) in map {
        if !inventory.contains(k) {
            report.push(format!("{field}[{k}]"), "key not in element inventory");
        }
        if text.trim().is_empty() {
            report.push(format!("{field}[{k}]"), "empty description text");
        }
    }
}

/// Validates every landmark and image record in one pass.
pub fn validate_corpus(landmarks: &[Landmark], images: &[ImageRecord]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut by_id: BTreeMap<&str, &Landmark> = BTreeMap::new();
    for landmark in landmarks {
        if by_id.insert(&landmark.id, landmark).is_some() {
            report.push(
                format!("landmarks[{}]", landmark.id),
                "duplicate landmark id",
            );
        }
        report.extend_prefixed(
            &format!("landmarks[{}]", landmark.id),
            validate_landmark(landmark),
        );
    }
    let mut seen_images: BTreeSet<&str> = BTreeSet::new();
    for record in images {
        let prefix = format!("images[{}]", record.image_id);
        if !seen_images.insert(&record.image_id) {
            report.push(prefix.clone(), "duplicate image id");
        }
        match by_id.get(record.landmark_id.as_str()) {
            None => report.push(
                format!("{prefix}.landmark"),
                format!("unknown landmark {:?}", record.landmark_id),
            ),
            Some(landmark) => {
                let inventory: BTreeSet<&ElementId> = landmark.elements.iter().collect();
                for e in &record.gt_visible {
                    if !inventory.contains(e) {
                        report.push(
                            format!("{prefix}.visible_elements[{e}]"),
                            "element not in owning landmark inventory",
                        );
                    }
                }
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Fraction of the landmark's inventory visible in this image.
pub fn coverage_ratio(record: &ImageRecord, landmark: &Landmark) -> Result<f64, CorpusError> {
    if landmark.elements.is_empty() {
        return Err(CorpusError::DegenerateInventory(landmark.id.clone()));
    }
    Ok(record.gt_visible.len() as f64 / landmark.elements.len() as f64)
}

/// Computes corpus-level statistics. Every image's landmark id must resolve.
pub fn corpus_stats(
    landmarks: &[Landmark],
    images: &[ImageRecord],
) -> Result<CorpusStats, CorpusError> {
    if landmarks.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let by_id: BTreeMap<&str, &Landmark> =
        landmarks.iter().map(|l| (l.id.as_str(), l)).collect();

    let landmark_count = landmarks.len();
    let image_count = images.len();
    let total_elements: usize = landmarks.iter().map(|l| l.elements.len()).sum();
    let unique_elements: BTreeSet<&ElementId> =
        landmarks.iter().flat_map(|l| l.elements.iter()).collect();

    let mut coverages: Vec<f64> = Vec::with_capacity(image_count);
    let mut by_view: BTreeMap<ViewType, Vec<f64>> = BTreeMap::new();
    for record in images {
        let landmark = by_id.get(record.landmark_id.as_str()).ok_or_else(|| {
            CorpusError::UnknownLandmark {
                image_id: record.image_id.clone(),
                landmark_id: record.landmark_id.clone(),
            }
        })?;
        // Landmarks with an empty inventory contribute no coverage sample.
        if let Ok(cov) = coverage_ratio(record, landmark) {
            coverages.push(cov);
            by_view.entry(record.view_type).or_default().push(cov);
        }
    }

    Ok(CorpusStats {
        landmark_count,
        image_count,
        avg_images_per_landmark: image_count as f64 / landmark_count as f64,
        unique_element_count: unique_elements.len(),
        avg_elements_per_landmark: total_elements as f64 / landmark_count as f64,
        coverage_mean: mean(&coverages),
        coverage_median: median(&mut coverages.clone()),
        coverage_by_view: by_view
            .into_iter()
            .map(|(view, vals)| (view, mean(&vals)))
            .collect(),
    })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn landmark_doc() -> &'static str {
        r#"{
            "Landmarks": "Harbor Fort Lighthouse",
            "Summary": "A squat granite lighthouse guarding the old harbor mole.",
            "Style": "Utilitarian maritime, rubble masonry",
            "Elements": ["Lantern Room", "granite base"],
            "ElementDescriptions": {
                "Lantern Room": "The glazed lantern room crowns the tower.",
                "granite base": "A battered granite plinth resists storm seas."
            },
            "Image": "images/fort_rep.png"
        }"#
    }

    #[test]
    fn parses_one_landmark_document() {
        let (landmarks, images) = parse_corpus(landmark_doc().as_bytes(), None).unwrap();
        assert_eq!(landmarks.len(), 1);
        assert!(images.is_empty());
        let l = &landmarks[0];
        assert_eq!(l.id, "harbor fort lighthouse");
        assert_eq!(l.name, "Harbor Fort Lighthouse");
        assert_eq!(
            l.elements,
            vec![
                ElementId::from_raw("lantern room"),
                ElementId::from_raw("granite base")
            ]
        );
        // Appearance text falls back to the element descriptions.
        assert_eq!(
            l.appearance_of(&ElementId::from_raw("granite base")),
            Some("A battered granite plinth resists storm seas.")
        );
    }

    #[test]
    fn missing_description_key_is_reported_by_name() {
        let doc = r#"{
            "Landmarks": "Fort",
            "Summary": "s",
            "Style": "st",
            "Elements": ["lantern room", "granite base"],
            "ElementDescriptions": { "lantern room": "text" }
        }"#;
        let err = parse_corpus(doc.as_bytes(), None).unwrap_err();
        match err {
            CorpusError::Validation { report } => {
                assert!(report
                    .violations
                    .iter()
                    .any(|v| v.path.contains("element_descriptions[granite base]")));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_carries_position() {
        let err = parse_corpus(b"{ not json", None).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn validate_landmark_empty_summary() {
        let (mut landmarks, _) = parse_corpus(landmark_doc().as_bytes(), None).unwrap();
        landmarks[0].summary = "  ".into();
        let report = validate_landmark(&landmarks[0]);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].path, "meta.summary");
    }

    #[test]
    fn validate_landmark_orphan_description_key() {
        let (mut landmarks, _) = parse_corpus(landmark_doc().as_bytes(), None).unwrap();
        landmarks[0]
            .element_descriptions
            .insert(ElementId::from_raw("ghost door"), "orphan".into());
        let report = validate_landmark(&landmarks[0]);
        let paths: Vec<&str> = report.violations.iter().map(|v| v.path.as_str()).collect();
        assert_eq!(paths, vec!["element_descriptions[ghost door]"]);
    }

    #[test]
    fn clean_landmark_validates_empty() {
        let (landmarks, _) = parse_corpus(landmark_doc().as_bytes(), None).unwrap();
        assert!(validate_landmark(&landmarks[0]).is_clean());
    }

    #[test]
    fn normalization_maps_paper_synonyms() {
        let table = SynonymTable::from_pairs(
            [("campanile", "bell tower"), ("granite stone", "granite")],
            UnmappedPolicy::PassthroughFlagged,
        )
        .unwrap();
        let (id, mapped) = normalize_element_name("campanile", &table).unwrap();
        assert_eq!(id.as_str(), "bell tower");
        assert!(mapped);
        let (id, mapped) = normalize_element_name("  Granite   Stone ", &table).unwrap();
        assert_eq!(id.as_str(), "granite");
        assert!(mapped);
    }

    #[test]
    fn normalization_passthrough_unmapped() {
        let table = SynonymTable::new(UnmappedPolicy::PassthroughFlagged);
        let (id, mapped) = normalize_element_name("flying buttress", &table).unwrap();
        assert_eq!(id.as_str(), "flying buttress");
        assert!(!mapped);
    }

    #[test]
    fn normalization_reject_policy() {
        let table = SynonymTable::new(UnmappedPolicy::Reject);
        assert!(matches!(
            normalize_element_name("flying buttress", &table),
            Err(CorpusError::UnmappedTerm(_))
        ));
    }

    #[test]
    fn normalization_rejects_empty() {
        let table = SynonymTable::default();
        assert!(matches!(
            normalize_element_name("   ", &table),
            Err(CorpusError::InvalidInput)
        ));
    }

    #[test]
    fn synonym_table_rejects_chains() {
        let mut table = SynonymTable::default();
        table.insert("campanile", "bell tower").unwrap();
        // "bell tower" is a canonical target; mapping it away breaks
        // idempotence.
        assert!(matches!(
            table.insert("bell tower", "tower"),
            Err(CorpusError::IdempotenceViolation { .. })
        ));
        // And mapping something onto an existing raw key is fine only if the
        // key is its own target.
        assert!(matches!(
            table.insert("steeple", "campanile"),
            Err(CorpusError::IdempotenceViolation { .. })
        ));
    }

    #[test]
    fn coverage_ratio_examples() {
        let (landmarks, _) = parse_corpus(landmark_doc().as_bytes(), None).unwrap();
        let landmark = &landmarks[0];
        let record = |gt: &[&str]| ImageRecord {
            image_id: "img".into(),
            image_ref: "img.png".into(),
            landmark_id: landmark.id.clone(),
            gt_visible: gt.iter().map(|e| ElementId::from_raw(e)).collect(),
            view_type: ViewType::Unknown,
            reference: None,
        };
        assert_eq!(
            coverage_ratio(&record(&["lantern room"]), landmark).unwrap(),
            0.5
        );
        assert_eq!(
            coverage_ratio(&record(&["lantern room", "granite base"]), landmark).unwrap(),
            1.0
        );
        assert_eq!(coverage_ratio(&record(&[]), landmark).unwrap(), 0.0);
    }

    #[test]
    fn coverage_ratio_degenerate_inventory() {
        let (mut landmarks, _) = parse_corpus(landmark_doc().as_bytes(), None).unwrap();
        landmarks[0].elements.clear();
        let record = ImageRecord {
            image_id: "img".into(),
            image_ref: "img.png".into(),
            landmark_id: landmarks[0].id.clone(),
            gt_visible: BTreeSet::new(),
            view_type: ViewType::Unknown,
            reference: None,
        };
        assert!(matches!(
            coverage_ratio(&record, &landmarks[0]),
            Err(CorpusError::DegenerateInventory(_))
        ));
    }

    #[test]
    fn stats_reported_average_matches_published_ratio() {
        // 71 landmarks x 1422 images: the reported 2-decimal average is 20.03.
        let landmarks: Vec<Landmark> = (0..71)
            .map(|i| Landmark {
                id: format!("landmark {i}"),
                name: format!("Landmark {i}"),
                summary: "s".into(),
                style: "st".into(),
                elements: vec![ElementId::from_raw("door")],
                element_descriptions: [(ElementId::from_raw("door"), "d".to_string())].into(),
                appearance_descriptions: [(ElementId::from_raw("door"), "d".to_string())].into(),
                representative_image: None,
            })
            .collect();
        let images: Vec<ImageRecord> = (0..1422)
            .map(|i| ImageRecord {
                image_id: format!("img{i}"),
                image_ref: "x.png".into(),
                landmark_id: format!("landmark {}", i % 71),
                gt_visible: BTreeSet::new(),
                view_type: ViewType::Unknown,
                reference: None,
            })
            .collect();
        let stats = corpus_stats(&landmarks, &images).unwrap();
        assert_eq!(round2(stats.avg_images_per_landmark), 20.03);
    }

    #[test]
    fn stats_single_pair() {
        let (landmarks, _) = parse_corpus(landmark_doc().as_bytes(), None).unwrap();
        let images = vec![ImageRecord {
            image_id: "img".into(),
            image_ref: "x.png".into(),
            landmark_id: landmarks[0].id.clone(),
            gt_visible: BTreeSet::new(),
            view_type: ViewType::Unknown,
            reference: None,
        }];
        let stats = corpus_stats(&landmarks, &images).unwrap();
        assert_eq!(stats.avg_images_per_landmark, 1.0);
    }

    #[test]
    fn stats_known_coverage_list() {
        // Coverages {0.25, 0.5, 0.75} over a 4-element inventory.
        let elements: Vec<ElementId> = ["a", "b", "c", "d"]
            .iter()
            .map(|e| ElementId::from_raw(e))
            .collect();
        let descriptions: BTreeMap<ElementId, String> = elements
            .iter()
            .map(|e| (e.clone(), "text".to_string()))
            .collect();
        let landmark = Landmark {
            id: "site".into(),
            name: "Site".into(),
            summary: "s".into(),
            style: "st".into(),
            elements: elements.clone(),
            element_descriptions: descriptions.clone(),
            appearance_descriptions: descriptions,
            representative_image: None,
        };
        let images: Vec<ImageRecord> = [1usize, 2, 3]
            .iter()
            .enumerate()
            .map(|(i, &n)| ImageRecord {
                image_id: format!("img{i}"),
                image_ref: "x.png".into(),
                landmark_id: "site".into(),
                gt_visible: elements.iter().take(n).cloned().collect(),
                view_type: ViewType::Unknown,
                reference: None,
            })
            .collect();
        let stats = corpus_stats(&[landmark], &images).unwrap();
        assert!((stats.coverage_mean - 0.5).abs() < 1e-12);
        assert!((stats.coverage_median - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stats_empty_corpus_errors() {
        assert!(matches!(
            corpus_stats(&[], &[]),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn two_landmarks_three_images_each() {
        let corpus = r#"[
            {
                "Landmarks": "Saint Aurelia Basilica",
                "Summary": "A hilltop basilica above the old town.",
                "Style": "Provincial Baroque",
                "Elements": ["bell tower", "pediment", "rose window"],
                "ElementDescriptions": {
                    "bell tower": "The south bell tower holds two bronze bells.",
                    "pediment": "A curved pediment crowns the portal.",
                    "rose window": "A twelve-lobed rose window lights the nave."
                }
            },
            {
                "Landmarks": "Harbor Fort Lighthouse",
                "Summary": "A squat granite lighthouse on the mole.",
                "Style": "Utilitarian maritime",
                "Elements": ["lantern room", "granite base"],
                "ElementDescriptions": {
                    "lantern room": "The glazed lantern room crowns the tower.",
                    "granite base": "A battered granite plinth."
                }
            }
        ]"#;
        let sidecar = r#"[
            {"image_id":"a1","path":"a1.png","landmark":"Saint Aurelia Basilica","visible_elements":["bell tower"],"view_type":"close_up"},
            {"image_id":"a2","path":"a2.png","landmark":"Saint Aurelia Basilica","visible_elements":["bell tower","pediment"],"view_type":"mid_range"},
            {"image_id":"a3","path":"a3.png","landmark":"Saint Aurelia Basilica","visible_elements":["bell tower","pediment","rose window"],"view_type":"panoramic"},
            {"image_id":"f1","path":"f1.png","landmark":"Harbor Fort Lighthouse","visible_elements":["lantern room"]},
            {"image_id":"f2","path":"f2.png","landmark":"Harbor Fort Lighthouse","visible_elements":["granite base"]},
            {"image_id":"f3","path":"f3.png","landmark":"Harbor Fort Lighthouse","visible_elements":["lantern room","granite base"]}
        ]"#;
        let (landmarks, images) =
            parse_corpus(corpus.as_bytes(), Some(sidecar.as_bytes())).unwrap();
        assert_eq!(landmarks.len(), 2);
        assert_eq!(images.len(), 6);
        assert_eq!(
            images[1].gt_visible,
            ["bell tower", "pediment"]
                .iter()
                .map(|e| ElementId::from_raw(e))
                .collect()
        );
        assert_eq!(images[3].landmark_id, "harbor fort lighthouse");
        assert_eq!(images[0].view_type, ViewType::CloseUp);
        assert_eq!(images[4].view_type, ViewType::Unknown);
    }

    #[test]
    fn gt_outside_inventory_is_reported() {
        let sidecar = r#"[
            {"image_id":"x","path":"x.png","landmark":"Harbor Fort Lighthouse","visible_elements":["moat"]}
        ]"#;
        let err = parse_corpus(landmark_doc().as_bytes(), Some(sidecar.as_bytes())).unwrap_err();
        match err {
            CorpusError::Validation { report } => {
                assert!(report
                    .violations
                    .iter()
                    .any(|v| v.path == "images[x].visible_elements[moat]"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_preserves_fields() {
        let corpus_json = serde_json::to_vec(&serde_json::json!([
            {
                "Landmarks": "Saint Aurelia Basilica",
                "Summary": "A hilltop basilica.",
                "Style": "Provincial Baroque",
                "Elements": ["bell tower", "pediment"],
                "ElementDescriptions": {
                    "bell tower": "Two bronze bells.",
                    "pediment": "A curved pediment."
                },
                "AppearanceDescriptions": {
                    "bell tower": "Square tower, arched openings.",
                    "pediment": "Triangular crown over the portal."
                },
                "Image": "rep.png"
            }
        ]))
        .unwrap();
        let (landmarks, images) = parse_corpus(&corpus_json, None).unwrap();
        let serialized = serde_json::to_vec(&serialize_landmarks(&landmarks)).unwrap();
        let (reparsed, _) = parse_corpus(&serialized, None).unwrap();
        assert_eq!(landmarks, reparsed);
        assert!(images.is_empty());
    }
}
