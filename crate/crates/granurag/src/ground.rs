//! Region-to-element grounding.
//!
//! Maps redundancy-filtered detections onto corpus elements, producing the
//! grounded element set: the elements with confirmed visual evidence. Two
//! routes exist: multimodal chat matching against appearance descriptions
//! (the primary path) and a top-1 embedding-retrieval baseline over a flat
//! exact vector index.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    chat_complete, embed, BackendError, ChatBackend, ChatRequest, EmbedInput, EmbeddingBackend,
    ResponseCache, RetryPolicy,
};
use crate::corpus::{normalize_element_name, ElementId, Landmark, SynonymTable};
use crate::detect::{crop_region, render_annotations, Detection};

/// Template for the matching prompt; hash-pinned so runs are reproducible.
pub const MATCHING_TEMPLATE: &str = include_str!("../assets/prompts/matching.txt");

/// The literal token a matching backend answers when no candidate fits.
pub const REJECTION_TOKEN: &str = "NONE";

#[derive(Debug, Error)]
pub enum GroundError {
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("element {0} has no appearance or description text")]
    MissingAppearance(ElementId),
    #[error("grounded evidence for {0} is empty")]
    EmptyEvidence(ElementId),
    #[error("cannot encode image for backend request: {0}")]
    ImageEncode(#[from] image::ImageError),
    #[error("region {region:?}: {source}")]
    Backend {
        region: Option<usize>,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Detect(#[from] crate::detect::DetectError),
}

impl From<BackendError> for GroundError {
    fn from(source: BackendError) -> Self {
        GroundError::Backend {
            region: None,
            source,
        }
    }
}

/// Outcome of matching one region against the candidate inventory.
/// Serialized as the element id string, or null for no match.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchVerdict {
    Element(ElementId),
    NoMatch,
}

impl Serialize for MatchVerdict {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            MatchVerdict::Element(e) => serializer.serialize_some(e),
            MatchVerdict::NoMatch => serializer.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for MatchVerdict {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let opt = Option::<ElementId>::deserialize(deserializer)?;
        Ok(match opt {
            Some(e) => MatchVerdict::Element(e),
            None => MatchVerdict::NoMatch,
        })
    }
}

/// One region's matching result, with the raw backend text as audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub region: Detection,
    pub verdict: MatchVerdict,
    pub raw_response: String,
}

/// The set of elements with confirmed visual evidence in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedElementSet {
    pub image_id: String,
    pub elements: BTreeSet<ElementId>,
    /// Supporting regions per element; every list is non-empty and the key
    /// set equals `elements`.
    pub evidence: BTreeMap<ElementId, Vec<Detection>>,
}

impl GroundedElementSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        GroundedElementSet {
            image_id: image_id.into(),
            elements: BTreeSet::new(),
            evidence: BTreeMap::new(),
        }
    }

    /// Builds from an evidence map, enforcing the type invariants.
    pub fn from_evidence(
        image_id: impl Into<String>,
        evidence: BTreeMap<ElementId, Vec<Detection>>,
    ) -> Result<Self, GroundError> {
        for (element, regions) in &evidence {
            if regions.is_empty() {
                return Err(GroundError::EmptyEvidence(element.clone()));
            }
        }
        Ok(GroundedElementSet {
            image_id: image_id.into(),
            elements: evidence.keys().cloned().collect(),
            evidence,
        })
    }

    /// Checks elements = keyset(evidence) and non-empty evidence lists.
    pub fn invariants_hold(&self) -> bool {
        self.elements == self.evidence.keys().cloned().collect()
            && self.evidence.values().all(|v| !v.is_empty())
    }
}

/// Everything a matching call needs besides the image and region.
pub struct MatchContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub policy: RetryPolicy,
    pub cache: Option<&'a ResponseCache>,
    pub table: &'a SynonymTable,
}

/// Builds the matching prompt text for a candidate list.
pub fn matching_prompt(candidates: &[(ElementId, String)]) -> String {
    let listing: String = candidates
        .iter()
        .map(|(element, appearance)| format!("- {element}: {appearance}\n"))
        .collect();
    MATCHING_TEMPLATE
        .replace("{CANDIDATES}", listing.trim_end())
        .replace("{REJECTION}", REJECTION_TOKEN)
}

/// Matches one detected region against the candidate elements.
///
/// The request carries the full image with the region outlined, the region
/// crop, and every (element, appearance) pair. The response is parsed to a
/// canonical element id via the synonym table — exact match first, then a
/// unique-substring fallback — or `NoMatch` on the rejection token or any
/// unparseable answer.
pub fn match_element(
    image: &RgbImage,
    region: &Detection,
    candidates: &[(ElementId, String)],
    ctx: &MatchContext<'_>,
) -> Result<MatchResult, GroundError> {
    if candidates.is_empty() {
        return Err(GroundError::EmptyCandidates);
    }
    let annotated = render_annotations(image, &[(region.bbox, region.label.clone())]);
    let crop = crop_region(image, &region.bbox)?;
    // Part names carry the region extent: audit logs and scripted mocks can
    // address individual regions by it.
    let b = &region.bbox;
    let region_tag = format!("{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max);
    let request = ChatRequest::text(matching_prompt(candidates))
        .with_image(format!("annotated:{region_tag}"), encode_png(&annotated)?)
        .with_image(format!("crop:{region_tag}"), encode_png(&crop)?);
    let raw_response = chat_complete(ctx.backend, &request, &ctx.policy, ctx.cache)?;
    let verdict = parse_match_response(&raw_response, candidates, ctx.table);
    Ok(MatchResult {
        region: region.clone(),
        verdict,
        raw_response,
    })
}

/// Resolves backend text to a candidate id or `NoMatch`. Never emits an
/// element outside the candidate list.
pub fn parse_match_response(
    response: &str,
    candidates: &[(ElementId, String)],
    table: &SynonymTable,
) -> MatchVerdict {
    let trimmed = response.trim();
    if trimmed == REJECTION_TOKEN {
        return MatchVerdict::NoMatch;
    }
    let candidate_ids: BTreeSet<&ElementId> = candidates.iter().map(|(e, _)| e).collect();
    // Exact: normalize the whole answer and look it up.
    if let Ok((id, _)) = normalize_element_name(trimmed, table) {
        if candidate_ids.contains(&id) {
            return MatchVerdict::Element(id);
        }
    }
    // Fallback: a unique candidate whose name (or a synonym of it) occurs in
    // the normalized answer text.
    let haystack = crate::corpus::canonical_key(trimmed);
    let mut mentioned: BTreeSet<&ElementId> = BTreeSet::new();
    for id in &candidate_ids {
        if haystack.contains(id.as_str()) {
            mentioned.insert(id);
        }
    }
    for (raw, target) in table.entries() {
        if candidate_ids.contains(target) && haystack.contains(raw) {
            mentioned.insert(target);
        }
    }
    if mentioned.len() == 1 {
        let only = mentioned.into_iter().next().expect("len checked");
        return MatchVerdict::Element(only.clone());
    }
    MatchVerdict::NoMatch
}

/// Grounds one image: matches every filtered detection, discards rejections,
/// and merges duplicate verdicts with all supporting regions recorded.
///
/// Detections are expected to be redundancy-filtered already. Backend
/// failures identify the failing region by index.
pub fn ground_image(
    image: &RgbImage,
    image_id: &str,
    detections: &[Detection],
    landmark: &Landmark,
    ctx: &MatchContext<'_>,
) -> Result<(GroundedElementSet, Vec<MatchResult>), GroundError> {
    let candidates = appearance_candidates(landmark)?;
    let mut evidence: BTreeMap<ElementId, Vec<Detection>> = BTreeMap::new();
    let mut log = Vec::with_capacity(detections.len());
    for (index, detection) in detections.iter().enumerate() {
        let result = match_element(image, detection, &candidates, ctx).map_err(|e| match e {
            GroundError::Backend { source, .. } => GroundError::Backend {
                region: Some(index),
                source,
            },
            other => other,
        })?;
        if let MatchVerdict::Element(element) = &result.verdict {
            evidence
                .entry(element.clone())
                .or_default()
                .push(detection.clone());
        }
        log.push(result);
    }
    Ok((GroundedElementSet::from_evidence(image_id, evidence)?, log))
}

/// (element, appearance text) pairs in inventory order.
pub fn appearance_candidates(landmark: &Landmark) -> Result<Vec<(ElementId, String)>, GroundError> {
    landmark
        .elements
        .iter()
        .map(|e| {
            landmark
                .appearance_of(e)
                .map(|text| (e.clone(), text.to_string()))
                .ok_or_else(|| GroundError::MissingAppearance(e.clone()))
        })
        .collect()
}

pub(crate) fn encode_png(image: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut bytes = Vec::new();
    image.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

// ---------------------------------------------------------------------------
// Flat exact vector index
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector {index} has dimension {got}, index dimension is {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("query dimension {got} does not match index dimension {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("vector {0} has zero norm and cannot be L2-normalized")]
    ZeroNorm(usize),
    #[error("{got} metadata entries for {vectors} vectors")]
    MetadataMismatch { vectors: usize, got: usize },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Metadata stored alongside each vector of the corpus image index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorMetadata {
    pub landmark_id: String,
    pub image_path: String,
    pub gt_visible: BTreeSet<ElementId>,
}

/// Exact nearest-neighbor index: a dense row-major f32 matrix scanned in
/// full on every query. Immutable after build; insertion order defines
/// vector ids `0..n-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex<M> {
    dimension: usize,
    normalized: bool,
    data: Vec<f32>,
    metadata: Vec<M>,
}

impl<M> FlatIndex<M> {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.metadata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metadata.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn metadata(&self, id: usize) -> Option<&M> {
        self.metadata.get(id)
    }

    pub fn vector(&self, id: usize) -> Option<&[f32]> {
        if id < self.len() {
            Some(&self.data[id * self.dimension..(id + 1) * self.dimension])
        } else {
            None
        }
    }
}

/// Builds a flat index from vectors and aligned metadata. With
/// `normalize_on_insert`, stored vectors are scaled to unit L2 norm.
pub fn build_index<M>(
    vectors: Vec<Vec<f32>>,
    metadata: Vec<M>,
    normalize_on_insert: bool,
) -> Result<FlatIndex<M>, IndexError> {
    if vectors.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    if vectors.len() != metadata.len() {
        return Err(IndexError::MetadataMismatch {
            vectors: vectors.len(),
            got: metadata.len(),
        });
    }
    let dimension = vectors[0].len();
    let mut data = Vec::with_capacity(vectors.len() * dimension);
    for (index, mut vector) in vectors.into_iter().enumerate() {
        if vector.len() != dimension {
            return Err(IndexError::DimensionMismatch {
                index,
                expected: dimension,
                got: vector.len(),
            });
        }
        if normalize_on_insert {
            let norm = vector
                .iter()
                .map(|v| f64::from(*v).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(IndexError::ZeroNorm(index));
            }
            for v in &mut vector {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        data.extend_from_slice(&vector);
    }
    Ok(FlatIndex {
        dimension,
        normalized: normalize_on_insert,
        data,
        metadata,
    })
}

/// Exact k-nearest-neighbor query by squared L2 distance, ascending, ties
/// broken by lower vector id. Returns `min(k, n)` results.
pub fn query_index<M>(
    index: &FlatIndex<M>,
    query: &[f32],
    k: usize,
) -> Result<Vec<(usize, f64)>, IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidK);
    }
    if index.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    if query.len() != index.dimension {
        return Err(IndexError::QueryDimension {
            expected: index.dimension,
            got: query.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|id| {
            let row = &index.data[id * index.dimension..(id + 1) * index.dimension];
            let dist = row
                .iter()
                .zip(query.iter())
                .map(|(a, b)| {
                    let d = f64::from(*a) - f64::from(*b);
                    d * d
                })
                .sum::<f64>();
            (id, dist)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k.min(index.len()));
    Ok(scored)
}

/// Embedding-retrieval baseline: embeds the region crop and returns the
/// element whose appearance-description vector ranks first.
pub fn embedding_match_top1(
    crop: &RgbImage,
    crop_name: &str,
    index: &FlatIndex<ElementId>,
    embed_backend: &dyn EmbeddingBackend,
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<ElementId, GroundError> {
    let input = EmbedInput::ImageBytes {
        name: crop_name.to_string(),
        bytes: encode_png(crop)?,
    };
    let vectors = embed(embed_backend, &[input], policy, cache)?;
    let query = vectors.first().ok_or_else(|| {
        GroundError::from(BackendError::permanent(
            embed_backend.id(),
            "embedder returned no vector",
        ))
    })?;
    let ranked = query_index(index, query, 1)?;
    let (id, _) = ranked[0];
    Ok(index.metadata(id).expect("rank-1 id is in range").clone())
}

/// Builds the per-landmark appearance-description index for the embedding
/// baseline. Vector id `i` corresponds to the i-th inventory element.
pub fn build_appearance_index(
    landmark: &Landmark,
    embed_backend: &dyn EmbeddingBackend,
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
    normalize: bool,
) -> Result<FlatIndex<ElementId>, GroundError> {
    let candidates = appearance_candidates(landmark)?;
    if candidates.is_empty() {
        return Err(GroundError::EmptyCandidates);
    }
    let inputs: Vec<EmbedInput> = candidates
        .iter()
        .map(|(_, text)| EmbedInput::Text(text.clone()))
        .collect();
    let vectors = embed(embed_backend, &inputs, policy, cache)?;
    let metadata: Vec<ElementId> = candidates.into_iter().map(|(e, _)| e).collect();
    Ok(build_index(vectors, metadata, normalize)?)
}

/// Source attribution: embeds the query image and returns the landmark of
/// the nearest stored corpus image.
pub fn identify_landmark(
    image_path: &Path,
    image_index: &FlatIndex<VectorMetadata>,
    embed_backend: &dyn EmbeddingBackend,
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<String, GroundError> {
    let vectors = embed(
        embed_backend,
        &[EmbedInput::ImagePath(image_path.to_path_buf())],
        policy,
        cache,
    )?;
    let query = vectors.first().ok_or_else(|| {
        GroundError::from(BackendError::permanent(
            embed_backend.id(),
            "embedder returned no vector",
        ))
    })?;
    let ranked = query_index(image_index, query, 1)?;
    let (id, _) = ranked[0];
    Ok(image_index
        .metadata(id)
        .expect("rank-1 id is in range")
        .landmark_id
        .clone())
}

// ---------------------------------------------------------------------------
// Index persistence: JSON header line + raw little-endian f32 matrix, with a
// JSON metadata sidecar at `<path>.meta.json`.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    dimension: usize,
    count: usize,
    normalized: bool,
}

pub fn write_index<M: Serialize>(index: &FlatIndex<M>, path: &Path) -> Result<(), IndexError> {
    let header = IndexHeader {
        dimension: index.dimension,
        count: index.len(),
        normalized: index.normalized,
    };
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &header).map_err(|e| IndexError::Corrupt(e.to_string()))?;
    file.write_all(b"\n")?;
    for value in &index.data {
        file.write_all(&value.to_le_bytes())?;
    }
    file.flush()?;
    let sidecar = sidecar_path(path);
    let meta = serde_json::to_vec_pretty(&index.metadata)
        .map_err(|e| IndexError::Corrupt(e.to_string()))?;
    std::fs::write(sidecar, meta)?;
    Ok(())
}

pub fn read_index<M: DeserializeOwned>(path: &Path) -> Result<FlatIndex<M>, IndexError> {
    let mut reader = io::BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: IndexHeader = serde_json::from_str(header_line.trim())
        .map_err(|e| IndexError::Corrupt(format!("bad header: {e}")))?;
    let expected_bytes = header
        .count
        .checked_mul(header.dimension)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| IndexError::Corrupt("header sizes overflow".into()))?;
    let mut raw = Vec::with_capacity(expected_bytes);
    reader.read_to_end(&mut raw)?;
    if raw.len() != expected_bytes {
        return Err(IndexError::Corrupt(format!(
            "expected {expected_bytes} matrix bytes, found {}",
            raw.len()
        )));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let meta_bytes = std::fs::read(sidecar_path(path))?;
    let metadata: Vec<M> = serde_json::from_slice(&meta_bytes)
        .map_err(|e| IndexError::Corrupt(format!("bad metadata sidecar: {e}")))?;
    if metadata.len() != header.count {
        return Err(IndexError::Corrupt(format!(
            "metadata count {} does not match header count {}",
            metadata.len(),
            header.count
        )));
    }
    Ok(FlatIndex {
        dimension: header.dimension,
        normalized: header.normalized,
        data,
        metadata,
    })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}
