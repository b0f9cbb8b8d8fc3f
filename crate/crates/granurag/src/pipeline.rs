//! Full-pipeline orchestration with per-stage artifact persistence.
//!
//! A run writes, for every image, `detections.json` -> `grounded.json` ->
//! `context.json` -> `output.json` -> `metrics.json` under
//! `{output_dir}/images/{image_id}/`, plus a run manifest recording the
//! config hash, prompt-template hashes, and per-stage artifact hashes and
//! timings. Interrupted runs resume from persisted stages: a stage is
//! reused iff its artifact file exists, its recorded hash matches the file,
//! and its upstream hash matches the current inputs. Every stage artifact
//! is self-contained JSON, so diagnosis and metric recomputation never need
//! live backends.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    self, BackendError, BackendRegistry, DetectorBackend, EmbedInput, RawDetection,
    ResponseCache, RetryPolicy, RoleAssignment,
};
use crate::corpus::{
    self, round2, CorpusError, ElementId, ImageRecord, Landmark, SynonymTable, UnmappedPolicy,
    ValidationReport,
};
use crate::detect::{self, Detection, FilterConfig};
use crate::evaluate::{
    self, attribution_metrics_sets, diagnose_sets, AttributionMetrics, DiagnosisReport, EvalError,
    JudgeScore, PrfScores, RougeScores, Tokenization, Vote, WinLoss,
};
use crate::generate::{
    self, assemble_context, build_prompt, extract_citations, CitationExtraction, ContextElements,
    ElementSource, EvidenceContext, GenerateError, GlobalMeta, PipelineMode, VisualInput,
};
use crate::ground::{self, GroundedElementSet, GroundError, MatchContext, MatchResult, VectorMetadata};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Detect(#[from] crate::detect::DetectError),
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Index(#[from] crate::ground::IndexError),
    #[error("cannot decode image {path}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },
    #[error("run failed: {0}")]
    Run(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Ground,
    Context,
    Generate,
    Metrics,
}

impl Stage {
    pub fn artifact_file(&self) -> &'static str {
        match self {
            Stage::Detect => "detections.json",
            Stage::Ground => "grounded.json",
            Stage::Context => "context.json",
            Stage::Generate => "output.json",
            Stage::Metrics => "metrics.json",
        }
    }

    fn key(&self) -> &'static str {
        match self {
            Stage::Detect => "detect",
            Stage::Ground => "ground",
            Stage::Context => "context",
            Stage::Generate => "generate",
            Stage::Metrics => "metrics",
        }
    }
}

/// Generic architectural primitives used when no vocabulary file is given.
pub const DEFAULT_VOCABULARY: &[&str] = &[
    "column", "carving", "decorative motif", "window", "tower", "dome", "arch", "statue",
    "portal", "relief", "roof", "facade",
];

/// Full configuration of one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Landmark corpus document (single object or array).
    pub corpus: PathBuf,
    /// Image-record sidecar array.
    pub images: PathBuf,
    /// Optional synonym table (raw -> canonical JSON object).
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
    /// Optional newline-separated detector vocabulary file.
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    pub mode: PipelineMode,
    #[serde(default)]
    pub filter: FilterConfig,
    pub backends: RoleAssignment,
    pub output_dir: PathBuf,
    /// Response cache location; defaults to `{output_dir}/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Disables the response cache entirely.
    #[serde(default)]
    pub no_cache: bool,
    /// Overlap thresholds for sensitivity sweeps.
    #[serde(default)]
    pub sweep: Option<Vec<f64>>,
    /// Seed for optional subsampling; processing order is always sorted by
    /// image id.
    #[serde(default)]
    pub seed: u64,
    /// Subsample this many images (seeded) before running.
    #[serde(default)]
    pub sample: Option<usize>,
    /// Worker threads for per-image processing.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub tokenization: Tokenization,
    /// Testing aid: stop the per-image chain after this stage. Not part of
    /// the config hash, so a stopped run resumes cleanly.
    #[serde(skip)]
    pub stop_after: Option<Stage>,
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    /// Hash over every persistent config field plus the prompt-template
    /// hashes; changes iff any of them changes.
    pub fn config_hash(&self) -> String {
        let config_json =
            serde_json::to_string(self).expect("run config serializes");
        let templates_json = serde_json::to_string(&generate::template_hashes())
            .expect("template hashes serialize");
        backends::sha256_hex(format!("{config_json}\n{templates_json}").as_bytes())
    }
}

/// Loaded, validated inputs for a run.
pub struct RunInputs {
    pub landmarks: Vec<Landmark>,
    pub images: Vec<ImageRecord>,
    pub table: SynonymTable,
    pub vocabulary: Vec<String>,
}

pub fn load_inputs(config: &RunConfig) -> Result<RunInputs, PipelineError> {
    let corpus_bytes = std::fs::read(&config.corpus).map_err(io_err(&config.corpus))?;
    let image_bytes = std::fs::read(&config.images).map_err(io_err(&config.images))?;
    let (landmarks, mut images) = corpus::parse_corpus(&corpus_bytes, Some(&image_bytes))?;
    // Image paths are relative to the sidecar's directory.
    let base = config
        .images
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    for record in &mut images {
        let path = Path::new(&record.image_ref);
        if path.is_relative() {
            record.image_ref = base.join(path).display().to_string();
        }
    }
    let table = match &config.synonyms {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            SynonymTable::from_json(&bytes, UnmappedPolicy::PassthroughFlagged)?
        }
        None => SynonymTable::default(),
    };
    let vocabulary = match &config.vocabulary {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        }
        None => DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
    };
    Ok(RunInputs {
        landmarks,
        images,
        table,
        vocabulary,
    })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifact_hash: String,
    pub upstream_hash: String,
    pub elapsed_ms: u64,
    /// True when the stage was reused from a previous run.
    #[serde(default)]
    pub resumed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageStatus {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub template_hashes: BTreeMap<String, String>,
    pub images: BTreeMap<String, ImageStatus>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Option<RunManifest> {
        let bytes = std::fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }
}

// ---------------------------------------------------------------------------
// Persisted artifact shapes
// ---------------------------------------------------------------------------

/// `grounded.json`: the grounded set plus the per-region match log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedGrounded {
    pub image_id: String,
    pub elements: BTreeSet<ElementId>,
    pub evidence: BTreeMap<ElementId, Vec<Detection>>,
    pub match_log: Vec<MatchResult>,
}

impl PersistedGrounded {
    fn grounded_set(&self) -> GroundedElementSet {
        GroundedElementSet {
            image_id: self.image_id.clone(),
            elements: self.elements.clone(),
            evidence: self.evidence.clone(),
        }
    }
}

/// `output.json`: generation output with citations and audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedOutput {
    pub image_id: String,
    pub mode: PipelineMode,
    pub prompt_fingerprint: String,
    pub text: String,
    pub citations: CitationExtraction,
    pub audit: generate::GenerationAudit,
}

/// `metrics.json`: every per-image metric the harness reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub rouge_l: Option<RougeScores>,
    pub embedding_f1: Option<RougeScores>,
    pub judge: Option<JudgeScore>,
    #[serde(flatten)]
    pub attribution: AttributionMetrics,
    pub prf: PrfScores,
    pub diagnosis: DiagnosisReport,
}

/// Aggregates over per-image metrics; null metrics are excluded from means
/// and counted separately.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub means: BTreeMap<String, f64>,
    #[serde(rename = "nulls_excluded_counts")]
    pub nulls_excluded: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregates: Aggregates,
}

pub fn aggregate_metrics(per_image: &[ImageMetrics]) -> Aggregates {
    let mut means = BTreeMap::new();
    let mut nulls = BTreeMap::new();
    let mut put = |key: &str, values: Vec<Option<f64>>| {
        let present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
        nulls.insert(key.to_string(), values.len() - present.len());
        if !present.is_empty() {
            means.insert(
                key.to_string(),
                present.iter().sum::<f64>() / present.len() as f64,
            );
        }
    };
    put(
        "rouge_l_f1",
        per_image.iter().map(|m| m.rouge_l.map(|r| r.f1)).collect(),
    );
    put(
        "embedding_f1",
        per_image
            .iter()
            .map(|m| m.embedding_f1.map(|r| r.f1))
            .collect(),
    );
    put(
        "judge",
        per_image
            .iter()
            .map(|m| m.judge.as_ref().map(|j| j.final_score))
            .collect(),
    );
    put("ap", per_image.iter().map(|m| m.attribution.ap).collect());
    put("ar", per_image.iter().map(|m| m.attribution.ar).collect());
    put("ucr", per_image.iter().map(|m| m.attribution.ucr).collect());
    put(
        "element_precision",
        per_image.iter().map(|m| m.prf.precision).collect(),
    );
    put(
        "element_recall",
        per_image.iter().map(|m| m.prf.recall).collect(),
    );
    put(
        "element_f1",
        per_image.iter().map(|m| Some(m.prf.f1)).collect(),
    );
    Aggregates {
        means,
        nulls_excluded: nulls,
    }
}

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub processed: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub aggregates: Aggregates,
}

impl RunSummary {
    /// More than half the images failing makes the whole run a failure.
    pub fn acceptable(&self) -> bool {
        self.failed * 2 <= self.processed
    }
}

/// Retry/cache wrapper so the detect stage sees a resilient backend.
struct ResilientDetector<'a> {
    inner: &'a dyn DetectorBackend,
    policy: RetryPolicy,
    cache: Option<&'a ResponseCache>,
}

impl DetectorBackend for ResilientDetector<'_> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn detect_objects(
        &self,
        image_path: &Path,
        vocabulary: &[String],
    ) -> Result<Vec<RawDetection>, BackendError> {
        backends::detect_objects(self.inner, image_path, vocabulary, &self.policy, self.cache)
    }
}

struct RunContext<'a> {
    config: &'a RunConfig,
    registry: &'a BackendRegistry,
    inputs: &'a RunInputs,
    landmarks_by_id: BTreeMap<&'a str, &'a Landmark>,
    cache: Option<ResponseCache>,
    config_hash: String,
    previous: Option<RunManifest>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String, PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(backends::sha256_hex(&bytes))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn file_hash(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| backends::sha256_hex(&b))
}

/// Checks whether a stage artifact can be reused from the previous manifest.
fn reusable(
    previous: Option<&RunManifest>,
    image_id: &str,
    stage: Stage,
    upstream_hash: &str,
    artifact_path: &Path,
) -> bool {
    let Some(manifest) = previous else {
        return false;
    };
    let Some(status) = manifest.images.get(image_id) else {
        return false;
    };
    let Some(record) = status.stages.get(stage.key()) else {
        return false;
    };
    if record.upstream_hash != upstream_hash {
        return false;
    }
    match file_hash(artifact_path) {
        Some(hash) => hash == record.artifact_hash,
        None => false,
    }
}

/// Executes one stage with resume: reuses the persisted artifact when its
/// hashes line up, otherwise recomputes and persists.
fn run_stage<T, F>(
    ctx: &RunContext<'_>,
    image_dir: &Path,
    image_id: &str,
    stage: Stage,
    upstream_hash: &str,
    status: &mut ImageStatus,
    compute: F,
) -> Result<T, PipelineError>
where
    T: Serialize + for<'de> Deserialize<'de>,
    F: FnOnce() -> Result<T, PipelineError>,
{
    let artifact_path = image_dir.join(stage.artifact_file());
    let started = Instant::now();
    if reusable(
        ctx.previous.as_ref(),
        image_id,
        stage,
        upstream_hash,
        &artifact_path,
    ) {
        let value: T = read_json(&artifact_path)?;
        let record = StageRecord {
            artifact_hash: file_hash(&artifact_path).expect("artifact just read"),
            upstream_hash: upstream_hash.to_string(),
            elapsed_ms: started.elapsed().as_millis() as u64,
            resumed: true,
        };
        status.stages.insert(stage.key().to_string(), record);
        return Ok(value);
    }
    let value = compute()?;
    let artifact_hash = write_json(&artifact_path, &value)?;
    status.stages.insert(
        stage.key().to_string(),
        StageRecord {
            artifact_hash,
            upstream_hash: upstream_hash.to_string(),
            elapsed_ms: started.elapsed().as_millis() as u64,
            resumed: false,
        },
    );
    Ok(value)
}

fn chain_hash(parts: &[&str]) -> String {
    backends::sha256_hex(parts.join("\n").as_bytes())
}

/// Elements for the context per the mode's element source, in the order the
/// context contract requires.
fn context_elements<'a>(
    mode: &PipelineMode,
    landmark: &'a Landmark,
    record: &ImageRecord,
    grounded: &'a GroundedElementSet,
) -> (Option<Vec<ElementId>>, Option<&'a GroundedElementSet>) {
    match mode.element_source {
        ElementSource::AllElements => (Some(landmark.elements.clone()), None),
        ElementSource::GoldVisible => {
            let ordered: Vec<ElementId> = landmark
                .elements
                .iter()
                .filter(|e| record.gt_visible.contains(*e))
                .cloned()
                .collect();
            (Some(ordered), None)
        }
        ElementSource::GroundedElements => (None, Some(grounded)),
    }
}

fn process_image(
    ctx: &RunContext<'_>,
    record: &ImageRecord,
    status: &mut ImageStatus,
) -> Result<ImageMetrics, PipelineError> {
    let landmark = ctx
        .landmarks_by_id
        .get(record.landmark_id.as_str())
        .copied()
        .ok_or_else(|| CorpusError::UnknownLandmark {
            image_id: record.image_id.clone(),
            landmark_id: record.landmark_id.clone(),
        })?;
    let image_dir = ctx
        .config
        .output_dir
        .join("images")
        .join(&record.image_id);
    std::fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;
    let image_path = PathBuf::from(&record.image_ref);
    let cache = ctx.cache.as_ref();

    // Stage 1: detect + redundancy filter.
    let detect_upstream = chain_hash(&[&ctx.config_hash, "detect"]);
    let detections: Vec<Detection> = run_stage(
        ctx,
        &image_dir,
        &record.image_id,
        Stage::Detect,
        &detect_upstream,
        status,
        || {
            let backend = ctx.registry.detector(&ctx.config.backends.detector)?;
            let resilient = ResilientDetector {
                inner: backend.as_ref(),
                policy: ctx.registry.policy(&ctx.config.backends.detector),
                cache,
            };
            let raw = detect::detect(
                &image_path,
                &ctx.inputs.vocabulary,
                &ctx.config.filter,
                &resilient,
            )?;
            Ok(detect::filter_redundant(&raw, &ctx.config.filter))
        },
    )?;
    if ctx.config.stop_after == Some(Stage::Detect) {
        return Err(PipelineError::Run("stopped after detect".into()));
    }

    // Stage 2: ground regions to elements.
    let detect_artifact = status.stages[Stage::Detect.key()].artifact_hash.clone();
    let ground_upstream = chain_hash(&[&ctx.config_hash, "ground", &detect_artifact]);
    let grounded_artifact: PersistedGrounded = run_stage(
        ctx,
        &image_dir,
        &record.image_id,
        Stage::Ground,
        &ground_upstream,
        status,
        || {
            let backend = ctx.registry.chat(&ctx.config.backends.matcher)?;
            let image = load_rgb(&image_path)?;
            let match_ctx = MatchContext {
                backend: backend.as_ref(),
                policy: ctx.registry.policy(&ctx.config.backends.matcher),
                cache,
                table: &ctx.inputs.table,
            };
            let (grounded, match_log) = ground::ground_image(
                &image,
                &record.image_id,
                &detections,
                landmark,
                &match_ctx,
            )?;
            Ok(PersistedGrounded {
                image_id: grounded.image_id,
                elements: grounded.elements,
                evidence: grounded.evidence,
                match_log,
            })
        },
    )?;
    let grounded = grounded_artifact.grounded_set();
    if ctx.config.stop_after == Some(Stage::Ground) {
        return Err(PipelineError::Run("stopped after ground".into()));
    }

    // Stage 3: evidence context.
    let ground_hash = status.stages[Stage::Ground.key()].artifact_hash.clone();
    let context_upstream = chain_hash(&[&ctx.config_hash, "context", &ground_hash]);
    let context: EvidenceContext = run_stage(
        ctx,
        &image_dir,
        &record.image_id,
        Stage::Context,
        &context_upstream,
        status,
        || {
            let (ordered, grounded_ref) =
                context_elements(&ctx.config.mode, landmark, record, &grounded);
            let elements = match (&ordered, grounded_ref) {
                (Some(list), _) => ContextElements::Ordered(list),
                (None, Some(g)) => ContextElements::Grounded(g),
                (None, None) => unreachable!("element source covered"),
            };
            Ok(assemble_context(
                GlobalMeta::from(landmark),
                elements,
                &landmark.element_descriptions,
            )?)
        },
    )?;
    if ctx.config.stop_after == Some(Stage::Context) {
        return Err(PipelineError::Run("stopped after context".into()));
    }

    // Stage 4: generation.
    let context_hash = status.stages[Stage::Context.key()].artifact_hash.clone();
    let generate_upstream = chain_hash(&[&ctx.config_hash, "generate", &context_hash]);
    let output: PersistedOutput = run_stage(
        ctx,
        &image_dir,
        &record.image_id,
        Stage::Generate,
        &generate_upstream,
        status,
        || {
            let backend = ctx.registry.chat(&ctx.config.backends.generator)?;
            let prompt = build_prompt(&context, &ctx.config.mode);
            let image = if ctx.config.mode.uses_image() {
                let base = load_rgb(&image_path)?;
                Some(match ctx.config.mode.visual {
                    VisualInput::RawImage => base,
                    VisualInput::BoxAnnotated => {
                        detect::render_annotations(&base, &annotation_boxes(&ctx.config.mode, &detections, &grounded))
                    }
                })
            } else {
                None
            };
            let result = generate::generate(
                image.as_ref(),
                &prompt,
                &ctx.config.mode,
                context.clone(),
                backend.as_ref(),
                backends::DecodingParams::default(),
                &ctx.registry.policy(&ctx.config.backends.generator),
                cache,
            )?;
            let citations =
                extract_citations(&result.text, &landmark.elements, &ctx.inputs.table);
            Ok(PersistedOutput {
                image_id: record.image_id.clone(),
                mode: result.mode,
                prompt_fingerprint: result.prompt_fingerprint,
                text: result.text,
                citations,
                audit: result.audit,
            })
        },
    )?;
    if ctx.config.stop_after == Some(Stage::Generate) {
        return Err(PipelineError::Run("stopped after generate".into()));
    }

    // Stage 5: metrics.
    let output_hash = status.stages[Stage::Generate.key()].artifact_hash.clone();
    let metrics_upstream = chain_hash(&[&ctx.config_hash, "metrics", &ground_hash, &output_hash]);
    let metrics: ImageMetrics = run_stage(
        ctx,
        &image_dir,
        &record.image_id,
        Stage::Metrics,
        &metrics_upstream,
        status,
        || compute_metrics(ctx, record, &grounded, &output),
    )?;
    Ok(metrics)
}

/// Boxes drawn on the generator's annotated image: grounded evidence boxes
/// labeled by element when the grounded source is active, otherwise the
/// filtered detections with their detector labels.
fn annotation_boxes(
    mode: &PipelineMode,
    detections: &[Detection],
    grounded: &GroundedElementSet,
) -> Vec<(crate::detect::BoundingBox, String)> {
    match mode.element_source {
        ElementSource::GroundedElements => grounded
            .evidence
            .iter()
            .flat_map(|(element, regions)| {
                regions.iter().map(move |d| (d.bbox, element.to_string()))
            })
            .collect(),
        _ => detections
            .iter()
            .map(|d| (d.bbox, d.label.clone()))
            .collect(),
    }
}

fn compute_metrics(
    ctx: &RunContext<'_>,
    record: &ImageRecord,
    grounded: &GroundedElementSet,
    output: &PersistedOutput,
) -> Result<ImageMetrics, PipelineError> {
    let cache = ctx.cache.as_ref();
    let attribution = attribution_metrics_sets(&grounded.elements, &output.citations);
    let prf = evaluate::element_prf(&grounded.elements, &record.gt_visible);
    let diagnosis = diagnose_sets(
        &record.gt_visible,
        &grounded.elements,
        &output.citations.cited_union,
    );
    let mut rouge = None;
    let mut embedding = None;
    let mut judge = None;
    if let Some(reference) = &record.reference {
        rouge = Some(evaluate::rouge_l(
            &output.text,
            reference,
            ctx.config.tokenization,
        )?);
        if let Some(embedder_id) = &ctx.config.backends.embedder {
            let embedder = ctx.registry.embedder(embedder_id)?;
            let cand = evaluate::tokenize(&output.text, ctx.config.tokenization);
            let refs = evaluate::tokenize(reference, ctx.config.tokenization);
            embedding = Some(evaluate::embedding_f1(
                &cand,
                &refs,
                embedder.as_ref(),
                &ctx.registry.policy(embedder_id),
                cache,
            )?);
        }
        if !ctx.config.backends.judges.is_empty() {
            let handles: Result<Vec<_>, _> = ctx
                .config
                .backends
                .judges
                .iter()
                .map(|id| ctx.registry.chat(id))
                .collect();
            let handles = handles?;
            let judges: Vec<&dyn backends::ChatBackend> =
                handles.iter().map(|b| b.as_ref()).collect();
            let policy = ctx.registry.policy(&ctx.config.backends.judges[0]);
            judge = Some(evaluate::judge_score(
                &output.text,
                reference,
                &judges,
                generate::JUDGE_RUBRIC_TEMPLATE,
                &policy,
                cache,
            )?);
        }
    }
    Ok(ImageMetrics {
        image_id: record.image_id.clone(),
        rouge_l: rouge,
        embedding_f1: embedding,
        judge,
        attribution,
        prf,
        diagnosis,
    })
}

fn load_rgb(path: &Path) -> Result<RgbImage, PipelineError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| PipelineError::Image {
            path: path.display().to_string(),
            source,
        })
}

/// Seeded subsample: deterministic selection of `n` records, order restored
/// to sorted-by-id afterwards.
fn subsample(records: &mut Vec<ImageRecord>, n: usize, seed: u64) {
    if n >= records.len() {
        return;
    }
    let mut state = seed ^ 0x9E3779B97F4A7C15;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    // Fisher-Yates prefix selection.
    for i in 0..n {
        let j = i + (next() as usize) % (records.len() - i);
        records.swap(i, j);
    }
    records.truncate(n);
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
}

/// Runs the full pipeline over every image, writing the artifact tree, the
/// manifest, and the metrics report. Per-image failures are recorded and do
/// not abort the run; a run with more than 50% failures is unacceptable.
pub fn run(config: &RunConfig, registry: &BackendRegistry) -> Result<RunSummary, PipelineError> {
    config.filter.validate()?;
    config.mode.validate()?;
    let inputs = load_inputs(config)?;
    std::fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;

    let mut records = inputs.images.clone();
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(n) = config.sample {
        subsample(&mut records, n, config.seed);
    }

    let cache = if config.no_cache {
        None
    } else {
        let dir = config
            .cache_dir
            .clone()
            .unwrap_or_else(|| config.output_dir.join("cache"));
        Some(ResponseCache::open(dir).map_err(io_err(&config.output_dir))?)
    };

    let manifest_path = config.output_dir.join("manifest.json");
    let previous = RunManifest::load(&manifest_path);
    let config_hash = config.config_hash();

    let ctx = RunContext {
        config,
        registry,
        inputs: &inputs,
        landmarks_by_id: inputs
            .landmarks
            .iter()
            .map(|l| (l.id.as_str(), l))
            .collect(),
        cache,
        config_hash: config_hash.clone(),
        previous,
    };

    // Persist the resolved records so diagnosis can run without the corpus.
    write_json(&config.output_dir.join("records.json"), &records)?;

    let queue: Mutex<VecDeque<ImageRecord>> = Mutex::new(records.iter().cloned().collect());
    let results: Mutex<BTreeMap<String, (ImageStatus, Option<ImageMetrics>)>> =
        Mutex::new(BTreeMap::new());
    let manifest: Mutex<RunManifest> = Mutex::new(RunManifest {
        config_hash: config_hash.clone(),
        template_hashes: generate::template_hashes(),
        images: BTreeMap::new(),
    });

    let workers = config.workers.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let record = {
                    let mut q = queue.lock().expect("queue lock");
                    match q.pop_front() {
                        Some(r) => r,
                        None => return,
                    }
                };
                let mut status = ImageStatus::default();
                let outcome = process_image(&ctx, &record, &mut status);
                let metrics = match outcome {
                    Ok(metrics) => {
                        status.ok = true;
                        Some(metrics)
                    }
                    Err(err) => {
                        status.ok = false;
                        status.error = Some(err.to_string());
                        None
                    }
                };
                results
                    .lock()
                    .expect("results lock")
                    .insert(record.image_id.clone(), (status.clone(), metrics));
                // Incremental manifest write keeps interrupted runs
                // resumable.
                let mut m = manifest.lock().expect("manifest lock");
                m.images.insert(record.image_id.clone(), status);
                let _ = serde_json::to_vec_pretty(&*m)
                    .map(|mut bytes| {
                        bytes.push(b'\n');
                        std::fs::write(&manifest_path, bytes)
                    });
            });
        }
    });

    let results = results.into_inner().expect("results lock");
    let manifest = manifest.into_inner().expect("manifest lock");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(&manifest_path, &bytes).map_err(io_err(&manifest_path))?;

    let per_image: Vec<ImageMetrics> = results
        .values()
        .filter_map(|(_, m)| m.clone())
        .collect();
    let aggregates = aggregate_metrics(&per_image);
    let report = MetricsReport {
        per_image,
        aggregates: aggregates.clone(),
    };
    write_json(&config.output_dir.join("report.json"), &report)?;
    std::fs::write(
        config.output_dir.join("report.txt"),
        render_report_text(&report),
    )
    .map_err(io_err(&config.output_dir))?;

    let failed = results.values().filter(|(s, _)| !s.ok).count();
    // A stop_after run intentionally fails images at the stop stage; the
    // summary still reports honestly.
    Ok(RunSummary {
        output_dir: config.output_dir.clone(),
        processed: results.len(),
        succeeded: results.len() - failed,
        failed,
        aggregates,
    })
}

/// Plain-text aggregate table, 2-decimal precision.
pub fn render_report_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str("metric             mean     nulls_excluded\n");
    for (key, nulls) in &report.aggregates.nulls_excluded {
        let mean = report
            .aggregates
            .means
            .get(key)
            .map(|m| format!("{:>8.2}", round2(*m)))
            .unwrap_or_else(|| "       -".to_string());
        out.push_str(&format!("{key:<18} {mean} {nulls:>6}\n"));
    }
    out.push_str(&format!("images: {}\n", report.per_image.len()));
    out
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// Default sensitivity thresholds.
pub const DEFAULT_SWEEP: &[f64] = &[0.70, 0.75, 0.80, 0.85, 0.90, 1.00];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub succeeded: usize,
    pub failed: usize,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Text table with one row per threshold.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("threshold  rouge_l_f1  ap      ar      ucr     judge\n");
        for row in &self.rows {
            let cell = |key: &str| -> String {
                row.aggregates
                    .means
                    .get(key)
                    .map(|m| format!("{:>6.2}", round2(*m)))
                    .unwrap_or_else(|| "     -".to_string())
            };
            out.push_str(&format!(
                "{:>8.2}  {} {} {} {} {}\n",
                row.threshold,
                cell("rouge_l_f1"),
                cell("ap"),
                cell("ar"),
                cell("ucr"),
                cell("judge"),
            ));
        }
        out
    }
}

/// Runs the pipeline once per overlap threshold, each into
/// `{output_dir}/sweep/{threshold}`, and tabulates the aggregates.
pub fn sweep(
    config: &RunConfig,
    registry: &BackendRegistry,
) -> Result<SweepTable, PipelineError> {
    let thresholds: Vec<f64> = config
        .sweep
        .clone()
        .unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
    for t in &thresholds {
        if !(*t > 0.0 && *t <= 1.0) {
            return Err(PipelineError::Run(format!(
                "sweep threshold {t} outside (0, 1]"
            )));
        }
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for threshold in thresholds {
        let mut sub = config.clone();
        sub.filter.overlap_threshold = threshold;
        sub.sweep = None;
        sub.output_dir = config
            .output_dir
            .join("sweep")
            .join(format!("{threshold:.2}"));
        let summary = run(&sub, registry)?;
        rows.push(SweepRow {
            threshold,
            succeeded: summary.succeeded,
            failed: summary.failed,
            aggregates: summary.aggregates,
        });
    }
    let table = SweepTable { rows };
    write_json(&config.output_dir.join("sweep.json"), &table)?;
    std::fs::write(
        config.output_dir.join("sweep.txt"),
        table.render_text(),
    )
    .map_err(io_err(&config.output_dir))?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Diagnosis over a completed run directory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisAggregate {
    pub detection_misses: usize,
    pub matching_false_positives: usize,
    pub hallucinated_citations: usize,
    pub omissions: usize,
    pub images: usize,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnosis {
    pub per_image: BTreeMap<String, DiagnosisReport>,
    pub aggregate: DiagnosisAggregate,
}

impl RunDiagnosis {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("failure_class              count\n");
        out.push_str(&format!(
            "detection_misses           {:>5}\n",
            self.aggregate.detection_misses
        ));
        out.push_str(&format!(
            "matching_false_positives   {:>5}\n",
            self.aggregate.matching_false_positives
        ));
        out.push_str(&format!(
            "hallucinated_citations     {:>5}\n",
            self.aggregate.hallucinated_citations
        ));
        out.push_str(&format!(
            "omissions                  {:>5}\n",
            self.aggregate.omissions
        ));
        out.push_str(&format!("images                     {:>5}\n", self.aggregate.images));
        for skipped in &self.aggregate.skipped {
            out.push_str(&format!("skipped: {skipped}\n"));
        }
        out
    }
}

/// Re-derives per-stage diagnosis from a completed run directory alone: the
/// persisted records, grounded sets, and citations. Never touches backends.
pub fn diagnose_run(run_dir: &Path) -> Result<RunDiagnosis, PipelineError> {
    let records: Vec<ImageRecord> = read_json(&run_dir.join("records.json"))?;
    let by_id: BTreeMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let images_dir = run_dir.join("images");
    let mut per_image = BTreeMap::new();
    let mut aggregate = DiagnosisAggregate::default();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&images_dir)
        .map_err(io_err(&images_dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let image_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        let Some(record) = by_id.get(image_id.as_str()) else {
            aggregate
                .skipped
                .push(format!("{image_id} (no ground-truth record)"));
            continue;
        };
        let grounded_path = dir.join(Stage::Ground.artifact_file());
        let output_path = dir.join(Stage::Generate.artifact_file());
        if !grounded_path.exists() || !output_path.exists() {
            aggregate
                .skipped
                .push(format!("{image_id} (incomplete artifacts)"));
            continue;
        }
        let grounded: PersistedGrounded = read_json(&grounded_path)?;
        let output: PersistedOutput = read_json(&output_path)?;
        let report = diagnose_sets(
            &record.gt_visible,
            &grounded.elements,
            &output.citations.cited_union,
        );
        aggregate.detection_misses += report.detection_misses.len();
        aggregate.matching_false_positives += report.matching_false_positives.len();
        aggregate.hallucinated_citations += report.hallucinated_citations.len();
        aggregate.omissions += report.omissions.len();
        aggregate.images += 1;
        per_image.insert(image_id, report);
    }
    let diagnosis = RunDiagnosis {
        per_image,
        aggregate,
    };
    write_json(&run_dir.join("diagnosis.json"), &diagnosis)?;
    std::fs::write(run_dir.join("diagnosis.txt"), diagnosis.render_text())
        .map_err(io_err(run_dir))?;
    Ok(diagnosis)
}

// ---------------------------------------------------------------------------
// Human-evaluation votes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotesReport {
    pub win_loss: WinLoss,
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_note: Option<String>,
}

/// Raw Fleiss rating-matrix input: items x categories counts plus the
/// rater count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KappaMatrixFile {
    pub counts: Vec<Vec<usize>>,
    pub raters: usize,
}

/// Fleiss' kappa over a raw matrix file (items x categories counts).
pub fn eval_matrix(bytes: &[u8]) -> Result<f64, PipelineError> {
    let file: KappaMatrixFile = serde_json::from_slice(bytes)?;
    Ok(evaluate::fleiss_kappa(&file.counts, file.raters)?)
}

/// Aggregates a pairwise-preference votes file: win/loss rates plus Fleiss'
/// kappa over the per-item rating matrix derived from the votes.
pub fn eval_votes(bytes: &[u8]) -> Result<VotesReport, PipelineError> {
    let votes: Vec<Vote> = serde_json::from_slice(bytes)?;
    let win_loss = evaluate::win_loss_aggregate(&votes)?;
    // Rating matrix: one row per item, columns (system, baseline).
    let mut matrix: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
    for vote in &votes {
        let row = matrix.entry(vote.item.as_str()).or_insert([0, 0]);
        match vote.winner {
            evaluate::Winner::System => row[0] += 1,
            evaluate::Winner::Baseline => row[1] += 1,
        }
    }
    let counts: Vec<Vec<usize>> = matrix.values().map(|row| row.to_vec()).collect();
    let raters: BTreeSet<usize> = counts.iter().map(|row| row.iter().sum()).collect();
    let (kappa, note) = if raters.len() != 1 {
        (
            None,
            Some("items have unequal vote counts; kappa skipped".to_string()),
        )
    } else {
        let n = raters.into_iter().next().expect("one rater count");
        match evaluate::fleiss_kappa(&counts, n) {
            Ok(k) => (Some(k), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Ok(VotesReport {
        win_loss,
        kappa,
        kappa_note: note,
    })
}

// ---------------------------------------------------------------------------
// Corpus utilities surfaced by the CLI
// ---------------------------------------------------------------------------

/// Validates a corpus (and optional sidecar) and writes the report.
pub fn corpus_check(
    corpus_path: &Path,
    images_path: Option<&Path>,
    report_path: &Path,
) -> Result<ValidationReport, PipelineError> {
    let corpus_bytes = std::fs::read(corpus_path).map_err(io_err(corpus_path))?;
    let landmarks = corpus::parse_landmarks(&corpus_bytes)?;
    let images = match images_path {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            corpus::parse_image_records(&bytes)?
        }
        None => Vec::new(),
    };
    let report = corpus::validate_corpus(&landmarks, &images);
    write_json(report_path, &report)?;
    Ok(report)
}

/// Embeds every corpus image and writes the flat L2 index with aligned
/// metadata.
pub fn index_build(
    config: &RunConfig,
    registry: &BackendRegistry,
    index_path: &Path,
    normalize: bool,
) -> Result<usize, PipelineError> {
    let inputs = load_inputs(config)?;
    let embedder_id = config
        .backends
        .embedder
        .as_ref()
        .ok_or_else(|| PipelineError::Run("index-build needs an embedder backend".into()))?;
    let embedder = registry.embedder(embedder_id)?;
    let mut records = inputs.images.clone();
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if records.is_empty() {
        return Err(PipelineError::Run("no images to index".into()));
    }
    let embed_inputs: Vec<EmbedInput> = records
        .iter()
        .map(|r| EmbedInput::ImagePath(PathBuf::from(&r.image_ref)))
        .collect();
    let vectors = backends::embed(
        embedder.as_ref(),
        &embed_inputs,
        &registry.policy(embedder_id),
        None,
    )?;
    let metadata: Vec<VectorMetadata> = records
        .iter()
        .map(|r| VectorMetadata {
            landmark_id: r.landmark_id.clone(),
            image_path: r.image_ref.clone(),
            gt_visible: r.gt_visible.clone(),
        })
        .collect();
    let index = ground::build_index(vectors, metadata, normalize)?;
    ground::write_index(&index, index_path)?;
    Ok(index.len())
}

/// Corpus statistics plus a rendered text summary.
pub fn stats(config: &RunConfig) -> Result<(corpus::CorpusStats, String), PipelineError> {
    let inputs = load_inputs(config)?;
    let stats = corpus::corpus_stats(&inputs.landmarks, &inputs.images)?;
    let mut text = String::new();
    text.push_str(&format!("landmarks              {}\n", stats.landmark_count));
    text.push_str(&format!("images                 {}\n", stats.image_count));
    text.push_str(&format!(
        "avg images/landmark    {:.2}\n",
        round2(stats.avg_images_per_landmark)
    ));
    text.push_str(&format!("unique elements        {}\n", stats.unique_element_count));
    text.push_str(&format!(
        "avg elements/landmark  {:.2}\n",
        round2(stats.avg_elements_per_landmark)
    ));
    text.push_str(&format!(
        "coverage mean/median   {:.2} / {:.2}\n",
        round2(stats.coverage_mean),
        round2(stats.coverage_median)
    ));
    for (view, mean) in &stats.coverage_by_view {
        text.push_str(&format!("coverage[{view}]  {:.2}\n", round2(*mean)));
    }
    Ok((stats, text))
}
