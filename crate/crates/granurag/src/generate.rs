//! Evidence assembly, mode-specific prompting, generation, and citation
//! extraction.
//!
//! The evidence context prepends global landmark metadata to the per-element
//! descriptions of whichever element source the pipeline mode selects: the
//! full inventory, the grounded set, or the gold visible set. Prompt
//! templates ship as versioned text assets and every built prompt carries a
//! content fingerprint, so metric runs are reproducible.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    chat_complete, BackendError, ChatBackend, ChatRequest, DecodingParams, ResponseCache,
    RetryPolicy,
};
use crate::corpus::{canonical_key, ElementId, Landmark, SynonymTable};
use crate::ground::GroundedElementSet;

pub const GENERATION_TEMPLATE: &str = include_str!("../assets/prompts/generation.txt");
pub const CONSTRAINTS_TEMPLATE: &str = include_str!("../assets/prompts/constraints.txt");
pub const REASONING_TEMPLATE: &str = include_str!("../assets/prompts/reasoning.txt");
pub const JUDGE_RUBRIC_TEMPLATE: &str = include_str!("../assets/prompts/judge_rubric.txt");

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("element {0} has no description")]
    MissingDescription(ElementId),
    #[error("invalid pipeline mode: {0}")]
    InvalidMode(String),
    #[error("image presence does not match the mode (expects image: {expects_image})")]
    ModeImageMismatch { expects_image: bool },
    #[error("backend returned an empty completion")]
    EmptyGeneration,
    #[error("cannot encode image for backend request: {0}")]
    ImageEncode(#[from] image::ImageError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Experimental setting controlling evidence selection and prompt shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Image plus the full noisy candidate inventory.
    ABaseline,
    /// Baseline plus a step-by-step reasoning instruction.
    BCot,
    /// Image plus only the grounded element subset, with the constraint
    /// block restricting claims to retrieved descriptions.
    CGranurag,
    /// Gold visible elements as text evidence, no image.
    TextOnlyGold,
}

/// How the image is presented to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualInput {
    RawImage,
    BoxAnnotated,
}

/// Which elements feed the evidence context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementSource {
    AllElements,
    GroundedElements,
    GoldVisible,
}

/// Full generation-stage configuration: setting, visual presentation, and
/// element source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineMode {
    pub setting: Setting,
    pub visual: VisualInput,
    pub element_source: ElementSource,
}

impl PipelineMode {
    /// Setting A: raw image, full inventory.
    pub fn setting_a() -> Self {
        PipelineMode {
            setting: Setting::ABaseline,
            visual: VisualInput::RawImage,
            element_source: ElementSource::AllElements,
        }
    }

    /// Setting B: setting A plus chain-of-thought instruction.
    pub fn setting_b() -> Self {
        PipelineMode {
            setting: Setting::BCot,
            visual: VisualInput::RawImage,
            element_source: ElementSource::AllElements,
        }
    }

    /// Setting C: box-annotated image, grounded subset, constrained prompt.
    pub fn setting_c() -> Self {
        PipelineMode {
            setting: Setting::CGranurag,
            visual: VisualInput::BoxAnnotated,
            element_source: ElementSource::GroundedElements,
        }
    }

    /// Gold-evidence text-only variant.
    pub fn text_only_gold() -> Self {
        PipelineMode {
            setting: Setting::TextOnlyGold,
            visual: VisualInput::RawImage,
            element_source: ElementSource::GoldVisible,
        }
    }

    /// Ablation grid: T1 raw+all, T2 annotated+all, T3 raw+grounded,
    /// T4 annotated+grounded.
    pub fn ablation(variant: u8) -> Result<Self, GenerateError> {
        let (setting, visual, source) = match variant {
            1 => (
                Setting::ABaseline,
                VisualInput::RawImage,
                ElementSource::AllElements,
            ),
            2 => (
                Setting::ABaseline,
                VisualInput::BoxAnnotated,
                ElementSource::AllElements,
            ),
            3 => (
                Setting::CGranurag,
                VisualInput::RawImage,
                ElementSource::GroundedElements,
            ),
            4 => (
                Setting::CGranurag,
                VisualInput::BoxAnnotated,
                ElementSource::GroundedElements,
            ),
            other => {
                return Err(GenerateError::InvalidMode(format!(
                    "ablation variant T{other} does not exist"
                )))
            }
        };
        Ok(PipelineMode {
            setting,
            visual,
            element_source: source,
        })
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.setting == Setting::CGranurag
            && self.element_source != ElementSource::GroundedElements
        {
            return Err(GenerateError::InvalidMode(
                "the grounded setting requires the grounded element source".into(),
            ));
        }
        if self.setting == Setting::TextOnlyGold
            && self.element_source != ElementSource::GoldVisible
        {
            return Err(GenerateError::InvalidMode(
                "the text-only setting requires the gold element source".into(),
            ));
        }
        Ok(())
    }

    /// Whether an image accompanies the prompt.
    pub fn uses_image(&self) -> bool {
        self.setting != Setting::TextOnlyGold
    }
}

/// Global landmark metadata prepended to every evidence context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalMeta {
    pub name: String,
    pub style: String,
    pub summary: String,
}

impl From<&Landmark> for GlobalMeta {
    fn from(landmark: &Landmark) -> Self {
        GlobalMeta {
            name: landmark.name.clone(),
            style: landmark.style.clone(),
            summary: landmark.summary.clone(),
        }
    }
}

/// Hierarchical evidence: metadata first, then ordered (element,
/// description) entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceContext {
    pub global_meta: GlobalMeta,
    pub entries: Vec<(ElementId, String)>,
}

/// Element source for context assembly.
pub enum ContextElements<'a> {
    /// Already-ordered element list (inventory order for the full set or the
    /// gold subset).
    Ordered(&'a [ElementId]),
    /// Grounded set; entries follow spatial reading order of the supporting
    /// regions (topmost, then leftmost).
    Grounded(&'a GroundedElementSet),
}

/// Assembles the evidence context for one image.
///
/// Grounded entries are ordered by the top-left corner (y, then x) of each
/// element's topmost supporting region; ordered sources keep their given
/// order with duplicates removed. Every element must have a description.
pub fn assemble_context(
    meta: GlobalMeta,
    elements: ContextElements<'_>,
    descriptions: &BTreeMap<ElementId, String>,
) -> Result<EvidenceContext, GenerateError> {
    let ordered: Vec<ElementId> = match elements {
        ContextElements::Ordered(list) => {
            let mut seen = BTreeSet::new();
            list.iter()
                .filter(|e| seen.insert((*e).clone()))
                .cloned()
                .collect()
        }
        ContextElements::Grounded(grounded) => {
            let mut keyed: Vec<(u32, u32, &ElementId)> = grounded
                .evidence
                .iter()
                .map(|(element, regions)| {
                    let anchor = regions
                        .iter()
                        .map(|d| (d.bbox.y_min, d.bbox.x_min))
                        .min()
                        .expect("grounded evidence lists are non-empty");
                    (anchor.0, anchor.1, element)
                })
                .collect();
            keyed.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
            keyed.into_iter().map(|(_, _, e)| e.clone()).collect()
        }
    };
    let entries: Result<Vec<(ElementId, String)>, GenerateError> = ordered
        .into_iter()
        .map(|e| {
            descriptions
                .get(&e)
                .map(|d| (e.clone(), d.clone()))
                .ok_or(GenerateError::MissingDescription(e))
        })
        .collect();
    Ok(EvidenceContext {
        global_meta: meta,
        entries: entries?,
    })
}

/// A built prompt and the SHA-256 fingerprint of its exact text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub fingerprint: String,
}

/// Renders the deterministic prompt for a context and mode.
///
/// The constraint block appears only in the grounded setting; the reasoning
/// block only in the chain-of-thought setting. Identical inputs yield
/// identical text and fingerprint.
pub fn build_prompt(context: &EvidenceContext, mode: &PipelineMode) -> Prompt {
    let meta = format!(
        "Landmark: {}\nStyle: {}\nSummary: {}",
        context.global_meta.name, context.global_meta.style, context.global_meta.summary
    );
    let elements = if context.entries.is_empty() {
        "(no element evidence for this view)".to_string()
    } else {
        context
            .entries
            .iter()
            .map(|(e, d)| format!("- {e}: {d}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let constraints = if mode.setting == Setting::CGranurag {
        CONSTRAINTS_TEMPLATE
    } else {
        ""
    };
    let reasoning = if mode.setting == Setting::BCot {
        REASONING_TEMPLATE
    } else {
        ""
    };
    let text = GENERATION_TEMPLATE
        .replace("{META}", &meta)
        .replace("{ELEMENTS}", &elements)
        .replace("{CONSTRAINTS}", constraints)
        .replace("{REASONING}", reasoning);
    let fingerprint = crate::backends::sha256_hex(text.as_bytes());
    Prompt { text, fingerprint }
}

/// SHA-256 of every shipped prompt template, keyed by asset name. Recorded
/// in run manifests so a template change invalidates stage reuse.
pub fn template_hashes() -> BTreeMap<String, String> {
    [
        ("generation.txt", GENERATION_TEMPLATE),
        ("constraints.txt", CONSTRAINTS_TEMPLATE),
        ("reasoning.txt", REASONING_TEMPLATE),
        ("judge_rubric.txt", JUDGE_RUBRIC_TEMPLATE),
        ("matching.txt", crate::ground::MATCHING_TEMPLATE),
    ]
    .into_iter()
    .map(|(name, text)| {
        (
            name.to_string(),
            crate::backends::sha256_hex(text.as_bytes()),
        )
    })
    .collect()
}

/// Request/response audit captured for every generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationAudit {
    pub request_text: String,
    /// Number of image payloads attached to the request.
    pub image_attachments: usize,
    pub raw_response: String,
}

/// A completed generation: output text plus everything needed to reproduce
/// and audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub mode: PipelineMode,
    pub prompt_fingerprint: String,
    pub context: EvidenceContext,
    pub audit: GenerationAudit,
}

/// Invokes the generation backend with the prompt and optional image.
///
/// The image must be present exactly when the mode uses one. Decoding
/// defaults are temperature 0.1 and 600 max tokens.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    image: Option<&RgbImage>,
    prompt: &Prompt,
    mode: &PipelineMode,
    context: EvidenceContext,
    backend: &dyn ChatBackend,
    params: DecodingParams,
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<GenerationResult, GenerateError> {
    mode.validate()?;
    if mode.uses_image() != image.is_some() {
        return Err(GenerateError::ModeImageMismatch {
            expects_image: mode.uses_image(),
        });
    }
    let mut request = ChatRequest::text(prompt.text.clone());
    request.params = params;
    if let Some(img) = image {
        request = request.with_image("view", crate::ground::encode_png(img)?);
    }
    let audit_request = request.rendered_text();
    let image_attachments = request.image_parts.len();
    let raw_response = chat_complete(backend, &request, policy, cache)?;
    if raw_response.trim().is_empty() {
        return Err(GenerateError::EmptyGeneration);
    }
    Ok(GenerationResult {
        text: raw_response.clone(),
        mode: *mode,
        prompt_fingerprint: prompt.fingerprint.clone(),
        context,
        audit: GenerationAudit {
            request_text: audit_request,
            image_attachments,
            raw_response,
        },
    })
}

/// Byte range of one sentence within the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

/// Splits text into sentence spans.
///
/// Cuts after CJK terminators (。！？；), newlines, and Latin `. ! ?` when
/// followed by whitespace or end of text; consecutive terminators stay in
/// one span. Spans exclude surrounding whitespace and cover every
/// non-whitespace character exactly once; whitespace-only segments are
/// dropped.
pub fn segment_sentences(text: &str) -> Vec<SentenceSpan> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let is_hard = |c: char| matches!(c, '。' | '！' | '？' | '；' | '\n');
    let is_latin = |c: char| matches!(c, '.' | '!' | '?');
    let terminator_at = |i: usize| -> bool {
        let c = chars[i].1;
        if is_hard(c) {
            return true;
        }
        if is_latin(c) {
            return match chars.get(i + 1) {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
        }
        false
    };
    let push = |start: usize, end: usize, spans: &mut Vec<SentenceSpan>| {
        let raw = &text[start..end];
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return;
        }
        let lead = raw.len() - raw.trim_start().len();
        spans.push(SentenceSpan {
            start: start + lead,
            end: start + lead + trimmed.len(),
        });
    };
    let mut spans = Vec::new();
    let mut segment_start = 0usize;
    let mut i = 0;
    while i < chars.len() {
        if terminator_at(i) {
            // Extend through the run of consecutive terminators.
            let mut j = i;
            while j + 1 < chars.len() && terminator_at(j + 1) {
                j += 1;
            }
            let end = chars
                .get(j + 1)
                .map(|(offset, _)| *offset)
                .unwrap_or(text.len());
            push(segment_start, end, &mut spans);
            segment_start = end;
            i = j + 1;
        } else {
            i += 1;
        }
    }
    push(segment_start, text.len(), &mut spans);
    spans
}

/// Per-sentence element citations extracted from generated text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationExtraction {
    #[serde(rename = "sentence_spans")]
    pub sentences: Vec<SentenceSpan>,
    /// Sentence index to cited elements; sentences citing nothing are
    /// absent.
    #[serde(rename = "per_sentence")]
    pub cited: BTreeMap<usize, BTreeSet<ElementId>>,
    #[serde(rename = "union")]
    pub cited_union: BTreeSet<ElementId>,
}

impl CitationExtraction {
    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }

    /// Sentences whose citation set is empty.
    pub fn unsupported_count(&self) -> usize {
        self.sentences.len() - self.cited.len()
    }
}

/// Finds which inventory elements each sentence cites.
///
/// A sentence cites an element iff its canonicalized text contains the
/// element's canonical name or any synonym mapping to it, using
/// longest-match non-overlapping scanning (so an element whose name embeds
/// another's does not double-cite).
pub fn extract_citations(
    text: &str,
    inventory: &[ElementId],
    table: &SynonymTable,
) -> CitationExtraction {
    let inventory_set: BTreeSet<&ElementId> = inventory.iter().collect();
    let mut patterns: Vec<(String, ElementId)> = inventory
        .iter()
        .map(|e| (e.as_str().to_string(), e.clone()))
        .collect();
    for (raw, target) in table.entries() {
        if inventory_set.contains(target) && raw != target.as_str() {
            patterns.push((raw.to_string(), target.clone()));
        }
    }
    // Longest first so embedded names never shadow their containers.
    patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));

    let sentences = segment_sentences(text);
    let mut cited: BTreeMap<usize, BTreeSet<ElementId>> = BTreeMap::new();
    for (index, span) in sentences.iter().enumerate() {
        let haystack = canonical_key(span.slice(text));
        let found = scan_longest_match(&haystack, &patterns);
        if !found.is_empty() {
            cited.insert(index, found);
        }
    }
    let cited_union = cited.values().flatten().cloned().collect();
    CitationExtraction {
        sentences,
        cited,
        cited_union,
    }
}

/// Left-to-right longest-match, non-overlapping scan.
fn scan_longest_match(haystack: &str, patterns: &[(String, ElementId)]) -> BTreeSet<ElementId> {
    let mut found = BTreeSet::new();
    let mut pos = 0;
    while pos < haystack.len() {
        let rest = &haystack[pos..];
        let hit = patterns
            .iter()
            .find(|(pattern, _)| !pattern.is_empty() && rest.starts_with(pattern.as_str()));
        match hit {
            Some((pattern, element)) => {
                found.insert(element.clone());
                pos += pattern.len();
            }
            None => {
                pos += rest.chars().next().map(char::len_utf8).unwrap_or(1);
            }
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockChatBackend;
    use crate::corpus::UnmappedPolicy;
    use crate::detect::{BoundingBox, Detection};

    fn eid(s: &str) -> ElementId {
        ElementId::from_raw(s)
    }

    fn meta() -> GlobalMeta {
        GlobalMeta {
            name: "Saint Aurelia Basilica".into(),
            style: "Provincial Baroque".into(),
            summary: "A hilltop basilica above the old town.".into(),
        }
    }

    fn descriptions() -> BTreeMap<ElementId, String> {
        [
            (
                eid("bell tower"),
                "Two bronze bells hang in the south tower.".to_string(),
            ),
            (
                eid("pediment"),
                "A curved crown tops the portal.".to_string(),
            ),
            (
                eid("rose window"),
                "A twelve-lobed round opening lights the nave.".to_string(),
            ),
        ]
        .into()
    }

    fn grounded_fixture() -> GroundedElementSet {
        let det = |x0, y0| {
            Detection::new(
                BoundingBox::new(x0, y0, x0 + 10, y0 + 10).unwrap(),
                0.9,
                "region",
            )
            .unwrap()
        };
        // pediment sits lower (y=50), bell tower higher (y=10): reading
        // order puts bell tower first.
        let evidence: BTreeMap<ElementId, Vec<Detection>> = [
            (eid("pediment"), vec![det(0, 50)]),
            (eid("bell tower"), vec![det(0, 10)]),
        ]
        .into();
        GroundedElementSet::from_evidence("img-1", evidence).unwrap()
    }

    #[test]
    fn context_orders_grounded_entries_by_reading_order() {
        let grounded = grounded_fixture();
        let context = assemble_context(
            meta(),
            ContextElements::Grounded(&grounded),
            &descriptions(),
        )
        .unwrap();
        let order: Vec<&str> = context.entries.iter().map(|(e, _)| e.as_str()).collect();
        assert_eq!(order, vec!["bell tower", "pediment"]);
    }

    #[test]
    fn context_with_empty_grounded_set_keeps_meta_only() {
        let grounded = GroundedElementSet::empty("img-1");
        let context = assemble_context(
            meta(),
            ContextElements::Grounded(&grounded),
            &descriptions(),
        )
        .unwrap();
        assert!(context.entries.is_empty());
        assert_eq!(context.global_meta.name, "Saint Aurelia Basilica");
    }

    #[test]
    fn context_missing_description_names_element() {
        let elements = vec![eid("bell tower"), eid("crypt")];
        let err = assemble_context(meta(), ContextElements::Ordered(&elements), &descriptions())
            .unwrap_err();
        match err {
            GenerateError::MissingDescription(e) => assert_eq!(e.as_str(), "crypt"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn context_order_ignores_evidence_map_permutation() {
        // Same grounded content, different insertion histories.
        let grounded_a = grounded_fixture();
        let mut evidence_b = BTreeMap::new();
        for (k, v) in grounded_a.evidence.iter().rev() {
            evidence_b.insert(k.clone(), v.clone());
        }
        let grounded_b = GroundedElementSet::from_evidence("img-1", evidence_b).unwrap();
        let ctx_a = assemble_context(
            meta(),
            ContextElements::Grounded(&grounded_a),
            &descriptions(),
        )
        .unwrap();
        let ctx_b = assemble_context(
            meta(),
            ContextElements::Grounded(&grounded_b),
            &descriptions(),
        )
        .unwrap();
        assert_eq!(ctx_a, ctx_b);
    }

    #[test]
    fn prompt_is_deterministic() {
        let grounded = grounded_fixture();
        let context = assemble_context(
            meta(),
            ContextElements::Grounded(&grounded),
            &descriptions(),
        )
        .unwrap();
        let a = build_prompt(&context, &PipelineMode::setting_c());
        let b = build_prompt(&context, &PipelineMode::setting_c());
        assert_eq!(a, b);
        assert_eq!(a.fingerprint.len(), 64);
    }

    #[test]
    fn mode_a_and_c_prompts_differ_in_evidence_and_constraints() {
        let inventory = vec![eid("bell tower"), eid("pediment"), eid("rose window")];
        let all_context =
            assemble_context(meta(), ContextElements::Ordered(&inventory), &descriptions())
                .unwrap();
        let grounded = grounded_fixture();
        let grounded_context = assemble_context(
            meta(),
            ContextElements::Grounded(&grounded),
            &descriptions(),
        )
        .unwrap();
        let prompt_a = build_prompt(&all_context, &PipelineMode::setting_a());
        let prompt_c = build_prompt(&grounded_context, &PipelineMode::setting_c());
        // A carries the full inventory, including elements C omits.
        assert!(prompt_a.text.contains("rose window"));
        assert!(!prompt_c.text.contains("rose window"));
        // Only C carries the constraint block.
        let constraint_marker = "Describe only the elements listed above";
        assert!(prompt_c.text.contains(constraint_marker));
        assert!(!prompt_a.text.contains(constraint_marker));
    }

    #[test]
    fn mode_b_prompt_contains_reasoning_block() {
        let inventory = vec![eid("bell tower")];
        let context =
            assemble_context(meta(), ContextElements::Ordered(&inventory), &descriptions())
                .unwrap();
        let marker = "Think step by step";
        let prompt_b = build_prompt(&context, &PipelineMode::setting_b());
        let prompt_a = build_prompt(&context, &PipelineMode::setting_a());
        assert!(prompt_b.text.contains(marker));
        assert!(!prompt_a.text.contains(marker));
    }

    #[test]
    fn mode_invariants_enforced() {
        let mut mode = PipelineMode::setting_c();
        mode.element_source = ElementSource::AllElements;
        assert!(mode.validate().is_err());
        assert!(PipelineMode::setting_c().validate().is_ok());
        assert!(PipelineMode::text_only_gold().validate().is_ok());
        assert!(PipelineMode::ablation(4).unwrap().validate().is_ok());
        assert!(PipelineMode::ablation(5).is_err());
    }

    #[test]
    fn generate_echoes_mock_and_audits_attachments() {
        let context =
            assemble_context(meta(), ContextElements::Ordered(&[]), &descriptions()).unwrap();
        let mode = PipelineMode::setting_a();
        let prompt = build_prompt(&context, &mode);
        let backend = MockChatBackend::new("gen").default_response("A canned paragraph.");
        let image = RgbImage::new(8, 8);
        let result = generate(
            Some(&image),
            &prompt,
            &mode,
            context.clone(),
            &backend,
            DecodingParams::default(),
            &RetryPolicy::none(),
            None,
        )
        .unwrap();
        assert_eq!(result.text, "A canned paragraph.");
        assert_eq!(result.audit.image_attachments, 1);

        // Text-only mode sends zero image payloads.
        let gold_mode = PipelineMode::text_only_gold();
        let gold_prompt = build_prompt(&context, &gold_mode);
        let result = generate(
            None,
            &gold_prompt,
            &gold_mode,
            context.clone(),
            &backend,
            DecodingParams::default(),
            &RetryPolicy::none(),
            None,
        )
        .unwrap();
        assert_eq!(result.audit.image_attachments, 0);

        // Image presence must match the mode.
        let err = generate(
            Some(&image),
            &gold_prompt,
            &gold_mode,
            context,
            &backend,
            DecodingParams::default(),
            &RetryPolicy::none(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, GenerateError::ModeImageMismatch { .. }));
    }

    #[test]
    fn generate_rejects_empty_completion() {
        let context =
            assemble_context(meta(), ContextElements::Ordered(&[]), &descriptions()).unwrap();
        let mode = PipelineMode::text_only_gold();
        let prompt = build_prompt(&context, &mode);
        let backend = MockChatBackend::new("gen").default_response("   ");
        let err = generate(
            None,
            &prompt,
            &mode,
            context,
            &backend,
            DecodingParams::default(),
            &RetryPolicy::none(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, GenerateError::EmptyGeneration));
    }

    #[test]
    fn generate_is_deterministic_with_mock() {
        let context =
            assemble_context(meta(), ContextElements::Ordered(&[]), &descriptions()).unwrap();
        let mode = PipelineMode::text_only_gold();
        let prompt = build_prompt(&context, &mode);
        let backend = MockChatBackend::new("gen").default_response("Stable output.");
        let run = || {
            generate(
                None,
                &prompt,
                &mode,
                context.clone(),
                &backend,
                DecodingParams::default(),
                &RetryPolicy::none(),
                None,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn segment_cjk_terminators() {
        let spans = segment_sentences("甲。乙！");
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].slice("甲。乙！"), "甲。");
        assert_eq!(spans[1].slice("甲。乙！"), "乙！");
    }

    #[test]
    fn segment_without_terminator_is_one_span() {
        let spans = segment_sentences("no terminator here");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].slice("no terminator here"), "no terminator here");
    }

    #[test]
    fn segment_empty_text() {
        assert!(segment_sentences("").is_empty());
        assert!(segment_sentences("   \n  ").is_empty());
    }

    #[test]
    fn segment_latin_needs_following_whitespace() {
        let text = "It is 3.5 meters tall. Quite tall!";
        let spans = segment_sentences(text);
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].slice(text), "It is 3.5 meters tall.");
        assert_eq!(spans[1].slice(text), "Quite tall!");
    }

    #[test]
    fn segment_spans_are_ordered_disjoint_and_cover_content() {
        let text = "One. Two! Three? 四。Five\nSix";
        let spans = segment_sentences(text);
        assert_eq!(spans.len(), 6);
        for pair in spans.windows(2) {
            assert!(pair[0].end <= pair[1].start);
        }
        // Between consecutive spans only whitespace separators remain.
        let mut cursor = 0;
        for span in &spans {
            assert!(text[cursor..span.start].chars().all(char::is_whitespace));
            cursor = span.end;
        }
        assert!(text[cursor..].chars().all(char::is_whitespace));
    }

    #[test]
    fn citations_match_canonical_names() {
        let inventory = vec![eid("pediment"), eid("windows")];
        let table = SynonymTable::default();
        let extraction = extract_citations(
            "The pediment displays Baroque style. Nothing else here.",
            &inventory,
            &table,
        );
        assert_eq!(extraction.sentences.len(), 2);
        assert_eq!(
            extraction.cited.get(&0),
            Some(&[eid("pediment")].into_iter().collect())
        );
        assert!(!extraction.cited.contains_key(&1));
        assert_eq!(
            extraction.cited_union,
            [eid("pediment")].into_iter().collect()
        );
    }

    #[test]
    fn citations_empty_when_no_inventory_term_appears() {
        let inventory = vec![eid("pediment")];
        let table = SynonymTable::default();
        let extraction = extract_citations("A plain wall. A plain door.", &inventory, &table);
        assert!(extraction.cited.is_empty());
        assert!(extraction.cited_union.is_empty());
        assert_eq!(extraction.unsupported_count(), 2);
    }

    #[test]
    fn citations_resolve_synonyms() {
        let inventory = vec![eid("bell tower")];
        let table = SynonymTable::from_pairs(
            [("campanile", "bell tower")],
            UnmappedPolicy::PassthroughFlagged,
        )
        .unwrap();
        let extraction =
            extract_citations("The campanile rises over the square.", &inventory, &table);
        assert_eq!(
            extraction.cited_union,
            [eid("bell tower")].into_iter().collect()
        );
    }

    #[test]
    fn citations_longest_match_wins() {
        // "bell tower" embeds "tower": the longer name must not double-cite.
        let inventory = vec![eid("bell tower"), eid("tower")];
        let table = SynonymTable::default();
        let extraction = extract_citations("The bell tower gleams.", &inventory, &table);
        assert_eq!(
            extraction.cited_union,
            [eid("bell tower")].into_iter().collect()
        );
    }

    #[test]
    fn citation_extraction_is_monotone_under_synonyms() {
        let inventory = vec![eid("bell tower"), eid("pediment")];
        let text = "The campanile rises. The pediment crowns the portal.";
        let without = extract_citations(text, &inventory, &SynonymTable::default());
        let with_table = SynonymTable::from_pairs(
            [("campanile", "bell tower")],
            UnmappedPolicy::PassthroughFlagged,
        )
        .unwrap();
        let with = extract_citations(text, &inventory, &with_table);
        assert!(without.cited_union.is_subset(&with.cited_union));
    }

    #[test]
    fn compliant_grounded_output_cites_within_context() {
        // The AP = 1 ideal: a mock that copies grounded evidence verbatim.
        let grounded = grounded_fixture();
        let context = assemble_context(
            meta(),
            ContextElements::Grounded(&grounded),
            &descriptions(),
        )
        .unwrap();
        let mode = PipelineMode::setting_c();
        let prompt = build_prompt(&context, &mode);
        let compliant_text = context
            .entries
            .iter()
            .map(|(e, d)| format!("The {e} is shown. {d}"))
            .collect::<Vec<_>>()
            .join(" ");
        let backend = MockChatBackend::new("gen").default_response(compliant_text);
        let image = RgbImage::new(8, 8);
        let result = generate(
            Some(&image),
            &prompt,
            &mode,
            context.clone(),
            &backend,
            DecodingParams::default(),
            &RetryPolicy::none(),
            None,
        )
        .unwrap();
        let inventory: Vec<ElementId> = descriptions().keys().cloned().collect();
        let extraction = extract_citations(&result.text, &inventory, &SynonymTable::default());
        let context_elements: BTreeSet<ElementId> =
            context.entries.iter().map(|(e, _)| e.clone()).collect();
        assert!(extraction.cited_union.is_subset(&context_elements));
        assert!(!extraction.cited_union.is_empty());
    }
}
