//! Element-grounded multimodal retrieval-augmented generation.
//!
//! This crate implements a detect-then-retrieve-then-generate pipeline for
//! landmark imagery, together with the two-level knowledge corpus it consumes
//! and the evaluation harness used to score its output:
//!
//! 1. **Detect** ([`detect`]): an open-vocabulary detector backend proposes
//!    candidate regions; overlap-based redundancy filtering keeps the smaller
//!    of two boxes that overlap beyond a threshold.
//! 2. **Ground** ([`ground`]): each retained region is matched against the
//!    landmark's element inventory via a multimodal chat backend (or a
//!    CLIP-style embedding baseline over a flat exact vector index), yielding
//!    the set of elements with confirmed visual evidence.
//! 3. **Generate** ([`generate`]): grounded elements are expanded into a
//!    hierarchical evidence context (global metadata plus per-element
//!    descriptions) and a constrained prompt; citations are extracted from
//!    the output for attribution scoring.
//! 4. **Evaluate** ([`evaluate`]): ROUGE-L, embedding F1, judge-ensemble
//!    scores, attribution precision/recall, unsupported claim rate, element
//!    P/R/F1, Fleiss' kappa, win/loss aggregation, and per-stage error
//!    diagnosis.
//!
//! All external models sit behind the pluggable contracts in [`backends`],
//! with deterministic mock implementations and a content-addressed response
//! cache, so every stage is testable offline. [`pipeline`] orchestrates full
//! runs with per-stage artifact persistence and resume.

pub mod backends;
pub mod corpus;
pub mod detect;
pub mod evaluate;
pub mod fixtures;
pub mod generate;
pub mod ground;
pub mod pipeline;

pub use corpus::{CorpusError, ElementId, ImageRecord, Landmark, SynonymTable};
pub use detect::{BoundingBox, Detection, FilterConfig};
pub use generate::{EvidenceContext, PipelineMode};
pub use ground::{FlatIndex, GroundedElementSet};

