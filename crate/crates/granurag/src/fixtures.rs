//! Deterministic offline fixture: a small three-landmark corpus with
//! generated images and fully scripted mock backends.
//!
//! The faulty variant injects one failure of each pipeline stage into the
//! basilica image: an element visible but never detected, a grounded element
//! that is not actually visible, a cited element without grounded evidence,
//! and a grounded element the generator never cites. The perfect variant
//! grounds and cites exactly the gold sets, so every diagnosis bucket is
//! empty. Both variants run entirely offline and bit-identically.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;

use crate::backends::mock::{MockChatSpec, MockDetectorSpec, MockEmbeddingSpec, ScriptRule};
use crate::backends::{
    BackendConfig, BackendRegistry, BackendSpec, BackendsFile, MockChatBackend,
    MockDetectorBackend, MockEmbeddingBackend, ProviderKind, RawDetection, RetryPolicy,
    RoleAssignment,
};
use crate::generate::PipelineMode;
use crate::pipeline::RunConfig;

/// File paths of a written fixture.
pub struct FixturePaths {
    pub dir: PathBuf,
    pub corpus: PathBuf,
    pub images: PathBuf,
    pub synonyms: PathBuf,
    pub backends: PathBuf,
}

/// Typed handles onto the fixture's mock backends, for call-count
/// assertions.
pub struct FixtureMocks {
    pub detector: Arc<MockDetectorBackend>,
    pub matcher: Arc<MockChatBackend>,
    pub generator: Arc<MockChatBackend>,
    pub judges: Vec<Arc<MockChatBackend>>,
    pub embedder: Arc<MockEmbeddingBackend>,
}

const CORPUS_JSON: &str = r#"[
  {
    "Landmarks": "Saint Aurelia Basilica",
    "Summary": "A hilltop basilica overlooking the old town square.",
    "Style": "Provincial Baroque",
    "Elements": ["bell tower", "pediment", "rose window", "crypt portal"],
    "ElementDescriptions": {
      "bell tower": "The south bell tower holds two bronze bells cast in 1714.",
      "pediment": "A curved pediment with a shell motif crowns the portal.",
      "rose window": "A twelve-lobed rose window colors the nave at dusk.",
      "crypt portal": "A low stone doorway leads down to the crypt."
    },
    "AppearanceDescriptions": {
      "bell tower": "Square tower with arched openings and a tiled cap.",
      "pediment": "Curved triangular crown above the main door.",
      "rose window": "Large circular window with radial stone tracery.",
      "crypt portal": "Low, dark rectangular doorway at ground level."
    }
  },
  {
    "Landmarks": "Harbor Fort Lighthouse",
    "Summary": "A squat lighthouse guarding the harbor mole.",
    "Style": "Utilitarian maritime",
    "Elements": ["lantern room", "granite base"],
    "ElementDescriptions": {
      "lantern room": "The glazed lantern room casts a fixed green light.",
      "granite base": "A battered granite plinth takes the winter seas."
    }
  },
  {
    "Landmarks": "Old Mill Bridge",
    "Summary": "A single-span bridge beside the former grain mill.",
    "Style": "Vernacular stone",
    "Elements": ["stone arch", "keystone", "parapet"],
    "ElementDescriptions": {
      "stone arch": "The low stone arch clears the stream by two meters.",
      "keystone": "A carved keystone bears the mill's wheel mark.",
      "parapet": "A waist-high parapet lines both sides of the deck."
    }
  }
]"#;

fn images_json(faulty: bool) -> String {
    let basilica = if faulty {
        // a1 carries the injected faults.
        r#"{"image_id":"a1","path":"a1.png","landmark":"Saint Aurelia Basilica",
            "visible_elements":["bell tower","pediment","rose window"],
            "view_type":"mid_range",
            "reference":"The bell tower rises over the square. The pediment crowns the portal. A rose window colors the nave."}"#
    } else {
        r#"{"image_id":"a2","path":"a2.png","landmark":"Saint Aurelia Basilica",
            "visible_elements":["bell tower","pediment"],
            "view_type":"close_up",
            "reference":"The bell tower rises over the square. The pediment crowns the portal."}"#
    };
    format!(
        r#"[
  {basilica},
  {{"image_id":"b1","path":"b1.png","landmark":"Old Mill Bridge",
    "visible_elements":["stone arch","keystone"],
    "view_type":"mid_range",
    "reference":"The stone arch spans the stream. The keystone locks the span."}},
  {{"image_id":"f1","path":"f1.png","landmark":"Harbor Fort Lighthouse",
    "visible_elements":["lantern room","granite base"],
    "view_type":"panoramic",
    "reference":"The lantern room glows at dusk. The granite base breaks the waves."}}
]"#
    )
}

const SYNONYMS_JSON: &str = r#"{
  "campanile": "bell tower",
  "granite stone": "granite",
  "carved motif": "ornamental carving"
}"#;

fn fixture_image(seed: u32) -> RgbImage {
    RgbImage::from_fn(64, 48, move |x, y| {
        image::Rgb([
            ((x * 7 + seed * 31) % 256) as u8,
            ((y * 11 + seed * 17) % 256) as u8,
            ((x + y + seed * 5) % 256) as u8,
        ])
    })
}

fn raw(bbox: [f64; 4], confidence: f64, label: &str) -> RawDetection {
    RawDetection {
        bbox,
        confidence,
        label: label.to_string(),
    }
}

/// Detections per fixture image. a1 includes a nested redundant box (kept
/// smaller wins) and a below-threshold detection to exercise the cuts.
pub fn detector_spec() -> MockDetectorSpec {
    let mut spec = MockDetectorSpec::default();
    spec.by_image.insert(
        "a1.png".into(),
        vec![
            raw([2.0, 2.0, 20.0, 20.0], 0.90, "tower"),
            raw([0.0, 0.0, 40.0, 40.0], 0.50, "facade"),
            raw([24.0, 4.0, 44.0, 24.0], 0.80, "carving"),
            raw([10.0, 28.0, 30.0, 44.0], 0.70, "portal"),
            raw([50.0, 40.0, 60.0, 46.0], 0.05, "window"),
        ],
    );
    spec.by_image.insert(
        "a2.png".into(),
        vec![
            raw([3.0, 2.0, 21.0, 20.0], 0.90, "tower"),
            raw([25.0, 5.0, 45.0, 25.0], 0.80, "carving"),
        ],
    );
    spec.by_image.insert(
        "f1.png".into(),
        vec![
            raw([5.0, 5.0, 25.0, 30.0], 0.85, "tower"),
            raw([30.0, 10.0, 50.0, 40.0], 0.75, "facade"),
        ],
    );
    spec.by_image.insert(
        "b1.png".into(),
        vec![
            raw([6.0, 4.0, 30.0, 26.0], 0.88, "arch"),
            raw([32.0, 6.0, 52.0, 30.0], 0.66, "carving"),
        ],
    );
    spec
}

/// Region-to-element answers keyed by the crop part name that
/// `match_element` embeds in the request.
pub fn matcher_spec() -> MockChatSpec {
    let rule = |pattern: &str, response: &str| ScriptRule {
        pattern: pattern.to_string(),
        response: response.to_string(),
    };
    MockChatSpec {
        script: vec![
            rule("crop:2,2,20,20]", "bell tower"),
            rule("crop:24,4,44,24]", "pediment"),
            rule("crop:10,28,30,44]", "crypt portal"),
            rule("crop:3,2,21,20]", "bell tower"),
            rule("crop:25,5,45,25]", "pediment"),
            rule("crop:5,5,25,30]", "lantern room"),
            rule("crop:30,10,50,40]", "granite base"),
            rule("crop:6,4,30,26]", "stone arch"),
            rule("crop:32,6,52,30]", "keystone"),
        ],
        default_response: Some("NONE".into()),
        fail_first: 0,
    }
}

/// Generation answers keyed by evidence present in the prompt. The faulty
/// basilica view cites the crypt portal and the rose window but never the
/// grounded pediment; every other view copies its reference.
pub fn generator_spec() -> MockChatSpec {
    let rule = |pattern: &str, response: &str| ScriptRule {
        pattern: pattern.to_string(),
        response: response.to_string(),
    };
    MockChatSpec {
        script: vec![
            rule(
                "crypt portal:",
                "The bell tower rises by the square. The crypt portal stays shadowed. A rose window crowns the gable.",
            ),
            rule(
                "Landmark: Saint Aurelia Basilica",
                "The bell tower rises over the square. The pediment crowns the portal.",
            ),
            rule(
                "Landmark: Harbor Fort Lighthouse",
                "The lantern room glows at dusk. The granite base breaks the waves.",
            ),
            rule(
                "Landmark: Old Mill Bridge",
                "The stone arch spans the stream. The keystone locks the span.",
            ),
        ],
        default_response: Some("A plain view of the landmark.".into()),
        fail_first: 0,
    }
}

/// Three judges with fixed rubric verdicts (weighted 78, 60, 90).
pub fn judge_specs() -> Vec<MockChatSpec> {
    [(80, 70, 90), (60, 60, 60), (90, 90, 90)]
        .iter()
        .map(|(c, f, h)| MockChatSpec {
            script: Vec::new(),
            default_response: Some(format!(
                "coverage: {c}\nfaithfulness: {f}\ncohesion: {h}"
            )),
            fail_first: 0,
        })
        .collect()
}

pub fn embedder_spec() -> MockEmbeddingSpec {
    MockEmbeddingSpec {
        dimension: 16,
        assignments: Default::default(),
    }
}

/// Writes the corpus, sidecar, synonym table, images, and a backends config
/// file under `dir`.
pub fn write_fixture(dir: &Path, faulty: bool) -> std::io::Result<FixturePaths> {
    std::fs::create_dir_all(dir)?;
    let corpus = dir.join("corpus.json");
    let images = dir.join("images.json");
    let synonyms = dir.join("synonyms.json");
    let backends = dir.join("backends.json");
    std::fs::write(&corpus, CORPUS_JSON)?;
    std::fs::write(&images, images_json(faulty))?;
    std::fs::write(&synonyms, SYNONYMS_JSON)?;
    for (name, seed) in [("a1.png", 1), ("a2.png", 2), ("f1.png", 3), ("b1.png", 4)] {
        fixture_image(seed)
            .save(dir.join(name))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    let file = backends_file();
    std::fs::write(&backends, serde_json::to_vec_pretty(&file)?)?;
    Ok(FixturePaths {
        dir: dir.to_path_buf(),
        corpus,
        images,
        synonyms,
        backends,
    })
}

/// The fixture's backends as a loadable config file.
pub fn backends_file() -> BackendsFile {
    let mut file = BackendsFile::default();
    let base = BackendConfig::default();
    let mut insert = |id: &str, provider: ProviderKind| {
        file.backends.insert(
            id.to_string(),
            BackendSpec {
                provider,
                config: base.clone(),
            },
        );
    };
    insert("detector", ProviderKind::MockDetector(detector_spec()));
    insert("matcher", ProviderKind::MockChat(matcher_spec()));
    insert("generator", ProviderKind::MockChat(generator_spec()));
    for (i, judge) in judge_specs().into_iter().enumerate() {
        insert(&format!("judge-{i}"), ProviderKind::MockChat(judge));
    }
    insert("embedder", ProviderKind::MockEmbedding(embedder_spec()));
    file
}

/// Builds an in-process registry with typed mock handles for call counting.
pub fn registry() -> (BackendRegistry, FixtureMocks) {
    let detector = Arc::new(MockDetectorBackend::from_spec("detector", detector_spec()));
    let matcher = Arc::new(MockChatBackend::from_spec("matcher", matcher_spec()));
    let generator = Arc::new(MockChatBackend::from_spec("generator", generator_spec()));
    let judges: Vec<Arc<MockChatBackend>> = judge_specs()
        .into_iter()
        .enumerate()
        .map(|(i, spec)| Arc::new(MockChatBackend::from_spec(format!("judge-{i}"), spec)))
        .collect();
    let embedder = Arc::new(MockEmbeddingBackend::from_spec("embedder", embedder_spec()));
    let mut registry = BackendRegistry::new();
    registry.register_detector(detector.clone(), RetryPolicy::none());
    registry.register_chat(matcher.clone(), RetryPolicy::none());
    registry.register_chat(generator.clone(), RetryPolicy::none());
    for judge in &judges {
        registry.register_chat(judge.clone(), RetryPolicy::none());
    }
    registry.register_embedder(embedder.clone(), RetryPolicy::none());
    (
        registry,
        FixtureMocks {
            detector,
            matcher,
            generator,
            judges,
            embedder,
        },
    )
}

/// Role assignment matching [`registry`] and [`backends_file`].
pub fn roles() -> RoleAssignment {
    RoleAssignment {
        detector: "detector".into(),
        matcher: "matcher".into(),
        generator: "generator".into(),
        judges: vec!["judge-0".into(), "judge-1".into(), "judge-2".into()],
        embedder: Some("embedder".into()),
    }
}

/// A ready-to-run configuration over a written fixture.
pub fn run_config(paths: &FixturePaths, output_dir: &Path) -> RunConfig {
    RunConfig {
        corpus: paths.corpus.clone(),
        images: paths.images.clone(),
        synonyms: Some(paths.synonyms.clone()),
        vocabulary: None,
        mode: PipelineMode::setting_c(),
        filter: Default::default(),
        backends: roles(),
        output_dir: output_dir.to_path_buf(),
        cache_dir: None,
        no_cache: false,
        sweep: None,
        seed: 7,
        sample: None,
        workers: 1,
        tokenization: Default::default(),
        stop_after: None,
    }
}
