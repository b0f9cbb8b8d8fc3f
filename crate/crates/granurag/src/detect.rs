//! Candidate-region detection and geometric redundancy filtering.
//!
//! Raw detector output often covers the same visual content at several
//! scales. [`filter_redundant`] applies overlap-based filtering: when two
//! boxes overlap beyond a threshold, the smaller one is retained, preserving
//! fine-grained crops. The overlap measure is intersection area over the
//! smaller box's area, so a box nested inside another counts as full overlap.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, DetectorBackend};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid bounding box [{x_min}, {y_min}, {x_max}, {y_max}]: min must be < max")]
    InvalidBox {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
    },
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("filter threshold {value} outside {range}")]
    InvalidThreshold { value: f64, range: &'static str },
    #[error("region degenerates to zero area after clamping to image bounds")]
    DegenerateRegion,
    #[error("cannot read image {path:?}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },
    #[error("detection vocabulary is empty")]
    EmptyVocabulary,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Axis-aligned pixel rectangle, origin top-left, half-open:
/// area = (x_max - x_min) * (y_max - y_min).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", try_from = "[u32; 4]")]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, DetectError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(DetectError::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> u64 {
        u64::from(self.x_max - self.x_min) * u64::from(self.y_max - self.y_min)
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        if x0 >= x1 || y0 >= y1 {
            0
        } else {
            u64::from(x1 - x0) * u64::from(y1 - y0)
        }
    }

    /// Clamps to an image of the given dimensions; `None` when nothing of the
    /// box remains.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let x_min = self.x_min.min(width);
        let y_min = self.y_min.min(height);
        let x_max = self.x_max.min(width);
        let y_max = self.y_max.min(height);
        BoundingBox::new(x_min, y_min, x_max, y_max).ok()
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = String;

    fn try_from(v: [u32; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
    }
}

/// A scored, labeled region proposed by the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    /// Detector vocabulary term, e.g. "column" or "carving".
    pub label: String,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64, label: impl Into<String>) -> Result<Self, DetectError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DetectError::InvalidConfidence(confidence));
        }
        Ok(Detection {
            bbox,
            confidence,
            label: label.into(),
        })
    }
}

/// Thresholds for the detection post-processing stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Two boxes overlapping by more than this fraction are redundant; the
    /// smaller is kept. Default 0.80.
    pub overlap_threshold: f64,
    /// Detections below this confidence are dropped. Default 0.10.
    pub confidence_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            overlap_threshold: 0.80,
            confidence_threshold: 0.10,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(DetectError::InvalidThreshold {
                value: self.overlap_threshold,
                range: "(0, 1]",
            });
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(DetectError::InvalidThreshold {
                value: self.confidence_threshold,
                range: "[0, 1]",
            });
        }
        Ok(())
    }
}

/// Overlap between two boxes as intersection area over the smaller box's
/// area. Symmetric; 0 when disjoint; 1 when either box contains the other.
pub fn overlap_ratio(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / a.area().min(b.area()) as f64
}

/// Removes redundant detections, retaining the smaller of any pair that
/// overlaps beyond `config.overlap_threshold`.
///
/// Greedy smallest-first: candidates are visited by ascending box area
/// (ties: higher confidence, then box coordinates, then label), and each is
/// accepted iff its overlap with every already-accepted box stays at or
/// below the threshold. The returned list preserves acceptance order, so no
/// retained pair exceeds the threshold and every removed box exceeds it
/// against some retained box of equal or smaller area.
pub fn filter_redundant(detections: &[Detection], config: &FilterConfig) -> Vec<Detection> {
    let mut ordered: Vec<&Detection> = detections.iter().collect();
    // Total ordering makes the result invariant under input permutation.
    ordered.sort_by(|a, b| {
        a.bbox
            .area()
            .cmp(&b.bbox.area())
            .then_with(|| b.confidence.total_cmp(&a.confidence))
            .then_with(|| a.bbox.cmp(&b.bbox))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut retained: Vec<Detection> = Vec::new();
    for candidate in ordered {
        let redundant = retained
            .iter()
            .any(|kept| overlap_ratio(&candidate.bbox, &kept.bbox) > config.overlap_threshold);
        if !redundant {
            retained.push(candidate.clone());
        }
    }
    retained
}

/// Runs the detector backend over an image and applies the confidence cut.
///
/// Backend boxes are clamped to the image bounds; boxes that clamp to zero
/// area (fully outside the image) are dropped, as are detections below
/// `config.confidence_threshold`. Out-of-range confidences are clamped
/// into [0, 1].
pub fn detect(
    image_path: &Path,
    vocabulary: &[String],
    config: &FilterConfig,
    backend: &dyn DetectorBackend,
) -> Result<Vec<Detection>, DetectError> {
    if vocabulary.is_empty() {
        return Err(DetectError::EmptyVocabulary);
    }
    config.validate()?;
    let (width, height) = image::image_dimensions(image_path).map_err(|source| {
        DetectError::Image {
            path: image_path.display().to_string(),
            source,
        }
    })?;
    let raw = backend.detect_objects(image_path, vocabulary)?;
    let mut detections = Vec::with_capacity(raw.len());
    for r in raw {
        let confidence = r.confidence.clamp(0.0, 1.0);
        if confidence < config.confidence_threshold {
            continue;
        }
        if let Some(bbox) = clamp_raw_box(r.bbox, width, height) {
            detections.push(Detection {
                bbox,
                confidence,
                label: r.label,
            });
        }
    }
    Ok(detections)
}

/// Converts possibly fractional, possibly out-of-bounds provider coordinates
/// into a valid in-bounds pixel box.
pub(crate) fn clamp_raw_box(raw: [f64; 4], width: u32, height: u32) -> Option<BoundingBox> {
    let clamp = |v: f64, hi: u32| -> u32 { v.round().clamp(0.0, f64::from(hi)) as u32 };
    let x_min = clamp(raw[0], width);
    let y_min = clamp(raw[1], height);
    let x_max = clamp(raw[2], width);
    let y_max = clamp(raw[3], height);
    BoundingBox::new(x_min, y_min, x_max, y_max).ok()
}

/// Pixel-exact crop of the box extent.
pub fn crop_region(image: &RgbImage, bbox: &BoundingBox) -> Result<RgbImage, DetectError> {
    let clamped = bbox
        .clamp_to(image.width(), image.height())
        .ok_or(DetectError::DegenerateRegion)?;
    let mut out = RgbImage::new(clamped.width(), clamped.height());
    for y in 0..clamped.height() {
        for x in 0..clamped.width() {
            out.put_pixel(x, y, *image.get_pixel(clamped.x_min + x, clamped.y_min + y));
        }
    }
    Ok(out)
}

/// Fixed palette cycled by box index when rendering annotations.
const PALETTE: [[u8; 3]; 8] = [
    [230, 57, 70],   // red
    [29, 120, 216],  // blue
    [46, 160, 67],   // green
    [247, 127, 0],   // orange
    [131, 56, 236],  // violet
    [0, 150, 136],   // teal
    [214, 40, 140],  // magenta
    [120, 94, 40],   // brown
];

const STROKE_WIDTH: u32 = 2;

/// Draws each box with a fixed stroke width, a per-index color cycle, and an
/// indexed label at the box's top-left corner. Deterministic: identical
/// inputs yield byte-identical pixel buffers.
pub fn render_annotations(image: &RgbImage, boxes: &[(BoundingBox, String)]) -> RgbImage {
    let mut out = image.clone();
    let (width, height) = (out.width(), out.height());
    for (index, (bbox, label)) in boxes.iter().enumerate() {
        let Some(clamped) = bbox.clamp_to(width, height) else {
            continue;
        };
        let color = image::Rgb(PALETTE[index % PALETTE.len()]);
        draw_rect_outline(&mut out, &clamped, color);
        let text = format!("{index}: {label}");
        draw_label(&mut out, &clamped, &text, color);
    }
    out
}

fn draw_rect_outline(image: &mut RgbImage, bbox: &BoundingBox, color: image::Rgb<u8>) {
    let (w, h) = (image.width(), image.height());
    for t in 0..STROKE_WIDTH {
        // Horizontal edges.
        for x in bbox.x_min..bbox.x_max {
            let top = bbox.y_min.saturating_add(t);
            let bottom = bbox.y_max.saturating_sub(1 + t);
            if top < h && x < w {
                image.put_pixel(x, top, color);
            }
            if bottom >= bbox.y_min && bottom < h && x < w {
                image.put_pixel(x, bottom, color);
            }
        }
        // Vertical edges.
        for y in bbox.y_min..bbox.y_max {
            let left = bbox.x_min.saturating_add(t);
            let right = bbox.x_max.saturating_sub(1 + t);
            if left < w && y < h {
                image.put_pixel(left, y, color);
            }
            if right >= bbox.x_min && right < w && y < h {
                image.put_pixel(right, y, color);
            }
        }
    }
}

/// Label text on a filled background bar anchored at the box top-left.
fn draw_label(image: &mut RgbImage, bbox: &BoundingBox, text: &str, color: image::Rgb<u8>) {
    let glyphs: Vec<[u8; 5]> = text.chars().map(glyph_columns).collect();
    let text_w = (glyphs.len() as u32) * 6 + 2;
    let text_h = 9;
    // Bar sits just above the box when there is room, else inside it.
    let y0 = if bbox.y_min >= text_h {
        bbox.y_min - text_h
    } else {
        bbox.y_min
    };
    let x0 = bbox.x_min;
    for dy in 0..text_h {
        for dx in 0..text_w {
            let (x, y) = (x0 + dx, y0 + dy);
            if x < image.width() && y < image.height() {
                image.put_pixel(x, y, color);
            }
        }
    }
    let white = image::Rgb([255u8, 255, 255]);
    for (i, glyph) in glyphs.iter().enumerate() {
        let gx = x0 + 1 + (i as u32) * 6;
        for (col, bits) in glyph.iter().enumerate() {
            for row in 0..7 {
                if bits & (1 << row) != 0 {
                    let (x, y) = (gx + col as u32, y0 + 1 + row);
                    if x < image.width() && y < image.height() {
                        image.put_pixel(x, y, white);
                    }
                }
            }
        }
    }
}

/// 5x7 column-major glyphs (bit 0 = top row) for the label charset.
/// Characters without a glyph (including CJK) render as a filled block,
/// which keeps output deterministic for any label text.
fn glyph_columns(c: char) -> [u8; 5] {
    let c = if c.is_ascii_lowercase() {
        c.to_ascii_uppercase()
    } else {
        c
    };
    match c {
        ' ' => [0x00, 0x00, 0x00, 0x00, 0x00],
        ':' => [0x00, 0x36, 0x36, 0x00, 0x00],
        '-' => [0x08, 0x08, 0x08, 0x08, 0x08],
        '_' => [0x40, 0x40, 0x40, 0x40, 0x40],
        '.' => [0x00, 0x60, 0x60, 0x00, 0x00],
        ',' => [0x00, 0x50, 0x30, 0x00, 0x00],
        '(' => [0x00, 0x1C, 0x22, 0x41, 0x00],
        ')' => [0x00, 0x41, 0x22, 0x1C, 0x00],
        '/' => [0x20, 0x10, 0x08, 0x04, 0x02],
        '0' => [0x3E, 0x51, 0x49, 0x45, 0x3E],
        '1' => [0x00, 0x42, 0x7F, 0x40, 0x00],
        '2' => [0x42, 0x61, 0x51, 0x49, 0x46],
        '3' => [0x21, 0x41, 0x45, 0x4B, 0x31],
        '4' => [0x18, 0x14, 0x12, 0x7F, 0x10],
        '5' => [0x27, 0x45, 0x45, 0x45, 0x39],
        '6' => [0x3C, 0x4A, 0x49, 0x49, 0x30],
        '7' => [0x01, 0x71, 0x09, 0x05, 0x03],
        '8' => [0x36, 0x49, 0x49, 0x49, 0x36],
        '9' => [0x06, 0x49, 0x49, 0x29, 0x1E],
        'A' => [0x7E, 0x11, 0x11, 0x11, 0x7E],
        'B' => [0x7F, 0x49, 0x49, 0x49, 0x36],
        'C' => [0x3E, 0x41, 0x41, 0x41, 0x22],
        'D' => [0x7F, 0x41, 0x41, 0x22, 0x1C],
        'E' => [0x7F, 0x49, 0x49, 0x49, 0x41],
        'F' => [0x7F, 0x09, 0x09, 0x09, 0x01],
        'G' => [0x3E, 0x41, 0x49, 0x49, 0x7A],
        'H' => [0x7F, 0x08, 0x08, 0x08, 0x7F],
        'I' => [0x00, 0x41, 0x7F, 0x41, 0x00],
        'J' => [0x20, 0x40, 0x41, 0x3F, 0x01],
        'K' => [0x7F, 0x08, 0x14, 0x22, 0x41],
        'L' => [0x7F, 0x40, 0x40, 0x40, 0x40],
        'M' => [0x7F, 0x02, 0x0C, 0x02, 0x7F],
        'N' => [0x7F, 0x04, 0x08, 0x10, 0x7F],
        'O' => [0x3E, 0x41, 0x41, 0x41, 0x3E],
        'P' => [0x7F, 0x09, 0x09, 0x09, 0x06],
        'Q' => [0x3E, 0x41, 0x51, 0x21, 0x5E],
        'R' => [0x7F, 0x09, 0x19, 0x29, 0x46],
        'S' => [0x46, 0x49, 0x49, 0x49, 0x31],
        'T' => [0x01, 0x01, 0x7F, 0x01, 0x01],
        'U' => [0x3F, 0x40, 0x40, 0x40, 0x3F],
        'V' => [0x1F, 0x20, 0x40, 0x20, 0x1F],
        'W' => [0x3F, 0x40, 0x38, 0x40, 0x3F],
        'X' => [0x63, 0x14, 0x08, 0x14, 0x63],
        'Y' => [0x07, 0x08, 0x70, 0x08, 0x07],
        'Z' => [0x61, 0x51, 0x49, 0x45, 0x43],
        _ => [0x7F, 0x7F, 0x7F, 0x7F, 0x7F],
    }
}
