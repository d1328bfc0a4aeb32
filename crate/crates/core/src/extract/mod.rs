//! Watermark extraction: per-segment cropping, optional learned
//! reconstruction, glyph recognition, and the segment/word/letter metrics.

mod recognizer;
mod reconstructor;

pub use recognizer::{
    ncc, recognize_segment, train_classifier, train_classifier_on_segments, GlyphClassifier, Recognizer, TemplateBank,
};
pub use reconstructor::{train_reconstructor, Reconstructor, ReconstructorMeta, ReconstructorOptions};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{crop_segments, GlyphGeometry, Image, SegmentLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub decoded: String,
    pub confidences: Vec<f64>,
    /// Whether `decoded` equals the ground truth, when it was supplied.
    pub correct: Option<bool>,
}

impl SegmentRecord {
    pub fn confidence_mean(&self) -> f64 {
        if self.confidences.is_empty() {
            return 0.0;
        }
        self.confidences.iter().sum::<f64>() / self.confidences.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub segments: Vec<SegmentRecord>,
    pub truth: Option<String>,
}

impl ExtractionResult {
    /// Builds a result from decoded strings, filling indicators from `truth`.
    pub fn from_decoded(decoded: Vec<String>, truth: Option<&str>) -> Self {
        let segments = decoded
            .into_iter()
            .map(|d| SegmentRecord {
                correct: truth.map(|t| d == t),
                confidences: vec![1.0; d.chars().count()],
                decoded: d,
            })
            .collect();
        Self {
            segments,
            truth: truth.map(str::to_string),
        }
    }

    pub fn indicators(&self) -> Result<Vec<bool>> {
        self.segments
            .iter()
            .map(|s| {
                s.correct
                    .ok_or(Error::param("results", "ground truth was not supplied"))
            })
            .collect()
    }

    /// Fraction of all glyph slots, over every segment, that decode to the truth.
    pub fn glyph_accuracy(&self, truth: &str) -> f64 {
        let t: Vec<char> = truth.chars().collect();
        let (mut ok, mut n) = (0usize, 0usize);
        for s in &self.segments {
            for (i, c) in s.decoded.chars().enumerate() {
                n += 1;
                if t.get(i) == Some(&c) {
                    ok += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            ok as f64 / n as f64
        }
    }
}

/// Recognizer, optional reconstructor, and segment layout bundled for reuse.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub recognizer: Recognizer,
    pub reconstructor: Option<Reconstructor>,
    pub layout: SegmentLayout,
    pub glyphs: usize,
}

impl Extractor {
    pub fn extract(&self, x: &Image, truth: Option<&str>) -> Result<ExtractionResult> {
        extract(
            &self.recognizer,
            self.reconstructor.as_ref(),
            x,
            &self.layout,
            self.glyphs,
            truth,
        )
    }

    pub fn without_reconstructor(&self) -> Extractor {
        Extractor {
            reconstructor: None,
            ..self.clone()
        }
    }
}

/// Crops every segment, optionally reconstructs it, and recognizes its glyphs.
pub fn extract(
    recognizer: &Recognizer,
    reconstructor: Option<&Reconstructor>,
    x: &Image,
    layout: &SegmentLayout,
    glyphs: usize,
    truth: Option<&str>,
) -> Result<ExtractionResult> {
    let (sh, sw) = layout.segment_size();
    GlyphGeometry::fit(sh, sw, glyphs, None)?;
    let segments = crop_segments(x, layout)?
        .into_iter()
        .map(|seg| {
            let seg = match reconstructor {
                Some(r) => r.reconstruct(&seg)?,
                None => seg,
            };
            let (decoded, confidences) = recognize_segment(recognizer, &seg, glyphs)?;
            Ok(SegmentRecord {
                correct: truth.map(|t| decoded == t),
                decoded,
                confidences,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtractionResult {
        segments,
        truth: truth.map(str::to_string),
    })
}

fn all_indicators(results: &[ExtractionResult]) -> Result<Vec<Vec<bool>>> {
    if results.is_empty() {
        return Err(Error::EmptyInput("extraction results"));
    }
    results.iter().map(ExtractionResult::indicators).collect()
}

/// Mean segment indicator over all `N·K` segments.
pub fn metric_d_all(results: &[ExtractionResult]) -> Result<f64> {
    let ind = all_indicators(results)?;
    let total: usize = ind.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyInput("segments"));
    }
    Ok(ind.iter().flatten().filter(|&&b| b).count() as f64 / total as f64)
}

/// Fraction of images with at least one correctly decoded segment.
pub fn metric_d_word(results: &[ExtractionResult]) -> Result<f64> {
    let ind = all_indicators(results)?;
    Ok(ind.iter().filter(|v| v.iter().any(|&b| b)).count() as f64 / ind.len() as f64)
}

/// Fraction of images whose every glyph position is decoded correctly by at
/// least one segment, so the full text can be assembled across segments.
pub fn metric_d_letter(results: &[ExtractionResult], truth: &str) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput("extraction results"));
    }
    let t: Vec<char> = truth.chars().collect();
    let mut ok = 0;
    for r in results {
        let decoded: Vec<Vec<char>> = r.segments.iter().map(|s| s.decoded.chars().collect()).collect();
        if decoded.iter().any(|d| d.len() != t.len()) {
            return Err(Error::param(
                "results",
                "per-glyph decodes do not match the text length",
            ));
        }
        if (0..t.len()).all(|m| decoded.iter().any(|d| d[m] == t[m])) {
            ok += 1;
        }
    }
    Ok(ok as f64 / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub d_all: f64,
    pub d_word: f64,
    pub d_letter: f64,
    pub n: usize,
    pub k: usize,
}

pub fn summarize(results: &[ExtractionResult], truth: &str) -> Result<MetricSummary> {
    Ok(MetricSummary {
        d_all: metric_d_all(results)?,
        d_word: metric_d_word(results)?,
        d_letter: metric_d_letter(results, truth)?,
        n: results.len(),
        k: results.first().map_or(0, |r| r.segments.len()),
    })
}

/// ℓ2 pixel distance between a region and its reference; detected when below `threshold`.
pub fn pixel_distance_detector(region: &Image, reference: &Image, threshold: f64) -> Result<(f64, bool)> {
    let d = region.l2_distance(reference)?;
    Ok((d, d < threshold))
}

#[derive(Debug, Serialize)]
struct ExtractionRow<'a> {
    image_id: &'a str,
    segment_index: usize,
    decoded: &'a str,
    correct: Option<u8>,
    confidence_mean: f64,
}

/// Writes one row per segment: `image_id, segment_index, decoded, correct, confidence_mean`.
pub fn write_extraction_csv(path: &Path, rows: &[(String, ExtractionResult)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for (id, r) in rows {
        for (k, s) in r.segments.iter().enumerate() {
            w.serialize(ExtractionRow {
                image_id: id,
                segment_index: k,
                decoded: &s.decoded,
                correct: s.correct.map(u8::from),
                confidence_mean: s.confidence_mean(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
