//! Alice/Bob game, invisibility distinguisher, ROC/AUC and the
//! edit-distance protection-boundary analysis.

mod distinguisher;
mod features;
mod game;
mod roc;

pub use distinguisher::{
    train_distinguisher, DistinguisherMeta, DistinguisherOptions, DistinguisherParams, LabeledPair,
};
pub use features::{embedding_distance, FeatureExtractor, VisionEncoder};
pub use game::{run_game, Game, GameEdit, GameOutcome, TrialRecord};
pub use roc::{calibrate_threshold, roc_auc, write_roc_csv, RocPoint, ScoredSample};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{summarize, ExtractionResult, MetricSummary, SegmentRecord};

/// Extraction outcome of one edited image together with its edit distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub alpha: f64,
    pub lambda: f64,
    pub edit_model: String,
    pub extraction: ExtractionResult,
    pub sem_dist: f64,
    pub vis_dist: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Semantic,
    Vision,
}

impl EvalRecord {
    pub fn distance(&self, kind: DistanceKind) -> f64 {
        match kind {
            DistanceKind::Semantic => self.sem_dist,
            DistanceKind::Vision => self.vis_dist,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecilePoint {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub d_all: f64,
    pub d_word: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub percentile: f64,
    pub distance: DistanceKind,
    pub threshold: f64,
    pub n_above: usize,
    pub metrics: MetricSummary,
    pub deciles: Vec<DecilePoint>,
}

fn truth_of(records: &[&EvalRecord]) -> Result<String> {
    records[0]
        .extraction
        .truth
        .clone()
        .ok_or(Error::param("records", "ground truth was not supplied"))
}

fn metrics(records: &[&EvalRecord]) -> Result<MetricSummary> {
    let truth = truth_of(records)?;
    let ex: Vec<ExtractionResult> = records.iter().map(|r| r.extraction.clone()).collect();
    summarize(&ex, &truth)
}

/// Metrics over records whose edit distance is at least the `percentile`-th
/// value, plus the accuracy curve over ten equal-count distance bins.
pub fn boundary_analysis(records: &[EvalRecord], percentile: f64, distance: DistanceKind) -> Result<BoundaryReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("records"));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::param("percentile", format!("{percentile} outside [0, 100]")));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.distance(distance).total_cmp(&b.distance(distance)));
    let n = sorted.len();
    let idx = ((percentile / 100.0 * n as f64).floor() as usize).min(n - 1);
    let threshold = sorted[idx].distance(distance);
    let above: Vec<&EvalRecord> = records.iter().filter(|r| r.distance(distance) >= threshold).collect();
    let mut deciles = Vec::new();
    for k in 0..10 {
        let (lo, hi) = (k * n / 10, (k + 1) * n / 10);
        if lo == hi {
            continue;
        }
        let m = metrics(&sorted[lo..hi])?;
        deciles.push(DecilePoint {
            lo: sorted[lo].distance(distance),
            hi: sorted[hi - 1].distance(distance),
            n: hi - lo,
            d_all: m.d_all,
            d_word: m.d_word,
        });
    }
    Ok(BoundaryReport {
        percentile,
        distance,
        threshold,
        n_above: above.len(),
        metrics: metrics(&above)?,
        deciles,
    })
}

#[derive(Debug, Serialize)]
struct ResultRow<'a> {
    image_id: &'a str,
    alpha: f64,
    lambda: f64,
    edit_model: &'a str,
    segment_index: usize,
    decoded: &'a str,
    correct: Option<u8>,
    confidence: f64,
    sem_dist: f64,
    vis_dist: f64,
}

/// One row per segment: `image_id, alpha, lambda, edit_model, segment_index,
/// decoded, correct, confidence, sem_dist, vis_dist`.
pub fn write_results_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        for (k, s) in r.extraction.segments.iter().enumerate() {
            w.serialize(ResultRow {
                image_id: &r.image_id,
                alpha: r.alpha,
                lambda: r.lambda,
                edit_model: &r.edit_model,
                segment_index: k,
                decoded: &s.decoded,
                correct: s.correct.map(u8::from),
                confidence: s.confidence_mean(),
                sem_dist: r.sem_dist,
                vis_dist: r.vis_dist,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct OwnedResultRow {
    image_id: String,
    alpha: f64,
    lambda: f64,
    edit_model: String,
    segment_index: usize,
    decoded: String,
    correct: Option<u8>,
    confidence: f64,
    sem_dist: f64,
    vis_dist: f64,
}

/// Reads a results table back into records, grouping consecutive rows of one
/// image. Each segment keeps only its mean confidence.
pub fn read_results_csv(path: &Path, truth: &str) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<EvalRecord> = Vec::new();
    for row in r.deserialize() {
        let row: OwnedResultRow = row?;
        let seg = SegmentRecord {
            correct: row.correct.map(|c| c == 1),
            confidences: vec![row.confidence],
            decoded: row.decoded,
        };
        let same = out.last().is_some_and(|l| {
            l.image_id == row.image_id
                && l.alpha.to_bits() == row.alpha.to_bits()
                && l.lambda.to_bits() == row.lambda.to_bits()
                && l.edit_model == row.edit_model
                && row.segment_index == l.extraction.segments.len()
        });
        if same {
            out.last_mut().expect("checked").extraction.segments.push(seg);
        } else {
            if row.segment_index != 0 {
                return Err(Error::param(
                    "results",
                    format!("{} starts at segment {}", row.image_id, row.segment_index),
                ));
            }
            out.push(EvalRecord {
                image_id: row.image_id,
                alpha: row.alpha,
                lambda: row.lambda,
                edit_model: row.edit_model,
                extraction: ExtractionResult {
                    segments: vec![seg],
                    truth: Some(truth.to_string()),
                },
                sem_dist: row.sem_dist,
                vis_dist: row.vis_dist,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize, ok: bool, d: f64) -> EvalRecord {
        let dec = if ok { "AB" } else { "XY" };
        EvalRecord {
            image_id: format!("img_{i}"),
            alpha: 0.4,
            lambda: 1.0,
            edit_model: "tint-red@40".into(),
            extraction: ExtractionResult::from_decoded(vec![dec.into(), "ZZ".into()], Some("AB")),
            sem_dist: d,
            vis_dist: 2.0 * d,
        }
    }

    #[test]
    fn percentile_zero_is_global_and_top_bin_drops() {
        let recs: Vec<EvalRecord> = (0..40).map(|i| record(i, i < 30, i as f64)).collect();
        let all: Vec<ExtractionResult> = recs.iter().map(|r| r.extraction.clone()).collect();
        let r0 = boundary_analysis(&recs, 0.0, DistanceKind::Semantic).unwrap();
        assert_eq!(r0.metrics, summarize(&all, "AB").unwrap());
        assert_eq!(r0.n_above, 40);
        let r95 = boundary_analysis(&recs, 95.0, DistanceKind::Vision).unwrap();
        assert_eq!(r95.n_above, 2);
        assert_eq!(r95.metrics.d_word, 0.0);
        assert_eq!(r95.deciles.len(), 10);
        assert!(r95.deciles[0].d_word >= r95.deciles[9].d_word);
        assert!(boundary_analysis(&[], 0.0, DistanceKind::Vision).is_err());
    }

    #[test]
    fn results_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_results_csv(&p, &[record(0, true, 0.5)]).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        let mut lines = s.lines();
        assert_eq!(
            lines.next().unwrap(),
            "image_id,alpha,lambda,edit_model,segment_index,decoded,correct,confidence,sem_dist,vis_dist"
        );
        assert_eq!(lines.next().unwrap(), "img_0,0.4,1.0,tint-red@40,0,AB,1,1.0,0.5,1.0");
    }

    #[test]
    fn results_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let recs = vec![record(0, true, 0.5), record(1, false, 0.25), record(1, true, 0.75)];
        write_results_csv(&p, &recs).unwrap();
        let back = read_results_csv(&p, "AB").unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.sem_dist, b.sem_dist);
            assert_eq!(a.extraction.indicators().unwrap(), b.extraction.indicators().unwrap());
        }
    }
}
