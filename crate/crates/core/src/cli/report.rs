use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::apply::{edited_path, points, BaselineScore, InjectManifest, Point, CLEAN, UNEDITED};
use super::manifest::sub_seed;
use super::plot::{LinePlot, Series};
use super::{load_image, read_json, require, write_json, Run, Split};
use crate::editsim::EditSpec;
use crate::error::{Error, Result};
use crate::evalgame::{
    boundary_analysis, read_results_csv, roc_auc, run_game, write_roc_csv, BoundaryReport, DistanceKind,
    DistinguisherParams, EvalRecord, Game, GameEdit, GameOutcome, LabeledPair, RocPoint, ScoredSample,
};
use crate::extract::{summarize, ExtractionResult, MetricSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub edit_model: String,
    pub alpha: f64,
    pub lambda: f64,
    pub n: usize,
    pub d_all: f64,
    pub d_word: f64,
    pub d_letter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Metrics at the default `(α, λ)` per edit model.
    pub default_metrics: BTreeMap<String, MetricSummary>,
    /// Extraction ROC AUC (watermarked vs clean, glyph-accuracy score) per edit model.
    pub extraction_auc: BTreeMap<String, f64>,
    pub distinguisher_auc: f64,
    pub distinguisher_holdout_auc: Option<f64>,
    pub raw_overlay_holdout_auc: Option<f64>,
    pub baselines: Vec<BaselineScore>,
    pub checks: Vec<CheckResult>,
}

fn group<'a>(records: &'a [EvalRecord], model: &str, p: &Point) -> Vec<&'a EvalRecord> {
    records
        .iter()
        .filter(|r| r.edit_model == model && r.alpha == p.alpha && r.lambda == p.lambda)
        .collect()
}

fn metrics_of(records: &[&EvalRecord], truth: &str) -> Result<MetricSummary> {
    let ex: Vec<ExtractionResult> = records.iter().map(|r| r.extraction.clone()).collect();
    summarize(&ex, truth)
}

/// Metrics along one sweep axis, restricted to images present at every point.
fn curve(records: &[EvalRecord], model: &str, pts: &[&Point], truth: &str) -> Result<Vec<CurveRow>> {
    let sets: Vec<Vec<&EvalRecord>> = pts.iter().map(|p| group(records, model, p)).collect();
    let common: Vec<&str> = sets[0]
        .iter()
        .map(|r| r.image_id.as_str())
        .filter(|id| sets.iter().all(|s| s.iter().any(|r| r.image_id == *id)))
        .collect();
    if common.is_empty() {
        return Err(Error::EmptyInput("sweep images shared by all grid points"));
    }
    pts.iter()
        .zip(&sets)
        .map(|(p, s)| {
            let sel: Vec<&EvalRecord> = s
                .iter()
                .copied()
                .filter(|r| common.contains(&r.image_id.as_str()))
                .collect();
            let m = metrics_of(&sel, truth)?;
            Ok(CurveRow {
                edit_model: model.to_string(),
                alpha: p.alpha,
                lambda: p.lambda,
                n: m.n,
                d_all: m.d_all,
                d_word: m.d_word,
                d_letter: m.d_letter,
            })
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ExtractionCsvRow {
    image_id: String,
    decoded: String,
}

/// Per-image glyph accuracy read from an extraction table.
fn glyph_scores(path: &std::path::Path, truth: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(require(path.to_path_buf())?)?;
    let mut by_image: Vec<(String, Vec<String>)> = Vec::new();
    for row in r.deserialize() {
        let row: ExtractionCsvRow = row?;
        match by_image.last_mut() {
            Some(l) if l.0 == row.image_id => l.1.push(row.decoded),
            _ => by_image.push((row.image_id, vec![row.decoded])),
        }
    }
    Ok(by_image
        .into_iter()
        .map(|(_, d)| ExtractionResult::from_decoded(d, Some(truth)).glyph_accuracy(truth))
        .collect())
}

fn scored(pos: &[f64], neg: &[f64]) -> Vec<ScoredSample> {
    pos.iter()
        .map(|&s| ScoredSample { score: s, label: true })
        .chain(neg.iter().map(|&s| ScoredSample { score: s, label: false }))
        .collect()
}

fn roc_series(label: &str, curve: &[RocPoint]) -> Series {
    Series {
        label: label.to_string(),
        points: curve.iter().map(|p| (p.fpr, p.tpr)).collect(),
    }
}

#[derive(Serialize)]
struct TableRow<'a> {
    method: &'a str,
    edit_model: &'a str,
    n: usize,
    /// Bits for the baselines, glyphs for the latent watermark.
    unit_accuracy: f64,
    word_accuracy: f64,
}

pub(crate) fn eval(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = run.cfg.clone();
    let truth = cfg.watermark.text.clone();
    let results_path = require(run.path("results.csv"))?;
    let records = read_results_csv(&results_path, &truth)?;
    if records.is_empty() {
        return Err(Error::EmptyInput("results.csv has no rows"));
    }
    let baselines: Vec<BaselineScore> = read_json(&run.path("extraction/baselines.json"))?;
    let _: InjectManifest = read_json(&run.path("injected/manifest.json"))?;
    let riw = DistinguisherParams::load(&require(run.checkpoint("distinguisher"))?, 3)?;
    let raw = DistinguisherParams::load(&require(run.checkpoint("distinguisher_raw"))?, 3)?;
    let pts = points(run);
    let default = &pts[0];
    let mut models = vec![UNEDITED.to_string()];
    models.extend(cfg.edits.iter().map(EditSpec::label));

    // Everything is computed before the first file is written.
    let (a0, l0) = (default.alpha, default.lambda);
    let alpha_pts: Vec<&Point> = {
        let mut v: Vec<&Point> = pts.iter().filter(|p| p.lambda == l0).collect();
        v.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        v
    };
    let lambda_pts: Vec<&Point> = {
        let mut v: Vec<&Point> = pts.iter().filter(|p| p.alpha == a0).collect();
        v.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        v
    };
    let mut alpha_rows = Vec::new();
    let mut lambda_rows = Vec::new();
    let mut default_metrics = BTreeMap::new();
    let mut extraction_auc = BTreeMap::new();
    let mut extraction_rocs = Vec::new();
    for m in &models {
        alpha_rows.extend(curve(&records, m, &alpha_pts, &truth)?);
        lambda_rows.extend(curve(&records, m, &lambda_pts, &truth)?);
        default_metrics.insert(m.clone(), metrics_of(&group(&records, m, default), &truth)?);
        let pos = glyph_scores(&run.path(&format!("extraction/{m}/{}.csv", default.label)), &truth)?;
        let neg = glyph_scores(&run.path(&format!("extraction/{m}/{CLEAN}.csv")), &truth)?;
        let (roc, auc) = roc_auc(&scored(&pos, &neg))?;
        extraction_auc.insert(m.clone(), auc);
        extraction_rocs.push((m.clone(), roc));
    }
    let edited_default: Vec<EvalRecord> = records
        .iter()
        .filter(|r| r.edit_model != UNEDITED && r.alpha == a0 && r.lambda == l0)
        .cloned()
        .collect();
    let mut boundaries: Vec<BoundaryReport> = Vec::new();
    for kind in [DistanceKind::Semantic, DistanceKind::Vision] {
        for p in [0.0, 50.0, 90.0, 95.0] {
            boundaries.push(boundary_analysis(&edited_default, p, kind)?);
        }
    }

    let first = cfg.edits[0].label();
    let eval_ids: Vec<String> = run.split(Split::Eval).map(Run::image_id).collect();
    let pairs = eval_ids
        .par_iter()
        .map(|id| {
            let inj = load_image(&run.path(&format!("injected/{}/{id}.png", default.label)))?;
            let inj_e = load_image(&run.path(&edited_path(&first, &default.label, id)))?;
            let x = load_image(&run.corpus_path(eval_index(run, id)))?;
            let x_e = load_image(&run.path(&edited_path(&first, CLEAN, id)))?;
            Ok([
                LabeledPair {
                    image: inj,
                    edited: inj_e,
                    watermarked: true,
                },
                LabeledPair {
                    image: x,
                    edited: x_e,
                    watermarked: false,
                },
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<LabeledPair> = pairs.into_iter().flatten().collect();
    let dscores = pairs
        .par_iter()
        .map(|p| {
            Ok(ScoredSample {
                score: riw.score(&p.image, &p.edited)?,
                label: p.watermarked,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (droc, dauc) = roc_auc(&dscores)?;

    let riw_word = default_metrics.get(&first).map_or(0.0, |m| m.d_word);
    let best_baseline = baselines
        .iter()
        .filter(|b| b.edit_model == first)
        .map(|b| b.word_accuracy)
        .fold(0.0, f64::max);
    let c = &cfg.check;
    let checks = vec![
        CheckResult {
            name: "riw_d_word".into(),
            passed: riw_word >= c.min_d_word,
            detail: format!("D_word {riw_word:.3} under {first}, need >= {:.3}", c.min_d_word),
        },
        CheckResult {
            name: "margin_over_baselines".into(),
            passed: riw_word - best_baseline >= c.min_margin_over_baselines,
            detail: format!(
                "D_word {riw_word:.3} vs best baseline word accuracy {best_baseline:.3}, need margin >= {:.3}",
                c.min_margin_over_baselines
            ),
        },
        CheckResult {
            name: "distinguisher_auc".into(),
            passed: (c.auc_range.0..=c.auc_range.1).contains(&dauc),
            detail: format!(
                "AUC {dauc:.3}, need within [{:.2}, {:.2}]",
                c.auc_range.0, c.auc_range.1
            ),
        },
    ];
    let summary = EvalSummary {
        default_metrics,
        extraction_auc,
        distinguisher_auc: dauc,
        distinguisher_holdout_auc: riw.meta.holdout_auc,
        raw_overlay_holdout_auc: raw.meta.holdout_auc,
        baselines: baselines.clone(),
        checks,
    };

    let mut out = Vec::new();
    let dir = run.path("eval");
    let mut push = |p: PathBuf| {
        out.push(p.clone());
        p
    };
    write_csv(&push(dir.join("alpha_curve.csv")), &alpha_rows)?;
    write_csv(&push(dir.join("lambda_curve.csv")), &lambda_rows)?;
    let series = |rows: &[CurveRow], x: fn(&CurveRow) -> f64| -> Vec<Series> {
        models
            .iter()
            .map(|m| Series {
                label: format!("D_word {m}"),
                points: rows
                    .iter()
                    .filter(|r| &r.edit_model == m)
                    .map(|r| (x(r), r.d_word))
                    .collect(),
            })
            .collect()
    };
    LinePlot {
        title: "Extraction accuracy vs overlay clarity",
        x_label: "alpha",
        y_label: "accuracy",
        log2_x: false,
        y_range: Some((0.0, 1.0)),
        series: series(&alpha_rows, |r| r.alpha),
    }
    .write(&push(dir.join("alpha_curve.svg")))?;
    LinePlot {
        title: "Extraction accuracy vs pixel weight",
        x_label: "lambda (log2)",
        y_label: "accuracy",
        log2_x: true,
        y_range: Some((0.0, 1.0)),
        series: series(&lambda_rows, |r| r.lambda),
    }
    .write(&push(dir.join("lambda_curve.svg")))?;
    for (m, roc) in &extraction_rocs {
        write_roc_csv(&push(dir.join(format!("roc_extraction_{m}.csv"))), roc)?;
    }
    LinePlot {
        title: "Extraction ROC",
        x_label: "false positive rate",
        y_label: "true positive rate",
        log2_x: false,
        y_range: Some((0.0, 1.0)),
        series: extraction_rocs.iter().map(|(m, r)| roc_series(m, r)).collect(),
    }
    .write(&push(dir.join("roc_extraction.svg")))?;
    write_roc_csv(&push(dir.join("roc_distinguisher.csv")), &droc)?;
    LinePlot {
        title: "Distinguisher ROC",
        x_label: "false positive rate",
        y_label: "true positive rate",
        log2_x: false,
        y_range: Some((0.0, 1.0)),
        series: vec![roc_series("riw", &droc)],
    }
    .write(&push(dir.join("roc_distinguisher.svg")))?;
    for (kind, b) in [("semantic", &boundaries[0]), ("vision", &boundaries[4])] {
        write_csv(&push(dir.join(format!("deciles_{kind}.csv"))), &b.deciles)?;
        LinePlot {
            title: "Accuracy across edit-distance deciles",
            x_label: "decile upper edge",
            y_label: "D_word",
            log2_x: false,
            y_range: Some((0.0, 1.0)),
            series: vec![Series {
                label: kind.to_string(),
                points: b.deciles.iter().map(|d| (d.hi, d.d_word)).collect(),
            }],
        }
        .write(&push(dir.join(format!("deciles_{kind}.svg"))))?;
    }
    write_json(&push(dir.join("boundary.json")), &boundaries)?;
    let mut table: Vec<TableRow> = summary
        .default_metrics
        .iter()
        .map(|(m, s)| TableRow {
            method: "riw",
            edit_model: m,
            n: s.n,
            unit_accuracy: glyph_mean(&records, m, default),
            word_accuracy: s.d_word,
        })
        .collect();
    table.extend(baselines.iter().map(|b| TableRow {
        method: &b.method,
        edit_model: &b.edit_model,
        n: b.n,
        unit_accuracy: b.bit_accuracy,
        word_accuracy: b.word_accuracy,
    }));
    write_csv(&push(dir.join("baselines.csv")), &table)?;
    write_json(&push(dir.join("summary.json")), &summary)?;
    Ok(out)
}

fn glyph_mean(records: &[EvalRecord], model: &str, p: &Point) -> f64 {
    let g = group(records, model, p);
    let t = g.first().and_then(|r| r.extraction.truth.clone()).unwrap_or_default();
    g.iter().map(|r| r.extraction.glyph_accuracy(&t)).sum::<f64>() / g.len().max(1) as f64
}

fn eval_index(run: &Run, id: &str) -> usize {
    run.split(Split::Eval)
        .find(|&i| Run::image_id(i) == id)
        .expect("id comes from the evaluation split")
}

/// Win rates of one game with normal-approximation 95% intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub name: String,
    pub bob_ci: (f64, f64),
    pub alice_ci: (f64, f64),
    pub bob_standard_error: f64,
    pub outcome: GameOutcome,
}

pub fn interval(p: f64, n: usize) -> (f64, f64, f64) {
    let se = (p * (1.0 - p) / n as f64).sqrt();
    (se, (p - 1.96 * se).max(0.0), (p + 1.96 * se).min(1.0))
}

#[derive(Serialize)]
struct GameRow<'a> {
    game: &'a str,
    trials: usize,
    bob_threshold: f64,
    bob_win_rate: f64,
    bob_lo: f64,
    bob_hi: f64,
    alice_win_rate: f64,
    alice_lo: f64,
    alice_hi: f64,
}

pub(crate) fn game(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = run.cfg.clone();
    if cfg.game.trials == 0 {
        return Err(Error::Config("game.trials must be positive".into()));
    }
    let codec = run.load_codec()?;
    let den = run.load_denoiser()?;
    let extractor = run.load_extractor()?;
    let dist = DistinguisherParams::load(&require(run.checkpoint("distinguisher"))?, 3)?;
    let calib: Vec<_> = run
        .load_split(Split::Distinguisher)?
        .into_iter()
        .take(cfg.game.calibration_images)
        .map(|p| p.1)
        .collect();
    if calib.is_empty() {
        return Err(Error::EmptyInput("game calibration images"));
    }
    let corpus: Vec<_> = run.load_split(Split::Eval)?.into_iter().map(|p| p.1).collect();
    let mut games = vec![
        ("identity".to_string(), GameEdit::Identity),
        ("noise".to_string(), GameEdit::PureNoise),
    ];
    games.extend(cfg.edits.iter().map(|e| (e.label(), GameEdit::Edit(e.clone()))));
    let mut out = Vec::new();
    let mut reports = Vec::new();
    for (name, edit) in games {
        let mut g = Game {
            codec: &codec,
            denoiser: Some(&den),
            watermark: &cfg.watermark,
            inject: &cfg.injection,
            edit,
            extractor: &extractor,
            distinguisher: &dist,
            bob_threshold: 0.0,
        };
        g.bob_threshold = g.calibrate_bob(&calib, sub_seed(cfg.seed, &format!("game/calibrate/{name}")))?;
        let o = run_game(
            &g,
            &corpus,
            cfg.game.trials,
            sub_seed(cfg.seed, &format!("game/{name}")),
        )?;
        let (se, blo, bhi) = interval(o.bob_win_rate, o.trials);
        let (_, alo, ahi) = interval(o.alice_win_rate, o.trials);
        reports.push(GameReport {
            name,
            bob_ci: (blo, bhi),
            alice_ci: (alo, ahi),
            bob_standard_error: se,
            outcome: o,
        });
    }
    let table: Vec<GameRow> = reports
        .iter()
        .map(|r| GameRow {
            game: &r.name,
            trials: r.outcome.trials,
            bob_threshold: r.outcome.bob_threshold,
            bob_win_rate: r.outcome.bob_win_rate,
            bob_lo: r.bob_ci.0,
            bob_hi: r.bob_ci.1,
            alice_win_rate: r.outcome.alice_win_rate,
            alice_lo: r.alice_ci.0,
            alice_hi: r.alice_ci.1,
        })
        .collect();
    println!(
        "{:<18} {:>6} {:>22} {:>22}",
        "game", "trials", "bob win (95% CI)", "alice win (95% CI)"
    );
    for r in &table {
        println!(
            "{:<18} {:>6} {:>6.3} [{:.3}, {:.3}] {:>6.3} [{:.3}, {:.3}]",
            r.game, r.trials, r.bob_win_rate, r.bob_lo, r.bob_hi, r.alice_win_rate, r.alice_lo, r.alice_hi
        );
    }
    for rep in &reports {
        let p = run.path(&format!("games/{}.json", rep.name));
        write_json(&p, rep)?;
        out.push(p);
    }
    let p = run.path("games/summary.csv");
    write_csv(&p, &table)?;
    out.push(p);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_is_clamped_and_centered() {
        let (se, lo, hi) = interval(0.5, 100);
        assert!((se - 0.05).abs() < 1e-12);
        assert!((lo - 0.402).abs() < 1e-12 && (hi - 0.598).abs() < 1e-12);
        assert_eq!(interval(1.0, 10), (0.0, 1.0, 1.0));
    }
}
