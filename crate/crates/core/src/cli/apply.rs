use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{rel, sub_seed};
use super::train::{payload_bits, publishable};
use super::{load_image, read_json, require, store_image, write_json, Run, Split};
use crate::baselines::{bit_accuracy, dct_embed, dct_extract, AeWatermarkParams, DctWatermarkConfig};
use crate::editsim::{edit as run_edit, EditSpec};
use crate::error::{Error, Result};
use crate::evalgame::{embedding_distance, write_results_csv, EvalRecord, FeatureExtractor, VisionEncoder};
use crate::extract::{summarize, write_extraction_csv, ExtractionResult};
use crate::imaging::Image;
use crate::riw::{budget, inject as run_inject, InjectionConfig};

/// One `(α, λ)` setting of the injection sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct Point {
    pub label: String,
    pub alpha: f64,
    pub lambda: f64,
    /// The configured default; injected on every evaluation image.
    pub default: bool,
}

fn short(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.4}")
    }
}

pub(crate) fn points(run: &Run) -> Vec<Point> {
    let (a0, l0) = (run.cfg.injection.alpha, run.cfg.injection.lam);
    let mk = |a: f64, l: f64| Point {
        label: format!("alpha{}_lambda{}", short(a * 255.0), l),
        alpha: a,
        lambda: l,
        default: a == a0 && l == l0,
    };
    let mut v = vec![mk(a0, l0)];
    for p in run
        .cfg
        .alpha_grid
        .iter()
        .map(|&a| mk(a, l0))
        .chain(run.cfg.lambda_grid.iter().map(|&l| mk(a0, l)))
    {
        if !v.iter().any(|q| q.alpha == p.alpha && q.lambda == p.lambda) {
            v.push(p);
        }
    }
    v
}

pub(crate) const BASELINE_SOURCES: [&str; 3] = ["dct", "ae_plain", "ae_adv"];
pub(crate) const UNEDITED: &str = "unedited";
pub(crate) const CLEAN: &str = "clean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct InjectRow {
    pub image_id: String,
    pub point: String,
    pub alpha: f64,
    pub lambda: f64,
    pub original: String,
    pub path: String,
    pub text: String,
    pub config_hash: String,
    pub budget: f64,
    pub objective: f64,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct BaselineRow {
    pub method: String,
    pub image_id: String,
    pub path: String,
    pub payload: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct InjectManifest {
    pub points: Vec<Point>,
    pub rows: Vec<InjectRow>,
    pub baselines: Vec<BaselineRow>,
}

fn bits_string(b: &[bool]) -> String {
    b.iter().map(|&v| if v { '1' } else { '0' }).collect()
}

pub(crate) fn parse_bits(s: &str) -> Vec<bool> {
    s.chars().map(|c| c == '1').collect()
}

fn dct_config(run: &Run, payload: Vec<bool>) -> DctWatermarkConfig {
    let b = &run.cfg.baselines;
    DctWatermarkConfig {
        payload,
        strength: b.dct_strength,
        margin: b.dct_margin,
        key: b.dct_key,
        ..DctWatermarkConfig::default()
    }
}

pub(crate) fn inject(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = run.cfg.clone();
    let codec = run.load_codec()?;
    let ae_plain = AeWatermarkParams::load(&require(run.checkpoint("ae_plain"))?)?;
    let ae_adv = AeWatermarkParams::load(&require(run.checkpoint("ae_adv"))?)?;
    let w = run.watermark_image()?;
    let eval = run.load_split(Split::Eval)?;
    let pts = points(run);
    let jobs: Vec<(&Point, usize)> = pts
        .iter()
        .flat_map(|p| {
            let n = if p.default {
                eval.len()
            } else {
                cfg.sweep_images.min(eval.len())
            };
            (0..n).map(move |i| (p, i))
        })
        .collect();
    let hash = run.manifest.config_hash.clone();
    let out = run.out.clone();
    let rows = jobs
        .par_iter()
        .map(|&(p, i)| {
            let (id, x) = &eval[i];
            let icfg = InjectionConfig {
                alpha: p.alpha,
                lam: p.lambda,
                seed: sub_seed(cfg.seed, &format!("inject/{id}")),
                ..cfg.injection.clone()
            };
            let (xh, report) = run_inject(&codec, x, &w, &icfg)?;
            let q = publishable(&xh, x, &icfg)?;
            let path = out.join("injected").join(&p.label).join(format!("{id}.png"));
            store_image(&q, &path)?;
            let original = run.corpus_path(run.split(Split::Eval).start + i);
            Ok(InjectRow {
                image_id: id.clone(),
                point: p.label.clone(),
                alpha: p.alpha,
                lambda: p.lambda,
                original: rel(&out, &original),
                path: rel(&out, &path),
                text: cfg.watermark.text.clone(),
                config_hash: hash.clone(),
                budget: budget(&q, x, icfg.norm)?,
                objective: report.objective,
                hash: q.content_hash(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(r) = rows
        .iter()
        .find(|r| cfg.injection.norm == crate::riw::BudgetNorm::Inf && r.budget > cfg.injection.eps + 1e-9)
    {
        return Err(Error::param(
            "budget",
            format!("{} exceeds eps at {}", r.image_id, r.point),
        ));
    }
    let baselines = eval
        .par_iter()
        .map(|(id, x)| {
            let bits = payload_bits(cfg.seed, id, cfg.baselines.payload_bits);
            let imgs = [
                dct_embed(x, &dct_config(run, bits.clone()))?,
                ae_plain.embed(x, &bits)?,
                ae_adv.embed(x, &bits)?,
            ];
            BASELINE_SOURCES
                .iter()
                .zip(imgs)
                .map(|(m, img)| {
                    let img = img.quantized();
                    let path = out.join("baselines").join(m).join(format!("{id}.png"));
                    store_image(&img, &path)?;
                    Ok(BaselineRow {
                        method: m.to_string(),
                        image_id: id.clone(),
                        path: rel(&out, &path),
                        payload: bits_string(&bits),
                        hash: img.content_hash(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let manifest = InjectManifest {
        points: pts,
        rows,
        baselines,
    };
    let mp = run.path("injected/manifest.json");
    write_json(&mp, &manifest)?;
    let mut artifacts: Vec<PathBuf> = manifest.rows.iter().map(|r| run.path(&r.path)).collect();
    artifacts.extend(manifest.baselines.iter().map(|r| run.path(&r.path)));
    artifacts.push(mp);
    Ok(artifacts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct EditRow {
    pub edit_model: String,
    pub source: String,
    pub image_id: String,
    pub input: String,
    pub path: String,
    pub spec: EditSpec,
    pub hash: String,
}

/// Loads an image listed in a manifest and checks its recorded hash.
fn load_checked(run: &Run, path: &str, hash: &str) -> Result<Image> {
    let img = load_image(&run.path(path))?;
    if img.content_hash() != hash {
        return Err(Error::Checkpoint(format!("{path} does not match its manifest hash")));
    }
    Ok(img)
}

/// `(source, image_id, input path, hash)` of everything that gets edited.
fn edit_inputs(run: &Run, m: &InjectManifest) -> Result<Vec<(String, String, String, Option<String>)>> {
    let mut v: Vec<_> = m
        .rows
        .iter()
        .map(|r| {
            (
                r.point.clone(),
                r.image_id.clone(),
                r.path.clone(),
                Some(r.hash.clone()),
            )
        })
        .collect();
    for i in run.split(Split::Eval) {
        v.push((CLEAN.into(), Run::image_id(i), rel(&run.out, &run.corpus_path(i)), None));
    }
    v.extend(m.baselines.iter().map(|r| {
        (
            r.method.clone(),
            r.image_id.clone(),
            r.path.clone(),
            Some(r.hash.clone()),
        )
    }));
    Ok(v)
}

pub(crate) fn edited_path(model: &str, source: &str, id: &str) -> String {
    format!("edited/{model}/{source}/{id}.png")
}

pub(crate) fn edit(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = run.cfg.clone();
    let codec = run.load_codec()?;
    let den = run.load_denoiser()?;
    let m: InjectManifest = read_json(&run.path("injected/manifest.json"))?;
    let inputs = edit_inputs(run, &m)?;
    let jobs: Vec<(&EditSpec, &(String, String, String, Option<String>))> = cfg
        .edits
        .iter()
        .flat_map(|e| inputs.iter().map(move |i| (e, i)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(e, (source, id, input, hash))| {
            let x = match hash {
                Some(h) => load_checked(run, input, h)?,
                None => load_image(&run.path(input))?,
            };
            let spec = EditSpec {
                seed: sub_seed(cfg.seed ^ e.seed, &format!("edit/{id}")),
                ..e.clone()
            };
            let y = run_edit(&codec, &den, &x, &spec)?.quantized();
            let path = edited_path(&e.label(), source, id);
            store_image(&y, &run.path(&path))?;
            Ok(EditRow {
                edit_model: e.label(),
                source: source.clone(),
                image_id: id.clone(),
                input: input.clone(),
                path,
                spec,
                hash: y.content_hash(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mp = run.path("edited/manifest.json");
    write_json(&mp, &rows)?;
    let mut artifacts: Vec<PathBuf> = rows.iter().map(|r| run.path(&r.path)).collect();
    artifacts.push(mp);
    Ok(artifacts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub method: String,
    pub edit_model: String,
    pub n: usize,
    pub bit_accuracy: f64,
    /// Fraction of images whose whole payload is recovered.
    pub word_accuracy: f64,
}

pub(crate) fn extract(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = run.cfg.clone();
    let codec = run.load_codec()?;
    let extractor = run.load_extractor()?;
    let ae_plain = AeWatermarkParams::load(&require(run.checkpoint("ae_plain"))?)?;
    let ae_adv = AeWatermarkParams::load(&require(run.checkpoint("ae_adv"))?)?;
    let ae_ft = AeWatermarkParams::load(&require(run.checkpoint("ae_ft"))?)?;
    let vision = VisionEncoder::new(3, sub_seed(cfg.seed, "vision"));
    let m: InjectManifest = read_json(&run.path("injected/manifest.json"))?;
    let edits: Vec<EditRow> = read_json(&run.path("edited/manifest.json"))?;
    let edited: HashMap<(String, String, String), &EditRow> = edits
        .iter()
        .map(|r| ((r.edit_model.clone(), r.source.clone(), r.image_id.clone()), r))
        .collect();
    let text = cfg.watermark.text.clone();
    let mut models = vec![UNEDITED.to_string()];
    models.extend(cfg.edits.iter().map(EditSpec::label));

    // (model, source, image_id, before, after): `after` is what gets read.
    let lookup = |model: &str, source: &str, id: &str| -> Result<&EditRow> {
        edited
            .get(&(model.to_string(), source.to_string(), id.to_string()))
            .copied()
            .ok_or_else(|| Error::MissingArtifact(run.path(&edited_path(model, source, id))))
    };
    let mut jobs: Vec<(
        String,
        String,
        String,
        String,
        String,
        Option<String>,
        Option<(f64, f64)>,
    )> = Vec::new();
    for model in &models {
        for r in &m.rows {
            let (after, hash) = if model == UNEDITED {
                (r.path.clone(), r.hash.clone())
            } else {
                let e = lookup(model, &r.point, &r.image_id)?;
                (e.path.clone(), e.hash.clone())
            };
            jobs.push((
                model.clone(),
                r.point.clone(),
                r.image_id.clone(),
                r.path.clone(),
                after,
                Some(hash),
                Some((r.alpha, r.lambda)),
            ));
        }
        for i in run.split(Split::Eval) {
            let id = Run::image_id(i);
            let orig = rel(&run.out, &run.corpus_path(i));
            let (after, hash) = if model == UNEDITED {
                (orig.clone(), None)
            } else {
                let e = lookup(model, CLEAN, &id)?;
                (e.path.clone(), Some(e.hash.clone()))
            };
            jobs.push((model.clone(), CLEAN.into(), id, orig, after, hash, None));
        }
    }
    let results = jobs
        .par_iter()
        .map(|(model, source, id, before, after, hash, ab)| {
            let y = match hash {
                Some(h) => load_checked(run, after, h)?,
                None => load_image(&run.path(after))?,
            };
            let extraction = extractor.extract(&y, Some(&text))?;
            let rec = match ab {
                Some((alpha, lambda)) => {
                    let (sem, vis) = if model == UNEDITED {
                        (0.0, 0.0)
                    } else {
                        let x = load_image(&run.path(before))?;
                        (
                            embedding_distance(FeatureExtractor::Semantic(&codec), &x, &y)?,
                            embedding_distance(FeatureExtractor::Vision(&vision), &x, &y)?,
                        )
                    };
                    Some(EvalRecord {
                        image_id: id.clone(),
                        alpha: *alpha,
                        lambda: *lambda,
                        edit_model: model.clone(),
                        extraction: extraction.clone(),
                        sem_dist: sem,
                        vis_dist: vis,
                    })
                }
                None => None,
            };
            Ok(((model.clone(), source.clone()), id.clone(), extraction, rec))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut artifacts = Vec::new();
    let mut groups: Vec<((String, String), Vec<(String, ExtractionResult)>)> = Vec::new();
    for (key, id, ex, _) in &results {
        match groups.iter_mut().find(|g| &g.0 == key) {
            Some(g) => g.1.push((id.clone(), ex.clone())),
            None => groups.push((key.clone(), vec![(id.clone(), ex.clone())])),
        }
    }
    for ((model, source), rows) in &groups {
        let csv = run.path(&format!("extraction/{model}/{source}.csv"));
        write_extraction_csv(&csv, rows)?;
        let res: Vec<ExtractionResult> = rows.iter().map(|r| r.1.clone()).collect();
        let json = run.path(&format!("metrics/{model}/{source}.json"));
        write_json(&json, &summarize(&res, &text)?)?;
        artifacts.push(csv);
        artifacts.push(json);
    }
    let records: Vec<EvalRecord> = results.into_iter().filter_map(|r| r.3).collect();
    let results_path = run.path("results.csv");
    write_results_csv(&results_path, &records)?;
    artifacts.push(results_path.clone());

    let mut scores = Vec::new();
    // The fine-tuned decoder reads images from the plain encoder.
    let methods: [(&str, &str, Option<&AeWatermarkParams>); 4] = [
        ("dct", "dct", None),
        ("ae_plain", "ae_plain", Some(&ae_plain)),
        ("ae_adv", "ae_adv", Some(&ae_adv)),
        ("ae_ft", "ae_plain", Some(&ae_ft)),
    ];
    for model in &models {
        for &(method, source, ae) in &methods {
            let rows: Vec<&BaselineRow> = m.baselines.iter().filter(|r| r.method == source).collect();
            let accs = rows
                .par_iter()
                .map(|r| {
                    let (path, hash) = if model == UNEDITED {
                        (r.path.clone(), r.hash.clone())
                    } else {
                        let e = lookup(model, source, &r.image_id)?;
                        (e.path.clone(), e.hash.clone())
                    };
                    let y = load_checked(run, &path, &hash)?;
                    let truth = parse_bits(&r.payload);
                    let got = match ae {
                        Some(ae) => ae.decode(&y)?,
                        None => dct_extract(&y, &dct_config(run, truth.clone()))?,
                    };
                    Ok(bit_accuracy(&got, &truth))
                })
                .collect::<Result<Vec<f64>>>()?;
            if accs.is_empty() {
                return Err(Error::EmptyInput("baseline images"));
            }
            scores.push(BaselineScore {
                method: method.to_string(),
                edit_model: model.clone(),
                n: accs.len(),
                bit_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                word_accuracy: accs.iter().filter(|&&a| a == 1.0).count() as f64 / accs.len() as f64,
            });
        }
    }
    let bp = run.path("extraction/baselines.json");
    write_json(&bp, &scores)?;
    artifacts.push(bp);
    run.manifest.results = Some(rel(&run.out, &results_path));
    run.manifest.records = records;
    Ok(artifacts)
}
