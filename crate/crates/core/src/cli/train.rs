use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::manifest::sub_seed;
use super::{load_image, log, store_image, write_json, Run, Split};
use crate::baselines::{ae_finetune_on_edits, ae_train_with};
use crate::codec::train_codec_with;
use crate::editsim::{edit, train_denoiser, DiffusionSchedule, EditSpec, PromptTable, PROMPTS};
use crate::error::{Error, Result};
use crate::evalgame::{train_distinguisher, LabeledPair};
use crate::extract::{train_classifier_on_segments, train_reconstructor};
use crate::imaging::font::ALPHABET;
use crate::imaging::{
    crop_segments, generate_corpus, render_watermark, write_corpus, GlyphGeometry, Image, WatermarkSpec,
};
use crate::riw::{build_target, inject, quantize_within_budget, BudgetNorm, InjectionConfig};

use super::config::RecognizerMode;

pub(crate) fn corpus(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let n = cfg.corpus_total();
    let dir = run.path("corpus");
    let images = match &cfg.corpus.path {
        None => generate_corpus(n, cfg.corpus.size, cfg.corpus.size, sub_seed(cfg.seed, "corpus"))?,
        Some(src) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(src)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            files.sort();
            let images = files[..n].iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
            if let Some(bad) = images
                .iter()
                .find(|x| x.shape() != (3, cfg.corpus.size, cfg.corpus.size))
            {
                return Err(Error::Config(format!(
                    "corpus images must be RGB {0}x{0}, found {1:?}",
                    cfg.corpus.size,
                    bad.shape()
                )));
            }
            images
        }
    };
    write_corpus(&images, &dir, sub_seed(cfg.seed, "corpus"))?;
    let mut out: Vec<PathBuf> = (0..n).map(|i| run.corpus_path(i)).collect();
    out.push(dir.join("manifest.json"));
    Ok(out)
}

fn images(v: Vec<(String, Image)>) -> Vec<Image> {
    v.into_iter().map(|p| p.1).collect()
}

pub(crate) fn codec(run: &mut Run) -> Result<Vec<PathBuf>> {
    let train = images(run.load_split(Split::Train)?);
    let c = &run.cfg.codec;
    let (codec, report) = train_codec_with(
        &train,
        c.epochs,
        sub_seed(run.cfg.seed, "codec"),
        c.config.clone(),
        &c.options,
    )?;
    let p = run.checkpoint("codec");
    std::fs::create_dir_all(p.parent().expect("checkpoint dir"))?;
    codec.save(&p)?;
    let r = run.path("reports/codec.json");
    write_json(&r, &report)?;
    Ok(vec![p, r])
}

pub(crate) fn denoiser(run: &mut Run) -> Result<Vec<PathBuf>> {
    let codec = run.load_codec()?;
    let train = images(run.load_split(Split::Train)?);
    let d = &run.cfg.denoiser;
    let prompts: Vec<String> = PROMPTS.iter().map(|s| s.to_string()).collect();
    let (den, report) = train_denoiser(
        &codec,
        &train,
        &prompts,
        d.epochs,
        sub_seed(run.cfg.seed, "denoiser"),
        d.config.clone(),
        DiffusionSchedule::default(),
        PromptTable::new(sub_seed(run.cfg.seed, "prompts"), d.config.embed_dim),
        &d.options,
    )?;
    let p = run.checkpoint("denoiser");
    den.save(&p)?;
    let r = run.path("reports/denoiser.json");
    write_json(&r, &report)?;
    Ok(vec![p, r])
}

/// Injected image snapped to the 8-bit grid inside the budget.
pub(crate) fn publishable(x_hat: &Image, x: &Image, cfg: &InjectionConfig) -> Result<Image> {
    match cfg.norm {
        BudgetNorm::Inf => quantize_within_budget(x_hat, x, cfg.eps),
        BudgetNorm::L1 => Ok(x_hat.quantized()),
    }
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    let a = ALPHABET.as_bytes();
    (0..len).map(|_| a[rng.gen_range(0..a.len())] as char).collect()
}

#[derive(Serialize)]
struct ReconstructorReport {
    pairs: usize,
    negatives: usize,
    holdout_rmse: Option<f64>,
    classifier_samples: usize,
}

pub(crate) fn reconstructor(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = run.cfg.clone();
    let e = &cfg.extract;
    let codec = run.load_codec()?;
    let den = run.load_denoiser()?;
    let layout = run.layout()?;
    let size = cfg.corpus.size;
    let glyphs = run.glyphs();
    let (sh, sw) = layout.segment_size();
    let black = Image::filled(3, sh, sw, 0.0)?;
    let base_edit = cfg.edits[0].clone();
    let data = run.load_split(Split::Recon)?;
    let per_image = data
        .par_iter()
        .enumerate()
        .map(|(j, (id, x))| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("recon/{id}")));
            let text = if e.random_texts {
                random_text(&mut rng, glyphs)
            } else {
                cfg.watermark.text.clone()
            };
            let spec = WatermarkSpec {
                text: text.clone(),
                ..cfg.watermark.clone()
            };
            let w = render_watermark(&spec, &layout, size, size, 3)?;
            let alpha = if rng.gen::<f64>() < e.alpha_mix {
                cfg.alpha_grid[rng.gen_range(0..cfg.alpha_grid.len())]
            } else {
                cfg.injection.alpha
            };
            let icfg = InjectionConfig {
                alpha,
                steps: e.inject_steps,
                seed: rng.gen(),
                ..cfg.injection.clone()
            };
            let xh = publishable(&inject(&codec, x, &w, &icfg)?.0, x, &icfg)?;
            let es = EditSpec {
                prompt: PROMPTS[rng.gen_range(0..PROMPTS.len())].to_string(),
                seed: rng.gen(),
                ..base_edit.clone()
            };
            let xe = edit(&codec, &den, &xh, &es)?.quantized();
            let mut rows: Vec<(Image, Image, String)> = crop_segments(&xe, &layout)?
                .into_iter()
                .zip(crop_segments(&w, &layout)?)
                .map(|(a, b)| (a, b, text.clone()))
                .collect();
            if e.negative_every > 0 && j % e.negative_every == 0 {
                let xc = edit(&codec, &den, x, &es)?.quantized();
                rows.extend(
                    crop_segments(&xc, &layout)?
                        .into_iter()
                        .map(|a| (a, black.clone(), String::new())),
                );
            }
            if e.identity_every > 0 && j % e.identity_every == 0 {
                rows.extend(
                    crop_segments(&xh, &layout)?
                        .into_iter()
                        .zip(crop_segments(&w, &layout)?)
                        .map(|(a, b)| (a, b, text.clone())),
                );
                rows.extend(
                    crop_segments(x, &layout)?
                        .into_iter()
                        .map(|a| (a, black.clone(), String::new())),
                );
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(Image, Image, String)> = per_image.into_iter().flatten().collect();
    log("reconstructor", &format!("{} training segments", rows.len()));
    let mut out = Vec::new();
    let seed = sub_seed(cfg.seed, "reconstructor");
    let rec = if e.use_reconstructor {
        let pairs: Vec<(Image, Image)> = rows.iter().map(|r| (r.0.clone(), r.1.clone())).collect();
        let rec = train_reconstructor(&pairs, e.epochs, seed, &e.options)?;
        let p = run.checkpoint("reconstructor");
        rec.save(&p)?;
        out.push(p);
        Some(rec)
    } else {
        None
    };
    let mut classifier_samples = 0;
    if e.recognizer == RecognizerMode::Classifier {
        let labelled = rows
            .iter()
            .filter(|r| !r.2.is_empty())
            .map(|r| {
                let seg = match &rec {
                    Some(rec) => rec.reconstruct(&r.0)?,
                    None => r.0.clone(),
                };
                Ok((seg, r.2.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        classifier_samples = labelled.len() * glyphs;
        let geometry = GlyphGeometry::fit(sh, sw, glyphs, None)?;
        let clf = train_classifier_on_segments(
            geometry,
            &labelled,
            e.classifier_epochs,
            sub_seed(cfg.seed, "classifier"),
        )?;
        let p = run.checkpoint("classifier");
        clf.save(&p)?;
        out.push(p);
    }
    let r = run.path("reports/reconstructor.json");
    write_json(
        &r,
        &ReconstructorReport {
            pairs: rows.len(),
            negatives: rows.iter().filter(|r| r.2.is_empty()).count(),
            holdout_rmse: rec.as_ref().and_then(|r| r.meta.holdout_rmse),
            classifier_samples,
        },
    )?;
    out.push(r);
    Ok(out)
}

/// Random payload of the baseline watermarks for one image.
pub(crate) fn payload_bits(seed: u64, id: &str, len: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("payload/{id}")));
    (0..len).map(|_| rng.gen()).collect()
}

#[derive(Serialize)]
struct AeReport {
    plain_holdout_bit_accuracy: Option<f64>,
    adversarial_holdout_bit_accuracy: Option<f64>,
    finetune_pairs: usize,
}

pub(crate) fn ae(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = run.cfg.clone();
    let b = &cfg.baselines;
    let codec = run.load_codec()?;
    let den = run.load_denoiser()?;
    let train = run.load_split(Split::Train)?;
    let imgs: Vec<Image> = train.iter().map(|p| p.1.clone()).collect();
    let opts = b.ae_options.clone();
    let plain = ae_train_with(
        &imgs,
        b.payload_bits,
        b.ae_lam,
        0.0,
        b.ae_epochs,
        sub_seed(cfg.seed, "ae/plain"),
        &opts,
    )?;
    let adv = ae_train_with(
        &imgs,
        b.payload_bits,
        b.ae_lam,
        b.ae_alpha_noise,
        b.ae_epochs,
        sub_seed(cfg.seed, "ae/adversarial"),
        &opts,
    )?;
    let base_edit = cfg.edits[0].clone();
    let pairs = train
        .par_iter()
        .take(b.ae_finetune_images)
        .map(|(id, x)| {
            let bits = payload_bits(cfg.seed, id, b.payload_bits);
            let xw = plain.embed(x, &bits)?.quantized();
            let es = EditSpec {
                seed: sub_seed(cfg.seed, &format!("ae/edit/{id}")),
                ..base_edit.clone()
            };
            Ok((edit(&codec, &den, &xw, &es)?.quantized(), bits))
        })
        .collect::<Result<Vec<_>>>()?;
    let ft = ae_finetune_on_edits(&plain, &pairs, b.ae_finetune_epochs, sub_seed(cfg.seed, "ae/finetune"))?;
    let mut out = Vec::new();
    for (name, p) in [("ae_plain", &plain), ("ae_adv", &adv), ("ae_ft", &ft)] {
        let path = run.checkpoint(name);
        p.save(&path)?;
        out.push(path);
    }
    let r = run.path("reports/ae.json");
    write_json(
        &r,
        &AeReport {
            plain_holdout_bit_accuracy: plain.meta.holdout_bit_accuracy,
            adversarial_holdout_bit_accuracy: adv.meta.holdout_bit_accuracy,
            finetune_pairs: pairs.len(),
        },
    )?;
    out.push(r);
    Ok(out)
}

#[derive(Serialize)]
struct DistinguisherReport {
    pairs: usize,
    riw_holdout_auc: Option<f64>,
    raw_overlay_holdout_auc: Option<f64>,
}

pub(crate) fn distinguisher(run: &mut Run) -> Result<Vec<PathBuf>> {
    let cfg = run.cfg.clone();
    let codec = run.load_codec()?;
    let den = run.load_denoiser()?;
    let w = run.watermark_image()?;
    let data = run.load_split(Split::Distinguisher)?;
    let base_edit = cfg.edits[0].clone();
    let sets = data
        .par_iter()
        .map(|(id, x)| {
            let icfg = InjectionConfig {
                seed: sub_seed(cfg.seed, &format!("distinguisher/inject/{id}")),
                ..cfg.injection.clone()
            };
            let xh = publishable(&inject(&codec, x, &w, &icfg)?.0, x, &icfg)?;
            let raw = build_target(x, &w, 1.0)?.quantized();
            let es = EditSpec {
                seed: sub_seed(cfg.seed, &format!("distinguisher/edit/{id}")),
                ..base_edit.clone()
            };
            let ed = |img: &Image| edit(&codec, &den, img, &es).map(|e| e.quantized());
            let clean = LabeledPair {
                edited: ed(x)?,
                image: x.clone(),
                watermarked: false,
            };
            let riw = LabeledPair {
                edited: ed(&xh)?,
                image: xh,
                watermarked: true,
            };
            let overlay = LabeledPair {
                edited: ed(&raw)?,
                image: raw,
                watermarked: true,
            };
            Ok((clean, riw, overlay))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut riw_pairs = Vec::new();
    let mut raw_pairs = Vec::new();
    for (clean, riw, overlay) in sets {
        riw_pairs.push(riw);
        riw_pairs.push(clean.clone());
        raw_pairs.push(overlay);
        raw_pairs.push(clean);
    }
    let d = &cfg.distinguisher;
    let riw = train_distinguisher(&riw_pairs, d.epochs, sub_seed(cfg.seed, "distinguisher"), &d.options)?;
    let raw = train_distinguisher(
        &raw_pairs,
        d.epochs,
        sub_seed(cfg.seed, "distinguisher/raw"),
        &d.options,
    )?;
    let (p1, p2) = (run.checkpoint("distinguisher"), run.checkpoint("distinguisher_raw"));
    riw.save(&p1)?;
    raw.save(&p2)?;
    let r = run.path("reports/distinguisher.json");
    write_json(
        &r,
        &DistinguisherReport {
            pairs: riw_pairs.len(),
            riw_holdout_auc: riw.meta.holdout_auc,
            raw_overlay_holdout_auc: raw.meta.holdout_auc,
        },
    )?;
    for (i, (id, _)) in data.iter().enumerate().take(4) {
        store_image(
            &riw_pairs[2 * i].image,
            &run.path(&format!("reports/distinguisher_samples/{id}_riw.png")),
        )?;
        store_image(
            &raw_pairs[2 * i].image,
            &run.path(&format!("reports/distinguisher_samples/{id}_overlay.png")),
        )?;
    }
    Ok(vec![p1, p2, r])
}
