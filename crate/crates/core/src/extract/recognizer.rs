use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::font::{glyph_char, glyph_index, ALPHABET};
use crate::imaging::{GlyphGeometry, Image};
use crate::nn::{self, Activation, Adam, Conv2d, Grads, Layer, Sequential, Tensor};

/// One clean bitmap per alphabet glyph at a fixed slot geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    pub geometry: GlyphGeometry,
    pub entries: Vec<(char, Vec<f64>)>,
}

impl TemplateBank {
    pub fn new(geometry: GlyphGeometry) -> Self {
        let (h, w) = (geometry.slot_height(), geometry.slot_width());
        let entries = (0..ALPHABET.len())
            .map(|k| {
                let t = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .map(|(y, x)| if geometry.slot_lit(k, y, x) { 1.0 } else { 0.0 })
                    .collect();
                (glyph_char(k), t)
            })
            .collect();
        Self { geometry, entries }
    }
}

/// Normalized cross-correlation; zero when either side is constant.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut s, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        s += (x - ma) * (y - mb);
        sa += (x - ma) * (x - ma);
        sb += (y - mb) * (y - mb);
    }
    if sa <= 1e-18 || sb <= 1e-18 {
        return 0.0;
    }
    s / (sa * sb).sqrt()
}

/// Picks the best-scoring entry; ties resolve to the smaller character so the
/// result does not depend on bank order.
fn best(scores: impl Iterator<Item = (char, f64)>) -> (char, f64) {
    scores.fold((char::MAX, f64::NEG_INFINITY), |acc, (c, s)| {
        if s > acc.1 || (s == acc.1 && c < acc.0) {
            (c, s)
        } else {
            acc
        }
    })
}

/// Small per-slot glyph classifier: two convolutions and a dense readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphClassifier {
    pub geometry: GlyphGeometry,
    pub net: Sequential,
    pub seed: u64,
    pub epochs: usize,
}

impl GlyphClassifier {
    pub fn init(geometry: GlyphGeometry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (geometry.slot_height(), geometry.slot_width());
        let flat = 8 * h.div_ceil(2) * w.div_ceil(2);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(1, 8, 3, 1, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(8, 8, 3, 2, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Flatten,
            Layer::Conv(Conv2d::new(flat, ALPHABET.len(), 1, 1, 0, &mut rng)),
        ]);
        Self {
            geometry,
            net,
            seed,
            epochs: 0,
        }
    }

    fn logits(&self, slot: &Tensor) -> Tensor {
        self.net.forward(slot)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.net.flat_params(), &(self.geometry, self.seed, self.epochs))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (values, (geometry, seed, epochs)): (Vec<f64>, (GlyphGeometry, u64, usize)) =
            crate::checkpoint::load(path)?;
        let mut c = Self::init(geometry, seed);
        c.net.load_flat(&values).map_err(Error::Checkpoint)?;
        c.epochs = epochs;
        Ok(c)
    }

    /// Softmax probabilities over the alphabet.
    pub fn probabilities(&self, slot: &[f64]) -> Vec<f64> {
        let t = standardize(slot);
        let (h, w) = (self.geometry.slot_height(), self.geometry.slot_width());
        softmax(&self.logits(&Tensor::from_vec(1, h, w, t)).data)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt().max(1e-3);
    v.iter().map(|a| (a - m) / sd).collect()
}

/// Trains the classifier on synthetic slots: glyphs at random contrast over
/// slot-sized background crops, plus Gaussian noise.
pub fn train_classifier(
    geometry: GlyphGeometry,
    backgrounds: &[Image],
    samples: usize,
    epochs: usize,
    seed: u64,
) -> Result<GlyphClassifier> {
    if backgrounds.is_empty() {
        return Err(Error::EmptyInput("classifier backgrounds"));
    }
    let bank = TemplateBank::new(geometry);
    let (h, w) = (geometry.slot_height(), geometry.slot_width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_51F1);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(samples);
    for _ in 0..samples {
        let bg = backgrounds[rng.gen_range(0..backgrounds.len())].to_gray();
        if bg.height() < h || bg.width() < w {
            return Err(Error::InvalidDimensions("background smaller than a glyph slot".into()));
        }
        let (oy, ox) = (rng.gen_range(0..=bg.height() - h), rng.gen_range(0..=bg.width() - w));
        let label = rng.gen_range(0..bank.entries.len());
        let contrast = rng.gen_range(0.03..0.6);
        let sigma = rng.gen_range(0.0..0.1);
        let slot: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let n: f64 = noise.sample(&mut rng);
                bg.get(0, oy + y, ox + x) + contrast * bank.entries[label].1[i] + sigma * n
            })
            .collect();
        data.push((Tensor::from_vec(1, h, w, standardize(&slot)), label));
    }
    Ok(fit_classifier(geometry, &data, epochs, seed))
}

/// Trains the classifier on labelled segments, one sample per glyph slot.
pub fn train_classifier_on_segments(
    geometry: GlyphGeometry,
    segments: &[(Image, String)],
    epochs: usize,
    seed: u64,
) -> Result<GlyphClassifier> {
    if segments.is_empty() {
        return Err(Error::EmptyInput("classifier segments"));
    }
    let (h, w) = (geometry.slot_height(), geometry.slot_width());
    let mut data = Vec::with_capacity(segments.len() * geometry.glyphs);
    for (seg, text) in segments {
        let gray = seg.to_gray();
        let chars: Vec<char> = text.chars().collect();
        if chars.len() != geometry.glyphs {
            return Err(Error::param(
                "text",
                format!("{text:?} does not have {} glyphs", geometry.glyphs),
            ));
        }
        for (m, &c) in chars.iter().enumerate() {
            let label = glyph_index(c).ok_or(Error::UnknownGlyph(c))?;
            let slot = gray.region(geometry.slot(m))?;
            data.push((Tensor::from_vec(1, h, w, standardize(slot.data())), label));
        }
    }
    Ok(fit_classifier(geometry, &data, epochs, seed))
}

fn fit_classifier(geometry: GlyphGeometry, data: &[(Tensor, usize)], epochs: usize, seed: u64) -> GlyphClassifier {
    let mut clf = GlyphClassifier::init(geometry, seed);
    let mut adam = Adam::new(2e-3, &clf.net.zero_grads());
    nn::run_epochs(data.len(), epochs, 32, seed, |batch, _| {
        let parts: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|&i| {
                let (x, label) = &data[i];
                let (z, tape) = clf.net.forward_tape(x);
                let p = softmax(&z.data);
                let mut g = Tensor::from_vec(z.channels, 1, 1, p.clone());
                g[*label] -= 1.0;
                let mut grads = clf.net.zero_grads();
                clf.net.backward_params(&tape, &g, &mut grads);
                (-p[*label].max(1e-300).ln(), grads)
            })
            .collect();
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
        let mut g = nn::sum_grads(parts.into_iter().map(|p| p.1).collect()).expect("batch");
        g.scale(1.0 / batch.len() as f64);
        adam.step(clf.net.params_mut(), &g);
        loss
    });
    clf.epochs = epochs;
    clf
}

/// Glyph recognizer in template-matching or classifier mode.
#[derive(Clone, Debug, PartialEq)]
pub enum Recognizer {
    /// Normalized cross-correlation against the built-in font; the optional
    /// scale overrides automatic fitting.
    Template {
        scale: Option<(usize, usize)>,
    },
    Classifier(GlyphClassifier),
}

impl Default for Recognizer {
    fn default() -> Self {
        Recognizer::Template { scale: None }
    }
}

impl Recognizer {
    fn geometry(&self, seg_h: usize, seg_w: usize, glyphs: usize) -> Result<GlyphGeometry> {
        match self {
            Recognizer::Template { scale } => GlyphGeometry::fit(seg_h, seg_w, glyphs, *scale),
            Recognizer::Classifier(c) => {
                let g = GlyphGeometry::fit(seg_h, seg_w, glyphs, Some((c.geometry.scale_x, c.geometry.scale_y)))?;
                Ok(g)
            }
        }
    }
}

/// Per-slot decoding of an `M`-glyph segment: the best-matching character and
/// its confidence in `[0, 1]` for each slot.
pub fn recognize_segment(rec: &Recognizer, seg: &Image, glyphs: usize) -> Result<(String, Vec<f64>)> {
    let geometry = rec.geometry(seg.height(), seg.width(), glyphs)?;
    let gray = seg.to_gray();
    let bank = match rec {
        Recognizer::Template { .. } => Some(TemplateBank::new(geometry)),
        Recognizer::Classifier(_) => None,
    };
    recognize_with(rec, bank.as_ref(), &gray, geometry)
}

pub(crate) fn recognize_with(
    rec: &Recognizer,
    bank: Option<&TemplateBank>,
    gray: &Image,
    geometry: GlyphGeometry,
) -> Result<(String, Vec<f64>)> {
    let mut text = String::with_capacity(geometry.glyphs);
    let mut conf = Vec::with_capacity(geometry.glyphs);
    for m in 0..geometry.glyphs {
        let slot = gray.region(geometry.slot(m))?;
        let (ch, score) = match (rec, bank) {
            (Recognizer::Template { .. }, Some(bank)) => {
                let (c, s) = best(bank.entries.iter().map(|(c, t)| (*c, ncc(slot.data(), t))));
                (c, s.max(0.0))
            }
            (Recognizer::Classifier(clf), _) => {
                let p = clf.probabilities(slot.data());
                best(p.iter().enumerate().map(|(k, v)| (glyph_char(k), *v)))
            }
            _ => unreachable!("template mode always carries a bank"),
        };
        text.push(ch);
        conf.push(score.clamp(0.0, 1.0));
    }
    Ok((text, conf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{render_watermark, SegmentLayout, WatermarkSpec};
    use rand_distr::Normal;

    fn segment(text: &str) -> Image {
        let spec = WatermarkSpec {
            grid: (1, 1),
            ..WatermarkSpec::with_text(text)
        };
        let layout = SegmentLayout::grid(1, 1, 21, 64).unwrap();
        render_watermark(&spec, &layout, 21, 64, 3).unwrap()
    }

    #[test]
    fn clean_segment_is_read_with_full_confidence() {
        let (s, c) = recognize_segment(&Recognizer::default(), &segment("ABCD"), 4).unwrap();
        assert_eq!(s, "ABCD");
        assert!(c.iter().all(|&v| v >= 0.99));
    }

    #[test]
    fn black_segment_yields_low_confidence_without_error() {
        let black = Image::filled(3, 21, 64, 0.0).unwrap();
        let (s, c) = recognize_segment(&Recognizer::default(), &black, 4).unwrap();
        assert_eq!(s.chars().count(), 4);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_small_segment_is_an_error() {
        let tiny = Image::filled(1, 5, 10, 0.0).unwrap();
        assert!(recognize_segment(&Recognizer::default(), &tiny, 4).is_err());
    }

    #[test]
    fn noisy_glyph_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let (mut ok, mut total) = (0, 0);
        for _ in 0..500 {
            let text: String = (0..4).map(|_| glyph_char(rng.gen_range(0..36))).collect();
            let clean = segment(&text);
            let noisy = Image::from_clamped(
                3,
                21,
                64,
                clean.data().iter().map(|v| v + noise.sample(&mut rng)).collect(),
            )
            .unwrap();
            let (s, _) = recognize_segment(&Recognizer::default(), &noisy, 4).unwrap();
            ok += s.chars().zip(text.chars()).filter(|(a, b)| a == b).count();
            total += 4;
        }
        assert!(ok as f64 / total as f64 >= 0.9, "{ok}/{total}");
    }

    #[test]
    fn decoding_ignores_template_order() {
        let seg = segment("Q0O8").to_gray();
        let geom = GlyphGeometry::fit(21, 64, 4, None).unwrap();
        let bank = TemplateBank::new(geom);
        let mut reversed = bank.clone();
        reversed.entries.reverse();
        let rec = Recognizer::default();
        let a = recognize_with(&rec, Some(&bank), &seg, geom).unwrap();
        let b = recognize_with(&rec, Some(&reversed), &seg, geom).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classifier_learns_clean_glyphs() {
        let geom = GlyphGeometry::fit(21, 64, 4, None).unwrap();
        let bgs = crate::imaging::generate_corpus(4, 32, 32, 3).unwrap();
        let clf = train_classifier(geom, &bgs, 720, 6, 1).unwrap();
        let rec = Recognizer::Classifier(clf);
        let (s, _) = recognize_segment(&rec, &segment("HELP"), 4).unwrap();
        assert_eq!(s, "HELP");
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let g = GlyphGeometry::fit(21, 64, 4, None).unwrap();
        let c = GlyphClassifier::init(g, 7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.bin");
        c.save(&p).unwrap();
        assert_eq!(GlyphClassifier::load(&p).unwrap(), c);
    }
}
