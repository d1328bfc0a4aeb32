use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distinguisher::DistinguisherParams;
use super::roc::calibrate_threshold;
use crate::codec::Codec;
use crate::editsim::{edit, Denoiser, EditSpec};
use crate::error::{Error, Result};
use crate::extract::Extractor;
use crate::imaging::{render_watermark, Image, WatermarkSpec};
use crate::riw::{inject, InjectionConfig};

/// What happens to the published image before Bob and Alice see it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameEdit {
    Identity,
    /// Replace the image by uniform noise.
    PureNoise,
    /// Simulated diffusion edit; the seed is replaced per trial.
    Edit(EditSpec),
}

pub struct Game<'a> {
    pub codec: &'a Codec,
    pub denoiser: Option<&'a Denoiser>,
    pub watermark: &'a WatermarkSpec,
    pub inject: &'a InjectionConfig,
    pub edit: GameEdit,
    pub extractor: &'a Extractor,
    pub distinguisher: &'a DistinguisherParams,
    /// Bob answers 1 when the extraction score reaches this value.
    pub bob_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub image_index: usize,
    pub b: bool,
    pub b_a: bool,
    pub b_b: bool,
    pub extraction_score: f64,
    pub distinguisher_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameOutcome {
    pub trials: usize,
    pub bob_win_rate: f64,
    pub alice_win_rate: f64,
    pub bob_threshold: f64,
    pub edit: GameEdit,
    pub log: Vec<TrialRecord>,
}

fn trial_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x7F))
}

impl Game<'_> {
    fn check(&self) -> Result<()> {
        if !self.codec.is_trained() {
            return Err(Error::Untrained("codec"));
        }
        if let GameEdit::Edit(spec) = &self.edit {
            match self.denoiser {
                Some(d) if d.is_trained() => spec.validate(d.schedule())?,
                _ => return Err(Error::Untrained("denoiser")),
            }
        }
        Ok(())
    }

    fn watermarked(&self, x: &Image) -> Result<Image> {
        let w = render_watermark(
            self.watermark,
            &self.extractor.layout,
            x.height(),
            x.width(),
            x.channels(),
        )?;
        Ok(inject(self.codec, x, &w, self.inject)?.0)
    }

    fn apply_edit(&self, x: &Image, seed: u64) -> Result<Image> {
        match &self.edit {
            GameEdit::Identity => Ok(x.clone()),
            GameEdit::PureNoise => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (c, h, w) = x.shape();
                Image::new(c, h, w, (0..c * h * w).map(|_| rng.gen::<f64>()).collect())
            }
            GameEdit::Edit(spec) => {
                let spec = EditSpec { seed, ..spec.clone() };
                edit(self.codec, self.denoiser.expect("checked"), x, &spec)
            }
        }
    }

    fn bob_score(&self, edited: &Image) -> Result<f64> {
        let text = &self.watermark.text;
        Ok(self.extractor.extract(edited, Some(text))?.glyph_accuracy(text))
    }

    /// Bob's extraction scores for watermarked and clean versions of the
    /// given images, each passed through this game's edit.
    pub fn bob_scores(&self, images: &[Image], seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check()?;
        let parts = images
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let s = trial_rng(seed, i).gen::<u64>();
                let pos = self.bob_score(&self.apply_edit(&self.watermarked(x)?, s)?)?;
                let neg = self.bob_score(&self.apply_edit(x, s ^ 1)?)?;
                Ok((pos, neg))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        Ok(parts.into_iter().unzip())
    }

    /// Threshold equalizing Bob's false positives and negatives on `images`.
    pub fn calibrate_bob(&self, images: &[Image], seed: u64) -> Result<f64> {
        let (pos, neg) = self.bob_scores(images, seed)?;
        calibrate_threshold(&pos, &neg)
    }
}

/// Plays `trials` independent rounds: sample an image and a bit `b`, publish
/// the watermarked image when `b = 1`, edit it, and record both guesses.
pub fn run_game(game: &Game<'_>, corpus: &[Image], trials: usize, seed: u64) -> Result<GameOutcome> {
    game.check()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    if trials == 0 {
        return Err(Error::EmptyInput("trials"));
    }
    let log = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let image_index = rng.gen_range(0..corpus.len());
            let b: bool = rng.gen();
            let edit_seed: u64 = rng.gen();
            let x = &corpus[image_index];
            let published = if b { game.watermarked(x)? } else { x.clone() };
            let edited = game.apply_edit(&published, edit_seed)?;
            let extraction_score = game.bob_score(&edited)?;
            let distinguisher_score = game.distinguisher.score(&published, &edited)?;
            Ok(TrialRecord {
                trial: t,
                image_index,
                b,
                b_a: distinguisher_score >= 0.5,
                b_b: extraction_score >= game.bob_threshold,
                extraction_score,
                distinguisher_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rate = |f: fn(&TrialRecord) -> bool| log.iter().filter(|r| f(r)).count() as f64 / log.len() as f64;
    Ok(GameOutcome {
        trials,
        bob_win_rate: rate(|r| r.b_b == r.b),
        alice_win_rate: rate(|r| r.b_a == r.b),
        bob_threshold: game.bob_threshold,
        edit: game.edit.clone(),
        log,
    })
}
