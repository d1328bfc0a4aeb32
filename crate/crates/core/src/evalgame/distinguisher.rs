use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::roc::{roc_auc, ScoredSample};
use crate::codec::holdout_split;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{self, Activation, Adam, Conv2d, Grads, Layer, Sequential, Tensor};

/// One training example: the published image, its edited version, and
/// whether the published image carries a watermark.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub image: Image,
    pub edited: Image,
    pub watermarked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinguisherMeta {
    pub seed: u64,
    pub epochs: usize,
    pub hidden: usize,
    pub holdout_auc: Option<f64>,
}

/// Small binary convolutional classifier over the channel-stacked pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DistinguisherParams {
    pub meta: DistinguisherMeta,
    net: Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistinguisherOptions {
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub holdout: f64,
}

impl Default for DistinguisherOptions {
    fn default() -> Self {
        Self {
            hidden: 16,
            lr: 2e-3,
            batch: 16,
            holdout: 0.25,
        }
    }
}

fn stack(image: &Image, edited: &Image) -> Result<Tensor> {
    image.same_shape(edited)?;
    Ok(image.to_tensor().concat_channels(&edited.to_tensor()))
}

impl DistinguisherParams {
    pub fn init(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = hidden;
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(2 * channels, h, 3, 1, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, h, 3, 2, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, h, 3, 2, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::GlobalAvgPool,
            Layer::Conv(Conv2d::new(h, 1, 1, 1, 0, &mut rng)),
            Layer::Act(Activation::Sigmoid),
        ]);
        Self {
            meta: DistinguisherMeta {
                seed,
                epochs: 0,
                hidden,
                holdout_auc: None,
            },
            net,
        }
    }

    /// Probability in `[0, 1]` that `image` is watermarked.
    pub fn score(&self, image: &Image, edited: &Image) -> Result<f64> {
        Ok(self.net.forward(&stack(image, edited)?).data[0])
    }

    pub fn auc(&self, pairs: &[LabeledPair]) -> Result<f64> {
        let samples = pairs
            .par_iter()
            .map(|p| {
                Ok(ScoredSample {
                    score: self.score(&p.image, &p.edited)?,
                    label: p.watermarked,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(roc_auc(&samples)?.1)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.net.flat_params(), &self.meta)
    }

    pub fn load(path: &std::path::Path, channels: usize) -> Result<Self> {
        let (values, meta): (Vec<f64>, DistinguisherMeta) = crate::checkpoint::load(path)?;
        let mut d = Self::init(channels, meta.hidden, meta.seed);
        d.net.load_flat(&values).map_err(Error::Checkpoint)?;
        d.meta = meta;
        Ok(d)
    }
}

/// Binary cross-entropy training; the held-out AUC is recorded in the meta
/// and a weak classifier is not an error.
pub fn train_distinguisher(
    pairs: &[LabeledPair],
    epochs: usize,
    seed: u64,
    opts: &DistinguisherOptions,
) -> Result<DistinguisherParams> {
    let pos = pairs.iter().filter(|p| p.watermarked).count();
    if pos == 0 || pos == pairs.len() {
        return Err(Error::SingleClass);
    }
    let data = pairs
        .iter()
        .map(|p| Ok((stack(&p.image, &p.edited)?, p.watermarked)))
        .collect::<Result<Vec<_>>>()?;
    let mut d = DistinguisherParams::init(pairs[0].image.channels(), opts.hidden, seed);
    // Interleave labels before the tail split so both classes are held out.
    let mut order: Vec<usize> = (0..data.len()).filter(|&i| data[i].1).collect();
    let negs: Vec<usize> = (0..data.len()).filter(|&i| !data[i].1).collect();
    order = interleave(&order, &negs);
    let (train, held) = holdout_split(order.len(), opts.holdout);
    let (train, held): (Vec<usize>, Vec<usize>) = (
        train.iter().map(|&i| order[i]).collect(),
        held.iter().map(|&i| order[i]).collect(),
    );
    let mut adam = Adam::new(opts.lr, &d.net.zero_grads());
    nn::run_epochs(train.len(), epochs, opts.batch, seed, |batch, _| {
        let parts: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|&i| {
                let (x, y) = &data[train[i]];
                let (out, tape) = d.net.forward_tape(x);
                let p = out.data[0].clamp(1e-12, 1.0 - 1e-12);
                let t = *y as u8 as f64;
                let loss = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                let g = Tensor::from_vec(1, 1, 1, vec![(p - t) / (p * (1.0 - p))]);
                let mut grads = d.net.zero_grads();
                d.net.backward_params(&tape, &g, &mut grads);
                (loss, grads)
            })
            .collect();
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
        let mut g = nn::sum_grads(parts.into_iter().map(|p| p.1).collect()).expect("batch");
        g.scale(1.0 / batch.len() as f64);
        adam.step(d.net.params_mut(), &g);
        loss
    });
    d.meta.epochs = epochs;
    let held_pairs: Vec<LabeledPair> = held.iter().map(|&i| pairs[i].clone()).collect();
    d.meta.holdout_auc = d.auc(&held_pairs).ok();
    Ok(d)
}

fn interleave(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.len().max(b.len()) {
        out.extend(a.get(i));
        out.extend(b.get(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::generate_corpus;

    fn pairs(shift: f64, n: usize) -> Vec<LabeledPair> {
        generate_corpus(n, 16, 16, 3)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, x)| {
                let w = i % 2 == 0;
                let img = if w {
                    Image::from_clamped(3, 16, 16, x.data().iter().map(|v| v + shift).collect()).unwrap()
                } else {
                    x
                };
                LabeledPair {
                    edited: img.clone(),
                    image: img,
                    watermarked: w,
                }
            })
            .collect()
    }

    #[test]
    fn learns_a_visible_signal_and_scores_in_unit_interval() {
        let opts = DistinguisherOptions {
            hidden: 8,
            lr: 1e-2,
            ..Default::default()
        };
        let d = train_distinguisher(&pairs(0.5, 48), 40, 1, &opts).unwrap();
        assert!(d.meta.holdout_auc.unwrap() >= 0.9, "{:?}", d.meta.holdout_auc);
        let p = pairs(0.5, 2);
        let s = d.score(&p[0].image, &p[0].edited).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(s, d.score(&p[0].image, &p[0].edited).unwrap());
    }

    #[test]
    fn rejects_single_class_and_round_trips() {
        let p: Vec<LabeledPair> = pairs(0.1, 4).into_iter().filter(|p| p.watermarked).collect();
        assert!(matches!(
            train_distinguisher(&p, 1, 0, &DistinguisherOptions::default()),
            Err(Error::SingleClass)
        ));
        let d = DistinguisherParams::init(3, 4, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        d.save(&path).unwrap();
        assert_eq!(DistinguisherParams::load(&path, 3).unwrap(), d);
    }
}
