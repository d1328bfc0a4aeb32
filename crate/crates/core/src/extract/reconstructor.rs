use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::holdout_split;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{self, Activation, Adam, Conv2d, Grads, Layer, Sequential, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructorMeta {
    pub seed: u64,
    pub epochs: usize,
    pub channels: usize,
    pub hidden: usize,
    /// Hidden-to-hidden 3×3 convolutions between the input and output layers.
    pub depth: usize,
    pub holdout_rmse: Option<f64>,
}

fn default_depth() -> usize {
    2
}

/// Convolutional map from a degraded segment to a clean rendered-glyph segment.
/// Inputs are mean-centered per channel before the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructor {
    pub meta: ReconstructorMeta,
    net: Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructorOptions {
    pub hidden: usize,
    pub depth: usize,
    pub lr: f64,
    pub batch: usize,
    pub holdout: f64,
    pub rmse_threshold: f64,
}

impl Default for ReconstructorOptions {
    fn default() -> Self {
        Self {
            hidden: 16,
            depth: default_depth(),
            lr: 2e-3,
            batch: 16,
            holdout: 0.1,
            rmse_threshold: 0.45,
        }
    }
}

fn center(x: &Image) -> Tensor {
    let mut t = x.to_tensor();
    for c in 0..t.channels {
        let m = t.channel(c).iter().sum::<f64>() / t.plane() as f64;
        t.channel_mut(c).iter_mut().for_each(|v| *v -= m);
    }
    t
}

impl Reconstructor {
    pub fn init(channels: usize, hidden: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![
            Layer::Conv(Conv2d::new(channels, hidden, 3, 1, 1, &mut rng)),
            Layer::Act(Activation::Silu),
        ];
        for _ in 0..depth {
            layers.push(Layer::Conv(Conv2d::new(hidden, hidden, 3, 1, 1, &mut rng)));
            layers.push(Layer::Act(Activation::Silu));
        }
        layers.push(Layer::Conv(Conv2d::new(hidden, channels, 3, 1, 1, &mut rng)));
        layers.push(Layer::Act(Activation::Sigmoid));
        let net = Sequential::new(layers);
        Self {
            meta: ReconstructorMeta {
                seed,
                epochs: 0,
                channels,
                hidden,
                depth,
                holdout_rmse: None,
            },
            net,
        }
    }

    pub fn reconstruct(&self, seg: &Image) -> Result<Image> {
        if seg.channels() != self.meta.channels {
            return Err(Error::shape(self.meta.channels, seg.channels()));
        }
        Image::from_tensor(&self.net.forward(&center(seg)))
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.net.flat_params()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.net.flat_params(), &self.meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (values, meta): (Vec<f64>, ReconstructorMeta) = crate::checkpoint::load(path)?;
        let mut r = Reconstructor::init(meta.channels, meta.hidden, meta.depth, meta.seed);
        r.net.load_flat(&values).map_err(Error::Checkpoint)?;
        r.meta = meta;
        Ok(r)
    }
}

/// Fits the reconstructor to `(degraded, clean)` segment pairs by pixel MSE.
pub fn train_reconstructor(
    pairs: &[(Image, Image)],
    epochs: usize,
    seed: u64,
    opts: &ReconstructorOptions,
) -> Result<Reconstructor> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("reconstructor pairs"));
    }
    for (a, b) in pairs {
        a.same_shape(b)?;
    }
    let channels = pairs[0].0.channels();
    let mut rec = Reconstructor::init(channels, opts.hidden, opts.depth, seed);
    let data: Vec<(Tensor, Tensor)> = pairs.iter().map(|(a, b)| (center(a), b.to_tensor())).collect();
    let (train, held) = holdout_split(data.len(), opts.holdout);
    let mut adam = Adam::new(opts.lr, &rec.net.zero_grads());
    nn::run_epochs(train.len(), epochs, opts.batch, seed, |batch, _| {
        let parts: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|&i| {
                let (x, y) = &data[train[i]];
                let (out, tape) = rec.net.forward_tape(x);
                let d = out.sub(y);
                let n = d.len() as f64;
                let mut g = rec.net.zero_grads();
                rec.net.backward_params(&tape, &d.scale(2.0 / n), &mut g);
                (d.data.iter().map(|v| v * v).sum::<f64>() / n, g)
            })
            .collect();
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
        let mut g = nn::sum_grads(parts.into_iter().map(|p| p.1).collect()).expect("batch");
        g.scale(1.0 / batch.len() as f64);
        adam.step(rec.net.params_mut(), &g);
        loss
    });
    let errs: Vec<f64> = held
        .par_iter()
        .map(|&i| {
            let (x, y) = &data[i];
            let d = rec.net.forward(x).sub(y);
            d.data.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
        })
        .collect();
    let mse = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    let rmse = mse.sqrt();
    rec.meta.epochs = epochs;
    rec.meta.holdout_rmse = Some(rmse);
    if epochs > 0 && rmse > opts.rmse_threshold {
        return Err(Error::NonConvergence {
            stage: "reconstructor",
            metric: "holdout rmse",
            value: rmse,
            threshold: opts.rmse_threshold,
        });
    }
    Ok(rec)
}
