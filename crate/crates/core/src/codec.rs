//! Small convolutional latent codec: a strided encoder `E` and a mirrored
//! transposed-convolution decoder `D`, trained for reconstruction, with
//! reverse-mode gradients of scalar losses back to the input pixels.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{self, Activation, Adam, Conv2d, ConvTranspose2d, Grads, Layer, Sequential, Tape, Tensor};

/// Encoder output living on the downsampled latent grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Tensor);

impl LatentVector {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        LatentVector(Tensor::zeros(shape.0, shape.1, shape.2))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn l1_distance(&self, other: &LatentVector) -> f64 {
        self.0.sub(&other.0).l1()
    }

    pub fn l2_distance(&self, other: &LatentVector) -> f64 {
        self.0.sub(&other.0).l2()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub image_channels: usize,
    pub hidden: usize,
    pub latent_channels: usize,
    /// Number of stride-2 stages; the latent grid is `H / 2^stages`.
    pub stages: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            hidden: 16,
            latent_channels: 4,
            stages: 1,
        }
    }
}

impl CodecConfig {
    pub fn factor(&self) -> usize {
        1 << self.stages
    }

    pub fn latent_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (self.latent_channels, h / self.factor(), w / self.factor())
    }

    fn build(&self, seed: u64) -> (Sequential, Sequential) {
        assert!((1..=2).contains(&self.stages), "codec supports 1 or 2 stride-2 stages");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, l) = (self.image_channels, self.hidden, self.latent_channels);
        let down2 = if self.stages == 2 { 2 } else { 1 };
        let encoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(c, h, 3, 2, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, h, 3, down2, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, l, 3, 1, 1, &mut rng)),
        ]);
        let middle = if self.stages == 2 {
            Layer::ConvT(ConvTranspose2d::new(h, h, 4, 2, 1, &mut rng))
        } else {
            Layer::Conv(Conv2d::new(h, h, 3, 1, 1, &mut rng))
        };
        let decoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(l, h, 3, 1, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            middle,
            Layer::Act(Activation::Silu),
            Layer::ConvT(ConvTranspose2d::new(h, c, 4, 2, 1, &mut rng)),
            Layer::Act(Activation::Sigmoid),
        ]);
        (encoder, decoder)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub seed: u64,
    pub epochs: usize,
    pub rmse: Option<f64>,
    pub config: CodecConfig,
}

/// Trained (or freshly initialised) encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub meta: CodecMeta,
    encoder: Sequential,
    decoder: Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch: usize,
    /// Fraction of the corpus held out for the final RMSE.
    pub holdout: f64,
    pub rmse_threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 8,
            holdout: 0.1,
            rmse_threshold: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_rmse: f64,
}

/// Split `n` items into (train, holdout) index lists; the tail is held out.
pub(crate) fn holdout_split(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let k = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    if k == 0 {
        return ((0..n).collect(), (0..n).collect());
    }
    ((0..n - k).collect(), (n - k..n).collect())
}

impl Codec {
    pub fn init(config: CodecConfig, seed: u64) -> Self {
        let (encoder, decoder) = config.build(seed);
        Self {
            meta: CodecMeta {
                seed,
                epochs: 0,
                rmse: None,
                config,
            },
            encoder,
            decoder,
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.meta.config
    }

    pub fn is_trained(&self) -> bool {
        self.meta.epochs > 0
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let f = self.config().factor();
        if x.channels != self.config().image_channels
            || x.height % f != 0
            || x.width % f != 0
            || x.height < f
            || x.width < f
        {
            return Err(Error::shape(
                format!("{} channels, sides divisible by {f}", self.config().image_channels),
                x.shape(),
            ));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.channels != self.config().latent_channels {
            return Err(Error::shape(self.config().latent_channels, z.channels));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Image) -> Result<LatentVector> {
        let t = x.to_tensor();
        self.check_image(&t)?;
        Ok(LatentVector(self.encoder.forward(&t)))
    }

    pub fn decode(&self, z: &LatentVector) -> Result<Image> {
        self.check_latent(&z.0)?;
        Image::from_tensor(&self.decoder.forward(&z.0))
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        Ok(self.encoder.forward(x))
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        Ok(self.decoder.forward(z))
    }

    pub fn round_trip(&self, x: &Image) -> Result<Image> {
        self.decode(&self.encode(x)?)
    }

    pub fn enc_tape(&self, x: &Tensor) -> (Tensor, Tape) {
        self.encoder.forward_tape(x)
    }

    pub fn dec_tape(&self, z: &Tensor) -> (Tensor, Tape) {
        self.decoder.forward_tape(z)
    }

    pub fn enc_back(&self, tape: &Tape, grad: &Tensor) -> Tensor {
        self.encoder.backward(tape, grad, None)
    }

    pub fn dec_back(&self, tape: &Tape, grad: &Tensor) -> Tensor {
        self.decoder.backward(tape, grad, None)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.encoder.flat_params();
        v.extend(self.decoder.flat_params());
        v
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let ne = self.encoder.param_count();
        if flat.len() != ne + self.decoder.param_count() {
            return Err(Error::Checkpoint(format!(
                "codec expects {} parameters, found {}",
                ne + self.decoder.param_count(),
                flat.len()
            )));
        }
        self.encoder.load_flat(&flat[..ne]).map_err(Error::Checkpoint)?;
        self.decoder.load_flat(&flat[ne..]).map_err(Error::Checkpoint)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.flat_params(), &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (values, meta): (Vec<f64>, CodecMeta) = checkpoint::load(path)?;
        let mut codec = Codec::init(meta.config, meta.seed);
        codec.load_flat(&values)?;
        codec.meta = meta;
        Ok(codec)
    }

    /// Mean per-pixel RMSE of `D(E(x))` over `images`.
    pub fn reconstruction_rmse(&self, images: &[&Image]) -> Result<f64> {
        let errs: Result<Vec<f64>> = images
            .par_iter()
            .map(|x| {
                let r = self.round_trip(x)?;
                Ok(r.rmse(x)?.powi(2))
            })
            .collect();
        let errs = errs?;
        Ok((errs.iter().sum::<f64>() / errs.len().max(1) as f64).sqrt())
    }

    fn sample_grads(&self, x: &Tensor) -> (f64, Grads) {
        let (z, etape) = self.encoder.forward_tape(x);
        let (y, dtape) = self.decoder.forward_tape(&z);
        let n = y.len() as f64;
        let diff = y.sub(x);
        let loss = diff.data.iter().map(|d| d * d).sum::<f64>() / n;
        let gy = diff.scale(2.0 / n);
        let mut dgrads = self.decoder.zero_grads();
        let gz = self.decoder.backward(&dtape, &gy, Some(&mut dgrads));
        let mut egrads = self.encoder.zero_grads();
        self.encoder.backward_params(&etape, &gz, &mut egrads);
        egrads.extend(dgrads);
        (loss, egrads)
    }
}

/// Trains a codec on `corpus` by minimising mean squared reconstruction error.
pub fn train_codec(corpus: &[Image], epochs: usize, seed: u64) -> Result<(Codec, TrainReport)> {
    train_codec_with(corpus, epochs, seed, CodecConfig::default(), &TrainOptions::default())
}

pub fn train_codec_with(
    corpus: &[Image],
    epochs: usize,
    seed: u64,
    config: CodecConfig,
    opts: &TrainOptions,
) -> Result<(Codec, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("codec training corpus"));
    }
    let mut codec = Codec::init(config, seed);
    let tensors: Vec<Tensor> = corpus.iter().map(Image::to_tensor).collect();
    for t in &tensors {
        codec.check_image(t)?;
    }
    let (train, held) = holdout_split(corpus.len(), opts.holdout);
    let mut grads_shape = codec.encoder.zero_grads();
    grads_shape.extend(codec.decoder.zero_grads());
    let mut adam = Adam::new(opts.lr, &grads_shape);
    let epoch_losses = nn::run_epochs(train.len(), epochs, opts.batch, seed, |batch, _| {
        let parts: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|&i| codec.sample_grads(&tensors[train[i]]))
            .collect();
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
        let mut g = nn::sum_grads(parts.into_iter().map(|p| p.1).collect()).expect("non-empty batch");
        g.scale(1.0 / batch.len() as f64);
        let mut params = codec.encoder.params_mut();
        params.extend(codec.decoder.params_mut());
        adam.step(params, &g);
        loss
    });
    let held_imgs: Vec<&Image> = held.iter().map(|&i| &corpus[i]).collect();
    let rmse = codec.reconstruction_rmse(&held_imgs)?;
    codec.meta.epochs = epochs;
    codec.meta.rmse = Some(rmse);
    if epochs > 0 && rmse > opts.rmse_threshold {
        return Err(Error::NonConvergence {
            stage: "codec",
            metric: "holdout rmse",
            value: rmse,
            threshold: opts.rmse_threshold,
        });
    }
    Ok((
        codec,
        TrainReport {
            epoch_losses,
            holdout_rmse: rmse,
        },
    ))
}

/// A scalar function of an input image that can report its own input gradient
/// through a codec.
pub trait ImageLoss: Sync {
    fn evaluate(&self, codec: &Codec, x: &Tensor) -> (f64, Tensor);
}

/// `‖x‖² / 2`.
pub struct HalfSquaredNorm;

impl ImageLoss for HalfSquaredNorm {
    fn evaluate(&self, _: &Codec, x: &Tensor) -> (f64, Tensor) {
        (x.data.iter().map(|v| v * v).sum::<f64>() / 2.0, x.clone())
    }
}

pub struct ConstantLoss(pub f64);

impl ImageLoss for ConstantLoss {
    fn evaluate(&self, _: &Codec, x: &Tensor) -> (f64, Tensor) {
        (self.0, Tensor::zeros(x.channels, x.height, x.width))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `‖E(x) − target‖₁`.
pub struct LatentL1 {
    pub target: Tensor,
}

impl ImageLoss for LatentL1 {
    fn evaluate(&self, codec: &Codec, x: &Tensor) -> (f64, Tensor) {
        let (z, tape) = codec.enc_tape(x);
        let diff = z.sub(&self.target);
        let g = codec.enc_back(&tape, &diff.map(sign));
        (diff.l1(), g)
    }
}

/// `‖D(E(x)) − reference‖₂` (unsquared; zero gradient at the kink).
pub struct RoundTripL2 {
    pub reference: Tensor,
}

impl ImageLoss for RoundTripL2 {
    fn evaluate(&self, codec: &Codec, x: &Tensor) -> (f64, Tensor) {
        let (z, etape) = codec.enc_tape(x);
        let (y, dtape) = codec.dec_tape(&z);
        let diff = y.sub(&self.reference);
        let norm = diff.l2();
        if norm == 0.0 {
            return (0.0, Tensor::zeros(x.channels, x.height, x.width));
        }
        let gz = codec.dec_back(&dtape, &diff.scale(1.0 / norm));
        (norm, codec.enc_back(&etape, &gz))
    }
}

/// Gradient of `loss` with respect to the pixels of `x`.
pub fn input_gradient(codec: &Codec, loss: &dyn ImageLoss, x: &Image) -> Result<(f64, Tensor)> {
    let t = x.to_tensor();
    codec.check_image(&t)?;
    Ok(loss.evaluate(codec, &t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::generate_corpus;
    use rand::Rng;

    fn toy_codec() -> Codec {
        Codec::init(
            CodecConfig {
                image_channels: 3,
                hidden: 6,
                latent_channels: 3,
                stages: 1,
            },
            21,
        )
    }

    fn central_difference(codec: &Codec, loss: &dyn ImageLoss, x: &Tensor, i: usize, h: f64) -> f64 {
        let mut p = x.clone();
        p[i] += h;
        let mut m = x.clone();
        m[i] -= h;
        (loss.evaluate(codec, &p).0 - loss.evaluate(codec, &m).0) / (2.0 * h)
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let codec = toy_codec();
        let x = generate_corpus(1, 16, 16, 2).unwrap().remove(0);
        let (v, g) = input_gradient(&codec, &HalfSquaredNorm, &x).unwrap();
        assert_eq!(g, x.to_tensor());
        assert!((v - x.data().iter().map(|a| a * a).sum::<f64>() / 2.0).abs() < 1e-12);
        let (_, g0) = input_gradient(&codec, &ConstantLoss(3.0), &x).unwrap();
        assert!(g0.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_l1_gradient_matches_finite_differences() {
        let codec = toy_codec();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::from_vec(3, 8, 8, (0..192).map(|_| rng.gen_range(0.1..0.9)).collect());
        let z0 = codec.encoder.forward(&x).map(|v| v + 0.3);
        let loss = LatentL1 { target: z0 };
        let (_, g) = loss.evaluate(&codec, &x);
        for i in (0..192).step_by(11) {
            let fd = central_difference(&codec, &loss, &x, i, 1e-4);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "pixel {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn round_trip_gradient_matches_finite_differences() {
        let codec = toy_codec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(3, 8, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect());
        let loss = RoundTripL2 { reference: x.clone() };
        let (_, g) = loss.evaluate(&codec, &x);
        for i in (0..192).step_by(13) {
            let fd = central_difference(&codec, &loss, &x, i, 1e-5);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "pixel {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn encode_decode_contracts() {
        let codec = toy_codec();
        let x = generate_corpus(1, 16, 16, 4).unwrap().remove(0);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z, codec.encode(&x).unwrap());
        assert_eq!(z.shape(), (3, 8, 8));
        let zero = Image::filled(3, 16, 16, 0.0).unwrap();
        assert!(codec.encode(&zero).unwrap().0.is_finite());
        let y = codec.decode(&LatentVector::zeros((3, 8, 8))).unwrap();
        assert_eq!(y.shape(), (3, 16, 16));
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bad = Image::filled(1, 16, 16, 0.0).unwrap();
        assert!(matches!(codec.encode(&bad), Err(Error::ShapeMismatch { .. })));
        assert!(codec.decode(&LatentVector::zeros((5, 8, 8))).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialisation_and_training_is_deterministic() {
        let corpus = generate_corpus(6, 16, 16, 3).unwrap();
        let cfg = CodecConfig {
            hidden: 6,
            ..CodecConfig::default()
        };
        let opts = TrainOptions {
            rmse_threshold: 1.0,
            ..TrainOptions::default()
        };
        let (c0, _) = train_codec_with(&corpus, 0, 5, cfg, &opts).unwrap();
        assert_eq!(c0.flat_params(), Codec::init(cfg, 5).flat_params());
        let (a, ra) = train_codec_with(&corpus, 3, 5, cfg, &opts).unwrap();
        let (b, rb) = train_codec_with(&corpus, 3, 5, cfg, &opts).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_eq!(ra, rb);
        assert!(matches!(train_codec(&[], 1, 0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn non_convergence_is_reported() {
        let corpus = generate_corpus(4, 16, 16, 3).unwrap();
        let opts = TrainOptions {
            rmse_threshold: 1e-6,
            ..TrainOptions::default()
        };
        let err = train_codec_with(&corpus, 1, 1, CodecConfig::default(), &opts).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { stage: "codec", .. }));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let codec = toy_codec();
        let p = dir.path().join("codec.bin");
        codec.save(&p).unwrap();
        assert_eq!(Codec::load(&p).unwrap(), codec);
        assert!(checkpoint::sidecar_path(&p).exists());
    }
}
