use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dct::bit_accuracy;
use crate::codec::holdout_split;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{self, Activation, Adam, Conv2d, Grads, Layer, Sequential, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeMeta {
    pub payload_len: usize,
    /// Image `(height, width)` the networks are built for.
    pub size: (usize, usize),
    pub lam: f64,
    /// Std of the Gaussian noise added to decoder inputs during training.
    pub alpha_noise: f64,
    /// ℓ∞ bound of the embedded residual.
    pub beta: f64,
    pub hidden: usize,
    pub seed: u64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub holdout_bit_accuracy: Option<f64>,
}

/// Encoder (image, bits) → bounded residual and decoder image → bit probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AeWatermarkParams {
    pub meta: AeMeta,
    encoder: Sequential,
    decoder: Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainOptions {
    pub hidden: usize,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub holdout: f64,
    pub min_bit_accuracy: f64,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        Self {
            hidden: 16,
            beta: 6.0 / 255.0,
            lr: 2e-3,
            batch: 8,
            holdout: 0.1,
            min_bit_accuracy: 0.75,
        }
    }
}

/// Per-bit keyed ±1 carrier patterns (2×2-pixel cells) signed by the bit values.
fn bit_planes(bits: &[bool], h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA11_1E55);
    let mut t = Tensor::zeros(bits.len(), h, w);
    for (c, &b) in bits.iter().enumerate() {
        let cells: Vec<f64> = (0..h.div_ceil(2) * w.div_ceil(2))
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let sign = if b { 1.0 } else { -1.0 };
        let plane = t.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = sign * cells[(y / 2) * w.div_ceil(2) + x / 2];
            }
        }
    }
    t
}

fn random_bits(len: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen()).collect()
}

fn gaussian(t: &Tensor, sigma: f64, seed: u64) -> Tensor {
    if sigma == 0.0 {
        return t.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = t.clone();
    for v in out.data.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * n;
    }
    out
}

/// Mean binary cross-entropy of bit probabilities and its gradient.
fn bit_loss(p: &Tensor, bits: &[bool]) -> (f64, Tensor) {
    let l = bits.len() as f64;
    let mut loss = 0.0;
    let mut g = Tensor::zeros(bits.len(), 1, 1);
    for (k, &b) in bits.iter().enumerate() {
        let q = p.data[k].clamp(1e-12, 1.0 - 1e-12);
        let t = b as u8 as f64;
        loss -= (t * q.ln() + (1.0 - t) * (1.0 - q).ln()) / l;
        g.data[k] = (q - t) / (q * (1.0 - q) * l);
    }
    (loss, g)
}

impl AeWatermarkParams {
    pub fn init(
        payload_len: usize,
        size: (usize, usize),
        hidden: usize,
        beta: f64,
        lam: f64,
        alpha_noise: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = hidden;
        let down = |v: usize| v.div_ceil(2).div_ceil(2).div_ceil(2);
        let flat = h * down(size.0) * down(size.1);
        let encoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(3 + payload_len, h, 3, 1, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, h, 3, 1, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, 3, 3, 1, 1, &mut rng)),
            Layer::Act(Activation::Tanh),
        ]);
        let decoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(3, h, 3, 2, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, h, 3, 2, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, h, 3, 2, 1, &mut rng)),
            Layer::Act(Activation::Silu),
            Layer::Flatten,
            Layer::Conv(Conv2d::new(flat, payload_len, 1, 1, 0, &mut rng)),
            Layer::Act(Activation::Sigmoid),
        ]);
        Self {
            meta: AeMeta {
                payload_len,
                size,
                lam,
                alpha_noise,
                beta,
                hidden,
                seed,
                epochs: 0,
                finetune_epochs: 0,
                holdout_bit_accuracy: None,
            },
            encoder,
            decoder,
        }
    }

    fn check_bits(&self, bits: &[bool]) -> Result<()> {
        if bits.len() != self.meta.payload_len {
            return Err(Error::shape(self.meta.payload_len, bits.len()));
        }
        Ok(())
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        let (h, w) = self.meta.size;
        if x.shape() != (3, h, w) {
            return Err(Error::shape((3, h, w), x.shape()));
        }
        Ok(())
    }

    fn planes(&self, bits: &[bool]) -> Tensor {
        bit_planes(bits, self.meta.size.0, self.meta.size.1, self.meta.seed)
    }

    /// Residual-embedded image; `‖x̂ − x‖∞ ≤ beta` before clamping.
    pub fn embed(&self, x: &Image, bits: &[bool]) -> Result<Image> {
        self.check_bits(bits)?;
        self.check_image(x)?;
        let xt = x.to_tensor();
        let r = self.encoder.forward(&xt.concat_channels(&self.planes(bits)));
        Image::from_tensor(&xt.zip_map(&r, |a, b| (a + self.meta.beta * b).clamp(0.0, 1.0)))
    }

    pub fn probabilities(&self, x: &Image) -> Result<Vec<f64>> {
        self.check_image(x)?;
        Ok(self.decoder.forward(&x.to_tensor()).data)
    }

    pub fn decode(&self, x: &Image) -> Result<Vec<bool>> {
        Ok(self.probabilities(x)?.into_iter().map(|p| p > 0.5).collect())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.encoder.flat_params();
        v.extend(self.decoder.flat_params());
        v
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.flat_params(), &self.meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (values, meta): (Vec<f64>, AeMeta) = crate::checkpoint::load(path)?;
        let mut p = Self::init(
            meta.payload_len,
            meta.size,
            meta.hidden,
            meta.beta,
            meta.lam,
            meta.alpha_noise,
            meta.seed,
        );
        let ne = p.encoder.param_count();
        if values.len() < ne {
            return Err(Error::Checkpoint("truncated watermark parameters".into()));
        }
        p.encoder.load_flat(&values[..ne]).map_err(Error::Checkpoint)?;
        p.decoder.load_flat(&values[ne..]).map_err(Error::Checkpoint)?;
        p.meta = meta;
        Ok(p)
    }

    /// Gradients of `BCE(D(x̂ + noise), w) + λ·mean((x̂ − x)²)`.
    fn joint_grads(&self, x: &Tensor, bits: &[bool], noise_seed: u64) -> (f64, Grads, Grads) {
        let (r, etape) = self.encoder.forward_tape(&x.concat_channels(&self.planes(bits)));
        let raw = x.zip_map(&r, |a, b| a + self.meta.beta * b);
        let xh = raw.map(|v| v.clamp(0.0, 1.0));
        let noisy = gaussian(&xh, self.meta.alpha_noise, noise_seed);
        let (p, dtape) = self.decoder.forward_tape(&noisy);
        let (bl, gp) = bit_loss(&p, bits);
        let n = xh.len() as f64;
        let dp = xh.sub(x);
        let loss = bl + self.meta.lam * dp.data.iter().map(|v| v * v).sum::<f64>() / n;
        let mut gd = self.decoder.zero_grads();
        let mut gx = self.decoder.backward(&dtape, &gp, Some(&mut gd));
        gx.axpy(2.0 * self.meta.lam / n, &dp);
        let gr = gx.zip_map(&raw, |g, v| {
            if (0.0..=1.0).contains(&v) {
                g * self.meta.beta
            } else {
                0.0
            }
        });
        let mut ge = self.encoder.zero_grads();
        self.encoder.backward_params(&etape, &gr, &mut ge);
        (loss, ge, gd)
    }

    fn decoder_grads(&self, x: &Tensor, bits: &[bool]) -> (f64, Grads) {
        let (p, tape) = self.decoder.forward_tape(x);
        let (loss, gp) = bit_loss(&p, bits);
        let mut g = self.decoder.zero_grads();
        self.decoder.backward_params(&tape, &gp, &mut g);
        (loss, g)
    }

    /// Mean bit accuracy of decode(embed(x, w)) over `images` with seeded random payloads.
    pub fn embedded_bit_accuracy(&self, images: &[Image], seed: u64) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::EmptyInput("images"));
        }
        let accs = images
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let bits = random_bits(self.meta.payload_len, seed.wrapping_add(i as u64));
                let y = self.embed(x, &bits)?;
                Ok(bit_accuracy(&self.decode(&y)?, &bits))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

fn mean_grads(parts: Vec<Grads>, n: usize) -> Grads {
    let mut g = nn::sum_grads(parts).expect("non-empty batch");
    g.scale(1.0 / n as f64);
    g
}

/// Jointly trains encoder and decoder; `alpha_noise > 0` gives the adversarial-noise variant.
pub fn ae_train_with(
    corpus: &[Image],
    payload_len: usize,
    lam: f64,
    alpha_noise: f64,
    epochs: usize,
    seed: u64,
    opts: &AeTrainOptions,
) -> Result<AeWatermarkParams> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    if payload_len == 0 {
        return Err(Error::param("payload_len", "must be positive"));
    }
    if !(lam >= 0.0) || !(alpha_noise >= 0.0) {
        return Err(Error::param("lam", "lam and alpha_noise must be non-negative"));
    }
    let size = (corpus[0].height(), corpus[0].width());
    let p0 = AeWatermarkParams::init(payload_len, size, opts.hidden, opts.beta, lam, alpha_noise, seed);
    for x in corpus {
        p0.check_image(x)?;
    }
    let mut p = p0;
    let data: Vec<Tensor> = corpus.iter().map(Image::to_tensor).collect();
    let (train, held) = holdout_split(data.len(), opts.holdout);
    let mut adam_e = Adam::new(opts.lr, &p.encoder.zero_grads());
    let mut adam_d = Adam::new(opts.lr, &p.decoder.zero_grads());
    let mut counter = 0u64;
    nn::run_epochs(train.len(), epochs, opts.batch, seed, |batch, _| {
        let base = seed.wrapping_mul(0x2545_F491).wrapping_add(counter);
        counter += batch.len() as u64;
        let parts: Vec<(f64, Grads, Grads)> = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let s = base.wrapping_add(j as u64);
                let bits = random_bits(payload_len, s);
                p.joint_grads(&data[train[i]], &bits, s ^ 0xD1CE)
            })
            .collect();
        let loss = parts.iter().map(|t| t.0).sum::<f64>() / parts.len() as f64;
        let (ge, gd): (Vec<Grads>, Vec<Grads>) = parts.into_iter().map(|t| (t.1, t.2)).unzip();
        adam_e.step(p.encoder.params_mut(), &mean_grads(ge, batch.len()));
        adam_d.step(p.decoder.params_mut(), &mean_grads(gd, batch.len()));
        loss
    });
    p.meta.epochs = epochs;
    let held_images: Vec<Image> = held.iter().map(|&i| corpus[i].clone()).collect();
    let acc = p.embedded_bit_accuracy(&held_images, seed ^ 0xACC)?;
    p.meta.holdout_bit_accuracy = Some(acc);
    if epochs > 0 && acc < opts.min_bit_accuracy {
        return Err(Error::NonConvergence {
            stage: "ae watermark",
            metric: "holdout bit accuracy",
            value: acc,
            threshold: opts.min_bit_accuracy,
        });
    }
    Ok(p)
}

pub fn ae_train(corpus: &[Image], payload_len: usize, lam: f64, epochs: usize, seed: u64) -> Result<AeWatermarkParams> {
    ae_train_with(corpus, payload_len, lam, 0.0, epochs, seed, &AeTrainOptions::default())
}

pub fn ae_train_adversarial(
    corpus: &[Image],
    payload_len: usize,
    lam: f64,
    alpha_noise: f64,
    epochs: usize,
    seed: u64,
) -> Result<AeWatermarkParams> {
    ae_train_with(
        corpus,
        payload_len,
        lam,
        alpha_noise,
        epochs,
        seed,
        &AeTrainOptions::default(),
    )
}

/// Fine-tunes the decoder alone on `(edited watermarked image, payload)` pairs.
pub fn ae_finetune_on_edits(
    params: &AeWatermarkParams,
    edited_pairs: &[(Image, Vec<bool>)],
    epochs: usize,
    seed: u64,
) -> Result<AeWatermarkParams> {
    if edited_pairs.is_empty() {
        return Err(Error::EmptyInput("edited pairs"));
    }
    let mut p = params.clone();
    let data = edited_pairs
        .iter()
        .map(|(x, b)| {
            p.check_bits(b)?;
            p.check_image(x)?;
            Ok((x.to_tensor(), b.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(AeTrainOptions::default().lr, &p.decoder.zero_grads());
    nn::run_epochs(data.len(), epochs, AeTrainOptions::default().batch, seed, |batch, _| {
        let parts: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|&i| p.decoder_grads(&data[i].0, &data[i].1))
            .collect();
        let loss = parts.iter().map(|t| t.0).sum::<f64>() / parts.len() as f64;
        let g = mean_grads(parts.into_iter().map(|t| t.1).collect(), batch.len());
        adam.step(p.decoder.params_mut(), &g);
        loss
    });
    p.meta.finetune_epochs += epochs;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::generate_corpus;

    fn fd_check(p: &AeWatermarkParams, x: &Tensor, bits: &[bool]) {
        let (_, ge, gd) = p.joint_grads(x, bits, 1);
        let loss = |q: &AeWatermarkParams| q.joint_grads(x, bits, 1).0;
        let h = 1e-6;
        for (which, g) in [(0, &ge), (1, &gd)] {
            for (t, k) in [(0usize, 3usize), (2, 1), (4, 0)] {
                let mut q = p.clone();
                let net = if which == 0 { &mut q.encoder } else { &mut q.decoder };
                net.params_mut()[t][k] += h;
                let up = loss(&q);
                let net = if which == 0 { &mut q.encoder } else { &mut q.decoder };
                net.params_mut()[t][k] -= 2.0 * h;
                let down = loss(&q);
                let fd = (up - down) / (2.0 * h);
                let an = g.0[t][k];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "net {which} tensor {t}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let x = generate_corpus(1, 16, 16, 3).unwrap().remove(0).to_tensor();
        let mut p = AeWatermarkParams::init(4, (16, 16), 4, 0.5, 0.7, 0.0, 2);
        fd_check(&p, &x, &[true, false, true, true]);
        p.meta.alpha_noise = 0.05;
        fd_check(&p, &x, &[false, false, true, true]);
    }

    #[test]
    fn embedding_respects_residual_bound() {
        let xs = generate_corpus(3, 16, 16, 5).unwrap();
        let p = AeWatermarkParams::init(24, (16, 16), 4, 6.0 / 255.0, 1.0, 0.0, 0);
        for x in &xs {
            let y = p.embed(x, &random_bits(24, 1)).unwrap();
            assert!(y.linf_distance(x).unwrap() <= 6.0 / 255.0 + 1e-12);
            assert_eq!(p.decode(&y).unwrap().len(), 24);
        }
        assert!(p.embed(&xs[0], &[true; 3]).is_err());
    }

    #[test]
    fn zero_epochs_and_checkpoint() {
        let xs = generate_corpus(4, 16, 16, 5).unwrap();
        let p = ae_train(&xs, 8, 1.0, 0, 7).unwrap();
        assert_eq!(
            p.flat_params(),
            AeWatermarkParams::init(8, (16, 16), 16, 6.0 / 255.0, 1.0, 0.0, 7).flat_params()
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.bin");
        p.save(&path).unwrap();
        assert_eq!(AeWatermarkParams::load(&path).unwrap(), p);
        assert!(ae_train(&[], 8, 1.0, 1, 0).is_err());
    }

    #[test]
    fn finetune_on_unedited_pairs_keeps_clean_decoding() {
        let xs = generate_corpus(40, 16, 16, 9).unwrap();
        let opts = AeTrainOptions {
            hidden: 8,
            beta: 0.1,
            min_bit_accuracy: 0.0,
            ..Default::default()
        };
        let p = ae_train_with(&xs, 4, 0.1, 0.0, 30, 1, &opts).unwrap();
        let before = p.embedded_bit_accuracy(&xs, 77).unwrap();
        let pairs: Vec<(Image, Vec<bool>)> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let b = random_bits(4, 500 + i as u64);
                (p.embed(x, &b).unwrap(), b)
            })
            .collect();
        let q = ae_finetune_on_edits(&p, &pairs, 3, 2).unwrap();
        let after = q.embedded_bit_accuracy(&xs, 77).unwrap();
        assert!(before > 0.8, "{before}");
        assert!(after >= before - 0.05, "{before} -> {after}");
    }
}
