use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompts::{apply_effect, PromptEmbedding, PromptTable, NULL_PROMPT};
use super::schedule::DiffusionSchedule;
use crate::codec::{holdout_split, Codec};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{self, Activation, Adam, Conv2d, Grads, Layer, Sequential, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden: 32,
            embed_dim: 16,
        }
    }
}

impl DenoiserConfig {
    /// Timestep features plus the prompt embedding.
    fn feature_len(&self) -> usize {
        2 + self.embed_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub seed: u64,
    pub epochs: usize,
    pub holdout_loss: Option<f64>,
    pub config: DenoiserConfig,
    pub schedule: DiffusionSchedule,
    pub prompts: PromptTable,
    /// Latents are divided by this before diffusion.
    pub latent_scale: f64,
}

/// Noise predictor `f(z_t, t, cond, p)`: three 3×3 convolutions over the
/// concatenated noisy and conditioning latents, with the timestep and prompt
/// features entering as learned per-channel biases after the first two.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub meta: DenoiserMeta,
    first: Sequential,
    second: Sequential,
    third: Sequential,
    film1: Vec<f64>,
    film2: Vec<f64>,
}

struct DenoiserTape {
    t1: Tape,
    t2: Tape,
    t3: Tape,
}

fn add_channel_bias(x: &mut Tensor, w: &[f64], feat: &[f64]) {
    let f = feat.len();
    for c in 0..x.channels {
        let b: f64 = w[c * f..(c + 1) * f].iter().zip(feat).map(|(a, b)| a * b).sum();
        x.channel_mut(c).iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad(g: &Tensor, feat: &[f64], out: &mut [f64]) {
    let f = feat.len();
    for c in 0..g.channels {
        let s: f64 = g.channel(c).iter().sum();
        for (o, v) in out[c * f..(c + 1) * f].iter_mut().zip(feat) {
            *o += s * v;
        }
    }
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, schedule: DiffusionSchedule, prompts: PromptTable, seed: u64) -> Result<Self> {
        if prompts.dim != config.embed_dim {
            return Err(Error::param("embed_dim", "prompt table and denoiser disagree"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, h, f) = (config.latent_channels, config.hidden, config.feature_len());
        let first = Sequential::new(vec![Layer::Conv(Conv2d::new(2 * l, h, 3, 1, 1, &mut rng))]);
        let second = Sequential::new(vec![
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, h, 3, 1, 1, &mut rng)),
        ]);
        let third = Sequential::new(vec![
            Layer::Act(Activation::Silu),
            Layer::Conv(Conv2d::new(h, l, 3, 1, 1, &mut rng)),
        ]);
        let bound = (3.0 / f as f64).sqrt();
        let film1 = (0..h * f).map(|_| rng.gen_range(-bound..bound)).collect();
        let film2 = (0..h * f).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self {
            meta: DenoiserMeta {
                seed,
                epochs: 0,
                holdout_loss: None,
                config,
                schedule,
                prompts,
                latent_scale: 1.0,
            },
            first,
            second,
            third,
            film1,
            film2,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.meta.schedule
    }

    pub fn prompts(&self) -> &PromptTable {
        &self.meta.prompts
    }

    pub fn is_trained(&self) -> bool {
        self.meta.epochs > 0
    }

    pub fn features(&self, t: usize, p: &PromptEmbedding) -> Result<Vec<f64>> {
        let a = self.schedule().a(t)?;
        if p.0.len() != self.meta.config.embed_dim {
            return Err(Error::shape(self.meta.config.embed_dim, p.0.len()));
        }
        let mut f = vec![a.sqrt(), (1.0 - a).sqrt()];
        f.extend_from_slice(&p.0);
        Ok(f)
    }

    fn check(&self, z_t: &Tensor, cond: &Tensor) -> Result<()> {
        let l = self.meta.config.latent_channels;
        if z_t.channels != l {
            return Err(Error::shape(l, z_t.channels));
        }
        if z_t.shape() != cond.shape() {
            return Err(Error::shape(z_t.shape(), cond.shape()));
        }
        Ok(())
    }

    /// Predicted noise for scaled latents.
    pub fn predict_noise(&self, z_t: &Tensor, cond: &Tensor, feat: &[f64]) -> Result<Tensor> {
        self.check(z_t, cond)?;
        let mut h1 = self.first.forward(&z_t.concat_channels(cond));
        add_channel_bias(&mut h1, &self.film1, feat);
        let mut h2 = self.second.forward(&h1);
        add_channel_bias(&mut h2, &self.film2, feat);
        Ok(self.third.forward(&h2))
    }

    fn forward_tape(&self, input: &Tensor, feat: &[f64]) -> (Tensor, DenoiserTape) {
        let (mut h1, t1) = self.first.forward_tape(input);
        add_channel_bias(&mut h1, &self.film1, feat);
        let (mut h2, t2) = self.second.forward_tape(&h1);
        add_channel_bias(&mut h2, &self.film2, feat);
        let (y, t3) = self.third.forward_tape(&h2);
        (y, DenoiserTape { t1, t2, t3 })
    }

    fn zero_grads(&self) -> Grads {
        let mut g = self.first.zero_grads();
        g.extend(self.second.zero_grads());
        g.extend(self.third.zero_grads());
        g.0.push(vec![0.0; self.film1.len()]);
        g.0.push(vec![0.0; self.film2.len()]);
        g
    }

    fn backward(&self, tape: &DenoiserTape, feat: &[f64], grad: &Tensor) -> Grads {
        let mut g1 = self.first.zero_grads();
        let mut g2 = self.second.zero_grads();
        let mut g3 = self.third.zero_grads();
        let mut f1 = vec![0.0; self.film1.len()];
        let mut f2 = vec![0.0; self.film2.len()];
        let gh2 = self.third.backward(&tape.t3, grad, Some(&mut g3));
        channel_bias_grad(&gh2, feat, &mut f2);
        let gh1 = self.second.backward(&tape.t2, &gh2, Some(&mut g2));
        channel_bias_grad(&gh1, feat, &mut f1);
        self.first.backward_params(&tape.t1, &gh1, &mut g1);
        g1.extend(g2);
        g1.extend(g3);
        g1.0.push(f1);
        g1.0.push(f2);
        g1
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.first.params_mut();
        p.extend(self.second.params_mut());
        p.extend(self.third.params_mut());
        p.push(&mut self.film1);
        p.push(&mut self.film2);
        p
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.first.flat_params();
        v.extend(self.second.flat_params());
        v.extend(self.third.flat_params());
        v.extend_from_slice(&self.film1);
        v.extend_from_slice(&self.film2);
        v
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.flat_params().len();
        if flat.len() != expected {
            return Err(Error::Checkpoint(format!(
                "denoiser expects {expected} parameters, found {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.flat_params(), &self.meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (values, meta): (Vec<f64>, DenoiserMeta) = crate::checkpoint::load(path)?;
        let mut d = Denoiser::init(meta.config, meta.schedule.clone(), meta.prompts, meta.seed)?;
        d.load_flat(&values)?;
        d.meta = meta;
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainOptions {
    pub lr: f64,
    pub batch: usize,
    /// Probability of training on the null prompt with an unedited target.
    pub prompt_dropout: f64,
    /// Probability of zeroing the conditioning latent.
    pub cond_dropout: f64,
    pub holdout: f64,
    /// Ceiling on the held-out per-element noise-prediction error.
    pub loss_threshold: f64,
}

impl Default for DenoiserTrainOptions {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 8,
            prompt_dropout: 0.1,
            cond_dropout: 0.05,
            holdout: 0.1,
            loss_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_loss: f64,
}

/// Latents of one training image: unedited, and after each prompt's effect.
struct Example {
    clean: Tensor,
    edited: Vec<Tensor>,
}

struct Draw {
    t: usize,
    prompt: Option<usize>,
    drop_cond: bool,
    noise: Tensor,
}

fn draw(
    rng: &mut ChaCha8Rng,
    t_max: usize,
    n_prompts: usize,
    shape: (usize, usize, usize),
    opts: &DenoiserTrainOptions,
) -> Draw {
    let t = rng.gen_range(1..=t_max);
    let prompt = if n_prompts == 0 || rng.gen::<f64>() < opts.prompt_dropout {
        None
    } else {
        Some(rng.gen_range(0..n_prompts))
    };
    let drop_cond = rng.gen::<f64>() < opts.cond_dropout;
    let n = shape.0 * shape.1 * shape.2;
    let noise = Tensor::from_vec(
        shape.0,
        shape.1,
        shape.2,
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    );
    Draw {
        t,
        prompt,
        drop_cond,
        noise,
    }
}

fn sample_loss(
    den: &Denoiser,
    ex: &Example,
    d: &Draw,
    labels: &[String],
    want_grads: bool,
) -> Result<(f64, Option<Grads>)> {
    let sched = den.schedule();
    let a = sched.a(d.t)?;
    let (target, emb) = match d.prompt {
        Some(p) => (&ex.edited[p], den.prompts().embed(&labels[p])?),
        None => (&ex.clean, den.prompts().null()),
    };
    let cond = if d.drop_cond {
        Tensor::zeros(ex.clean.channels, ex.clean.height, ex.clean.width)
    } else {
        ex.clean.clone()
    };
    let z_t = target.scale(a.sqrt()).add(&d.noise.scale((1.0 - a).sqrt()));
    let feat = den.features(d.t, &emb)?;
    let input = z_t.concat_channels(&cond);
    let n = d.noise.len() as f64;
    if !want_grads {
        let pred = den.predict_noise(&z_t, &cond, &feat)?;
        return Ok((pred.sub(&d.noise).data.iter().map(|v| v * v).sum::<f64>() / n, None));
    }
    let (pred, tape) = den.forward_tape(&input, &feat);
    let diff = pred.sub(&d.noise);
    let loss = diff.data.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, Some(den.backward(&tape, &feat, &diff.scale(2.0 / n)))))
}

/// Trains the conditional noise predictor on `(image, prompt effect)` pairs
/// encoded with `codec`.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    codec: &Codec,
    corpus: &[Image],
    prompts: &[String],
    epochs: usize,
    seed: u64,
    config: DenoiserConfig,
    schedule: DiffusionSchedule,
    table: PromptTable,
    opts: &DenoiserTrainOptions,
) -> Result<(Denoiser, DenoiserReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("denoiser training corpus"));
    }
    if !codec.is_trained() {
        return Err(Error::Untrained("codec"));
    }
    for p in prompts {
        if p == NULL_PROMPT {
            return Err(Error::param("prompts", "the null prompt is implicit"));
        }
        table.embed(p)?;
    }
    let mut den = Denoiser::init(config, schedule, table, seed)?;
    let raw: Result<Vec<(Tensor, Vec<Tensor>)>> = corpus
        .par_iter()
        .map(|x| {
            let clean = codec.encode(x)?.0;
            let edited = prompts
                .iter()
                .map(|p| Ok(codec.encode(&apply_effect(p, x)?)?.0))
                .collect::<Result<Vec<_>>>()?;
            Ok((clean, edited))
        })
        .collect();
    let raw = raw?;
    let count: usize = raw.iter().map(|(c, _)| c.len()).sum();
    let var = raw
        .iter()
        .map(|(c, _)| c.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / count as f64;
    let scale = var.sqrt().max(1e-6);
    den.meta.latent_scale = scale;
    let examples: Vec<Example> = raw
        .into_iter()
        .map(|(c, e)| Example {
            clean: c.scale(1.0 / scale),
            edited: e.into_iter().map(|t| t.scale(1.0 / scale)).collect(),
        })
        .collect();
    if examples[0].clean.channels != config.latent_channels {
        return Err(Error::shape(config.latent_channels, examples[0].clean.channels));
    }
    let shape = examples[0].clean.shape();
    let t_max = den.schedule().t_max();
    let (train, held) = holdout_split(examples.len(), opts.holdout);
    let mut adam = Adam::new(opts.lr, &den.zero_grads());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0D15_EA5E);
    let mut failure = None;
    let epoch_losses = nn::run_epochs(train.len(), epochs, opts.batch, seed, |batch, _| {
        let draws: Vec<Draw> = batch
            .iter()
            .map(|_| draw(&mut rng, t_max, prompts.len(), shape, opts))
            .collect();
        let parts: Vec<Result<(f64, Option<Grads>)>> = batch
            .par_iter()
            .zip(&draws)
            .map(|(&i, d)| sample_loss(&den, &examples[train[i]], d, prompts, true))
            .collect();
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(parts.len());
        for p in parts {
            match p {
                Ok((l, Some(g))) => {
                    loss += l;
                    grads.push(g);
                }
                Ok(_) => {}
                Err(e) => failure = Some(e),
            }
        }
        if let Some(mut g) = nn::sum_grads(grads) {
            g.scale(1.0 / batch.len() as f64);
            adam.step(den.params_mut(), &g);
        }
        loss / batch.len() as f64
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut hrng = ChaCha8Rng::seed_from_u64(seed ^ 0x4E1D_0A7);
    let held_draws: Vec<(usize, Draw)> = held
        .iter()
        .flat_map(|&i| (0..4).map(move |_| i))
        .map(|i| (i, draw(&mut hrng, t_max, prompts.len(), shape, opts)))
        .collect();
    let held_losses: Result<Vec<f64>> = held_draws
        .par_iter()
        .map(|(i, d)| sample_loss(&den, &examples[*i], d, prompts, false).map(|r| r.0))
        .collect();
    let held_losses = held_losses?;
    let holdout_loss = held_losses.iter().sum::<f64>() / held_losses.len() as f64;
    den.meta.epochs = epochs;
    den.meta.holdout_loss = Some(holdout_loss);
    if epochs > 0 && holdout_loss > opts.loss_threshold {
        return Err(Error::NonConvergence {
            stage: "denoiser",
            metric: "holdout noise mse",
            value: holdout_loss,
            threshold: opts.loss_threshold,
        });
    }
    Ok((
        den,
        DenoiserReport {
            epoch_losses,
            holdout_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Denoiser {
        let cfg = DenoiserConfig {
            latent_channels: 2,
            hidden: 5,
            embed_dim: 3,
        };
        Denoiser::init(cfg, DiffusionSchedule::default(), PromptTable::new(1, 3), 4).unwrap()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut den = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |c| Tensor::from_vec(c, 4, 4, (0..c * 16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let input = rand_t(4);
        let target = rand_t(2);
        let feat = vec![0.8, 0.6, 0.3, -0.2, 0.5];
        let loss = |d: &Denoiser| {
            let (z, c) = input.split_channels(2);
            let y = d.predict_noise(&z, &c, &feat).unwrap();
            y.sub(&target).data.iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let (y, tape) = den.forward_tape(&input, &feat);
        let g = den.backward(&tape, &feat, &y.sub(&target));
        let flat_g: Vec<f64> = g.0.iter().flatten().copied().collect();
        let base = den.flat_params();
        for i in (0..base.len()).step_by(7) {
            let h = 1e-5;
            let mut p = base.clone();
            p[i] += h;
            den.load_flat(&p).unwrap();
            let up = loss(&den);
            p[i] -= 2.0 * h;
            den.load_flat(&p).unwrap();
            let down = loss(&den);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - flat_g[i]).abs() / fd.abs().max(flat_g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", flat_g[i]);
        }
        den.load_flat(&base).unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let den = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("den.bin");
        den.save(&p).unwrap();
        assert_eq!(Denoiser::load(&p).unwrap(), den);
    }
}
