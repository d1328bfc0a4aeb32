//! Simulated diffusion editor: the image is encoded, partially noised, walked
//! back with a guided conditional denoiser, and decoded.

mod denoiser;
mod prompts;
mod schedule;

pub use denoiser::{train_denoiser, Denoiser, DenoiserConfig, DenoiserMeta, DenoiserReport, DenoiserTrainOptions};
pub use prompts::{apply_effect, prompt_index, PromptEmbedding, PromptTable, NULL_PROMPT, PROMPTS};
pub use schedule::DiffusionSchedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, LatentVector};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::Tensor;

/// `√a·z0 + √(1−a)·noise` for any `a ∈ [0, 1]`.
pub fn noise_mix(a: f64, z0: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::param("a", format!("{a} outside [0, 1]")));
    }
    if z0.shape() != noise.shape() {
        return Err(Error::shape(z0.shape(), noise.shape()));
    }
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z0.zip_map(noise, |z, e| s * z + n * e))
}

pub fn ddpm_forward(
    schedule: &DiffusionSchedule,
    z0: &LatentVector,
    t: usize,
    noise: &LatentVector,
) -> Result<LatentVector> {
    Ok(LatentVector(noise_mix(schedule.a(t)?, &z0.0, &noise.0)?))
}

/// Two-condition guidance:
/// `f_null + s_i·(f_img − f_null) + s_t·(f_full − f_img)`.
pub fn cfg_combine(f_null: &Tensor, f_img: &Tensor, f_full: &Tensor, s_i: f64, s_t: f64) -> Result<Tensor> {
    if f_null.shape() != f_img.shape() || f_img.shape() != f_full.shape() {
        return Err(Error::shape(
            f_null.shape(),
            if f_null.shape() != f_img.shape() {
                f_img.shape()
            } else {
                f_full.shape()
            },
        ));
    }
    let mut out = f_null.clone();
    for i in 0..out.len() {
        out[i] = f_null[i] + s_i * (f_img[i] - f_null[i]) + s_t * (f_full[i] - f_img[i]);
    }
    Ok(out)
}

/// Posterior mean for a noise estimate, plus `σ_t`-scaled noise.
pub fn posterior_step(
    schedule: &DiffusionSchedule,
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    noise: &Tensor,
) -> Result<Tensor> {
    let (cz, ce) = schedule.posterior_coefficients(t)?;
    let sigma = schedule.sigma(t)?;
    let mut out = z_t.clone();
    for i in 0..out.len() {
        out[i] = cz * z_t[i] - ce * eps_hat[i] + sigma * noise[i];
    }
    Ok(out)
}

/// One unguided reverse step `z_{t−1} = μ(z_t, f(z_t, t, cond, p)) + σ_t·noise`
/// on scaled latents.
pub fn reverse_step(
    denoiser: &Denoiser,
    z_t: &LatentVector,
    t: usize,
    cond: &LatentVector,
    p: &PromptEmbedding,
    noise: &LatentVector,
) -> Result<LatentVector> {
    let feat = denoiser.features(t, p)?;
    let eps = denoiser.predict_noise(&z_t.0, &cond.0, &feat)?;
    if noise.shape() != z_t.shape() {
        return Err(Error::shape(z_t.shape(), noise.shape()));
    }
    Ok(LatentVector(posterior_step(
        denoiser.schedule(),
        &z_t.0,
        t,
        &eps,
        &noise.0,
    )?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSpec {
    pub prompt: String,
    pub t_edit: usize,
    pub s_i: f64,
    pub s_t: f64,
    pub seed: u64,
}

impl Default for EditSpec {
    fn default() -> Self {
        Self {
            prompt: "tint-red".into(),
            t_edit: 40,
            s_i: 1.5,
            s_t: 1.5,
            seed: 0,
        }
    }
}

impl EditSpec {
    pub fn with_prompt(prompt: &str, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.t_edit == 0 || self.t_edit > schedule.t_max() {
            return Err(Error::param(
                "t_edit",
                format!("{} outside 1..={}", self.t_edit, schedule.t_max()),
            ));
        }
        if !(self.s_i >= 0.0 && self.s_t >= 0.0) {
            return Err(Error::param("guidance", "scales must be non-negative"));
        }
        prompt_index(&self.prompt)?;
        Ok(())
    }

    /// Stable label used in result tables.
    pub fn label(&self) -> String {
        format!("{}@{}", self.prompt, self.t_edit)
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Tensor {
    let n = shape.0 * shape.1 * shape.2;
    Tensor::from_vec(
        shape.0,
        shape.1,
        shape.2,
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
}

/// Runs the guided chain from `t_edit` to 0 on the latent of `x` and decodes.
pub fn edit(codec: &Codec, denoiser: &Denoiser, x: &Image, spec: &EditSpec) -> Result<Image> {
    if !codec.is_trained() {
        return Err(Error::Untrained("codec"));
    }
    if !denoiser.is_trained() {
        return Err(Error::Untrained("denoiser"));
    }
    edit_unchecked(codec, denoiser, x, spec)
}

pub(crate) fn edit_unchecked(codec: &Codec, denoiser: &Denoiser, x: &Image, spec: &EditSpec) -> Result<Image> {
    let schedule = denoiser.schedule();
    spec.validate(schedule)?;
    let scale = denoiser.meta.latent_scale;
    let cond = codec.encode(x)?.0.scale(1.0 / scale);
    let shape = cond.shape();
    let null_cond = Tensor::zeros(shape.0, shape.1, shape.2);
    let table = denoiser.prompts();
    let (p_null, p_full) = (table.null(), table.embed(&spec.prompt)?);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut z = noise_mix(schedule.a(spec.t_edit)?, &cond, &normal_tensor(&mut rng, shape))?;
    for t in (1..=spec.t_edit).rev() {
        let f_null_feat = denoiser.features(t, &p_null)?;
        let f_full_feat = denoiser.features(t, &p_full)?;
        let f_null = denoiser.predict_noise(&z, &null_cond, &f_null_feat)?;
        let f_img = denoiser.predict_noise(&z, &cond, &f_null_feat)?;
        let f_full = denoiser.predict_noise(&z, &cond, &f_full_feat)?;
        let eps = cfg_combine(&f_null, &f_img, &f_full, spec.s_i, spec.s_t)?;
        let noise = normal_tensor(&mut rng, shape);
        z = posterior_step(schedule, &z, t, &eps, &noise)?;
    }
    codec.decode(&LatentVector(z.scale(scale)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: f64) -> Tensor {
        Tensor::filled(1, 1, 1, v)
    }

    #[test]
    fn forward_limits_are_exact() {
        let z0 = Tensor::from_vec(1, 1, 3, vec![0.3, -1.2, 2.0]);
        let e = Tensor::from_vec(1, 1, 3, vec![5.0, 0.1, -0.7]);
        assert_eq!(noise_mix(1.0, &z0, &e).unwrap(), z0);
        assert_eq!(noise_mix(0.0, &z0, &e).unwrap(), e);
        assert!(noise_mix(1.5, &z0, &e).is_err());
    }

    #[test]
    fn cfg_examples() {
        let (a, b, c) = (t1(1.0), t1(2.0), t1(3.0));
        assert_eq!(cfg_combine(&a, &b, &c, 2.0, 1.5).unwrap()[0], 4.5);
        assert_eq!(cfg_combine(&a, &b, &c, 1.0, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&a, &b, &c, 0.0, 0.0).unwrap(), a);
        assert!(cfg_combine(&a, &b, &Tensor::zeros(2, 1, 1), 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn cfg_is_homogeneous(n in -4.0..4.0f64, i in -4.0..4.0f64, f in -4.0..4.0f64,
                              si in 0.0..3.0f64, st in 0.0..3.0f64, k in -3.0..3.0f64) {
            let base = cfg_combine(&t1(n), &t1(i), &t1(f), si, st).unwrap()[0];
            let scaled = cfg_combine(&t1(k * n), &t1(k * i), &t1(k * f), si, st).unwrap()[0];
            prop_assert!((scaled - k * base).abs() <= 1e-12 * (1.0 + base.abs() * k.abs()));
        }
    }

    #[test]
    fn noiseless_posterior_step_is_the_mean() {
        let s = DiffusionSchedule::default();
        let z = Tensor::from_vec(1, 1, 2, vec![0.4, -0.9]);
        let eps = Tensor::from_vec(1, 1, 2, vec![0.1, 0.2]);
        let noise = Tensor::from_vec(1, 1, 2, vec![3.0, 3.0]);
        let (cz, ce) = s.posterior_coefficients(1).unwrap();
        let out = posterior_step(&s, &z, 1, &eps, &noise).unwrap();
        assert_eq!(out[0], cz * 0.4 - ce * 0.1);
        assert_eq!(out[1], cz * -0.9 - ce * 0.2);
    }

    #[test]
    fn edit_spec_validation_and_json() {
        let s = DiffusionSchedule::default();
        assert!(EditSpec::default().validate(&s).is_ok());
        let bad = EditSpec {
            t_edit: 0,
            ..EditSpec::default()
        };
        assert!(bad.validate(&s).is_err());
        let bad = EditSpec {
            s_t: -1.0,
            ..EditSpec::default()
        };
        assert!(bad.validate(&s).is_err());
        let spec = EditSpec::with_prompt("cool", 9);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<EditSpec>(&json).unwrap(), spec);
    }
}
