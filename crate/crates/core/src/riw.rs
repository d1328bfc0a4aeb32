//! Watermark injection: projected sign-gradient descent on
//! `‖E(x̂) − E(x')‖₁ + λ(‖x̂ − x‖₂ + ‖D(E(x̂)) − x‖₂)` inside an ε-ball around `x`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetNorm {
    Inf,
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub alpha: f64,
    pub lam: f64,
    pub eps: f64,
    pub mu: f64,
    pub steps: usize,
    pub norm: BudgetNorm,
    pub seed: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            lam: 1.0,
            eps: 12.0 / 255.0,
            mu: 2.0 / 255.0,
            steps: 400,
            norm: BudgetNorm::Inf,
            seed: 0,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param("alpha", format!("{} outside [0, 1]", self.alpha)));
        }
        if !(self.lam > 0.0) {
            return Err(Error::param("lam", "must be positive"));
        }
        if !(self.mu > 0.0 && self.mu <= self.eps) {
            return Err(Error::param("mu", "need 0 < mu <= eps"));
        }
        Ok(())
    }
}

/// Values of the three objective terms at one iterate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub latent: f64,
    pub pixel: f64,
    pub round_trip: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub objective: f64,
    /// Terms at the initial iterate followed by one entry per step.
    pub trajectory: Vec<ObjectiveTerms>,
    pub budget: f64,
    pub wall_ms: f64,
}

/// `clamp(x + α·w, 0, 1)`.
pub fn build_target(x: &Image, w: &Image, alpha: f64) -> Result<Image> {
    x.same_shape(w)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("{alpha} outside [0, 1]")));
    }
    let (c, h, wd) = x.shape();
    Image::from_clamped(
        c,
        h,
        wd,
        x.data().iter().zip(w.data()).map(|(a, b)| a + alpha * b).collect(),
    )
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

/// Objective value and gradient with respect to `x_hat`, given the target latent.
pub(crate) fn objective_with_target(
    codec: &Codec,
    x_hat: &Tensor,
    x: &Tensor,
    target: &Tensor,
    lam: f64,
) -> (ObjectiveTerms, Tensor) {
    let (z, etape) = codec.enc_tape(x_hat);
    let (y, dtape) = codec.dec_tape(&z);
    let dz = z.sub(target);
    let latent = dz.l1();
    let dp = x_hat.sub(x);
    let pixel = dp.l2();
    let dr = y.sub(x);
    let round_trip = dr.l2();
    let mut gz = dz.map(sign);
    if lam != 0.0 && round_trip > 0.0 {
        gz.add_assign(&codec.dec_back(&dtape, &dr.scale(lam / round_trip)));
    }
    let mut g = codec.enc_back(&etape, &gz);
    if lam != 0.0 && pixel > 0.0 {
        g.axpy(lam / pixel, &dp);
    }
    let terms = ObjectiveTerms {
        latent,
        pixel,
        round_trip,
        total: latent + lam * (pixel + round_trip),
    };
    (terms, g)
}

fn check_trained(codec: &Codec) -> Result<()> {
    if !codec.is_trained() {
        return Err(Error::Untrained("codec"));
    }
    Ok(())
}

/// The injection objective at `x_hat` and its pixel gradient.
pub fn riw_objective(
    codec: &Codec,
    x_hat: &Image,
    x: &Image,
    x_prime: &Image,
    lam: f64,
) -> Result<(ObjectiveTerms, Tensor)> {
    check_trained(codec)?;
    x_hat.same_shape(x)?;
    x.same_shape(x_prime)?;
    if !(lam >= 0.0) {
        return Err(Error::param("lam", "must be non-negative"));
    }
    let target = codec.encode(x_prime)?.0;
    Ok(objective_with_target(
        codec,
        &x_hat.to_tensor(),
        &x.to_tensor(),
        &target,
        lam,
    ))
}

/// Euclidean projection of `v` onto the ℓ1 ball of radius `r`.
fn project_l1(v: &mut [f64], r: f64) {
    let norm: f64 = v.iter().map(|a| a.abs()).sum();
    if norm <= r {
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|a| a.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - r) / (i + 1) as f64;
        if *m > t {
            theta = t;
        } else {
            break;
        }
    }
    for a in v.iter_mut() {
        *a = sign(*a) * (a.abs() - theta).max(0.0);
    }
}

/// Projects `x_hat − x` into the budget ball and clamps the result to `[0, 1]`.
fn project(x_hat: &mut Tensor, x: &Tensor, eps: f64, norm: BudgetNorm) {
    let mut delta: Vec<f64> = x_hat.data.iter().zip(&x.data).map(|(a, b)| a - b).collect();
    match norm {
        BudgetNorm::Inf => delta.iter_mut().for_each(|d| *d = d.clamp(-eps, eps)),
        BudgetNorm::L1 => project_l1(&mut delta, eps),
    }
    for ((o, b), d) in x_hat.data.iter_mut().zip(&x.data).zip(&delta) {
        *o = (b + d).clamp(0.0, 1.0);
    }
}

pub fn budget(x_hat: &Image, x: &Image, norm: BudgetNorm) -> Result<f64> {
    match norm {
        BudgetNorm::Inf => x_hat.linf_distance(x),
        BudgetNorm::L1 => x_hat.l1_distance(x),
    }
}

/// Rounds `x_hat` to the 8-bit grid while keeping the ℓ∞ budget: each sample
/// stays within `floor(255·eps)/255` of `x`. When `x` is itself on the grid the
/// result survives a PNG round trip unchanged.
pub fn quantize_within_budget(x_hat: &Image, x: &Image, eps: f64) -> Result<Image> {
    x_hat.same_shape(x)?;
    let k = (eps * 255.0 + 1e-9).floor();
    let data = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(&v, &o)| {
            let base = (o * 255.0).round();
            (v * 255.0).round().clamp(base - k, base + k).clamp(0.0, 255.0) / 255.0
        })
        .collect();
    let (c, h, w) = x.shape();
    Image::new(c, h, w, data)
}

/// Runs the projected sign-gradient loop starting from the target projected into the ball.
pub fn inject(codec: &Codec, x: &Image, w: &Image, cfg: &InjectionConfig) -> Result<(Image, InjectionReport)> {
    check_trained(codec)?;
    cfg.validate()?;
    let start = Instant::now();
    let x_prime = build_target(x, w, cfg.alpha)?;
    let xt = x.to_tensor();
    let target = codec.encode(&x_prime)?.0;
    let mut x_hat = x_prime.to_tensor();
    project(&mut x_hat, &xt, cfg.eps, cfg.norm);
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (terms, g) = objective_with_target(codec, &x_hat, &xt, &target, cfg.lam);
        trajectory.push(terms);
        for (v, gv) in x_hat.data.iter_mut().zip(&g.data) {
            *v -= cfg.mu * sign(*gv);
        }
        project(&mut x_hat, &xt, cfg.eps, cfg.norm);
    }
    let (last, _) = objective_with_target(codec, &x_hat, &xt, &target, cfg.lam);
    trajectory.push(last);
    let out = Image::from_tensor(&x_hat)?;
    let achieved = budget(&out, x, cfg.norm)?;
    Ok((
        out,
        InjectionReport {
            objective: last.total,
            trajectory,
            budget: achieved,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    ))
}
