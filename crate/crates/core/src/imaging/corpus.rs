use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// One row of a corpus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub path: String,
    pub seed: u64,
}

pub(crate) fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ 0x5851_F42D_4C95_7F2D
}

/// Deterministic procedural RGB images: a two-colour gradient, a texture
/// layer, a handful of soft-edged shapes and fine grain.
pub fn generate_corpus(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::EmptyInput("corpus size must be at least 1"));
    }
    if height < super::MIN_SIDE || width < super::MIN_SIDE {
        return Err(Error::InvalidDimensions(format!("{height}x{width}")));
    }
    (0..n)
        .map(|i| generate_one(height, width, item_seed(seed, i)))
        .collect()
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

fn smoothstep(edge: f64, v: f64) -> f64 {
    // 0 well outside, 1 well inside, over a ~1.5 px band.
    ((v + edge) / (2.0 * edge)).clamp(0.0, 1.0)
}

fn generate_one(h: usize, w: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = h * w;
    let mut data = vec![0.0; 3 * p];
    let (hf, wf) = (h as f64, w as f64);

    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..h {
        for x in 0..w {
            let u = ((x as f64 / wf - 0.5) * ca + (y as f64 / hf - 0.5) * sa + 0.75) / 1.5;
            let u = u.clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * p + y * w + x] = c0[c] * (1.0 - u) + c1[c] * u;
            }
        }
    }

    // Texture: an oriented grating or a field of smooth blobs.
    let amp = rng.gen_range(0.03..0.12);
    if rng.gen_bool(0.5) {
        let freq = rng.gen_range(0.08..0.45);
        let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let tint = color(&mut rng);
        for y in 0..h {
            for x in 0..w {
                let t = (freq * (x as f64 * th.cos() + y as f64 * th.sin()) + phase).sin();
                for c in 0..3 {
                    data[c * p + y * w + x] += amp * t * (0.5 + tint[c]);
                }
            }
        }
    } else {
        let blobs = rng.gen_range(4..10);
        for _ in 0..blobs {
            let (by, bx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
            let r = rng.gen_range(3.0..12.0f64);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let tint = color(&mut rng);
            for y in 0..h {
                for x in 0..w {
                    let d2 = ((y as f64 - by).powi(2) + (x as f64 - bx).powi(2)) / (r * r);
                    let g = (-d2).exp() * sign * amp * 2.0;
                    for c in 0..3 {
                        data[c * p + y * w + x] += g * (0.5 + tint[c]);
                    }
                }
            }
        }
    }

    // Shapes: discs, rectangles and ellipses with soft edges and partial opacity.
    let shapes = rng.gen_range(2..6);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let opacity = rng.gen_range(0.5..1.0);
        let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
        let kind = rng.gen_range(0..3);
        let (ry, rx) = (rng.gen_range(3.0..hf / 3.0), rng.gen_range(3.0..wf / 3.0));
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let cover = match kind {
                    0 => smoothstep(0.75, ry - (dy * dy + dx * dx).sqrt()),
                    1 => {
                        let u = dx * rot.cos() + dy * rot.sin();
                        let v = -dx * rot.sin() + dy * rot.cos();
                        smoothstep(0.75, rx - u.abs()) * smoothstep(0.75, ry - v.abs())
                    }
                    _ => {
                        let u = (dx * rot.cos() + dy * rot.sin()) / rx;
                        let v = (-dx * rot.sin() + dy * rot.cos()) / ry;
                        smoothstep(0.75 / rx.min(ry), 1.0 - (u * u + v * v).sqrt())
                    }
                };
                let a = cover * opacity;
                if a > 0.0 {
                    for c in 0..3 {
                        let i = c * p + y * w + x;
                        data[i] = data[i] * (1.0 - a) + col[c] * a;
                    }
                }
            }
        }
    }

    let grain = rng.gen_range(0.0..0.02);
    for v in &mut data {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += grain * n;
    }
    Image::from_clamped(3, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(1, 64, 64, 7).unwrap();
        let b = generate_corpus(1, 64, 64, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(1, 64, 64, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn corpus_has_contrast() {
        let imgs = generate_corpus(100, 64, 64, 1).unwrap();
        let min_std = imgs.iter().map(Image::std).fold(f64::INFINITY, f64::min);
        assert!(min_std > 0.05, "min std {min_std}");
    }

    #[test]
    fn rejects_empty_and_tiny() {
        assert!(matches!(generate_corpus(0, 64, 64, 1), Err(Error::EmptyInput(_))));
        assert!(generate_corpus(1, 8, 64, 1).is_err());
    }

    #[test]
    fn prefix_is_stable_when_n_grows() {
        let a = generate_corpus(3, 32, 32, 5).unwrap();
        let b = generate_corpus(5, 32, 32, 5).unwrap();
        assert_eq!(a[..], b[..3]);
    }
}
