use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Classical image transforms used for digital-watermark robustness checks.
/// Fractions are side-length fractions of the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    /// Keep a random window and fill the rest with black.
    Crop {
        fraction: f64,
        seed: u64,
    },
    /// Rotate about the centre (degrees, counter-clockwise); exposed area is black.
    Rotate {
        degrees: f64,
    },
    /// Multiply every pixel, then clamp.
    Brightness {
        factor: f64,
    },
    GaussianNoise {
        sigma: f64,
        seed: u64,
    },
    /// Black out a random square window.
    Mask {
        fraction: f64,
        seed: u64,
    },
    /// Rescale by `factor` and back to the original size (bilinear both ways).
    Resize {
        factor: f64,
    },
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        match *self {
            TransformSpec::Crop { fraction, .. } | TransformSpec::Mask { fraction, .. } if !frac_ok(fraction) => {
                Err(Error::param("fraction", format!("{fraction} outside (0, 1]")))
            }
            TransformSpec::Rotate { degrees } if !(-180.0..=180.0).contains(&degrees) => {
                Err(Error::param("degrees", format!("{degrees} outside [-180, 180]")))
            }
            TransformSpec::Brightness { factor } if !(factor > 0.0) => {
                Err(Error::param("factor", format!("{factor} must be positive")))
            }
            TransformSpec::GaussianNoise { sigma, .. } if !(sigma >= 0.0) => {
                Err(Error::param("sigma", format!("{sigma} must be non-negative")))
            }
            TransformSpec::Resize { factor } if !(factor > 0.0 && factor <= 4.0) => {
                Err(Error::param("factor", format!("{factor} outside (0, 4]")))
            }
            _ => Ok(()),
        }
    }
}

fn window(h: usize, w: usize, fraction: f64, seed: u64) -> (usize, usize, usize, usize) {
    let wh = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let ww = ((w as f64 * fraction).round() as usize).clamp(1, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=h - wh);
    let left = rng.gen_range(0..=w - ww);
    (top, left, wh, ww)
}

fn bilinear(x: &Image, c: usize, fy: f64, fx: f64) -> f64 {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let (y0, x0) = (fy.floor() as isize, fx.floor() as isize);
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let px = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            x.get(c, yy as usize, xx as usize)
        }
    };
    (1.0 - ty) * ((1.0 - tx) * px(y0, x0) + tx * px(y0, x0 + 1))
        + ty * ((1.0 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1))
}

/// Bilinear resampling to `(nh, nw)` with edge clamping.
fn resample(x: &Image, nh: usize, nw: usize) -> Image {
    let (h, w) = (x.height(), x.width());
    let mut data = vec![0.0; x.channels() * nh * nw];
    for c in 0..x.channels() {
        for y in 0..nh {
            let fy = ((y as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            for xx in 0..nw {
                let fx = ((xx as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let v = (1.0 - ty) * ((1.0 - tx) * x.get(c, y0, x0) + tx * x.get(c, y0, x1))
                    + ty * ((1.0 - tx) * x.get(c, y1, x0) + tx * x.get(c, y1, x1));
                data[(c * nh + y) * nw + xx] = v;
            }
        }
    }
    Image::raw(x.channels(), nh, nw, data)
}

pub fn apply_transform(x: &Image, t: &TransformSpec) -> Result<Image> {
    t.validate()?;
    let (ch, h, w) = x.shape();
    let out = match *t {
        TransformSpec::Brightness { factor } => {
            Image::from_clamped(ch, h, w, x.data().iter().map(|v| v * factor).collect())?
        }
        TransformSpec::GaussianNoise { sigma, seed } => {
            if sigma == 0.0 {
                return Ok(x.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).expect("sigma validated");
            Image::from_clamped(ch, h, w, x.data().iter().map(|v| v + normal.sample(&mut rng)).collect())?
        }
        TransformSpec::Crop { fraction, seed } => {
            let (top, left, wh, ww) = window(h, w, fraction, seed);
            let mut out = Image::filled(ch, h, w, 0.0)?;
            for c in 0..ch {
                for y in top..top + wh {
                    for xx in left..left + ww {
                        out.set(c, y, xx, x.get(c, y, xx));
                    }
                }
            }
            out
        }
        TransformSpec::Mask { fraction, seed } => {
            let (top, left, wh, ww) = window(h, w, fraction, seed);
            let mut out = x.clone();
            for c in 0..ch {
                for y in top..top + wh {
                    for xx in left..left + ww {
                        out.set(c, y, xx, 0.0);
                    }
                }
            }
            out
        }
        TransformSpec::Rotate { degrees } => {
            if degrees == 0.0 {
                return Ok(x.clone());
            }
            let th = degrees.to_radians();
            let (cos, sin) = (th.cos(), th.sin());
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let mut data = vec![0.0; ch * h * w];
            for y in 0..h {
                for xx in 0..w {
                    // Inverse map output pixel to source coordinates.
                    let (dy, dx) = (y as f64 - cy, xx as f64 - cx);
                    let sx = cos * dx - sin * dy + cx;
                    let sy = sin * dx + cos * dy + cy;
                    for c in 0..ch {
                        data[(c * h + y) * w + xx] = bilinear(x, c, sy, sx);
                    }
                }
            }
            Image::from_clamped(ch, h, w, data)?
        }
        TransformSpec::Resize { factor } => {
            let nh = ((h as f64 * factor).round() as usize).max(1);
            let nw = ((w as f64 * factor).round() as usize).max(1);
            let small = resample(x, nh, nw);
            let back = resample(&small, h, w);
            Image::from_clamped(ch, h, w, back.into_data())?
        }
    };
    Ok(out)
}
