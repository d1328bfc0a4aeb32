use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Frequency-domain watermark on luminance blocks. Each slot (block, pair)
/// carries one payload bit as the difference `d = c₁ − c₂` of a coefficient
/// pair: embedding sets `d = strength·(1 ± margin)` and extraction reads
/// `d > strength`. Bits are repeated round-robin across slots, whitened with a
/// keyed stream, and recovered by majority vote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DctWatermarkConfig {
    pub payload: Vec<bool>,
    pub block: usize,
    pub pairs: Vec<[(usize, usize); 2]>,
    pub strength: f64,
    pub margin: f64,
    pub key: u64,
}

impl Default for DctWatermarkConfig {
    fn default() -> Self {
        Self {
            payload: text_to_bits("RIW"),
            block: 8,
            pairs: vec![[(4, 5), (5, 4)], [(3, 6), (6, 3)]],
            strength: 0.25,
            margin: 0.125,
            key: 4,
        }
    }
}

/// Text to bits, 8 bits per byte, most significant first.
pub fn text_to_bits(text: &str) -> Vec<bool> {
    text.bytes()
        .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
        .collect()
}

pub fn bits_to_text(bits: &[bool]) -> String {
    bits.chunks(8)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b as u8) as char)
        .collect()
}

pub fn bit_accuracy(a: &[bool], b: &[bool]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len().max(b.len()) as f64
}

fn basis(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

impl DctWatermarkConfig {
    pub fn with_text(text: &str) -> Self {
        Self {
            payload: text_to_bits(text),
            ..Self::default()
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<usize> {
        if self.block < 2 {
            return Err(Error::param("block", "must be at least 2"));
        }
        for p in &self.pairs {
            for &(u, v) in p {
                if u >= self.block || v >= self.block {
                    return Err(Error::param("pairs", format!("({u}, {v}) outside the block")));
                }
            }
            if p[0] == p[1] {
                return Err(Error::param("pairs", "pair members must differ"));
            }
        }
        let slots = (h / self.block) * (w / self.block) * self.pairs.len();
        if self.payload.len() > slots {
            return Err(Error::param(
                "payload",
                format!("{} bits exceed the {slots} available slots", self.payload.len()),
            ));
        }
        Ok(slots)
    }

    fn whitening(&self) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key);
        (0..self.payload.len()).map(|_| rng.gen()).collect()
    }
}

fn luma(x: &Image) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let p = h * w;
    (0..p)
        .map(|i| {
            if c == 3 {
                (0..3).map(|k| LUMA[k] * x.data()[k * p + i]).sum()
            } else {
                (0..c).map(|k| x.data()[k * p + i]).sum::<f64>() / c as f64
            }
        })
        .collect()
}

struct Blocks {
    n: usize,
    basis: Vec<f64>,
    rows: usize,
    cols: usize,
    width: usize,
}

impl Blocks {
    fn new(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            basis: basis(n),
            rows: h / n,
            cols: w / n,
            width: w,
        }
    }

    fn origin(&self, b: usize) -> usize {
        (b / self.cols) * self.n * self.width + (b % self.cols) * self.n
    }

    fn pixels(&self, y: &[f64], b: usize) -> Vec<f64> {
        let o = self.origin(b);
        (0..self.n * self.n)
            .map(|i| y[o + (i / self.n) * self.width + i % self.n])
            .collect()
    }

    fn coef(&self, px: &[f64], u: usize, v: usize) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += self.basis[u * n + i] * self.basis[v * n + j] * px[i * n + j];
            }
        }
        s
    }

    /// Adds `delta` times the `(u, v)` basis image to block `b` of `out`.
    fn add_basis(&self, out: &mut [f64], b: usize, u: usize, v: usize, delta: f64) {
        let (n, o) = (self.n, self.origin(b));
        for i in 0..n {
            for j in 0..n {
                out[o + i * self.width + j] += delta * self.basis[u * n + i] * self.basis[v * n + j];
            }
        }
    }
}

/// Embeds the payload, adding the same luminance change to every channel.
pub fn dct_embed(x: &Image, cfg: &DctWatermarkConfig) -> Result<Image> {
    let (c, h, w) = x.shape();
    cfg.validate(h, w)?;
    if cfg.payload.is_empty() {
        return Ok(x.clone());
    }
    let blocks = Blocks::new(cfg.block, h, w);
    let white = cfg.whitening();
    let l = cfg.payload.len();
    let mut cur = x.clone();
    // Clamping perturbs the differences, so re-embed on the clamped result.
    for _ in 0..3 {
        let y = luma(&cur);
        let mut delta = vec![0.0; h * w];
        for b in 0..blocks.rows * blocks.cols {
            let px = blocks.pixels(&y, b);
            for (p, pair) in cfg.pairs.iter().enumerate() {
                let j = (b * cfg.pairs.len() + p) % l;
                let bit = cfg.payload[j] ^ white[j];
                let want = cfg.strength * if bit { 1.0 + cfg.margin } else { 1.0 - cfg.margin };
                let [(u1, v1), (u2, v2)] = *pair;
                let d = blocks.coef(&px, u1, v1) - blocks.coef(&px, u2, v2);
                let fix = (want - d) / 2.0;
                blocks.add_basis(&mut delta, b, u1, v1, fix);
                blocks.add_basis(&mut delta, b, u2, v2, -fix);
            }
        }
        let p = h * w;
        let data: Vec<f64> = cur.data().iter().enumerate().map(|(i, &v)| v + delta[i % p]).collect();
        cur = Image::from_clamped(c, h, w, data)?;
    }
    Ok(cur)
}

/// Recovers the payload by majority vote. Blocks that contain a row's worth of pure black, as left
/// by cropping, masking or rotation fill, are treated as erasures.
pub fn dct_extract(x: &Image, cfg: &DctWatermarkConfig) -> Result<Vec<bool>> {
    let (_, h, w) = x.shape();
    cfg.validate(h, w)?;
    let l = cfg.payload.len();
    if l == 0 {
        return Ok(Vec::new());
    }
    let blocks = Blocks::new(cfg.block, h, w);
    let y = luma(x);
    let mut votes = vec![0i64; l];
    for b in 0..blocks.rows * blocks.cols {
        let px = blocks.pixels(&y, b);
        let black = px.iter().filter(|&&v| v <= 1e-9).count();
        if black >= cfg.block {
            continue;
        }
        for (p, pair) in cfg.pairs.iter().enumerate() {
            let j = (b * cfg.pairs.len() + p) % l;
            let [(u1, v1), (u2, v2)] = *pair;
            let d = blocks.coef(&px, u1, v1) - blocks.coef(&px, u2, v2);
            votes[j] += if d > cfg.strength { 1 } else { -1 };
        }
    }
    let white = cfg.whitening();
    Ok(votes.iter().zip(white).map(|(&v, k)| (v > 0) ^ k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{apply_transform, generate_corpus, TransformSpec};
    use proptest::prelude::{any, prop_assert_eq, proptest, ProptestConfig};

    #[test]
    fn basis_is_orthonormal() {
        let n = 8;
        let m = basis(n);
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|i| m[a * n + i] * m[b * n + i]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn text_bits_round_trip() {
        assert_eq!(
            text_to_bits("A"),
            vec![false, true, false, false, false, false, false, true]
        );
        assert_eq!(bits_to_text(&text_to_bits("XYZ")), "XYZ");
        assert_eq!(bit_accuracy(&[true, false], &[true, true]), 0.5);
    }

    #[test]
    fn empty_payload_is_identity_and_overflow_is_an_error() {
        let x = generate_corpus(1, 64, 64, 2).unwrap().remove(0);
        let cfg = DctWatermarkConfig {
            payload: vec![],
            ..Default::default()
        };
        assert_eq!(dct_embed(&x, &cfg).unwrap(), x);
        let big = DctWatermarkConfig {
            payload: vec![true; 129],
            ..Default::default()
        };
        assert!(dct_embed(&x, &big).is_err());
    }

    #[test]
    fn survives_light_transforms_but_not_rotation_or_strong_brightness() {
        let xs = generate_corpus(6, 64, 64, 4).unwrap();
        let cfg = DctWatermarkConfig::with_text("KEY");
        for x in &xs {
            let y = dct_embed(x, &cfg).unwrap();
            assert_eq!(dct_extract(&y, &cfg).unwrap(), cfg.payload);
            for t in [
                TransformSpec::Brightness { factor: 1.1 },
                TransformSpec::Crop {
                    fraction: 0.75,
                    seed: 1,
                },
                TransformSpec::Mask {
                    fraction: 0.25,
                    seed: 2,
                },
                TransformSpec::GaussianNoise { sigma: 0.01, seed: 3 },
            ] {
                let z = apply_transform(&y, &t).unwrap();
                assert_eq!(dct_extract(&z, &cfg).unwrap(), cfg.payload, "{t:?}");
            }
        }
        let letters: Vec<char> = ('A'..='Z').collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = [0.0; 2];
        let n = 40;
        for x in generate_corpus(n, 64, 64, 6).unwrap() {
            let text: String = (0..3).map(|_| letters[rng.gen_range(0..26)]).collect();
            let cfg = DctWatermarkConfig::with_text(&text);
            let y = dct_embed(&x, &cfg).unwrap();
            for (k, t) in [
                TransformSpec::Rotate { degrees: 15.0 },
                TransformSpec::Brightness { factor: 1.2 },
            ]
            .iter()
            .enumerate()
            {
                let z = apply_transform(&y, t).unwrap();
                acc[k] += bit_accuracy(&dct_extract(&z, &cfg).unwrap(), &cfg.payload) / n as f64;
            }
        }
        assert!(acc[0] <= 0.6 && acc[1] <= 0.6, "{acc:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn round_trip_is_exact(bits in proptest::collection::vec(any::<bool>(), 0..=128usize), seed in 0u64..4) {
            let x = generate_corpus(1, 64, 64, seed).unwrap().remove(0);
            let cfg = DctWatermarkConfig { payload: bits, ..Default::default() };
            let y = dct_embed(&x, &cfg).unwrap();
            prop_assert_eq!(dct_extract(&y, &cfg).unwrap(), cfg.payload);
        }
    }
}
