use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Label of the empty prompt; embeds to the all-zero vector.
pub const NULL_PROMPT: &str = "none";

/// Edit prompts understood by the simulator, each tied to a fixed pixel effect.
pub const PROMPTS: [&str; 8] = [
    "tint-red",
    "tint-green",
    "tint-blue",
    "brighten",
    "darken",
    "desaturate",
    "warm",
    "cool",
];

pub fn prompt_index(label: &str) -> Result<Option<usize>> {
    if label == NULL_PROMPT {
        return Ok(None);
    }
    PROMPTS
        .iter()
        .position(|p| *p == label)
        .map(Some)
        .ok_or_else(|| Error::param("prompt", format!("unknown prompt {label:?}")))
}

/// The deterministic pixel-domain effect associated with a prompt label.
pub fn apply_effect(label: &str, x: &Image) -> Result<Image> {
    let Some(idx) = prompt_index(label)? else {
        return Ok(x.clone());
    };
    let (c, h, w) = x.shape();
    let p = h * w;
    let mut d = x.data().to_vec();
    let shift = |d: &mut [f64], ch: usize, v: f64| {
        if ch < c {
            d[ch * p..(ch + 1) * p].iter_mut().for_each(|a| *a += v);
        }
    };
    match PROMPTS[idx] {
        "tint-red" => shift(&mut d, 0, 0.15),
        "tint-green" => shift(&mut d, 1, 0.15),
        "tint-blue" => shift(&mut d, 2, 0.15),
        "brighten" => d.iter_mut().for_each(|a| *a += 0.12),
        "darken" => d.iter_mut().for_each(|a| *a *= 0.8),
        "desaturate" => {
            let g = x.to_gray();
            for ch in 0..c {
                for i in 0..p {
                    d[ch * p + i] = 0.3 * d[ch * p + i] + 0.7 * g.data()[i];
                }
            }
        }
        "warm" => {
            shift(&mut d, 0, 0.08);
            shift(&mut d, 2, -0.08);
        }
        "cool" => {
            shift(&mut d, 0, -0.08);
            shift(&mut d, 2, 0.08);
        }
        _ => unreachable!(),
    }
    Image::from_clamped(c, h, w, d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding(pub Vec<f64>);

impl PromptEmbedding {
    pub fn is_null(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Fixed seeded lookup table from prompt labels to embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTable {
    pub seed: u64,
    pub dim: usize,
}

impl PromptTable {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    pub fn null(&self) -> PromptEmbedding {
        PromptEmbedding(vec![0.0; self.dim])
    }

    pub fn embed(&self, label: &str) -> Result<PromptEmbedding> {
        let Some(idx) = prompt_index(label)? else {
            return Ok(self.null());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(idx as u64));
        let scale = 1.0 / (self.dim as f64).sqrt();
        Ok(PromptEmbedding(
            (0..self.dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    scale * v
                })
                .collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::generate_corpus;

    #[test]
    fn embeddings_are_stable_and_null_is_zero() {
        let t = PromptTable::new(5, 16);
        assert_eq!(t.embed("warm").unwrap(), t.embed("warm").unwrap());
        assert_ne!(t.embed("warm").unwrap(), t.embed("cool").unwrap());
        assert!(t.embed(NULL_PROMPT).unwrap().is_null());
        assert_eq!(t.embed("warm").unwrap().0.len(), 16);
        assert!(t.embed("sepia").is_err());
    }

    #[test]
    fn effects_stay_in_range_and_tint_red_raises_red() {
        let x = generate_corpus(1, 16, 16, 8).unwrap().remove(0);
        for p in PROMPTS {
            let y = apply_effect(p, &x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert_ne!(y, x, "{p} has no effect");
        }
        let r = apply_effect("tint-red", &x).unwrap();
        assert!(r.channel_mean(0) > x.channel_mean(0) + 0.05);
        assert_eq!(apply_effect(NULL_PROMPT, &x).unwrap(), x);
    }
}
