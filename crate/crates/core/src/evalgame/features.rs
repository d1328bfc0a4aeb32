use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::Codec;
use crate::error::Result;
use crate::imaging::Image;
use crate::nn::{Activation, Conv2d, Layer, Sequential};

/// Fixed random-projection texture encoder used for the "vision" distance.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    net: Sequential,
}

impl VisionEncoder {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            net: Sequential::new(vec![
                Layer::Conv(Conv2d::new(channels, 8, 5, 2, 2, &mut rng)),
                Layer::Act(Activation::Tanh),
                Layer::Conv(Conv2d::new(8, 8, 3, 2, 1, &mut rng)),
                Layer::Act(Activation::Tanh),
            ]),
        }
    }
}

/// Embedding used by [`embedding_distance`].
#[derive(Clone, Copy, Debug)]
pub enum FeatureExtractor<'a> {
    /// Codec encoder latent.
    Semantic(&'a Codec),
    Vision(&'a VisionEncoder),
}

impl FeatureExtractor<'_> {
    pub fn embed(&self, x: &Image) -> Result<Vec<f64>> {
        Ok(match self {
            FeatureExtractor::Semantic(c) => c.encode(x)?.0.data,
            FeatureExtractor::Vision(v) => v.net.forward(&x.to_tensor()).data,
        })
    }
}

/// ℓ2 distance between flattened embeddings.
pub fn embedding_distance(features: FeatureExtractor<'_>, x: &Image, y: &Image) -> Result<f64> {
    x.same_shape(y)?;
    let (a, b) = (features.embed(x)?, features.embed(y)?);
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::imaging::generate_corpus;

    #[test]
    fn distance_axioms() {
        let xs = generate_corpus(2, 16, 16, 1).unwrap();
        let v = VisionEncoder::new(3, 4);
        let c = Codec::init(CodecConfig::default(), 2);
        for f in [FeatureExtractor::Vision(&v), FeatureExtractor::Semantic(&c)] {
            assert_eq!(embedding_distance(f, &xs[0], &xs[0]).unwrap(), 0.0);
            let d = embedding_distance(f, &xs[0], &xs[1]).unwrap();
            assert!(d > 0.0);
            assert_eq!(d, embedding_distance(f, &xs[1], &xs[0]).unwrap());
        }
        let small = Image::filled(3, 8, 8, 0.0).unwrap();
        assert!(embedding_distance(FeatureExtractor::Vision(&v), &xs[0], &small).is_err());
    }
}
