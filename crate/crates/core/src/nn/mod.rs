//! Minimal dense network toolkit: channel-major tensors, convolutional layers
//! with reverse-mode gradients, and an Adam optimizer.

mod layers;
mod optim;
mod tensor;

pub use layers::{Activation, Conv2d, ConvTranspose2d, Grads, Layer, Sequential, Tape};
pub use optim::Adam;
pub use tensor::Tensor;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Runs `epochs` passes over `n` samples in seeded shuffled minibatches.
/// `step` receives the batch indices and its epoch number and returns the
/// batch loss; the result is the per-epoch mean batch loss.
pub fn run_epochs(
    n: usize,
    epochs: usize,
    batch: usize,
    seed: u64,
    mut step: impl FnMut(&[usize], usize) -> f64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = batch.max(1);
    (0..epochs)
        .map(|epoch| {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut count = 0;
            for chunk in order.chunks(batch) {
                total += step(chunk, epoch);
                count += 1;
            }
            total / count.max(1) as f64
        })
        .collect()
}

/// Sum per-sample gradients in index order so results do not depend on scheduling.
pub fn sum_grads(mut parts: Vec<Grads>) -> Option<Grads> {
    let mut iter = parts.drain(..);
    let mut acc = iter.next()?;
    for g in iter {
        acc.add(&g);
    }
    Some(acc)
}
