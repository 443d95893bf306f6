//! Synthetic two-blob task whose label depends on the whole image.
//!
//! Each image holds two Gaussian blobs on a noisy background. The label is 1
//! when both blob centres lie in the same (left or right) half of the image,
//! 0 otherwise. Centres keep a margin from the midline so the label is never
//! ambiguous, and blob positions are otherwise uniform, so a tile that sees
//! only one blob carries no information about the label.
//!
//! Images are generated in `f64` with ChaCha8 seeded by `seed`; sample `i`
//! has label `i % 2`, so every even-sized set is balanced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor4<f64>,
    pub label: u8,
}

/// Blob width relative to the image side.
const SIGMA_FRACTION: f64 = 1.0 / 20.0;
const NOISE: f64 = 0.1;

pub fn synth_dataset(seed: u64, image_size: usize, channels: usize, n: usize) -> Result<Vec<SyntheticSample>> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sample count must be even and at least 2, got {n}"
        )));
    }
    if image_size < 16 || channels == 0 {
        return Err(Error::Config(format!(
            "synthetic images need side >= 16 and at least one channel (got {image_size}, {channels})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = image_size as f64;
    let sigma = z * SIGMA_FRACTION;
    let margin = 2.0 * sigma;
    let half = z / 2.0;
    Ok((0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let side_x = |left: bool, rng: &mut ChaCha8Rng| {
                let x = rng.gen_range(margin..half - margin);
                if left {
                    x
                } else {
                    z - x
                }
            };
            let first_left = rng.gen_bool(0.5);
            let second_left = if label == 1 { first_left } else { !first_left };
            let centres = [
                (rng.gen_range(margin..z - margin), side_x(first_left, &mut rng)),
                (rng.gen_range(margin..z - margin), side_x(second_left, &mut rng)),
            ];
            let image = Tensor4::from_fn(Dims::new(1, channels, image_size, image_size), |_, _, y, x| {
                let (y, x) = (y as f64 + 0.5, x as f64 + 0.5);
                let blobs: f64 = centres
                    .iter()
                    .map(|&(cy, cx)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .sum();
                blobs + rng.gen_range(-NOISE..NOISE)
            });
            SyntheticSample { image, label }
        })
        .collect())
}
