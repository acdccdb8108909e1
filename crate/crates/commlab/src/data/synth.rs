//! Procedural synthetic image dataset.
//!
//! Each class is a family of oriented stripe patterns with a
//! class-specific angle and frequency; items within a class differ by a
//! random phase and low-amplitude pixel noise. Desk-scale stand-in for
//! image datasets.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Item, LabeledDataset};
use crate::error::{Error, Result};

const NOISE_AMPLITUDE: f64 = 0.05;

/// Generates a deterministic striped dataset with `m` classes of
/// `n_per_class` images, each `side x side` pixels in `[0, 1]`.
pub fn synth_dataset(
    seed: u64,
    m: usize,
    n_per_class: usize,
    side: usize,
) -> Result<LabeledDataset> {
    if m == 0 || m > 16 {
        return Err(Error::config(format!("class count must be 1..=16, got {m}")));
    }
    if side < 8 {
        return Err(Error::config(format!("side must be at least 8, got {side}")));
    }
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(m * n_per_class);
    let mut id = 0u64;
    for label in 0..m {
        let angle = PI * label as f64 / m as f64;
        let frequency = 1.0 + (label % 4) as f64 * 0.5;
        let (dx, dy) = (angle.cos(), angle.sin());
        for _ in 0..n_per_class {
            // Bounded phase jitter keeps items of one class closer to each
            // other than to any other class.
            let phase = rng.gen_range(-0.5..0.5);
            let mut pixels = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let t = (x as f64 * dx + y as f64 * dy) / side as f64;
                    let wave = 0.5 + 0.45 * (2.0 * PI * frequency * t + phase).sin();
                    let noise = rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
                    pixels.push((wave + noise).clamp(0.0, 1.0));
                }
            }
            items.push(Item { id, pixels, label });
            id += 1;
        }
    }
    LabeledDataset::new(items, m)
}
