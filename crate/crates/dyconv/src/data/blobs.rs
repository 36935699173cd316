//! Synthetic glyph corpus: three shapes (disc, ring, cross) drawn in two
//! contrast styles (bright glyph on dark ground and the inverse), with
//! label = (shape + style) mod 3. The crossed labeling is the point: the
//! same shape lands in different classes depending on polarity, and each
//! class contains both polarities, so neither shape features nor global
//! brightness alone decide a label. A classifier has to condition its edge
//! filters on the style, which a pooled-input attention branch can read off
//! mean brightness directly; one static kernel bank has to spend capacity
//! duplicating every edge detector per polarity. Every image is quantized
//! to bytes and pushed through the IDX codec, so the loader path runs on
//! every build and pixel values round-trip exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;

use super::idx::{dataset_from_idx, encode_idx_images, encode_idx_labels};
use super::Dataset;

fn b_seed() -> u64 {
    7
}
fn b_train() -> usize {
    600
}
fn b_test() -> usize {
    300
}
fn b_resolution() -> usize {
    16
}
fn b_noise() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    #[serde(default = "b_seed")]
    pub seed: u64,
    #[serde(default = "b_train")]
    pub train: usize,
    #[serde(default = "b_test")]
    pub test: usize,
    #[serde(default = "b_resolution")]
    pub resolution: usize,
    /// Uniform pixel noise amplitude, in [0, 0.5).
    #[serde(default = "b_noise")]
    pub noise: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            seed: b_seed(),
            train: b_train(),
            test: b_test(),
            resolution: b_resolution(),
            noise: b_noise(),
        }
    }
}

const TRAIN_SALT: u64 = 0x0074_7261_696e;
const TEST_SALT: u64 = 0x0000_7465_7374;

impl BlobsConfig {
    fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Config("blob resolution must be at least 8".into()));
        }
        if !self.noise.is_finite() || !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!(
                "noise amplitude {} outside [0, 0.5)",
                self.noise
            )));
        }
        Ok(())
    }

    /// Train and test come from distinct generator streams, so the splits
    /// are disjoint up to the vanishing chance of identical jitter draws.
    pub fn train_split<E: Element>(&self) -> Result<Dataset<E>> {
        self.validate()?;
        generate(self.seed ^ TRAIN_SALT, self.train, self.resolution, self.noise)
    }

    pub fn test_split<E: Element>(&self) -> Result<Dataset<E>> {
        self.validate()?;
        generate(self.seed ^ TEST_SALT, self.test, self.resolution, self.noise)
    }
}

fn generate<E: Element>(seed: u64, n: usize, res: usize, noise: f64) -> Result<Dataset<E>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * res * res);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let shape = (i % 3) as u8;
        let style = ((i / 3) % 2) as u8;
        paint(&mut rng, shape, style, res, noise, &mut pixels);
        labels.push((shape + style) % 3);
    }
    dataset_from_idx(
        "blobs",
        &encode_idx_images(res, res, &pixels)?,
        &encode_idx_labels(&labels),
        3,
    )
}

fn paint(rng: &mut ChaCha8Rng, shape: u8, style: u8, res: usize, noise: f64, out: &mut Vec<u8>) {
    let center = res as f64 / 2.0 - 0.5;
    let jitter = res as f64 * 0.12;
    let cx = center + rng.gen_range(-jitter..jitter);
    let cy = center + rng.gen_range(-jitter..jitter);
    let r = rng.gen_range(res as f64 * 0.22..res as f64 * 0.34);
    let bar = r * 0.38;
    for y in 0..res {
        for x in 0..res {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            let inside = match shape {
                0 => d <= r,
                1 => d <= r && d >= r * 0.55,
                _ => {
                    (dx.abs() <= bar && dy.abs() <= r) || (dy.abs() <= bar && dx.abs() <= r)
                }
            };
            let mut v = if inside { 0.8 } else { 0.2 };
            if noise > 0.0 {
                v += rng.gen_range(-noise..noise);
            }
            if style == 1 {
                v = 1.0 - v;
            }
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
}
