//! Seeded synthetic image + spectrogram datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(rows, cols, 3)` in [0, 1].
    pub image: Tensor,
    /// `(rows, cols, 1)` in [0, 1]; row 0 is the lowest frequency band.
    pub speech: Tensor,
    pub label: usize,
}

fn image_with_level(rng: &mut ChaCha8Rng, rows: usize, cols: usize, level: f64) -> Tensor {
    let jitter = rng.gen_range(-0.08..0.08);
    Tensor::from_fn(&[rows, cols, 3], |_| {
        (level + jitter + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)
    })
}

/// Spectrogram whose energy sits in the lower (`low = true`) or upper half
/// of the frequency axis, with a few silent frames.
fn spectrogram_with_band(rng: &mut ChaCha8Rng, rows: usize, cols: usize, low: bool) -> Tensor {
    let silent: Vec<bool> = (0..cols).map(|_| rng.gen_bool(0.15)).collect();
    let mut t = Tensor::zeros(&[rows, cols, 1]);
    let data = t.data_mut();
    for r in 0..rows {
        let in_band = (r < rows / 2) == low;
        for (c, &quiet) in silent.iter().enumerate() {
            let level: f64 = if quiet {
                0.05
            } else if in_band {
                0.75
            } else {
                0.25
            };
            data[r * cols + c] = (level + rng.gen_range(-0.15f64..0.15)).clamp(0.0, 1.0);
        }
    }
    t
}

/// Four-class data where neither modality alone determines the label:
/// `label = 2 * bright + low_band`, with `bright` read from the image mean
/// and `low_band` from where the spectrogram energy sits. Classes are
/// balanced and the order is shuffled.
pub fn multimodal_dataset(n: usize, rows: usize, cols: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| {
            let bright = label >= 2;
            let low = label % 2 == 1;
            let image = image_with_level(&mut rng, rows, cols, if bright { 0.7 } else { 0.3 });
            let speech = spectrogram_with_band(&mut rng, rows, cols, low);
            Sample { image, speech, label }
        })
        .collect()
}

/// Two-class data where the label is whether the image mean exceeds 0.5;
/// the spectrogram is unrelated noise.
pub fn brightness_dataset(n: usize, rows: usize, cols: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let image = image_with_level(&mut rng, rows, cols, if label == 1 { 0.72 } else { 0.28 });
            let speech = Tensor::from_fn(&[rows, cols, 1], |_| rng.gen::<f64>());
            Sample { image, speech, label }
        })
        .collect()
}

/// Splits off the first `round(fraction * len)` samples for training.
pub fn split(samples: Vec<Sample>, train_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let cut = ((samples.len() as f64) * train_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut train = samples;
    let test = train.split_off(cut);
    (train, test)
}
