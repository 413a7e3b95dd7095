//! Labeled feature datasets: manifest-driven loading and a seeded synthetic
//! generator for desk-scale experiments.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features;
use crate::io::DatasetManifest;
use crate::tensor::Tensor;

/// One labeled example; features are `[h, w, 1]`.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Stacks the indexed examples into a `[batch, h, w, c]` tensor plus
    /// one-hot labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let first = indices
            .first()
            .ok_or(Error::EmptyDataset)
            .map(|i| &self.examples[*i])?;
        let shape = first.features.shape().to_vec();
        let per = first.features.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = vec![0.0f32; indices.len() * self.class_count];
        for (row, &i) in indices.iter().enumerate() {
            let ex = &self.examples[i];
            if ex.features.shape() != shape {
                return Err(Error::shape(
                    format!("dataset example {i}"),
                    format!("{shape:?}"),
                    format!("{:?}", ex.features.shape()),
                ));
            }
            data.extend_from_slice(ex.features.data());
            labels[row * self.class_count + ex.label] = 1.0;
        }
        let batch = Tensor::from_vec(
            &[indices.len(), shape[0], shape[1], shape[2]],
            data,
        )?;
        let labels = Tensor::from_vec(&[indices.len(), self.class_count], labels)?;
        Ok((batch, labels))
    }
}

/// Settings for the synthetic dataset: class `k` is a Gaussian bump at a
/// class-specific (band, frame) location on the feature grid plus pixel
/// noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub noise_sigma: f32,
    pub height: usize,
    pub width: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 4,
            per_class: 200,
            seed: 7,
            noise_sigma: 0.3,
            height: 40,
            width: 51,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic bump center for class `k`.
fn class_center(k: usize, height: usize, width: usize) -> (usize, usize) {
    let margin = 4.min(height / 4).min(width / 4);
    let r = margin + (k * 31) % (height - 2 * margin).max(1);
    let c = margin + (k * 23) % (width - 2 * margin).max(1);
    (r, c)
}

/// Generates the synthetic dataset. Seeded and fully deterministic.
pub fn toy_dataset(config: &ToyConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sigma_spatial = 4.0f64;
    let amplitude = 3.0f64;
    let mut examples = Vec::with_capacity(config.classes * config.per_class);
    for k in 0..config.classes {
        let (cy, cx) = class_center(k, config.height, config.width);
        for _ in 0..config.per_class {
            let mut values = vec![0.0f32; config.height * config.width];
            for y in 0..config.height {
                for x in 0..config.width {
                    let dy = y as f64 - cy as f64;
                    let dx = x as f64 - cx as f64;
                    let bump =
                        amplitude * (-(dy * dy + dx * dx) / (2.0 * sigma_spatial * sigma_spatial)).exp();
                    let noise = gaussian(&mut rng) * config.noise_sigma as f64;
                    values[y * config.width + x] = (bump + noise) as f32;
                }
            }
            examples.push(Example {
                features: Tensor::from_vec(&[config.height, config.width, 1], values)
                    .expect("sized by construction"),
                label: k,
            });
        }
    }
    Dataset {
        examples,
        class_count: config.classes,
    }
}

/// Deterministic split into train and validation parts: every
/// `1/val_fraction`-th example (rounded) of each class goes to validation.
pub fn split(dataset: &Dataset, val_fraction: f64) -> (Dataset, Dataset) {
    let stride = if val_fraction <= 0.0 {
        usize::MAX
    } else {
        (1.0 / val_fraction).round().max(1.0) as usize
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut per_class_seen = vec![0usize; dataset.class_count];
    for ex in &dataset.examples {
        let seen = &mut per_class_seen[ex.label];
        if *seen % stride == stride - 1 {
            val.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
        *seen += 1;
    }
    (
        Dataset {
            examples: train,
            class_count: dataset.class_count,
        },
        Dataset {
            examples: val,
            class_count: dataset.class_count,
        },
    )
}

/// Loads every manifest row into memory: `.lmel` files are read from the
/// cache format, `.wav` files go through the extraction pipeline. Rows load
/// in parallel; order follows the manifest.
pub fn load_dataset(manifest: &DatasetManifest, base_dir: Option<&Path>) -> Result<Dataset> {
    let examples: Result<Vec<Example>> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let path = match base_dir {
                Some(d) if row.path.is_relative() => d.join(&row.path),
                _ => row.path.clone(),
            };
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or("")
                .to_ascii_lowercase();
            let feature = match ext.as_str() {
                "lmel" => features::load_lmel(&path)?,
                "wav" => features::extract_logmel(&features::read_wav(&path)?)?,
                other => {
                    return Err(Error::Audio(format!(
                        "{}: unsupported extension {other:?} (expected .wav or .lmel)",
                        path.display()
                    )))
                }
            };
            Ok(Example {
                features: feature.to_tensor(),
                label: row.label_index,
            })
        })
        .collect();
    Ok(Dataset {
        examples: examples?,
        class_count: crate::io::SCENE_LABELS.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_is_deterministic_and_labeled() {
        let cfg = ToyConfig {
            classes: 4,
            per_class: 3,
            ..ToyConfig::default()
        };
        let a = toy_dataset(&cfg);
        let b = toy_dataset(&cfg);
        assert_eq!(a.len(), 12);
        for (x, y) in a.examples.iter().zip(&b.examples) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        let distinct: std::collections::BTreeSet<usize> =
            a.examples.iter().map(|e| e.label).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn class_centers_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..10 {
            assert!(seen.insert(class_center(k, 40, 51)), "class {k} center collides");
        }
    }

    #[test]
    fn split_keeps_all_examples_and_both_parts_nonempty() {
        let cfg = ToyConfig {
            classes: 3,
            per_class: 10,
            ..ToyConfig::default()
        };
        let ds = toy_dataset(&cfg);
        let (train, val) = split(&ds, 0.2);
        assert_eq!(train.len() + val.len(), ds.len());
        assert_eq!(val.len(), 6); // 2 of every 10 per class
        assert!(train.len() > val.len());
    }

    #[test]
    fn batch_stacks_features_and_one_hot() {
        let cfg = ToyConfig {
            classes: 2,
            per_class: 2,
            height: 6,
            width: 5,
            ..ToyConfig::default()
        };
        let ds = toy_dataset(&cfg);
        let (batch, labels) = ds.batch(&[0, 3]).unwrap();
        assert_eq!(batch.shape(), &[2, 6, 5, 1]);
        assert_eq!(labels.shape(), &[2, 2]);
        assert_eq!(labels.data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
