//! Gaussian-cluster benchmark generator.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Item, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    /// Within-class standard deviation.
    pub cluster_std: f64,
    /// Standard deviation of the class centers around the origin.
    pub center_std: f64,
    pub items_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            dim: 16,
            cluster_std: 0.6,
            center_std: 1.0,
            items_per_class: 50,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cluster_std > 0.0 && self.center_std > 0.0) {
            return Err(Error::Config(format!(
                "cluster_std and center_std must be positive, got {} and {}",
                self.cluster_std, self.center_std
            )));
        }
        if self.classes == 0 || self.dim == 0 || self.items_per_class == 0 {
            return Err(Error::Config(
                "classes, dim and items_per_class must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Class counts of the 60/20/20 train/val/test partition.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let train = (self.classes as f64 * 0.6).round() as usize;
        let val = ((self.classes as f64 * 0.2).round() as usize).min(self.classes - train);
        (train, val, self.classes - train - val)
    }
}

/// Centers from `N(0, center_std^2 I)`, items from `N(center, cluster_std^2 I)`,
/// stored at f32 precision. Classes are split by id: the lowest 60% train,
/// the next 20% val, the rest test.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center = Normal::new(0.0, spec.center_std).expect("validated std");
    let noise = Normal::new(0.0, spec.cluster_std).expect("validated std");
    let (train, val, _) = spec.split_sizes();
    let mut items = Vec::with_capacity(spec.classes * spec.items_per_class);
    let mut splits = BTreeMap::new();
    for c in 0..spec.classes {
        let split = if c < train {
            Split::Train
        } else if c < train + val {
            Split::Val
        } else {
            Split::Test
        };
        splits.insert(c as u32, split);
        let mu: Vec<f64> = (0..spec.dim).map(|_| center.sample(&mut rng)).collect();
        for _ in 0..spec.items_per_class {
            items.push(Item {
                class_id: c as u32,
                shape: vec![spec.dim],
                data: mu
                    .iter()
                    .map(|&m| (m + noise.sample(&mut rng)) as f32)
                    .collect(),
            });
        }
    }
    Dataset::new(items, splits)
}
