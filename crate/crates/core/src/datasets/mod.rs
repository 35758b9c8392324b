//! Labeled datasets and the generators/loaders used by the experiments.

mod idx;
mod sinusoidal;
mod tabular;

pub use idx::{
    corrupt_and_normalize, mnist_load_idx, write_idx_images, write_idx_labels, ImageDataset, Provenance, MNIST_CLASSES,
};
pub use sinusoidal::{sinusoidal_generate, SinusoidalParams, SINUSOID_INPUT_DIM};
pub use tabular::load_tabular_csv;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub task: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(task: TaskKind, input_dim: usize, output_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.x.len() != input_dim {
                return Err(Error::DimensionMismatch {
                    expected: input_dim,
                    got: s.x.len(),
                });
            }
            if s.y.len() != output_dim {
                return Err(Error::DimensionMismatch {
                    expected: output_dim,
                    got: s.y.len(),
                });
            }
        }
        Ok(Self {
            task,
            input_dim,
            output_dim,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            task: self.task,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.input_dim != other.input_dim || self.output_dim != other.output_dim {
            return Err(Error::InvalidInputs("dataset dimensions differ".into()));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Ok(LabeledDataset {
            samples,
            ..self.clone()
        })
    }

    /// Class index of every sample (argmax of the one-hot target).
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| argmax(&s.y)).collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Seeded shuffle followed by a prefix of length `n_take`. In stratified
/// mode classes are taken round-robin so the prefix is as balanced as the
/// class counts allow.
pub fn split_and_subset(
    ds: &LabeledDataset,
    n_take: usize,
    seed: u64,
    stratified: bool,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_take > ds.len() {
        return Err(Error::InsufficientData {
            requested: n_take,
            available: ds.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    if stratified {
        let labels = ds.labels();
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); ds.output_dim.max(1)];
        for &i in &order {
            buckets[labels[i]].push(i);
        }
        let mut cursors = vec![0usize; buckets.len()];
        let mut interleaved = Vec::with_capacity(order.len());
        while interleaved.len() < order.len() {
            for (b, bucket) in buckets.iter().enumerate() {
                if cursors[b] < bucket.len() {
                    interleaved.push(bucket[cursors[b]]);
                    cursors[b] += 1;
                }
            }
        }
        order = interleaved;
    }
    let (take, rest) = order.split_at(n_take);
    Ok((ds.subset(take), ds.subset(rest)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy(n: usize, classes: usize) -> LabeledDataset {
        let samples = (0..n)
            .map(|i| Sample {
                x: vec![i as f64],
                y: one_hot(i % classes, classes),
            })
            .collect();
        LabeledDataset::new(TaskKind::Classification, 1, classes, samples).unwrap()
    }

    #[test]
    fn full_take_is_a_permutation() {
        let ds = toy(50, 5);
        let (take, rest) = split_and_subset(&ds, 50, 3, false).unwrap();
        assert!(rest.is_empty());
        let mut xs: Vec<i64> = take.samples.iter().map(|s| s.x[0] as i64).collect();
        xs.sort();
        assert_eq!(xs, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_take_balances_classes() {
        let ds = toy(5000, 10);
        let (take, _) = split_and_subset(&ds, 1000, 4, true).unwrap();
        let mut counts = [0usize; 10];
        for l in take.labels() {
            counts[l] += 1;
        }
        assert_eq!(counts, [100; 10]);
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let ds = toy(300, 3);
        let (a, b) = split_and_subset(&ds, 120, 9, false).unwrap();
        let sa: HashSet<i64> = a.samples.iter().map(|s| s.x[0] as i64).collect();
        let sb: HashSet<i64> = b.samples.iter().map(|s| s.x[0] as i64).collect();
        assert!(sa.is_disjoint(&sb));
        assert_eq!(sa.len() + sb.len(), 300);
        let (a2, _) = split_and_subset(&ds, 120, 9, false).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn oversized_take_fails() {
        let ds = toy(10, 2);
        assert!(matches!(
            split_and_subset(&ds, 11, 0, false),
            Err(Error::InsufficientData {
                requested: 11,
                available: 10
            })
        ));
    }
}
