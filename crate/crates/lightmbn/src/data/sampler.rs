//! P×K identity sampler: every batch holds exactly P distinct identities
//! with exactly K samples each.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{derive_rng, streams, DataError, DatasetIndex, Result};

/// One training batch: dataset sample positions plus their contiguous
/// class labels.
#[derive(Debug, Clone)]
pub struct BatchSpec {
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
}

pub struct PkSampler {
    p: usize,
    k: usize,
    seed: u64,
    /// (class label, train sample positions), ordered by label.
    classes: Vec<(usize, Vec<usize>)>,
}

impl PkSampler {
    pub fn new(index: &DatasetIndex, p: usize, k: usize, seed: u64) -> Result<PkSampler> {
        if p == 0 || k == 0 {
            return Err(DataError::Config("P and K must be positive".into()));
        }
        let mut classes: Vec<(usize, Vec<usize>)> = index
            .id_to_indices
            .iter()
            .map(|(pid, positions)| {
                let label = index.class_label(*pid).expect("indexed pid has a class");
                (label, positions.clone())
            })
            .collect();
        classes.sort_by_key(|(label, _)| *label);
        if classes.len() < p {
            return Err(DataError::Config(format!(
                "P×K sampling needs at least {p} distinct train identities, found {}",
                classes.len()
            )));
        }
        Ok(PkSampler {
            p,
            k,
            seed,
            classes,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// The batches of one epoch. Identities are shuffled and chunked into
    /// groups of P, so every identity appears at least once; a final
    /// partial group is topped up with identities from outside the group.
    /// Identities with fewer than K images are sampled with replacement.
    pub fn epoch(&self, epoch: u64) -> Vec<BatchSpec> {
        let mut rng = derive_rng(self.seed, streams::SAMPLER, epoch);
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.shuffle(&mut rng);

        let mut batches = Vec::new();
        for chunk in order.chunks(self.p) {
            let mut group = chunk.to_vec();
            if group.len() < self.p {
                let mut pool: Vec<usize> =
                    (0..self.classes.len()).filter(|i| !chunk.contains(i)).collect();
                pool.shuffle(&mut rng);
                group.extend(pool.into_iter().take(self.p - group.len()));
            }
            let mut positions = Vec::with_capacity(self.p * self.k);
            let mut labels = Vec::with_capacity(self.p * self.k);
            for &ci in &group {
                let (label, ref samples) = self.classes[ci];
                if samples.len() >= self.k {
                    let mut copy = samples.clone();
                    copy.shuffle(&mut rng);
                    positions.extend(copy.into_iter().take(self.k));
                } else {
                    for _ in 0..self.k {
                        positions.push(samples[rng.random_range(0..samples.len())]);
                    }
                }
                labels.extend(std::iter::repeat(label).take(self.k));
            }
            batches.push(BatchSpec { positions, labels });
        }
        batches
    }
}
