//! Synthetic multi-camera dataset generator.
//!
//! Each identity gets a mean vector on a scaled hypersphere, each camera a
//! fixed additive offset; samples are identity mean + camera offset +
//! Gaussian noise. Ground-truth identities are retained so clustering can be
//! scored with ARI/NMI.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{EmbeddingMatrix, SampleMeta};

/// Generator parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Identity count P.
    pub identities: usize,
    /// Camera count C.
    pub cameras: usize,
    /// Samples per (identity, camera) pair.
    pub samples_per_pair: usize,
    /// Raw feature dimension.
    pub raw_dim: usize,
    /// Scale of the identity means.
    pub separation: f64,
    /// Scale of the per-camera offset vectors.
    pub camera_offset: f64,
    /// Per-coordinate Gaussian noise sigma.
    pub noise: f64,
    /// Extra offset applied to every sample (used for two-domain setups).
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            cameras: 2,
            samples_per_pair: 10,
            raw_dim: 32,
            separation: 1.0,
            camera_offset: 1.0,
            noise: 0.05,
            domain_shift: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The preset behind the supervised end-to-end runs: 8 identities ×
    /// 2 cameras × 10 samples in 32 raw dimensions with mild noise.
    pub fn easy(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    /// Preset with a pronounced camera gap, for camera-aware training runs.
    pub fn camera_offset(seed: u64) -> Self {
        Self {
            identities: 8,
            cameras: 2,
            samples_per_pair: 12,
            raw_dim: 32,
            separation: 1.0,
            camera_offset: 0.45,
            noise: 0.08,
            domain_shift: 0.0,
            seed,
        }
    }

    /// Target-domain preset for two-domain adaptation runs: wider identity
    /// spread, noisier samples, and a global domain shift.
    pub fn two_domain_target(seed: u64) -> Self {
        Self {
            identities: 8,
            cameras: 2,
            samples_per_pair: 12,
            raw_dim: 32,
            separation: 1.4,
            camera_offset: 0.45,
            noise: 0.12,
            domain_shift: 0.5,
            seed,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.identities * self.cameras * self.samples_per_pair
    }

    pub fn validate(&self) {
        assert!(self.identities >= 1 && self.cameras >= 1 && self.samples_per_pair >= 1);
        assert!(self.raw_dim >= 1);
        assert!(self.separation >= 0.0 && self.camera_offset >= 0.0 && self.noise >= 0.0);
    }
}

/// A generated dataset: raw features, metadata, and the ground-truth
/// identities (identical to `meta.labels()` — kept separately so pipelines can
/// blind the labels while still scoring clusterings).
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub features: EmbeddingMatrix,
    pub meta: SampleMeta,
    pub ground_truth: Vec<i64>,
}

impl SyntheticDataset {
    /// Copy with all labels blinded to UNKNOWN; ground truth retained.
    pub fn blinded(&self) -> Self {
        let labels = vec![crate::embedding::UNKNOWN_LABEL; self.meta.len()];
        Self {
            features: self.features.clone(),
            meta: SampleMeta::new(labels, self.meta.cameras().to_vec()).unwrap(),
            ground_truth: self.ground_truth.clone(),
        }
    }

    /// Splits off the last `per_pair` samples of every (identity, camera)
    /// group as a held-out set.
    pub fn split_holdout(&self, per_pair: usize) -> (Self, Self) {
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<(i64, u32), Vec<usize>> = BTreeMap::new();
        for i in 0..self.meta.len() {
            groups
                .entry((self.meta.label(i), self.meta.camera(i)))
                .or_default()
                .push(i);
        }
        let mut held = Vec::new();
        let mut train = Vec::new();
        for (_, idx) in groups {
            let keep = idx.len().saturating_sub(per_pair);
            train.extend_from_slice(&idx[..keep]);
            held.extend_from_slice(&idx[keep..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        (self.select(&train), self.select(&held))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            meta: self.meta.select(indices),
            ground_truth: indices.iter().map(|&i| self.ground_truth[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

fn random_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a dataset deterministically from the spec's seed.
pub fn synth_dataset(spec: &SyntheticSpec) -> SyntheticDataset {
    spec.validate();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.raw_dim;
    let means: Vec<Vec<f64>> = (0..spec.identities)
        .map(|_| {
            random_direction(&mut rng, d)
                .into_iter()
                .map(|x| x * spec.separation)
                .collect()
        })
        .collect();
    let offsets: Vec<Vec<f64>> = (0..spec.cameras)
        .map(|_| {
            random_direction(&mut rng, d)
                .into_iter()
                .map(|x| x * spec.camera_offset)
                .collect()
        })
        .collect();
    let shift: Vec<f64> = if spec.domain_shift > 0.0 {
        random_direction(&mut rng, d)
            .into_iter()
            .map(|x| x * spec.domain_shift)
            .collect()
    } else {
        vec![0.0; d]
    };

    let n = spec.total_samples();
    let mut values = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    let mut row = 0;
    for identity in 0..spec.identities {
        for camera in 0..spec.cameras {
            for _ in 0..spec.samples_per_pair {
                for k in 0..d {
                    let noise: f64 = if spec.noise > 0.0 {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x * spec.noise
                    } else {
                        0.0
                    };
                    values[(row, k)] = means[identity][k] + offsets[camera][k] + shift[k] + noise;
                }
                labels.push(identity as i64);
                cameras.push(camera as u32);
                row += 1;
            }
        }
    }
    SyntheticDataset {
        features: EmbeddingMatrix::new(values).expect("finite by construction"),
        meta: SampleMeta::new(labels.clone(), cameras).unwrap(),
        ground_truth: labels,
    }
}
