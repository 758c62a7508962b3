//! k-reciprocal encoding and Jaccard-distance re-ranking.
//!
//! The fuzzy encoding follows the standard k-reciprocal recipe: mutual
//! k-nearest-neighbor sets, half-k1 candidate expansion, Gaussian-weighted
//! set vectors, k2 local query expansion, and a min/max Jaccard distance.
//! A literal hard-set mode computes `1 − |R(q)∩R(g)|/|R(q)∪R(g)|` over the
//! raw reciprocal sets and backs the oracle tests.

use ndarray::Array2;

use crate::embedding::{DistanceMatrix, EmbeddingMatrix, Metric};
use crate::error::{Error, Result};
use crate::parallel::{for_each_row, Par};

/// Re-ranking parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    /// Reciprocal neighborhood size.
    pub k1: usize,
    /// Local query-expansion size.
    pub k2: usize,
    /// Blend weight: `D_final = (1−λ)·D_J + λ·D_E`.
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { k1: 20, k2: 6, lambda: 0.3 }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        assert!(self.k1 >= self.k2 && self.k2 >= 1, "need k1 ≥ k2 ≥ 1");
        assert!((0.0..=1.0).contains(&self.lambda), "lambda must lie in [0, 1]");
        Ok(())
    }
}

/// Set encoding used by [`jaccard_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum JaccardEncoding {
    /// Soft-weighted reciprocal sets with candidate and query expansion.
    #[default]
    Fuzzy,
    /// Plain reciprocal sets compared as hard index sets.
    HardSet,
}

/// Jaccard distance between two hard index sets.
pub fn hard_set_jaccard(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<usize> = a.iter().copied().collect();
    let sb: BTreeSet<usize> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

struct NeighborTables {
    /// initial_rank[i]: all indices sorted by ascending distance to i
    /// (self first; ties by index).
    rank: Vec<Vec<u32>>,
    /// squared distances, row-normalized to [0, 1]
    dist: Array2<f64>,
}

fn neighbor_tables(all: &EmbeddingMatrix, mode: Par) -> NeighborTables {
    let n = all.n();
    let dist = if mode == Par::Never {
        crate::embedding::pairwise_distances_seq(all, all, Metric::SquaredEuclidean)
    } else {
        crate::embedding::pairwise_distances(all, all, Metric::SquaredEuclidean)
    }
    .expect("same matrix twice always has matching dims")
    .values()
    .clone();

    let mut normalized = vec![0.0f64; n * n];
    for_each_row(mode, &mut normalized, n.max(1), |i, row| {
        let mut max = 0.0f64;
        for j in 0..n {
            max = max.max(dist[(i, j)]);
        }
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = dist[(i, j)] * scale;
        }
    });
    let normalized = Array2::from_shape_vec((n, n), normalized).expect("shape fixed");

    let mut rank: Vec<Vec<u32>> = vec![Vec::new(); n];
    for_each_row(mode, &mut rank, 1, |i, slot| {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| {
            normalized[(i, a as usize)]
                .partial_cmp(&normalized[(i, b as usize)])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        slot[0] = order;
    });
    NeighborTables { rank, dist: normalized }
}

fn forward_neighbors(tables: &NeighborTables, i: usize, k: usize) -> &[u32] {
    &tables.rank[i][..(k + 1).min(tables.rank[i].len())]
}

/// Mutual k-nearest neighbors of `i` (both lists include self).
fn reciprocal_set(tables: &NeighborTables, i: usize, k: usize) -> Vec<u32> {
    forward_neighbors(tables, i, k)
        .iter()
        .copied()
        .filter(|&j| forward_neighbors(tables, j as usize, k).contains(&(i as u32)))
        .collect()
}

fn expanded_reciprocal_set(tables: &NeighborTables, i: usize, k1: usize) -> Vec<u32> {
    let base = reciprocal_set(tables, i, k1);
    // TODO: cache the half-k1 reciprocal sets; each is recomputed for every
    // anchor whose base set contains that sample.
    let half = ((k1 as f64) / 2.0).round() as usize;
    let mut expanded: Vec<u32> = base.clone();
    for &j in &base {
        let candidate = reciprocal_set(tables, j as usize, half);
        let overlap = candidate.iter().filter(|c| base.contains(c)).count();
        if 3 * overlap > 2 * candidate.len() {
            for c in candidate {
                if !expanded.contains(&c) {
                    expanded.push(c);
                }
            }
        }
    }
    expanded.sort_unstable();
    expanded
}

fn jaccard_impl(
    all: &EmbeddingMatrix,
    num_query: usize,
    square: bool,
    cfg: &RerankConfig,
    encoding: JaccardEncoding,
    mode: Par,
) -> Result<DistanceMatrix> {
    cfg.validate()?;
    let n = all.n();
    if n < cfg.k1 + 1 {
        return Err(Error::InsufficientSamples { required: cfg.k1 + 1, got: n });
    }
    assert!(num_query <= n, "query count exceeds the stacked sample count");
    // square mode: every sample is both query and gallery (self-clustering)
    let (num_query, gallery_base, ng) = if square {
        (n, 0, n)
    } else {
        (num_query, num_query, n - num_query)
    };
    let tables = neighbor_tables(all, mode);

    if encoding == JaccardEncoding::HardSet {
        let sets: Vec<Vec<u32>> = {
            let mut sets: Vec<Vec<u32>> = vec![Vec::new(); n];
            for_each_row(mode, &mut sets, 1, |i, slot| {
                slot[0] = reciprocal_set(&tables, i, cfg.k1);
            });
            sets
        };
        let mut flat = vec![0.0f64; num_query * ng];
        for_each_row(mode, &mut flat, ng.max(1), |q, row| {
            let sq: Vec<usize> = sets[q].iter().map(|&v| v as usize).collect();
            for (g, slot) in row.iter_mut().enumerate() {
                let sg: Vec<usize> =
                    sets[gallery_base + g].iter().map(|&v| v as usize).collect();
                *slot = hard_set_jaccard(&sq, &sg);
            }
        });
        let values = Array2::from_shape_vec((num_query, ng), flat).expect("shape fixed");
        return Ok(DistanceMatrix::new(values, Metric::Jaccard));
    }

    // fuzzy encoding: per-sample weight vector over its expanded set
    let mut weights: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for_each_row(mode, &mut weights, 1, |i, slot| {
        let set = expanded_reciprocal_set(&tables, i, cfg.k1);
        let mut w: Vec<(u32, f64)> = set
            .iter()
            .map(|&j| (j, (-tables.dist[(i, j as usize)]).exp()))
            .collect();
        let sum: f64 = w.iter().map(|(_, v)| v).sum();
        for (_, v) in w.iter_mut() {
            *v /= sum;
        }
        slot[0] = w;
    });

    // local query expansion: average the weight vectors of the k2 nearest
    let expanded: Vec<Vec<(u32, f64)>> = if cfg.k2 > 1 {
        let mut out: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for_each_row(mode, &mut out, 1, |i, slot| {
            let neighbors = &tables.rank[i][..cfg.k2.min(n)];
            let mut dense = vec![0.0f64; n];
            for &j in neighbors {
                for &(idx, v) in &weights[j as usize] {
                    dense[idx as usize] += v;
                }
            }
            let scale = 1.0 / neighbors.len() as f64;
            slot[0] = dense
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(idx, &v)| (idx as u32, v * scale))
                .collect();
        });
        out
    } else {
        weights
    };

    let mut flat = vec![0.0f64; num_query * ng];
    for_each_row(mode, &mut flat, ng.max(1), |q, row| {
        let mut dense_q = vec![0.0f64; n];
        for &(idx, v) in &expanded[q] {
            dense_q[idx as usize] = v;
        }
        for (g, slot) in row.iter_mut().enumerate() {
            let mut min_sum = 0.0;
            let mut max_sum: f64 = dense_q.iter().sum();
            for &(idx, v) in &expanded[gallery_base + g] {
                let qv = dense_q[idx as usize];
                min_sum += qv.min(v);
                max_sum += v - qv.min(v);
            }
            *slot = if max_sum > 0.0 { 1.0 - min_sum / max_sum } else { 0.0 };
        }
    });
    let values = Array2::from_shape_vec((num_query, ng), flat).expect("shape fixed");
    Ok(DistanceMatrix::new(values, Metric::Jaccard))
}

/// Jaccard distance between the first `num_query` rows (queries) and the
/// remaining rows (gallery) of a stacked feature matrix.
pub fn jaccard_distance(
    all_features: &EmbeddingMatrix,
    num_query: usize,
    cfg: &RerankConfig,
    encoding: JaccardEncoding,
) -> Result<DistanceMatrix> {
    jaccard_impl(all_features, num_query, false, cfg, encoding, Par::Auto)
}

/// Sequential twin of [`jaccard_distance`]; bit-identical output.
pub fn jaccard_distance_seq(
    all_features: &EmbeddingMatrix,
    num_query: usize,
    cfg: &RerankConfig,
    encoding: JaccardEncoding,
) -> Result<DistanceMatrix> {
    jaccard_impl(all_features, num_query, false, cfg, encoding, Par::Never)
}

/// Square N×N Jaccard distance over one feature set, as used when clustering
/// on re-ranked distances.
pub fn jaccard_distance_matrix(
    all_features: &EmbeddingMatrix,
    cfg: &RerankConfig,
    encoding: JaccardEncoding,
) -> Result<DistanceMatrix> {
    jaccard_impl(all_features, 0, true, cfg, encoding, Par::Auto)
}

/// Final re-ranked distance: `D = (1−λ)·D_J + λ·D_E`, entrywise.
pub fn rerank_final(
    d_jaccard: &DistanceMatrix,
    d_euclid: &DistanceMatrix,
    lambda: f64,
) -> Result<DistanceMatrix> {
    assert!((0.0..=1.0).contains(&lambda));
    if d_jaccard.values().dim() != d_euclid.values().dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", d_jaccard.values().dim()),
            got: format!("{:?}", d_euclid.values().dim()),
        });
    }
    let values = d_jaccard.values() * (1.0 - lambda) + d_euclid.values() * lambda;
    Ok(DistanceMatrix::new(values, Metric::Jaccard))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hard_set_hand_values() {
        assert_eq!(hard_set_jaccard(&[1, 2, 3], &[1, 2, 3]), 0.0);
        assert_eq!(hard_set_jaccard(&[1, 2], &[3, 4]), 1.0);
        // |∩| = 1, |∪| = 3 → 1 − 1/3 = 2/3
        assert_abs_diff_eq!(hard_set_jaccard(&[1, 2], &[2, 3]), 2.0 / 3.0, epsilon = 1e-15);
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
        let flat: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        EmbeddingMatrix::from_flat(n, d, flat).unwrap()
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = random_features(&mut rng, 5, 3);
        let cfg = RerankConfig { k1: 5, k2: 2, lambda: 0.3 };
        assert!(matches!(
            jaccard_distance(&all, 2, &cfg, JaccardEncoding::Fuzzy),
            Err(Error::InsufficientSamples { required: 6, got: 5 })
        ));
    }

    #[test]
    fn identical_points_have_zero_jaccard() {
        // queries coincide with part of the gallery: reciprocal sets coincide
        let mut rows = vec![vec![0.0, 0.0]; 4];
        rows.extend(vec![vec![5.0, 5.0]; 4]);
        let all = EmbeddingMatrix::from_rows(&rows).unwrap();
        let cfg = RerankConfig { k1: 3, k2: 1, lambda: 0.3 };
        let d = jaccard_distance(&all, 2, &cfg, JaccardEncoding::HardSet).unwrap();
        // query 0 and gallery row 0/1 (same point cloud) share sets → 0
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(0, 1), 0.0);
        // far-away cluster → disjoint sets → 1
        assert_eq!(d.get(0, 2), 1.0);
        assert_eq!(d.get(0, 3), 1.0);
    }

    #[test]
    fn fuzzy_jaccard_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let all = random_features(&mut rng, 40, 4);
        let cfg = RerankConfig { k1: 8, k2: 3, lambda: 0.3 };
        let d = jaccard_distance(&all, 15, &cfg, JaccardEncoding::Fuzzy).unwrap();
        for v in d.values().iter() {
            assert!((0.0..=1.0 + 1e-12).contains(v));
        }
    }

    #[test]
    fn parallel_and_sequential_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let all = random_features(&mut rng, 30, 5);
        let cfg = RerankConfig { k1: 6, k2: 2, lambda: 0.3 };
        for encoding in [JaccardEncoding::Fuzzy, JaccardEncoding::HardSet] {
            let p = jaccard_distance(&all, 10, &cfg, encoding).unwrap();
            let s = jaccard_distance_seq(&all, 10, &cfg, encoding).unwrap();
            assert_eq!(p.values(), s.values());
        }
    }

    #[test]
    fn blend_endpoints_and_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dj = DistanceMatrix::new(
            Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.0..1.0)),
            Metric::Jaccard,
        );
        let de = DistanceMatrix::new(
            Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.0..4.0)),
            Metric::Euclidean,
        );
        let pure_e = rerank_final(&dj, &de, 1.0).unwrap();
        assert_eq!(pure_e.values(), de.values());
        let pure_j = rerank_final(&dj, &de, 0.0).unwrap();
        assert_eq!(pure_j.values(), dj.values());
        let mid = rerank_final(&dj, &de, 0.3).unwrap();
        for ((i, j), v) in mid.values().indexed_iter() {
            let lo = dj.get(i, j).min(de.get(i, j));
            let hi = dj.get(i, j).max(de.get(i, j));
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}
