//! Embedding storage, normalization, pairwise distances, and batch sampling.
//!
//! An [`EmbeddingMatrix`] is the universal carrier for per-sample feature
//! vectors; [`SampleMeta`] pairs it with identity labels and camera ids.
//! All arithmetic is 64-bit.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::parallel::{for_each_row, Par};

/// Identity label value marking an unlabeled sample.
pub const UNKNOWN_LABEL: i64 = -1;

/// Row norms below this are treated as zero vectors.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Tolerance for the `normalized` invariant (unit row norms).
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// N×D feature matrix, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Wraps a matrix, rejecting non-finite entries.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for ((r, c), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
        Ok(Self { values, normalized: false })
    }

    /// Builds from a flat row-major buffer.
    pub fn from_flat(n: usize, d: usize, flat: Vec<f64>) -> Result<Self> {
        let values = Array2::from_shape_vec((n, d), flat).map_err(|_| Error::ShapeMismatch {
            expected: format!("{n}x{d}"),
            got: "flat buffer of wrong length".into(),
        })?;
        Self::new(values)
    }

    /// Builds from per-row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_flat(rows.len(), d, flat)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Marks the matrix as unit-normalized after verifying every row norm.
    pub fn assert_normalized(mut self) -> Result<Self> {
        for i in 0..self.n() {
            let norm = row_norm(self.values.row(i));
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { row: i, norm });
            }
        }
        self.normalized = true;
        Ok(self)
    }

    /// Copies out the rows at `indices` (meta stays the caller's problem).
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut out = Array2::zeros((indices.len(), d));
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).assign(&self.values.row(src));
        }
        Self { values: out, normalized: self.normalized }
    }

    pub(crate) fn from_parts(values: Array2<f64>, normalized: bool) -> Self {
        Self { values, normalized }
    }
}

/// Per-sample identity labels and camera ids paired with an embedding matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    labels: Vec<i64>,
    cameras: Vec<u32>,
}

impl SampleMeta {
    pub fn new(labels: Vec<i64>, cameras: Vec<u32>) -> Result<Self> {
        if labels.len() != cameras.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", cameras.len()),
                got: format!("{} labels", labels.len()),
            });
        }
        Ok(Self { labels, cameras })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn cameras(&self) -> &[u32] {
        &self.cameras
    }

    pub fn label(&self, i: usize) -> i64 {
        self.labels[i]
    }

    pub fn camera(&self, i: usize) -> u32 {
        self.cameras[i]
    }

    /// Groups sample indices by known (non-UNKNOWN) label, ordered by label.
    pub fn known_label_groups(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != UNKNOWN_LABEL {
                groups.entry(l).or_default().push(i);
            }
        }
        groups
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            cameras: indices.iter().map(|&i| self.cameras[i]).collect(),
        }
    }
}

/// Distance metric tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Metric {
    Euclidean,
    SquaredEuclidean,
    /// `1 − cos(u, v)`, rows normalized inside the metric.
    CosineDistance,
    /// Set-overlap distance produced by k-reciprocal re-ranking; not a
    /// row-wise metric and rejected by [`pairwise_distances`].
    Jaccard,
}

/// rows×cols distance matrix with the metric it was computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
    metric: Metric,
}

impl DistanceMatrix {
    pub fn new(values: Array2<f64>, metric: Metric) -> Self {
        Self { values, metric }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }
}

fn row_norm(row: ArrayView1<'_, f64>) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales every row to unit L2 norm, preserving direction.
pub fn l2_normalize(e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = e.values().clone();
    for i in 0..out.nrows() {
        let norm = row_norm(out.row(i));
        if norm < ZERO_NORM_EPS {
            return Err(Error::ZeroRow(i));
        }
        out.row_mut(i).mapv_inplace(|v| v / norm);
    }
    Ok(EmbeddingMatrix::from_parts(out, true))
}

/// Backpropagates through row-wise L2 normalization.
///
/// Given the pre-normalization rows `x` and the gradient `g` with respect to
/// the normalized rows `x̂ = x/‖x‖`, returns the gradient with respect to `x`:
/// `(g − (g·x̂) x̂) / ‖x‖`.
pub fn l2_normalize_backward(x: &EmbeddingMatrix, grad_normalized: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.values().raw_dim());
    for i in 0..x.n() {
        let row = x.row(i);
        let norm = row_norm(row).max(ZERO_NORM_EPS);
        let g = grad_normalized.row(i);
        let dot: f64 = g
            .iter()
            .zip(row.iter())
            .map(|(gv, xv)| gv * xv / norm)
            .sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (g[j] - dot * row[j] / norm) / norm;
        }
    }
    out
}

fn metric_entry(metric: Metric, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, na: f64, nb: f64) -> f64 {
    match metric {
        Metric::Euclidean | Metric::SquaredEuclidean => {
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                let diff = x - y;
                acc += diff * diff;
            }
            if metric == Metric::Euclidean {
                acc.sqrt()
            } else {
                acc
            }
        }
        Metric::CosineDistance => {
            let mut dot = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                dot += x * y;
            }
            let d = 1.0 - dot / (na.max(ZERO_NORM_EPS) * nb.max(ZERO_NORM_EPS));
            d.clamp(0.0, 2.0)
        }
        Metric::Jaccard => panic!("Jaccard distances come from re-ranking, not row pairs"),
    }
}

fn pairwise_impl(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    metric: Metric,
    mode: Par,
) -> Result<DistanceMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch { left: a.dim(), right: b.dim() });
    }
    let (rows, cols) = (a.n(), b.n());
    let same_source = std::ptr::eq(a, b);
    let norms_a: Vec<f64> = (0..rows).map(|i| row_norm(a.row(i))).collect();
    let norms_b: Vec<f64> = if same_source {
        norms_a.clone()
    } else {
        (0..cols).map(|j| row_norm(b.row(j))).collect()
    };
    let mut flat = vec![0.0f64; rows * cols];
    for_each_row(mode, &mut flat, cols.max(1), |i, out| {
        let ra = a.row(i);
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = if same_source && i == j {
                0.0
            } else {
                metric_entry(metric, ra, b.row(j), norms_a[i], norms_b[j])
            };
        }
    });
    let values = Array2::from_shape_vec((rows, cols), flat).expect("shape fixed above");
    Ok(DistanceMatrix::new(values, metric))
}

/// Pairwise distances between the rows of `a` and the rows of `b`.
pub fn pairwise_distances(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    metric: Metric,
) -> Result<DistanceMatrix> {
    pairwise_impl(a, b, metric, Par::Auto)
}

/// Sequential twin of [`pairwise_distances`]; bit-identical output.
pub fn pairwise_distances_seq(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    metric: Metric,
) -> Result<DistanceMatrix> {
    pairwise_impl(a, b, metric, Par::Never)
}

/// A P×K batch: `p` identities with `k` sample indices each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PKBatch {
    indices: Vec<usize>,
    p: usize,
    k: usize,
}

impl PKBatch {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Draws a P×K batch: `p` distinct identities, `k` samples per identity.
///
/// Within an identity, sampling is without replacement; identities holding
/// fewer than `k` samples are resampled with replacement.
pub fn pk_sample<R: Rng>(meta: &SampleMeta, p: usize, k: usize, rng: &mut R) -> Result<PKBatch> {
    let groups = meta.known_label_groups();
    if groups.len() < p {
        return Err(Error::InsufficientIdentities { required: p, available: groups.len() });
    }
    let labels: Vec<i64> = groups.keys().copied().collect();
    let chosen: Vec<i64> = labels.choose_multiple(rng, p).copied().collect();
    let mut indices = Vec::with_capacity(p * k);
    for label in chosen {
        let group = &groups[&label];
        if group.len() >= k {
            indices.extend(group.choose_multiple(rng, k).copied());
        } else {
            for _ in 0..k {
                indices.push(group[rng.gen_range(0..group.len())]);
            }
        }
    }
    Ok(PKBatch { indices, p, k })
}

/// Adds iid Gaussian(0, `sigma`²) noise per entry, re-normalizing when the
/// input was normalized. `sigma == 0` returns the input unchanged.
pub fn embed_augment<R: Rng>(e: &EmbeddingMatrix, sigma: f64, rng: &mut R) -> EmbeddingMatrix {
    assert!(sigma >= 0.0, "noise scale must be non-negative");
    if sigma == 0.0 {
        return e.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma checked above");
    let mut out = e.values().clone();
    for v in out.iter_mut() {
        *v += noise.sample(rng);
    }
    if e.is_normalized() {
        for i in 0..out.nrows() {
            let norm = row_norm(out.row(i)).max(ZERO_NORM_EPS);
            out.row_mut(i).mapv_inplace(|v| v / norm);
        }
    }
    EmbeddingMatrix::from_parts(out, e.is_normalized())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let e = emb(&[vec![3.0, 4.0]]);
        let n = l2_normalize(&e).unwrap();
        assert_abs_diff_eq!(n.values()[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n.values()[(0, 1)], 0.8, epsilon = 1e-15);
        assert!(n.is_normalized());
    }

    #[test]
    fn normalize_unit_row_is_identity() {
        let e = emb(&[vec![0.6, 0.8]]);
        let n = l2_normalize(&e).unwrap();
        assert_abs_diff_eq!(n.values()[(0, 0)], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(n.values()[(0, 1)], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let e = emb(&[vec![0.0, 0.0]]);
        assert!(matches!(l2_normalize(&e), Err(Error::ZeroRow(0))));
    }

    #[test]
    fn non_finite_rejected() {
        let r = EmbeddingMatrix::new(array![[1.0, f64::NAN]]);
        assert!(matches!(r, Err(Error::NonFinite { row: 0, col: 1 })));
    }

    #[test]
    fn normalization_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = random_matrix(&mut rng, 4, 5);
        let g = random_matrix(&mut rng, 4, 5);
        // scalar objective: sum(g ⊙ normalize(x))
        let objective = |x: &EmbeddingMatrix| -> f64 {
            let n = l2_normalize(x).unwrap();
            n.values().iter().zip(g.values().iter()).map(|(a, b)| a * b).sum()
        };
        let analytic = l2_normalize_backward(&e, g.values());
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..5 {
                let mut plus = e.clone();
                plus.values[(r, c)] += h;
                let mut minus = e.clone();
                minus.values[(r, c)] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert_abs_diff_eq!(analytic[(r, c)], fd, epsilon = 1e-6);
            }
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
        let flat: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        EmbeddingMatrix::from_flat(n, d, flat).unwrap()
    }

    #[test]
    fn self_distance_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_matrix(&mut rng, 6, 4);
        for metric in [Metric::Euclidean, Metric::SquaredEuclidean, Metric::CosineDistance] {
            let d = pairwise_distances(&e, &e, metric).unwrap();
            for i in 0..6 {
                assert_eq!(d.get(i, i), 0.0);
            }
        }
    }

    #[test]
    fn three_four_five_euclidean() {
        let a = emb(&[vec![0.0, 0.0]]);
        let b = emb(&[vec![3.0, 4.0]]);
        let d = pairwise_distances(&a, &b, Metric::Euclidean).unwrap();
        assert_abs_diff_eq!(d.get(0, 0), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 5, 3);
        let d = pairwise_distances(&a, &b, Metric::Euclidean).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let diff = a.values()[(i, k)] - b.values()[(j, k)];
                    acc += diff * diff;
                }
                assert!((d.get(i, j) - acc.sqrt()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn squared_equals_euclidean_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_matrix(&mut rng, 8, 5);
        let b = random_matrix(&mut rng, 7, 5);
        let de = pairwise_distances(&a, &b, Metric::Euclidean).unwrap();
        let ds = pairwise_distances(&a, &b, Metric::SquaredEuclidean).unwrap();
        for i in 0..8 {
            for j in 0..7 {
                let e2 = de.get(i, j) * de.get(i, j);
                let rel = (e2 - ds.get(i, j)).abs() / ds.get(i, j).max(1e-30);
                assert!(rel < 1e-9);
            }
        }
    }

    #[test]
    fn cosine_invariant_to_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_matrix(&mut rng, 4, 6);
        let scaled = EmbeddingMatrix::new(a.values() * 3.75).unwrap();
        let d1 = pairwise_distances(&a, &a, Metric::CosineDistance).unwrap();
        let d2 = pairwise_distances(&scaled, &scaled, Metric::CosineDistance).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(d1.get(i, j), d2.get(i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_paths_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = random_matrix(&mut rng, 20, 9);
        let b = random_matrix(&mut rng, 15, 9);
        for metric in [Metric::Euclidean, Metric::SquaredEuclidean, Metric::CosineDistance] {
            let p = pairwise_distances(&a, &b, metric).unwrap();
            let s = pairwise_distances_seq(&a, &b, metric).unwrap();
            assert_eq!(p.values(), s.values());
        }
    }

    #[test]
    fn dim_mismatch_detected() {
        let a = emb(&[vec![1.0, 2.0]]);
        let b = emb(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(
            pairwise_distances(&a, &b, Metric::Euclidean),
            Err(Error::DimMismatch { left: 2, right: 3 })
        ));
    }

    fn meta_two_labels() -> SampleMeta {
        SampleMeta::new(vec![0, 0, 0, 0, 1, 1, 1, 1], vec![0; 8]).unwrap()
    }

    #[test]
    fn pk_sample_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = pk_sample(&meta_two_labels(), 2, 2, &mut rng).unwrap();
        assert_eq!(batch.indices().len(), 4);
        let meta = meta_two_labels();
        let mut per_label = BTreeMap::new();
        for &i in batch.indices() {
            *per_label.entry(meta.label(i)).or_insert(0usize) += 1;
        }
        assert_eq!(per_label.len(), 2);
        assert!(per_label.values().all(|&c| c == 2));
    }

    #[test]
    fn pk_sample_deterministic_per_seed() {
        let meta = meta_two_labels();
        let a = pk_sample(&meta, 2, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = pk_sample(&meta, 2, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pk_sample_insufficient_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            pk_sample(&meta_two_labels(), 3, 2, &mut rng),
            Err(Error::InsufficientIdentities { required: 3, available: 2 })
        ));
    }

    #[test]
    fn pk_sample_small_identity_resamples_with_replacement() {
        let meta = SampleMeta::new(vec![0, 0, 7], vec![0, 0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = pk_sample(&meta, 2, 4, &mut rng).unwrap();
        assert_eq!(batch.indices().len(), 8);
        assert_eq!(batch.indices().iter().filter(|&&i| meta.label(i) == 7).count(), 4);
    }

    #[test]
    fn pk_cardinality_holds_over_many_seeds() {
        let labels: Vec<i64> = (0..40).map(|i| i % 5).collect();
        let meta = SampleMeta::new(labels, vec![0; 40]).unwrap();
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = pk_sample(&meta, 3, 4, &mut rng).unwrap();
            assert_eq!(batch.indices().len(), 12);
            let mut per_label: BTreeMap<i64, usize> = BTreeMap::new();
            for &i in batch.indices() {
                *per_label.entry(meta.label(i)).or_insert(0) += 1;
            }
            assert_eq!(per_label.len(), 3);
            assert!(per_label.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn augment_sigma_zero_is_bitwise_copy() {
        let e = emb(&[vec![1.0, 2.0, 3.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = embed_augment(&e, 0.0, &mut rng);
        assert_eq!(out.values(), e.values());
    }

    #[test]
    fn augment_reproducible_under_seed() {
        let e = emb(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]);
        let a = embed_augment(&e, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        let b = embed_augment(&e, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn augment_mean_perturbation_matches_chi_mean() {
        // ‖noise‖ follows a chi distribution; its mean is ≈ sigma·√D.
        let d = 16;
        let sigma = 0.1;
        let e = EmbeddingMatrix::from_flat(1, d, vec![0.5; d]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let out = embed_augment(&e, sigma, &mut rng);
            let diff: f64 = out
                .values()
                .iter()
                .zip(e.values().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += diff.sqrt();
        }
        let mean = total / draws as f64;
        let expected = sigma * (d as f64).sqrt();
        assert!((mean - expected).abs() / expected < 0.05, "mean {mean} vs {expected}");
    }

    #[test]
    fn augment_preserves_normalization() {
        let e = l2_normalize(&emb(&[vec![3.0, 4.0], vec![1.0, 1.0]])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = embed_augment(&e, 0.2, &mut rng);
        for i in 0..2 {
            assert_abs_diff_eq!(row_norm(out.row(i)), 1.0, epsilon = 1e-12);
        }
    }
}
