//! Density-based clustering and cluster-level statistics: DBSCAN, centroids,
//! silhouette-filtered centroids, and per-camera sub-cluster proxies.

use ndarray::Array2;
use std::collections::{BTreeMap, VecDeque};

use crate::embedding::{EmbeddingMatrix, Metric, SampleMeta};
use crate::error::{Error, Result};
use crate::memory::CameraProxyBank;
use crate::parallel::{for_each_row, Par};
use crate::silhouette::SilhouetteVector;

/// Per-sample cluster membership; `None` marks DBSCAN noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    ids: Vec<Option<usize>>,
    num_clusters: usize,
}

impl ClusterAssignment {
    /// Wraps raw ids, verifying they form the contiguous range `[0, L)` with
    /// every cluster non-empty.
    pub fn new(ids: Vec<Option<usize>>, num_clusters: usize) -> Result<Self> {
        let mut seen = vec![false; num_clusters];
        for id in ids.iter().flatten() {
            if *id >= num_clusters {
                return Err(Error::ClusterOutOfRange { id: *id, clusters: num_clusters });
            }
            seen[*id] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::EmptyClustering);
        }
        Ok(Self { ids, num_clusters })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.ids[i]
    }

    pub fn ids(&self) -> &[Option<usize>] {
        &self.ids
    }

    pub fn noise_count(&self) -> usize {
        self.ids.iter().filter(|id| id.is_none()).count()
    }

    /// Sample indices of each cluster, ascending within a cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, id) in self.ids.iter().enumerate() {
            if let Some(c) = id {
                out[*c].push(i);
            }
        }
        out
    }

    pub fn non_noise_indices(&self) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.ids[i].is_some()).collect()
    }
}

/// DBSCAN parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub epsilon: f64,
    pub min_pts: usize,
    pub metric: Metric,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { epsilon: 0.6, min_pts: 8, metric: Metric::Euclidean }
    }
}

fn neighbor_lists(e: &EmbeddingMatrix, cfg: &ClusterConfig, mode: Par) -> Vec<Vec<usize>> {
    let n = e.n();
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
    for_each_row(mode, &mut lists, 1, |i, slot| {
        let mut neigh = Vec::new();
        let ri = e.row(i);
        for j in 0..n {
            let dist = match cfg.metric {
                Metric::Euclidean => ri
                    .iter()
                    .zip(e.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                Metric::SquaredEuclidean => ri
                    .iter()
                    .zip(e.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
                Metric::CosineDistance => {
                    let dot: f64 = ri.iter().zip(e.row(j).iter()).map(|(a, b)| a * b).sum();
                    let na = ri.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let nb = e.row(j).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
                }
                Metric::Jaccard => panic!("clustering requires a row-wise metric"),
            };
            if dist <= cfg.epsilon {
                neigh.push(j);
            }
        }
        slot[0] = neigh;
    });
    lists
}

fn dbscan_from_neighbors(n: usize, neighbors: &[Vec<usize>], min_pts: usize) -> ClusterAssignment {
    let core: Vec<bool> = neighbors.iter().map(|l| l.len() >= min_pts).collect();

    // classic scan in ascending index order; the ε-neighborhood includes the
    // point itself when counted against minPts
    let mut ids: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0;
    for start in 0..n {
        if visited[start] || !core[start] {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        visited[start] = true;
        ids[start] = Some(cluster);
        let mut queue: VecDeque<usize> = neighbors[start].iter().copied().collect();
        while let Some(q) = queue.pop_front() {
            if visited[q] {
                continue;
            }
            visited[q] = true;
            ids[q] = Some(cluster);
            if core[q] {
                queue.extend(neighbors[q].iter().copied());
            }
        }
    }
    ClusterAssignment { ids, num_clusters: next_cluster }
}

fn dbscan_impl(e: &EmbeddingMatrix, cfg: &ClusterConfig, mode: Par) -> ClusterAssignment {
    let neighbors = neighbor_lists(e, cfg, mode);
    dbscan_from_neighbors(e.n(), &neighbors, cfg.min_pts)
}

/// Classic DBSCAN: core points have at least `min_pts` neighbors within ε
/// (themselves included), border points are reachable from a core, everything
/// else is noise. Expansion order is ascending index, so the result is
/// deterministic.
pub fn dbscan(e: &EmbeddingMatrix, cfg: &ClusterConfig) -> ClusterAssignment {
    dbscan_impl(e, cfg, Par::Auto)
}

/// Sequential twin of [`dbscan`]; identical output.
pub fn dbscan_seq(e: &EmbeddingMatrix, cfg: &ClusterConfig) -> ClusterAssignment {
    dbscan_impl(e, cfg, Par::Never)
}

/// DBSCAN over a precomputed square distance matrix (for example, Jaccard
/// re-ranked distances). Same conventions as [`dbscan`].
pub fn dbscan_precomputed(dist: &crate::embedding::DistanceMatrix, cfg: &ClusterConfig) -> ClusterAssignment {
    let n = dist.rows();
    assert_eq!(dist.cols(), n, "precomputed DBSCAN needs a square matrix");
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for_each_row(Par::Auto, &mut neighbors, 1, |i, slot| {
        slot[0] = (0..n).filter(|&j| dist.get(i, j) <= cfg.epsilon).collect();
    });
    dbscan_from_neighbors(n, &neighbors, cfg.min_pts)
}

/// L×D matrix of cluster centroids with contributing-member counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    means: Array2<f64>,
    counts: Vec<usize>,
}

impl CentroidSet {
    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

}

fn mean_of(e: &EmbeddingMatrix, members: &[usize]) -> Vec<f64> {
    let d = e.dim();
    let mut acc = vec![0.0; d];
    for &i in members {
        for k in 0..d {
            acc[k] += e.values()[(i, k)];
        }
    }
    for v in acc.iter_mut() {
        *v /= members.len() as f64;
    }
    acc
}

/// Arithmetic mean of each cluster's member rows; noise rows are excluded.
pub fn centroids(e: &EmbeddingMatrix, assignment: &ClusterAssignment) -> Result<CentroidSet> {
    if assignment.num_clusters() == 0 {
        return Err(Error::NoClusters);
    }
    let members = assignment.members();
    let mut means = Array2::zeros((assignment.num_clusters(), e.dim()));
    let mut counts = Vec::with_capacity(assignment.num_clusters());
    for (c, m) in members.iter().enumerate() {
        let mean = mean_of(e, m);
        for (k, v) in mean.iter().enumerate() {
            means[(c, k)] = *v;
        }
        counts.push(m.len());
    }
    Ok(CentroidSet { means, counts })
}

/// Centroids restricted to members whose silhouette exceeds the threshold.
///
/// A cluster whose members are all filtered out falls back to its unfiltered
/// centroid, so downstream soft labels can still index every cluster.
pub fn confident_centroids(
    e: &EmbeddingMatrix,
    assignment: &ClusterAssignment,
    s: &SilhouetteVector,
    sigma_threshold: f64,
) -> Result<CentroidSet> {
    if assignment.num_clusters() == 0 {
        return Err(Error::NoClusters);
    }
    let members = assignment.members();
    let mut means = Array2::zeros((assignment.num_clusters(), e.dim()));
    let mut counts = Vec::with_capacity(assignment.num_clusters());
    for (c, m) in members.iter().enumerate() {
        let confident: Vec<usize> = m
            .iter()
            .copied()
            .filter(|&i| s.get(i).is_some_and(|si| si > sigma_threshold))
            .collect();
        let chosen = if confident.is_empty() { m.as_slice() } else { &confident };
        let mean = mean_of(e, chosen);
        for (k, v) in mean.iter().enumerate() {
            means[(c, k)] = *v;
        }
        counts.push(chosen.len());
    }
    Ok(CentroidSet { means, counts })
}

/// Splits every cluster by camera and stores the mean feature of each
/// (cluster, camera) group as that group's proxy.
pub fn camera_subclusters(
    e: &EmbeddingMatrix,
    assignment: &ClusterAssignment,
    meta: &SampleMeta,
) -> Result<CameraProxyBank> {
    if assignment.num_clusters() == 0 {
        return Err(Error::NoClusters);
    }
    let mut groups: BTreeMap<(usize, u32), Vec<usize>> = BTreeMap::new();
    for i in 0..assignment.len() {
        if let Some(c) = assignment.get(i) {
            groups.entry((c, meta.camera(i))).or_default().push(i);
        }
    }
    let mut proxies = Array2::zeros((groups.len(), e.dim()));
    let mut index = BTreeMap::new();
    let mut per_cluster = vec![Vec::new(); assignment.num_clusters()];
    let mut counts = Vec::with_capacity(groups.len());
    for (row, ((cluster, camera), members)) in groups.iter().enumerate() {
        let mean = mean_of(e, members);
        for (k, v) in mean.iter().enumerate() {
            proxies[(row, k)] = *v;
        }
        index.insert((*cluster, *camera), row);
        per_cluster[*cluster].push(row);
        counts.push(members.len());
    }
    Ok(CameraProxyBank::from_parts(proxies, index, per_cluster, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn emb(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn cfg(epsilon: f64, min_pts: usize) -> ClusterConfig {
        ClusterConfig { epsilon, min_pts, metric: Metric::Euclidean }
    }

    #[test]
    fn one_dimensional_hand_trace() {
        let e = emb(&[vec![0.0], vec![0.1], vec![5.0]]);
        let a = dbscan(&e, &cfg(0.5, 2));
        assert_eq!(a.num_clusters(), 1);
        assert_eq!(a.get(0), Some(0));
        assert_eq!(a.get(1), Some(0));
        assert_eq!(a.get(2), None);
    }

    #[test]
    fn min_pts_one_leaves_no_noise() {
        let e = emb(&[vec![0.0], vec![10.0], vec![20.0]]);
        let a = dbscan(&e, &cfg(0.5, 1));
        assert_eq!(a.noise_count(), 0);
        assert_eq!(a.num_clusters(), 3);
    }

    #[test]
    fn parallel_and_sequential_identical() {
        let e = emb(&[
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.2, 0.1],
            vec![5.0, 5.0],
            vec![5.1, 5.0],
            vec![9.0, -3.0],
        ]);
        let p = dbscan(&e, &cfg(0.3, 2));
        let s = dbscan_seq(&e, &cfg(0.3, 2));
        assert_eq!(p, s);
    }

    #[test]
    fn centroid_hand_values() {
        let e = emb(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![9.0, 9.0]]);
        let a = ClusterAssignment::new(vec![Some(0), Some(0), Some(1)], 2).unwrap();
        let c = centroids(&e, &a).unwrap();
        assert_eq!(c.means()[(0, 0)], 1.0);
        assert_eq!(c.means()[(0, 1)], 0.0);
        assert_eq!(c.means()[(1, 0)], 9.0);
        assert_eq!(c.counts(), &[2, 1]);
    }

    #[test]
    fn centroid_conservation() {
        let e = emb(&[
            vec![0.5, 1.0],
            vec![2.0, -1.0],
            vec![9.0, 9.0],
            vec![3.0, 3.0],
            vec![-4.0, 0.5],
        ]);
        let a = ClusterAssignment::new(
            vec![Some(0), Some(0), Some(1), Some(1), None],
            2,
        )
        .unwrap();
        let c = centroids(&e, &a).unwrap();
        for k in 0..2 {
            let weighted: f64 = (0..2)
                .map(|cl| c.means()[(cl, k)] * c.counts()[cl] as f64)
                .sum();
            let direct: f64 = [0, 1, 2, 3].iter().map(|&i| e.values()[(i, k)]).sum();
            assert_abs_diff_eq!(weighted, direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn confident_centroids_filter_and_fallback() {
        let e = emb(&[vec![0.0, 0.0], vec![10.0, 0.0]]);
        let a = ClusterAssignment::new(vec![Some(0), Some(0)], 1).unwrap();
        let s = SilhouetteVector::new(vec![Some(0.9), Some(-0.5)]);
        let filtered = confident_centroids(&e, &a, &s, 0.0).unwrap();
        assert_eq!(filtered.means()[(0, 0)], 0.0);
        assert_eq!(filtered.counts(), &[1]);
        // threshold −1 keeps everything
        let all = confident_centroids(&e, &a, &s, -1.0).unwrap();
        let plain = centroids(&e, &a).unwrap();
        assert_eq!(all.means(), plain.means());
        // all members filtered: fall back to the plain centroid
        let none = SilhouetteVector::new(vec![Some(-0.9), Some(-0.5)]);
        let fallback = confident_centroids(&e, &a, &none, 0.0).unwrap();
        assert_eq!(fallback.means(), plain.means());
        assert_eq!(fallback.counts(), &[2]);
    }

    #[test]
    fn camera_proxies_hand_mean() {
        let e = emb(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 8.0]]);
        let meta = SampleMeta::new(vec![0, 0, 0], vec![1, 1, 2]).unwrap();
        let a = ClusterAssignment::new(vec![Some(0), Some(0), Some(0)], 1).unwrap();
        let bank = camera_subclusters(&e, &a, &meta).unwrap();
        assert_eq!(bank.len(), 2);
        let cam1 = bank.proxy(0, 1).unwrap();
        assert_eq!(cam1.to_vec(), vec![2.0, 0.0]);
        let cam2 = bank.proxy(0, 2).unwrap();
        assert_eq!(cam2.to_vec(), vec![0.0, 8.0]);
    }

    #[test]
    fn single_camera_proxies_collapse_to_centroids() {
        let e = emb(&[vec![1.0], vec![3.0], vec![10.0]]);
        let meta = SampleMeta::new(vec![0, 0, 0], vec![0, 0, 0]).unwrap();
        let a = ClusterAssignment::new(vec![Some(0), Some(0), Some(1)], 2).unwrap();
        let bank = camera_subclusters(&e, &a, &meta).unwrap();
        let cents = centroids(&e, &a).unwrap();
        for c in 0..2 {
            assert_eq!(bank.proxy(c, 0).unwrap().to_vec(), cents.means().row(c).to_vec());
        }
    }
}
