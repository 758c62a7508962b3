//! Momentum-updated memories: cluster centroids, per-camera proxies, and the
//! EMA teacher parameter vector.

use ndarray::{Array2, ArrayView1};
use std::collections::BTreeMap;

use crate::cluster::CentroidSet;
use crate::embedding::ZERO_NORM_EPS;
use crate::error::{Error, Result};

fn renormalize_row(row: &mut ndarray::ArrayViewMut1<'_, f64>) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(ZERO_NORM_EPS);
    row.mapv_inplace(|v| v / norm);
}

/// K×D cluster-centroid memory with momentum updates.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    centroids: Array2<f64>,
    momentum: f64,
    normalized: bool,
}

impl MemoryBank {
    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn centroid(&self, k: usize) -> ArrayView1<'_, f64> {
        self.centroids.row(k)
    }
}

/// Seeds a memory bank from fresh centroids; a re-clustering replaces the
/// bank wholesale by calling this again.
pub fn init_memory(centroids: &CentroidSet, momentum: f64, normalize: bool) -> Result<MemoryBank> {
    if centroids.is_empty() {
        return Err(Error::NoClusters);
    }
    assert!((0.0..=1.0).contains(&momentum));
    let mut rows = centroids.means().clone();
    if normalize {
        for mut row in rows.rows_mut() {
            renormalize_row(&mut row);
        }
    }
    Ok(MemoryBank { centroids: rows, momentum, normalized: normalize })
}

/// Momentum update of one centroid: `c ← m·c + (1−m)·q`, re-normalized when
/// the bank holds unit rows.
pub fn memory_update(bank: &mut MemoryBank, q: ArrayView1<'_, f64>, cluster_id: usize) -> Result<()> {
    if cluster_id >= bank.len() {
        return Err(Error::ClusterOutOfRange { id: cluster_id, clusters: bank.len() });
    }
    if q.len() != bank.dim() {
        return Err(Error::DimMismatch { left: q.len(), right: bank.dim() });
    }
    let m = bank.momentum;
    let mut row = bank.centroids.row_mut(cluster_id);
    for (c, qv) in row.iter_mut().zip(q.iter()) {
        *c = m * *c + (1.0 - m) * qv;
    }
    if bank.normalized {
        renormalize_row(&mut row);
    }
    Ok(())
}

/// (cluster, camera) → proxy-vector store with momentum updates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraProxyBank {
    proxies: Array2<f64>,
    index: BTreeMap<(usize, u32), usize>,
    per_cluster: Vec<Vec<usize>>,
    counts: Vec<usize>,
    momentum: f64,
    normalized: bool,
}

impl CameraProxyBank {
    pub(crate) fn from_parts(
        proxies: Array2<f64>,
        index: BTreeMap<(usize, u32), usize>,
        per_cluster: Vec<Vec<usize>>,
        counts: Vec<usize>,
    ) -> Self {
        Self { proxies, index, per_cluster, counts, momentum: 0.2, normalized: false }
    }

    /// Number of stored proxies across all clusters.
    pub fn len(&self) -> usize {
        self.proxies.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.proxies.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.proxies.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        assert!((0.0..=1.0).contains(&momentum));
        self.momentum = momentum;
        self
    }

    /// Re-normalizes every proxy row and keeps rows unit-norm across updates.
    pub fn normalized(mut self) -> Self {
        for mut row in self.proxies.rows_mut() {
            renormalize_row(&mut row);
        }
        self.normalized = true;
        self
    }

    pub fn proxy(&self, cluster: usize, camera: u32) -> Result<ArrayView1<'_, f64>> {
        let row = self
            .index
            .get(&(cluster, camera))
            .ok_or(Error::UnknownProxy { cluster, camera })?;
        Ok(self.proxies.row(*row))
    }

    pub fn proxy_row(&self, row: usize) -> ArrayView1<'_, f64> {
        self.proxies.row(row)
    }

    /// Proxy row ids of one cluster.
    pub fn cluster_proxies(&self, cluster: usize) -> &[usize] {
        &self.per_cluster[cluster]
    }

    pub fn clusters(&self) -> usize {
        self.per_cluster.len()
    }

    /// Member count behind each proxy row.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Iterates `((cluster, camera), proxy row id)` in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&(usize, u32), &usize)> {
        self.index.iter()
    }
}

/// Momentum update of the proxy addressed by (cluster, camera).
pub fn proxy_update(
    bank: &mut CameraProxyBank,
    q: ArrayView1<'_, f64>,
    cluster_id: usize,
    camera_id: u32,
) -> Result<()> {
    let row = *bank
        .index
        .get(&(cluster_id, camera_id))
        .ok_or(Error::UnknownProxy { cluster: cluster_id, camera: camera_id })?;
    if q.len() != bank.dim() {
        return Err(Error::DimMismatch { left: q.len(), right: bank.dim() });
    }
    let m = bank.momentum;
    let mut proxy = bank.proxies.row_mut(row);
    for (c, qv) in proxy.iter_mut().zip(q.iter()) {
        *c = m * *c + (1.0 - m) * qv;
    }
    if bank.normalized {
        renormalize_row(&mut proxy);
    }
    Ok(())
}

/// EMA shadow of a student parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    params: Vec<f64>,
    weight: f64,
}

impl TeacherState {
    /// Starts the teacher as a copy of the student.
    pub fn from_student(student: &[f64], weight: f64) -> Self {
        assert!((0.0..=1.0).contains(&weight));
        Self { params: student.to_vec(), weight }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }
}

/// EMA step `θ′ ← w·θ′ + (1−w)·θ`.
pub fn teacher_update(t: &mut TeacherState, student: &[f64]) -> Result<()> {
    if student.len() != t.params.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", t.params.len()),
            got: format!("{}", student.len()),
        });
    }
    let w = t.weight;
    for (p, s) in t.params.iter_mut().zip(student) {
        *p = w * *p + (1.0 - w) * s;
    }
    Ok(())
}
