//! Per-sample silhouette scores used to filter unreliable cluster members.

use crate::cluster::ClusterAssignment;
use crate::embedding::DistanceMatrix;
use crate::error::{Error, Result};
use crate::parallel::{for_each_row, Par};

/// Per-sample silhouette values in [−1, 1]; noise samples and members of
/// singleton clusters carry no value.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteVector {
    values: Vec<Option<f64>>,
}

impl SilhouetteVector {
    pub fn new(values: Vec<Option<f64>>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.values[i]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    /// Mean over the defined entries; `None` when nothing is defined.
    pub fn mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.values.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

fn silhouette_impl(
    dist: &DistanceMatrix,
    assignment: &ClusterAssignment,
    mode: Par,
) -> Result<SilhouetteVector> {
    let n = dist.rows();
    if dist.cols() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", dist.rows(), dist.cols()),
        });
    }
    if assignment.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} assignments"),
            got: format!("{}", assignment.len()),
        });
    }
    if assignment.num_clusters() < 2 {
        return Err(Error::FewerThanTwoClusters);
    }
    let members = assignment.members();
    let mut values: Vec<Option<f64>> = vec![None; n];
    for_each_row(mode, &mut values, 1, |i, slot| {
        let Some(own) = assignment.get(i) else {
            return;
        };
        if members[own].len() < 2 {
            return;
        }
        // a_i: mean distance to same-cluster others
        let mut a = 0.0;
        for &j in &members[own] {
            if j != i {
                a += dist.get(i, j);
            }
        }
        a /= (members[own].len() - 1) as f64;
        // b_i: smallest mean distance to another cluster
        let mut b = f64::INFINITY;
        for (c, m) in members.iter().enumerate() {
            if c == own || m.is_empty() {
                continue;
            }
            let mut mean = 0.0;
            for &j in m {
                mean += dist.get(i, j);
            }
            mean /= m.len() as f64;
            b = b.min(mean);
        }
        let denom = a.max(b);
        slot[0] = Some(if denom <= 0.0 { 0.0 } else { (b - a) / denom });
    });
    Ok(SilhouetteVector { values })
}

/// Silhouette per sample: `s = (b − a)/max(a, b)` with `a` the mean
/// within-cluster distance and `b` the mean distance to the nearest other
/// cluster. Requires a square, zero-diagonal distance matrix and at least two
/// clusters.
pub fn silhouette(dist: &DistanceMatrix, assignment: &ClusterAssignment) -> Result<SilhouetteVector> {
    silhouette_impl(dist, assignment, Par::Auto)
}

/// Sequential twin of [`silhouette`]; bit-identical output.
pub fn silhouette_seq(
    dist: &DistanceMatrix,
    assignment: &ClusterAssignment,
) -> Result<SilhouetteVector> {
    silhouette_impl(dist, assignment, Par::Never)
}
