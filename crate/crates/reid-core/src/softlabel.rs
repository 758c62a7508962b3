//! Soft pseudo-labels: centroid-distance assignment matrices and convex label
//! refinement.

use ndarray::Array2;

use crate::cluster::{CentroidSet, ClusterAssignment};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

/// N×L row-stochastic label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    values: Array2<f64>,
}

impl SoftLabelMatrix {
    /// Validates non-negativity and unit row sums (within 1e-9).
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for (i, row) in values.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row.iter() {
                if v.is_nan() || v < 0.0 {
                    return Err(Error::ShapeMismatch {
                        expected: "non-negative label weights".into(),
                        got: format!("row {i} holds {v}"),
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::ShapeMismatch {
                    expected: "rows summing to 1".into(),
                    got: format!("row {i} sums to {sum}"),
                });
            }
        }
        Ok(Self { values })
    }

    /// One-hot rows from hard cluster ids over `clusters` columns.
    pub fn one_hot(labels: &[usize], clusters: usize) -> Result<Self> {
        let mut values = Array2::zeros((labels.len(), clusters));
        for (i, &l) in labels.iter().enumerate() {
            if l >= clusters {
                return Err(Error::LabelOutOfRange { label: l as i64, classes: clusters });
            }
            values[(i, l)] = 1.0;
        }
        Ok(Self { values })
    }

    /// One-hot rows for the non-noise samples of an assignment, in ascending
    /// sample order.
    pub fn one_hot_from_assignment(assignment: &ClusterAssignment) -> Result<Self> {
        let labels: Vec<usize> = assignment.ids().iter().flatten().copied().collect();
        Self::one_hot(&labels, assignment.num_clusters())
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn clusters(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Sign convention for the centroid-distance softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum SoftAssignSign {
    /// `exp(−d/τ)`: nearer centroids weigh more.
    #[default]
    NegatedDistance,
    /// `exp(+d/τ)` as printed in the source formula; kept for comparison runs.
    PaperLiteral,
}

/// Softmax over (signed) Euclidean centroid distances:
/// `G[i][j] ∝ exp(−d_E(f_i, m_j)/τ)`, rows summing to 1.
pub fn soft_assignment_matrix(
    e: &EmbeddingMatrix,
    centroids: &CentroidSet,
    tau_refine: f64,
    sign: SoftAssignSign,
) -> SoftLabelMatrix {
    assert!(tau_refine > 0.0, "refinement temperature must be positive");
    let (n, l) = (e.n(), centroids.len());
    let mut values = Array2::zeros((n, l));
    for i in 0..n {
        let mut logits = vec![0.0; l];
        for (j, logit) in logits.iter_mut().enumerate() {
            let dist: f64 = e
                .row(i)
                .iter()
                .zip(centroids.means().row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            *logit = match sign {
                SoftAssignSign::NegatedDistance => -dist / tau_refine,
                SoftAssignSign::PaperLiteral => dist / tau_refine,
            };
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for logit in logits.iter_mut() {
            *logit = (*logit - max).exp();
            sum += *logit;
        }
        for (j, logit) in logits.iter().enumerate() {
            values[(i, j)] = logit / sum;
        }
    }
    SoftLabelMatrix { values }
}

/// Convex refinement `ŷ = (1−α)·y + α·G` row by row.
pub fn refine_labels(
    hard: &SoftLabelMatrix,
    g: &SoftLabelMatrix,
    alpha: f64,
) -> Result<SoftLabelMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    if hard.values.dim() != g.values.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", hard.values.dim()),
            got: format!("{:?}", g.values.dim()),
        });
    }
    let values = &hard.values * (1.0 - alpha) + &g.values * alpha;
    Ok(SoftLabelMatrix { values })
}
