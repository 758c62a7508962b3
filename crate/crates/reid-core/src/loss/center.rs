//! Center loss and the SGD step that maintains the per-class centers.

use ndarray::Array2;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::loss::{roles, LossOutput};

/// Per-class center matrix with its own SGD learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterTable {
    centers: Array2<f64>,
    learning_rate: f64,
}

impl CenterTable {
    /// Zero-initialized centers for `classes` classes of dimension `dim`.
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { centers: Array2::zeros((classes, dim)), learning_rate: 0.5 }
    }

    pub fn new(centers: Array2<f64>, learning_rate: f64) -> Self {
        Self { centers, learning_rate }
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }
}

/// Center loss `½ Σᵢ ‖fᵢ − c_{yᵢ}‖²` (summed, not averaged), with gradients
/// for both the embeddings and the centers.
pub fn center_loss(
    e: &EmbeddingMatrix,
    labels: &[usize],
    centers: &CenterTable,
) -> Result<LossOutput> {
    let (n, d) = (e.n(), e.dim());
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if centers.dim() != d {
        return Err(Error::DimMismatch { left: centers.dim(), right: d });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= centers.classes()) {
        return Err(Error::MissingCenter(bad));
    }
    let mut value = 0.0;
    let mut grad_e: Array2<f64> = Array2::zeros((n, d));
    let mut grad_c: Array2<f64> = Array2::zeros((centers.classes(), d));
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..d {
            let diff = e.values()[(i, k)] - centers.centers[(y, k)];
            value += 0.5 * diff * diff;
            grad_e[(i, k)] = diff;
            grad_c[(y, k)] -= diff;
        }
    }
    Ok(LossOutput::new(value)
        .with_grad(roles::EMBEDDINGS, grad_e)
        .with_grad(roles::CENTERS, grad_c))
}

/// One SGD step on the centers: `c ← c − lr·grad`.
pub fn center_sgd_step(centers: &CenterTable, grad: &Array2<f64>) -> Result<CenterTable> {
    if grad.dim() != centers.centers.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", centers.centers.dim()),
            got: format!("{:?}", grad.dim()),
        });
    }
    Ok(CenterTable {
        centers: &centers.centers - &(grad * centers.learning_rate),
        learning_rate: centers.learning_rate,
    })
}
