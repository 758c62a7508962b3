//! Loss functions as pure (value, gradients) computations.
//!
//! Every op returns a [`LossOutput`]: a scalar plus one gradient matrix per
//! differentiable input role. No autodiff — gradients are hand-derived and
//! verified against central finite differences (see [`crate::gradcheck`]).

use ndarray::Array2;
use std::collections::BTreeMap;

mod center;
mod classification;
mod combine;
mod contrastive;
mod domain;
mod memory_contrast;
mod triplet;

pub use center::{center_loss, center_sgd_step, CenterTable};
pub use classification::{
    cross_entropy, cross_entropy_per_sample, identity_two_branch, kl_distill, IdentityTarget,
};
pub use combine::{scm_total, usl_total, vitc_total};
pub use contrastive::{ssl_contrastive, supcon};
pub use domain::{
    dim_loss, dnet_backward, dnet_forward, dnet_loss, quality_scores, quality_weighted,
    DnetGrads, DnetScorer,
};
pub use memory_contrast::{cap_loss, cluster_nce};
pub(crate) use contrastive::{ssl_contrastive_unchecked, supcon_unchecked};
pub(crate) use memory_contrast::{cap_loss_unchecked, cluster_nce_unchecked};
pub use triplet::{
    batch_hard_triplet, batch_hard_triplet_per_sample, centroid_triplet, soft_triplet_distill,
};

/// Gradient role names used as keys in [`LossOutput::grads`].
pub mod roles {
    /// Classifier logits (N×C).
    pub const LOGITS: &str = "logits";
    /// Feature embeddings (N×D).
    pub const EMBEDDINGS: &str = "embeddings";
    /// Class centers (C×D).
    pub const CENTERS: &str = "centers";
    /// Projected contrastive views (2N×D).
    pub const PROJECTIONS: &str = "projections";
    /// Student branch logits (N×C).
    pub const STUDENT_LOGITS: &str = "student_logits";
    /// Student features in a distillation pair (N×D).
    pub const STUDENT: &str = "student";
    /// Global-branch logits (N×C).
    pub const GLOBAL_LOGITS: &str = "global_logits";
    /// Local-branch logits (N×C).
    pub const LOCAL_LOGITS: &str = "local_logits";
    /// Query features compared against a memory bank (N×D).
    pub const QUERIES: &str = "queries";
    /// Domain scores on source samples (N×1).
    pub const SOURCE_SCORES: &str = "source_scores";
    /// Domain scores on target samples (N×1).
    pub const TARGET_SCORES: &str = "target_scores";
}

/// Scalar loss value plus gradients keyed by input role.
#[derive(Debug, Clone, Default)]
pub struct LossOutput {
    pub value: f64,
    pub grads: BTreeMap<String, Array2<f64>>,
}

impl LossOutput {
    pub fn new(value: f64) -> Self {
        Self { value, grads: BTreeMap::new() }
    }

    pub fn with_grad(mut self, role: &str, grad: Array2<f64>) -> Self {
        self.grads.insert(role.to_string(), grad);
        self
    }

    pub fn grad(&self, role: &str) -> Option<&Array2<f64>> {
        self.grads.get(role)
    }

    /// Accumulates `weight · other` into this output (value and gradients).
    pub fn add_scaled(&mut self, other: &LossOutput, weight: f64) {
        self.value += weight * other.value;
        for (role, grad) in &other.grads {
            match self.grads.get_mut(role) {
                Some(acc) => *acc = &*acc + &(grad * weight),
                None => {
                    self.grads.insert(role.clone(), grad * weight);
                }
            }
        }
    }
}

/// A loss kept in per-sample form so each term can be re-weighted before
/// aggregation. `grads[role][i]` is the gradient of sample i's loss term.
#[derive(Debug, Clone, Default)]
pub struct PerSampleLoss {
    pub values: Vec<f64>,
    pub grads: BTreeMap<String, Vec<Array2<f64>>>,
}

impl PerSampleLoss {
    /// Plain mean over samples, gradients averaged accordingly.
    pub fn mean(&self) -> LossOutput {
        let n = self.values.len().max(1) as f64;
        let mut out = LossOutput::new(self.values.iter().sum::<f64>() / n);
        for (role, per_sample) in &self.grads {
            let mut acc: Array2<f64> = Array2::zeros(per_sample[0].raw_dim());
            for g in per_sample {
                acc += g;
            }
            out.grads.insert(role.clone(), acc / n);
        }
        out
    }

    /// Adds two per-sample losses term by term.
    pub fn add(&self, other: &PerSampleLoss) -> PerSampleLoss {
        assert_eq!(self.values.len(), other.values.len());
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        let mut grads = self.grads.clone();
        for (role, per_sample) in &other.grads {
            match grads.get_mut(role) {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(per_sample) {
                        *a += g;
                    }
                }
                None => {
                    grads.insert(role.clone(), per_sample.clone());
                }
            }
        }
        PerSampleLoss { values, grads }
    }
}

/// Hyper-parameters shared by the loss ops.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Triplet margin α.
    pub margin: f64,
    /// Temperature for the supervised contrastive loss.
    pub tau_supcon: f64,
    /// Temperature for the cluster-contrast loss.
    pub tau_nce: f64,
    /// Temperature for the camera-proxy loss.
    pub tau_cap: f64,
    /// Weight of the triplet term in the supervised total.
    pub lambda_tri: f64,
    /// Weight of the center term in the supervised total.
    pub lambda_ct: f64,
    /// Weight of the centroid-triplet term in the supervised total.
    pub lambda_ctl: f64,
    /// Weight of the supervised contrastive term.
    pub lambda_sup: f64,
    /// Quality-weighting strength; weight per sample is `z·λ_z + 1`.
    pub lambda_z: f64,
    /// Concentration factor in the quality score.
    pub quality_h: f64,
    /// Teacher-vs-new balance for the identity/KL pair.
    pub w1: f64,
    /// Teacher-vs-new balance for the triplet/soft-triplet pair.
    pub w2: f64,
    /// Weight of the domain-invariance term.
    pub lambda_dim: f64,
    /// Weight of the camera-proxy term in the camera-aware total.
    pub lambda_cap: f64,
    /// Hardest-negative proxy pool size for the camera-proxy loss.
    pub cap_negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            tau_supcon: 0.1,
            tau_nce: 0.05,
            tau_cap: 0.07,
            lambda_tri: 1.0,
            lambda_ct: 0.0005,
            lambda_ctl: 1.0,
            lambda_sup: 0.2,
            lambda_z: 0.8,
            quality_h: 0.33,
            w1: 0.4,
            w2: 0.8,
            lambda_dim: 0.5,
            lambda_cap: 0.7,
            cap_negatives: 50,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        assert!(self.tau_supcon > 0.0 && self.tau_nce > 0.0 && self.tau_cap > 0.0);
        assert!(self.margin >= 0.0);
        assert!((0.0..=1.0).contains(&self.lambda_z));
        assert!((0.0..=1.0).contains(&self.w1) && (0.0..=1.0).contains(&self.w2));
        Ok(())
    }
}

pub(crate) fn check_unit_rows(e: &crate::embedding::EmbeddingMatrix) -> crate::error::Result<()> {
    use crate::embedding::UNIT_NORM_TOL;
    for i in 0..e.n() {
        let norm = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(crate::error::Error::NotNormalized { row: i, norm });
        }
    }
    Ok(())
}
