//! Domain-invariance machinery (DNet scorer, its two MSE losses) and
//! feature-norm quality weighting.

use ndarray::{Array1, Array2};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::loss::{roles, LossOutput, PerSampleLoss};

/// Linear domain scorer: `score = sigmoid(w·f + b)` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DnetScorer {
    pub weight: Array1<f64>,
    pub bias: f64,
}

impl DnetScorer {
    pub fn zeros(dim: usize) -> Self {
        Self { weight: Array1::zeros(dim), bias: 0.0 }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample domain scores in (0, 1).
pub fn dnet_forward(e: &EmbeddingMatrix, scorer: &DnetScorer) -> Result<Vec<f64>> {
    if scorer.weight.len() != e.dim() {
        return Err(Error::DimMismatch { left: scorer.weight.len(), right: e.dim() });
    }
    Ok((0..e.n())
        .map(|i| {
            let logit: f64 = e
                .row(i)
                .iter()
                .zip(scorer.weight.iter())
                .map(|(f, w)| f * w)
                .sum::<f64>()
                + scorer.bias;
            sigmoid(logit)
        })
        .collect())
}

/// Gradients of a scalar objective through [`dnet_forward`].
#[derive(Debug, Clone)]
pub struct DnetGrads {
    pub weight: Array1<f64>,
    pub bias: f64,
    pub embeddings: Array2<f64>,
}

/// Chains `dL/dscore` back through the sigmoid scorer onto its weights, bias,
/// and the input embeddings.
pub fn dnet_backward(
    e: &EmbeddingMatrix,
    scorer: &DnetScorer,
    scores: &[f64],
    dscores: &[f64],
) -> DnetGrads {
    let (n, d) = (e.n(), e.dim());
    let mut d_weight = Array1::zeros(d);
    let mut d_bias = 0.0;
    let mut d_emb = Array2::zeros((n, d));
    for i in 0..n {
        let dlogit = dscores[i] * scores[i] * (1.0 - scores[i]);
        d_bias += dlogit;
        for k in 0..d {
            d_weight[k] += dlogit * e.values()[(i, k)];
            d_emb[(i, k)] = dlogit * scorer.weight[k];
        }
    }
    DnetGrads { weight: d_weight, bias: d_bias, embeddings: d_emb }
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

/// Discriminator objective: mean squared error of source scores to 1 and
/// target scores to 0.
pub fn dnet_loss(source_scores: &[f64], target_scores: &[f64]) -> LossOutput {
    assert!(!source_scores.is_empty() && !target_scores.is_empty());
    let ns = source_scores.len() as f64;
    let nt = target_scores.len() as f64;
    let mut value = 0.0;
    let mut g_src = vec![0.0; source_scores.len()];
    let mut g_tgt = vec![0.0; target_scores.len()];
    for (i, &s) in source_scores.iter().enumerate() {
        value += (s - 1.0) * (s - 1.0) / ns;
        g_src[i] = 2.0 * (s - 1.0) / ns;
    }
    for (j, &t) in target_scores.iter().enumerate() {
        value += t * t / nt;
        g_tgt[j] = 2.0 * t / nt;
    }
    LossOutput::new(value)
        .with_grad(roles::SOURCE_SCORES, column(&g_src))
        .with_grad(roles::TARGET_SCORES, column(&g_tgt))
}

/// Confusion objective: mean squared error of every score to 0.5, pushing the
/// feature extractor toward domain-indistinguishable embeddings.
pub fn dim_loss(source_scores: &[f64], target_scores: &[f64]) -> LossOutput {
    assert!(!source_scores.is_empty() && !target_scores.is_empty());
    let ns = source_scores.len() as f64;
    let nt = target_scores.len() as f64;
    let mut value = 0.0;
    let mut g_src = vec![0.0; source_scores.len()];
    let mut g_tgt = vec![0.0; target_scores.len()];
    for (i, &s) in source_scores.iter().enumerate() {
        value += (s - 0.5) * (s - 0.5) / ns;
        g_src[i] = 2.0 * (s - 0.5) / ns;
    }
    for (j, &t) in target_scores.iter().enumerate() {
        value += (t - 0.5) * (t - 0.5) / nt;
        g_tgt[j] = 2.0 * (t - 0.5) / nt;
    }
    LossOutput::new(value)
        .with_grad(roles::SOURCE_SCORES, column(&g_src))
        .with_grad(roles::TARGET_SCORES, column(&g_tgt))
}

/// Feature-norm quality score per sample:
/// `z_i = clamp((‖f_i‖ − μ)/(σ/h), −1, 1)` with batch statistics μ, σ over the
/// row norms (population σ). A near-constant batch (σ < 1e-12) scores all 0.
pub fn quality_scores(e: &EmbeddingMatrix, h: f64) -> Vec<f64> {
    assert!(e.n() >= 2, "quality scores need a batch of at least 2");
    assert!(h > 0.0);
    let norms: Vec<f64> = (0..e.n())
        .map(|i| e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; norms.len()];
    }
    norms
        .iter()
        .map(|x| ((x - mean) / (std / h)).clamp(-1.0, 1.0))
        .collect()
}

/// Re-weights a per-sample loss by `z_i·λ_z + 1 ∈ [1−λ_z, 1+λ_z]` and averages.
///
/// The quality score is a stop-gradient quantity: gradients are scaled per
/// sample, never differentiated through the norm statistics.
pub fn quality_weighted(base: &PerSampleLoss, z: &[f64], lambda_z: f64) -> LossOutput {
    assert!((0.0..=1.0).contains(&lambda_z));
    assert_eq!(base.values.len(), z.len());
    let n = base.values.len().max(1) as f64;
    let weights: Vec<f64> = z.iter().map(|&zi| zi * lambda_z + 1.0).collect();
    let value = base
        .values
        .iter()
        .zip(&weights)
        .map(|(l, w)| l * w)
        .sum::<f64>()
        / n;
    let mut out = LossOutput::new(value);
    for (role, per_sample) in &base.grads {
        let mut acc = Array2::zeros(per_sample[0].raw_dim());
        for (g, &w) in per_sample.iter().zip(&weights) {
            acc += &(g * w);
        }
        out.grads.insert(role.clone(), acc / n);
    }
    out
}
