//! Supervised and self-supervised contrastive losses over a 2N multiview batch.

use ndarray::Array2;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::loss::{check_unit_rows, roles, LossConfig, LossOutput};

/// Supervised contrastive loss over a stacked multiview batch.
///
/// For each anchor the positives are every other row sharing its label; the
/// denominator runs over all other rows. Rows must be L2-normalized.
pub fn supcon(z: &EmbeddingMatrix, labels: &[i64], cfg: &LossConfig) -> Result<LossOutput> {
    check_unit_rows(z)?;
    supcon_unchecked(z, labels, cfg)
}

pub(crate) fn supcon_unchecked(
    z: &EmbeddingMatrix,
    labels: &[i64],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let n = z.n();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let tau = cfg.tau_supcon;
    let sims = gram(z);
    let mut value = 0.0;
    let mut grad_s: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if positives.is_empty() {
            return Err(Error::NoPositive(i));
        }
        let (lse, softmax) = log_sum_exp_except(&sims, i, tau);
        let p_count = positives.len() as f64;
        let mut anchor_loss = 0.0;
        for &p in &positives {
            anchor_loss -= sims[(i, p)] / tau - lse;
            grad_s[(i, p)] -= 1.0 / (p_count * tau);
        }
        value += anchor_loss / p_count;
        // the log-sum term appears once per positive, weighted 1/|P| each
        for a in 0..n {
            if a != i {
                grad_s[(i, a)] += softmax[a] / tau;
            }
        }
    }
    let n_f = n as f64;
    let grad = sim_grad_to_rows(z, &(grad_s / n_f));
    Ok(LossOutput::new(value / n_f).with_grad(roles::PROJECTIONS, grad))
}

/// Self-supervised InfoNCE over two paired views: row i of `z1` has row i of
/// `z2` as its sole positive; every other row of the stacked batch is a
/// negative. Gradients come back under the `view1` / `view2` roles.
pub fn ssl_contrastive(
    z1: &EmbeddingMatrix,
    z2: &EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if z1.n() != z2.n() || z1.dim() != z2.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", z1.n(), z1.dim()),
            got: format!("{}x{}", z2.n(), z2.dim()),
        });
    }
    check_unit_rows(z1)?;
    check_unit_rows(z2)?;
    ssl_contrastive_unchecked(z1, z2, cfg)
}

pub(crate) fn ssl_contrastive_unchecked(
    z1: &EmbeddingMatrix,
    z2: &EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let n = z1.n();
    let d = z1.dim();
    let tau = cfg.tau_supcon;
    // stacked batch [z1; z2]; partner(i) = i±N is the sole positive
    let total = 2 * n;
    let mut stacked = Array2::zeros((total, d));
    for i in 0..n {
        stacked.row_mut(i).assign(&z1.row(i));
        stacked.row_mut(n + i).assign(&z2.row(i));
    }
    let stacked = EmbeddingMatrix::from_parts(stacked, true);
    let sims = gram(&stacked);
    let mut value = 0.0;
    let mut grad_s: Array2<f64> = Array2::zeros((total, total));
    for i in 0..total {
        let partner = if i < n { i + n } else { i - n };
        let (lse, softmax) = log_sum_exp_except(&sims, i, tau);
        value -= sims[(i, partner)] / tau - lse;
        for a in 0..total {
            if a != i {
                grad_s[(i, a)] += softmax[a] / tau;
            }
        }
        grad_s[(i, partner)] -= 1.0 / tau;
    }
    let t_f = total as f64;
    let grad = sim_grad_to_rows(&stacked, &(grad_s / t_f));
    let mut g1 = Array2::zeros((n, d));
    let mut g2 = Array2::zeros((n, d));
    for i in 0..n {
        g1.row_mut(i).assign(&grad.row(i));
        g2.row_mut(i).assign(&grad.row(n + i));
    }
    Ok(LossOutput::new(value / t_f)
        .with_grad("view1", g1)
        .with_grad("view2", g2))
}

fn gram(z: &EmbeddingMatrix) -> Array2<f64> {
    let n = z.n();
    let mut sims = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sims[(i, j)] = z.row(i).iter().zip(z.row(j).iter()).map(|(a, b)| a * b).sum();
        }
    }
    sims
}

/// Stable log Σ_{a≠i} exp(s_ia/τ) along with that softmax distribution
/// (entry i fixed at 0).
fn log_sum_exp_except(sims: &Array2<f64>, i: usize, tau: f64) -> (f64, Vec<f64>) {
    let n = sims.nrows();
    let mut max = f64::NEG_INFINITY;
    for a in 0..n {
        if a != i {
            max = max.max(sims[(i, a)] / tau);
        }
    }
    let mut sum = 0.0;
    let mut softmax = vec![0.0; n];
    for a in 0..n {
        if a != i {
            let e = (sims[(i, a)] / tau - max).exp();
            softmax[a] = e;
            sum += e;
        }
    }
    for s in softmax.iter_mut() {
        *s /= sum;
    }
    (max + sum.ln(), softmax)
}

/// Converts a gradient on the similarity matrix into a gradient on the rows:
/// `dL/dz_r = Σ_a g[r,a]·z_a + Σ_i g[i,r]·z_i`.
fn sim_grad_to_rows(z: &EmbeddingMatrix, grad_s: &Array2<f64>) -> Array2<f64> {
    let (n, d) = (z.n(), z.dim());
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        for a in 0..n {
            let g = grad_s[(i, a)];
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                out[(i, k)] += g * z.values()[(a, k)];
                out[(a, k)] += g * z.values()[(i, k)];
            }
        }
    }
    out
}
