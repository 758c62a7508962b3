//! Contrastive losses against the cluster memory and the camera-proxy memory.

use ndarray::Array2;

use crate::embedding::{EmbeddingMatrix, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::loss::{check_unit_rows, roles, LossConfig, LossOutput};
use crate::memory::{CameraProxyBank, MemoryBank};

fn check_bank_rows(rows: &Array2<f64>) -> Result<()> {
    for (i, row) in rows.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { row: i, norm });
        }
    }
    Ok(())
}

/// InfoNCE over the whole centroid bank: each query is pulled to its own
/// cluster's centroid and pushed from every other centroid. The bank is a
/// constant during the loss; momentum updates happen separately.
pub fn cluster_nce(
    q: &EmbeddingMatrix,
    assignments: &[Option<usize>],
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_unit_rows(q)?;
    check_bank_rows(bank.centroids())?;
    cluster_nce_unchecked(q, assignments, bank, cfg)
}

pub(crate) fn cluster_nce_unchecked(
    q: &EmbeddingMatrix,
    assignments: &[Option<usize>],
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let (n, d) = (q.n(), q.dim());
    if assignments.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} assignments"),
            got: format!("{}", assignments.len()),
        });
    }
    if bank.dim() != d {
        return Err(Error::DimMismatch { left: bank.dim(), right: d });
    }
    let k = bank.len();
    let tau = cfg.tau_nce;
    let mut value = 0.0;
    let mut grad: Array2<f64> = Array2::zeros((n, d));
    let mut logits = vec![0.0; k];
    for i in 0..n {
        let own = match assignments[i] {
            Some(c) if c < k => c,
            Some(c) => return Err(Error::ClusterOutOfRange { id: c, clusters: k }),
            None => return Err(Error::UnassignedSample(i)),
        };
        for (c, logit) in logits.iter_mut().enumerate() {
            *logit = q
                .row(i)
                .iter()
                .zip(bank.centroid(c).iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        value += lse - logits[own];
        for (c, &logit) in logits.iter().enumerate() {
            let p = (logit - lse).exp();
            let coeff = (p - if c == own { 1.0 } else { 0.0 }) / tau;
            for kk in 0..d {
                grad[(i, kk)] += coeff * bank.centroid(c)[kk];
            }
        }
    }
    let n_f = n as f64;
    Ok(LossOutput::new(value / n_f).with_grad(roles::QUERIES, grad / n_f))
}

/// Camera-aware proxy loss: per query, every proxy of its own cluster is a
/// positive; the denominator pairs each positive with the hardest
/// other-cluster proxies (by similarity to the query, pool size
/// `cfg.cap_negatives`).
pub fn cap_loss(
    q: &EmbeddingMatrix,
    meta: &crate::embedding::SampleMeta,
    assignments: &[Option<usize>],
    proxies: &CameraProxyBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_unit_rows(q)?;
    cap_loss_unchecked(q, meta, assignments, proxies, cfg)
}

pub(crate) fn cap_loss_unchecked(
    q: &EmbeddingMatrix,
    meta: &crate::embedding::SampleMeta,
    assignments: &[Option<usize>],
    proxies: &CameraProxyBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let (n, d) = (q.n(), q.dim());
    if meta.len() != n || assignments.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} samples of metadata"),
            got: format!("{} labels / {} assignments", meta.len(), assignments.len()),
        });
    }
    if proxies.dim() != d {
        return Err(Error::DimMismatch { left: proxies.dim(), right: d });
    }
    let tau = cfg.tau_cap;
    let total = proxies.len();
    let mut value = 0.0;
    let mut grad: Array2<f64> = Array2::zeros((n, d));
    for i in 0..n {
        let own = match assignments[i] {
            Some(c) if c < proxies.clusters() => c,
            Some(c) => {
                return Err(Error::ClusterOutOfRange { id: c, clusters: proxies.clusters() })
            }
            None => return Err(Error::UnassignedSample(i)),
        };
        let positives = proxies.cluster_proxies(own);
        if positives.is_empty() {
            return Err(Error::NoPositiveProxy(i));
        }
        // similarities to every proxy, scaled by the temperature
        let sims: Vec<f64> = (0..total)
            .map(|r| {
                q.row(i)
                    .iter()
                    .zip(proxies.proxy_row(r).iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / tau
            })
            .collect();
        // hardest negatives: other-cluster proxies with the highest similarity
        let mut candidates: Vec<usize> = (0..total)
            .filter(|r| !positives.contains(r))
            .collect();
        candidates.sort_by(|&a, &b| {
            sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let negatives = &candidates[..cfg.cap_negatives.min(candidates.len())];

        let p_count = positives.len() as f64;
        for &j in positives {
            // log-sum-exp over {j} ∪ negatives
            let mut max = sims[j];
            for &k in negatives {
                max = max.max(sims[k]);
            }
            let mut sum = (sims[j] - max).exp();
            for &k in negatives {
                sum += (sims[k] - max).exp();
            }
            let lse = max + sum.ln();
            value += (lse - sims[j]) / p_count;
            // gradient on the similarities of this positive's partition
            let pj = (sims[j] - lse).exp();
            let coeff_j = (pj - 1.0) / (p_count * tau);
            for kk in 0..d {
                grad[(i, kk)] += coeff_j * proxies.proxy_row(j)[kk];
            }
            for &k in negatives {
                let pk = (sims[k] - lse).exp();
                let coeff_k = pk / (p_count * tau);
                for kk in 0..d {
                    grad[(i, kk)] += coeff_k * proxies.proxy_row(k)[kk];
                }
            }
        }
    }
    let n_f = n as f64;
    Ok(LossOutput::new(value / n_f).with_grad(roles::QUERIES, grad / n_f))
}
