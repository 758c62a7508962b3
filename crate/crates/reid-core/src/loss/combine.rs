//! Weighted loss combinations for the three training objectives.

use crate::loss::{LossConfig, LossOutput};

/// Supervised total:
/// `L_ce + λ_tri·L_tri + λ_ct·L_ct + λ_ctl·L_ctl + λ_sup·L_sup`.
/// Gradients are the same weighted sum per input role.
pub fn scm_total(
    ce: &LossOutput,
    tri: &LossOutput,
    ct: &LossOutput,
    ctl: &LossOutput,
    sup: &LossOutput,
    cfg: &LossConfig,
) -> LossOutput {
    let mut out = LossOutput::new(0.0);
    out.add_scaled(ce, 1.0);
    out.add_scaled(tri, cfg.lambda_tri);
    out.add_scaled(ct, cfg.lambda_ct);
    out.add_scaled(ctl, cfg.lambda_ctl);
    out.add_scaled(sup, cfg.lambda_sup);
    out
}

/// Self-training total:
/// `(1−w₁)·L_id + w₁·L_kl + (1−w₂)·L_tri + w₂·L_stri`.
pub fn usl_total(
    id: &LossOutput,
    kl: &LossOutput,
    tri: &LossOutput,
    stri: &LossOutput,
    cfg: &LossConfig,
) -> LossOutput {
    let mut out = LossOutput::new(0.0);
    out.add_scaled(id, 1.0 - cfg.w1);
    out.add_scaled(kl, cfg.w1);
    out.add_scaled(tri, 1.0 - cfg.w2);
    out.add_scaled(stri, cfg.w2);
    out
}

/// Camera-aware total: `L_NCE + λ_cap·L_CAP`.
pub fn vitc_total(nce: &LossOutput, cap: &LossOutput, cfg: &LossConfig) -> LossOutput {
    let mut out = LossOutput::new(0.0);
    out.add_scaled(nce, 1.0);
    out.add_scaled(cap, cfg.lambda_cap);
    out
}
