//! Part-feature pooling and attention-guided token fusion.

use ndarray::{Array2, Array3};

use crate::embedding::{EmbeddingMatrix, ZERO_NORM_EPS};
use crate::error::{Error, Result};

/// N×K×D tensor of per-part features: K region (or token) vectors per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatures {
    values: Array3<f64>,
}

impl PartFeatures {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        assert!(values.shape()[1] >= 1, "part count must be at least 1");
        for ((r, _, c), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
        Ok(Self { values })
    }

    pub fn from_flat(n: usize, parts: usize, d: usize, flat: Vec<f64>) -> Result<Self> {
        let values =
            Array3::from_shape_vec((n, parts, d), flat).map_err(|_| Error::ShapeMismatch {
                expected: format!("{n}x{parts}x{d}"),
                got: "flat buffer of wrong length".into(),
            })?;
        Self::new(values)
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn parts(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }
}

/// Pooling mode over the part axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolMode {
    /// Global average pooling: per-coordinate mean over parts.
    Gap,
    /// Global max pooling: per-coordinate max over parts.
    Gmp,
}

/// Pools parts into a global N×D feature and concatenates the K part vectors
/// into an N×(K·D) local feature. `concat_local == false` returns an empty
/// local matrix (0 columns).
pub fn part_pool(
    pf: &PartFeatures,
    mode: PoolMode,
    concat_local: bool,
) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let (n, k, d) = (pf.n(), pf.parts(), pf.dim());
    let mut global = Array2::zeros((n, d));
    for i in 0..n {
        for c in 0..d {
            let mut acc = pf.values[(i, 0, c)];
            for p in 1..k {
                let v = pf.values[(i, p, c)];
                acc = match mode {
                    PoolMode::Gap => acc + v,
                    PoolMode::Gmp => acc.max(v),
                };
            }
            global[(i, c)] = match mode {
                PoolMode::Gap => acc / k as f64,
                PoolMode::Gmp => acc,
            };
        }
    }
    let local_cols = if concat_local { k * d } else { 0 };
    let mut local = Array2::zeros((n, local_cols));
    if concat_local {
        for i in 0..n {
            for p in 0..k {
                for c in 0..d {
                    local[(i, p * d + c)] = pf.values[(i, p, c)];
                }
            }
        }
    }
    (
        EmbeddingMatrix::from_parts(global, false),
        EmbeddingMatrix::from_parts(local, false),
    )
}

/// Routes a gradient on the pooled global feature back onto the parts.
///
/// GAP splits the gradient equally across parts; GMP routes it to the part
/// that attained the per-coordinate max (lowest part index on exact ties).
pub fn part_pool_backward(pf: &PartFeatures, mode: PoolMode, grad_global: &Array2<f64>) -> Array3<f64> {
    let (n, k, d) = (pf.n(), pf.parts(), pf.dim());
    let mut out = Array3::zeros((n, k, d));
    for i in 0..n {
        for c in 0..d {
            match mode {
                PoolMode::Gap => {
                    let share = grad_global[(i, c)] / k as f64;
                    for p in 0..k {
                        out[(i, p, c)] = share;
                    }
                }
                PoolMode::Gmp => {
                    let mut best = 0;
                    for p in 1..k {
                        if pf.values[(i, p, c)] > pf.values[(i, best, c)] {
                            best = p;
                        }
                    }
                    out[(i, best, c)] = grad_global[(i, c)];
                }
            }
        }
    }
    out
}

/// Reshapes a gradient on the concatenated local feature back onto the parts.
pub fn concat_backward(n: usize, k: usize, d: usize, grad_local: &Array2<f64>) -> Array3<f64> {
    let mut out = Array3::zeros((n, k, d));
    for i in 0..n {
        for p in 0..k {
            for c in 0..d {
                out[(i, p, c)] = grad_local[(i, p * d + c)];
            }
        }
    }
    out
}

/// Fixed linear map D→D applied to each selected token inside [`eir_fuse`].
#[derive(Debug, Clone)]
pub struct TokenProjection {
    /// D×D weight; `None` means identity.
    weight: Option<Array2<f64>>,
}

impl TokenProjection {
    pub fn identity() -> Self {
        Self { weight: None }
    }

    pub fn linear(weight: Array2<f64>) -> Self {
        Self { weight: Some(weight) }
    }

    fn apply(&self, token: &[f64], out: &mut [f64]) {
        match &self.weight {
            None => out.copy_from_slice(token),
            Some(w) => {
                for (c, slot) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (r, t) in token.iter().enumerate() {
                        acc += t * w[(r, c)];
                    }
                    *slot = acc;
                }
            }
        }
    }
}

/// Fuses the highest-attention tokens with the global feature.
///
/// Per sample: select the `ceil(fraction·M)` tokens with the highest attention
/// score (ties broken by ascending token index), L2-normalize each, apply the
/// projection, max-pool element-wise across the selected set, and concatenate
/// the pooled vector with the sample's global feature. Output width is 2·D.
pub fn eir_fuse(
    tokens: &PartFeatures,
    attention: &[f64],
    fraction: f64,
    projection: &TokenProjection,
    global: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let (n, m, d) = (tokens.n(), tokens.parts(), tokens.dim());
    if attention.len() != m {
        return Err(Error::ShapeMismatch {
            expected: format!("{m} attention scores"),
            got: format!("{}", attention.len()),
        });
    }
    if global.dim() != d || global.n() != n {
        return Err(Error::DimMismatch { left: global.dim(), right: d });
    }
    let keep = ((fraction * m as f64).ceil() as usize).clamp(1, m);
    // stable top-K: sort by descending score, ascending index on ties
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        attention[b]
            .partial_cmp(&attention[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let selected = &order[..keep];

    let mut out = Array2::zeros((n, 2 * d));
    let mut normalized = vec![0.0f64; d];
    let mut projected = vec![0.0f64; d];
    for i in 0..n {
        let mut pooled = vec![f64::NEG_INFINITY; d];
        for &t in selected {
            let mut norm = 0.0;
            for c in 0..d {
                let v = tokens.values[(i, t, c)];
                norm += v * v;
            }
            let norm = norm.sqrt().max(ZERO_NORM_EPS);
            for c in 0..d {
                normalized[c] = tokens.values[(i, t, c)] / norm;
            }
            projection.apply(&normalized, &mut projected);
            for c in 0..d {
                pooled[c] = pooled[c].max(projected[c]);
            }
        }
        for c in 0..d {
            out[(i, c)] = pooled[c];
            out[(i, d + c)] = global.values()[(i, c)];
        }
    }
    Ok(EmbeddingMatrix::from_parts(out, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parts(n: usize, k: usize, d: usize, flat: Vec<f64>) -> PartFeatures {
        PartFeatures::from_flat(n, k, d, flat).unwrap()
    }

    #[test]
    fn single_part_is_identity_for_both_modes() {
        let pf = parts(1, 1, 3, vec![1.0, -2.0, 0.5]);
        for mode in [PoolMode::Gap, PoolMode::Gmp] {
            let (global, local) = part_pool(&pf, mode, true);
            assert_eq!(global.values().as_slice().unwrap(), &[1.0, -2.0, 0.5]);
            assert_eq!(local.values().as_slice().unwrap(), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn gmp_and_gap_hand_values() {
        let pf = parts(1, 2, 2, vec![1.0, 0.0, 3.0, 2.0]);
        let (gmp, _) = part_pool(&pf, PoolMode::Gmp, false);
        assert_eq!(gmp.values().as_slice().unwrap(), &[3.0, 2.0]);
        let (gap, _) = part_pool(&pf, PoolMode::Gap, false);
        assert_eq!(gap.values().as_slice().unwrap(), &[2.0, 1.0]);
    }

    #[test]
    fn local_width_is_parts_times_dim() {
        let pf = parts(2, 2, 3, (0..12).map(|v| v as f64).collect());
        let (_, local) = part_pool(&pf, PoolMode::Gap, true);
        assert_eq!(local.dim(), 6);
        assert_eq!(local.row(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn gmp_dominates_gap_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let flat: Vec<f64> = (0..5 * 4 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pf = parts(5, 4, 3, flat);
        let (gmp, _) = part_pool(&pf, PoolMode::Gmp, false);
        let (gap, _) = part_pool(&pf, PoolMode::Gap, false);
        for (mx, mean) in gmp.values().iter().zip(gap.values().iter()) {
            assert!(mx >= mean);
        }
    }

    #[test]
    fn pool_backward_routes_gradients() {
        let pf = parts(1, 2, 2, vec![1.0, 5.0, 3.0, 2.0]);
        let g = ndarray::array![[1.0, 10.0]];
        let gmp = part_pool_backward(&pf, PoolMode::Gmp, &g);
        // coord 0 max is part 1 (3.0), coord 1 max is part 0 (5.0)
        assert_eq!(gmp[(0, 1, 0)], 1.0);
        assert_eq!(gmp[(0, 0, 1)], 10.0);
        assert_eq!(gmp[(0, 0, 0)], 0.0);
        let gap = part_pool_backward(&pf, PoolMode::Gap, &g);
        assert_eq!(gap[(0, 0, 0)], 0.5);
        assert_eq!(gap[(0, 1, 1)], 5.0);
    }

    fn unit_global(n: usize, d: usize, fill: f64) -> EmbeddingMatrix {
        EmbeddingMatrix::from_flat(n, d, vec![fill; n * d]).unwrap()
    }

    #[test]
    fn fraction_one_selects_all_tokens() {
        let tokens = parts(1, 3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let global = unit_global(1, 2, 0.25);
        let fused = eir_fuse(&tokens, &[0.5, 0.5, 0.5], 1.0, &TokenProjection::identity(), &global).unwrap();
        // all tokens unit-normalized then max-pooled: max(1,0,-1)=1, max(0,1,0)=1
        assert_eq!(fused.row(0).to_vec(), vec![1.0, 1.0, 0.25, 0.25]);
    }

    #[test]
    fn top_half_selection_by_score() {
        let tokens = parts(
            1,
            4,
            2,
            vec![2.0, 0.0, 0.0, 3.0, -5.0, 0.0, 0.0, -7.0],
        );
        let global = unit_global(1, 2, 0.0);
        let fused = eir_fuse(
            &tokens,
            &[0.9, 0.1, 0.8, 0.2],
            0.5,
            &TokenProjection::identity(),
            &global,
        )
        .unwrap();
        // tokens 0 and 2 selected; normalized to (1,0) and (-1,0)
        assert_eq!(fused.row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn singleton_selection_is_concat_of_unit_token_and_global() {
        let tokens = parts(1, 2, 2, vec![3.0, 4.0, 0.0, 1.0]);
        let global = unit_global(1, 2, 0.5);
        let fused = eir_fuse(
            &tokens,
            &[1.0, 0.0],
            0.5,
            &TokenProjection::identity(),
            &global,
        )
        .unwrap();
        assert_abs_diff_eq!(fused.values()[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(fused.values()[(0, 1)], 0.8, epsilon = 1e-15);
        assert_eq!(fused.values()[(0, 2)], 0.5);
        assert_eq!(fused.values()[(0, 3)], 0.5);
    }

    #[test]
    fn fuse_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let m = 6;
        let d = 4;
        let flat: Vec<f64> = (0..2 * m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens = parts(2, m, d, flat.clone());
        let attention: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let global = unit_global(2, d, 0.3);
        let base = eir_fuse(&tokens, &attention, 0.5, &TokenProjection::identity(), &global).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted_flat = vec![0.0; flat.len()];
        let mut permuted_attention = vec![0.0; m];
        for (new_t, &old_t) in perm.iter().enumerate() {
            permuted_attention[new_t] = attention[old_t];
            for i in 0..2 {
                for c in 0..d {
                    permuted_flat[(i * m + new_t) * d + c] = flat[(i * m + old_t) * d + c];
                }
            }
        }
        let permuted = parts(2, m, d, permuted_flat);
        let fused = eir_fuse(&permuted, &permuted_attention, 0.5, &TokenProjection::identity(), &global).unwrap();
        assert_eq!(base.values(), fused.values());
    }

    #[test]
    fn fraction_out_of_range_rejected() {
        let tokens = parts(1, 2, 2, vec![1.0; 4]);
        let global = unit_global(1, 2, 0.0);
        assert!(matches!(
            eir_fuse(&tokens, &[0.1, 0.2], 0.0, &TokenProjection::identity(), &global),
            Err(Error::FractionOutOfRange(_))
        ));
        assert!(matches!(
            eir_fuse(&tokens, &[0.1, 0.2], 1.5, &TokenProjection::identity(), &global),
            Err(Error::FractionOutOfRange(_))
        ));
    }
}
