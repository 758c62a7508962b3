//! Triplet losses with batch-hard mining, plus the centroid variant and the
//! teacher-student soft-triplet distillation.

use ndarray::Array2;
use std::collections::BTreeMap;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::loss::{roles, LossConfig, LossOutput, PerSampleLoss};

fn squared_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batch-hard mining: per anchor, the same-label sample at maximum squared
/// distance and the different-label sample at minimum squared distance.
pub(crate) fn mine_hard(
    e: &EmbeddingMatrix,
    labels: &[i64],
) -> Result<Vec<(usize, usize, usize)>> {
    let n = e.n();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let mut triplets = Vec::with_capacity(n);
    for i in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = squared_dist(e.row(i), e.row(j));
            if labels[j] == labels[i] {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        let (p, _) = hardest_pos
            .ok_or_else(|| Error::DegenerateBatch(format!("anchor {i} has no positive")))?;
        let (g, _) = hardest_neg
            .ok_or_else(|| Error::DegenerateBatch(format!("anchor {i} has no negative")))?;
        triplets.push((i, p, g));
    }
    Ok(triplets)
}

/// Batch-hard triplet loss: per anchor `[½·d_ap² − ½·d_an² + α]₊`, averaged.
pub fn batch_hard_triplet(
    e: &EmbeddingMatrix,
    labels: &[i64],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    Ok(batch_hard_triplet_per_sample(e, labels, cfg)?.mean())
}

/// Per-anchor form of [`batch_hard_triplet`], for quality-weighted training.
pub fn batch_hard_triplet_per_sample(
    e: &EmbeddingMatrix,
    labels: &[i64],
    cfg: &LossConfig,
) -> Result<PerSampleLoss> {
    let triplets = mine_hard(e, labels)?;
    let (n, d) = (e.n(), e.dim());
    let mut values = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for (i, p, g) in triplets {
        let d_ap = squared_dist(e.row(i), e.row(p));
        let d_an = squared_dist(e.row(i), e.row(g));
        let arg = 0.5 * d_ap - 0.5 * d_an + cfg.margin;
        let mut grad = Array2::zeros((n, d));
        if arg > 0.0 {
            values.push(arg);
            for c in 0..d {
                let u = e.values()[(i, c)] - e.values()[(p, c)];
                let v = e.values()[(i, c)] - e.values()[(g, c)];
                grad[(i, c)] += u - v;
                grad[(p, c)] -= u;
                grad[(g, c)] += v;
            }
        } else {
            values.push(0.0);
        }
        grads.push(grad);
    }
    Ok(PerSampleLoss {
        values,
        grads: BTreeMap::from([(roles::EMBEDDINGS.to_string(), grads)]),
    })
}

/// Centroid triplet loss: the positive is the mean of the anchor's class
/// excluding the anchor, the negative is the nearest other-class centroid;
/// per anchor `[‖f−c_p‖² − ‖f−c_n‖² + α]₊`, averaged.
pub fn centroid_triplet(
    e: &EmbeddingMatrix,
    labels: &[i64],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let n = e.n();
    let d = e.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::DegenerateBatch("need at least two classes".into()));
    }
    let classes: Vec<i64> = members.keys().copied().collect();
    let mut centroids: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (&label, idx) in &members {
        let mut c = vec![0.0; d];
        for &i in idx {
            for k in 0..d {
                c[k] += e.values()[(i, k)];
            }
        }
        for v in c.iter_mut() {
            *v /= idx.len() as f64;
        }
        centroids.insert(label, c);
    }

    let mut value = 0.0;
    let mut grad: Array2<f64> = Array2::zeros((n, d));
    for anchor in 0..n {
        let own = labels[anchor];
        let own_members = &members[&own];
        if own_members.len() < 2 {
            return Err(Error::DegenerateBatch(format!(
                "class {own} has a single sample; anchor {anchor} has no positive centroid"
            )));
        }
        // positive centroid: own class mean excluding the anchor
        let m_p = (own_members.len() - 1) as f64;
        let mut c_p = vec![0.0; d];
        for &j in own_members.iter().filter(|&&j| j != anchor) {
            for k in 0..d {
                c_p[k] += e.values()[(j, k)];
            }
        }
        for v in c_p.iter_mut() {
            *v /= m_p;
        }
        // negative centroid: nearest other-class mean
        let mut best: Option<(i64, f64)> = None;
        for &other in classes.iter().filter(|&&c| c != own) {
            let c_n = &centroids[&other];
            let dist: f64 = (0..d)
                .map(|k| {
                    let diff = e.values()[(anchor, k)] - c_n[k];
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((other, dist));
            }
        }
        let (neg_class, d_an) = best.expect("at least two classes checked above");
        let d_ap: f64 = (0..d)
            .map(|k| {
                let diff = e.values()[(anchor, k)] - c_p[k];
                diff * diff
            })
            .sum();
        let arg = d_ap - d_an + cfg.margin;
        if arg > 0.0 {
            value += arg;
            let neg_members = &members[&neg_class];
            let m_n = neg_members.len() as f64;
            let c_n = &centroids[&neg_class];
            for k in 0..d {
                let u = e.values()[(anchor, k)] - c_p[k];
                let v = e.values()[(anchor, k)] - c_n[k];
                grad[(anchor, k)] += 2.0 * (u - v);
                for &j in own_members.iter().filter(|&&j| j != anchor) {
                    grad[(j, k)] -= 2.0 * u / m_p;
                }
                for &j in neg_members {
                    grad[(j, k)] += 2.0 * v / m_n;
                }
            }
        }
    }
    let n_f = n as f64;
    Ok(LossOutput::new(value / n_f).with_grad(roles::EMBEDDINGS, grad / n_f))
}

/// Soft-triplet distillation: triplets mined on student distances; both
/// networks produce a two-way softmax over `(−d_ap, −d_an)` and the student
/// distribution is pulled to the teacher's by binary cross entropy.
pub fn soft_triplet_distill(
    f_student: &EmbeddingMatrix,
    h_teacher: &EmbeddingMatrix,
    labels: &[i64],
) -> Result<LossOutput> {
    if f_student.n() != h_teacher.n() || f_student.dim() != h_teacher.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", f_student.n(), f_student.dim()),
            got: format!("{}x{}", h_teacher.n(), h_teacher.dim()),
        });
    }
    let triplets = mine_hard(f_student, labels)?;
    let (n, d) = (f_student.n(), f_student.dim());
    let mut value = 0.0;
    let mut grad: Array2<f64> = Array2::zeros((n, d));
    const EPS: f64 = 1e-12;
    for (i, p, g) in triplets {
        let d_ap = squared_dist(f_student.row(i), f_student.row(p)).sqrt().max(EPS);
        let d_an = squared_dist(f_student.row(i), f_student.row(g)).sqrt().max(EPS);
        let t_ap = squared_dist(h_teacher.row(i), h_teacher.row(p)).sqrt();
        let t_an = squared_dist(h_teacher.row(i), h_teacher.row(g)).sqrt();
        // probability assigned to the positive: σ(d_an − d_ap)
        let p_s = sigmoid(d_an - d_ap);
        let p_t = sigmoid(t_an - t_ap);
        value -= p_t * p_s.max(EPS).ln() + (1.0 - p_t) * (1.0 - p_s).max(EPS).ln();
        // dL/d(d_an − d_ap) = p_s − p_t
        let coeff = p_s - p_t;
        for k in 0..d {
            let u = (f_student.values()[(i, k)] - f_student.values()[(p, k)]) / d_ap;
            let v = (f_student.values()[(i, k)] - f_student.values()[(g, k)]) / d_an;
            grad[(i, k)] += coeff * (v - u);
            grad[(p, k)] += coeff * u;
            grad[(g, k)] -= coeff * v;
        }
    }
    let n_f = n as f64;
    Ok(LossOutput::new(value / n_f).with_grad(roles::STUDENT, grad / n_f))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn emb(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let e = emb(&vec![vec![1.0, 2.0]; 4]);
        let labels = [0, 0, 1, 1];
        let out = batch_hard_triplet(&e, &labels, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(out.value, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn satisfied_margin_clamps_to_zero() {
        // anchor (0,0) with positive (0,0) and negative (2,0): ½·0 − ½·4 + 0.3 < 0
        let e = emb(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0], vec![2.0, 0.0]]);
        let labels = [0, 0, 1, 1];
        let out = batch_hard_triplet(&e, &labels, &LossConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad(roles::EMBEDDINGS).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn degenerate_batch_detected() {
        let e = emb(&[vec![0.0], vec![1.0]]);
        assert!(matches!(
            batch_hard_triplet(&e, &[0, 1], &LossConfig::default()),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            batch_hard_triplet(&e, &[0, 0], &LossConfig::default()),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn centroid_triplet_zero_for_separated_tight_classes() {
        let e = emb(&[
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 0.0],
            vec![10.1, 0.0],
        ]);
        let out = centroid_triplet(&e, &[0, 0, 1, 1], &LossConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn centroid_triplet_degenerate_geometry_gives_margin() {
        // every sample at the same point: both centroid distances vanish
        let e = emb(&vec![vec![1.0, 1.0]; 4]);
        let out = centroid_triplet(&e, &[0, 0, 1, 1], &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(out.value, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn soft_triplet_hard_teacher_uncertain_student_is_ln_two() {
        // student sees every distance as equal (p_s = 0.5) while the teacher
        // puts each positive at distance 0 and each negative far away (p_t = 1)
        let student = emb(&vec![vec![0.0, 0.0]; 4]);
        let teacher = emb(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![100.0, 0.0],
            vec![100.0, 0.0],
        ]);
        let labels = [0, 0, 1, 1];
        let out = soft_triplet_distill(&student, &teacher, &labels).unwrap();
        assert_abs_diff_eq!(out.value, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn soft_triplet_matched_features_give_self_entropy() {
        let e = emb(&[
            vec![0.0, 0.0],
            vec![1.0, 0.5],
            vec![-2.0, 1.0],
            vec![-2.5, 0.5],
        ]);
        let labels = [0, 0, 1, 1];
        let out = soft_triplet_distill(&e, &e, &labels).unwrap();
        let triplets = mine_hard(&e, &labels).unwrap();
        let mut expected = 0.0;
        for (i, p, g) in triplets {
            let d_ap = squared_dist(e.row(i), e.row(p)).sqrt();
            let d_an = squared_dist(e.row(i), e.row(g)).sqrt();
            let prob = sigmoid(d_an - d_ap);
            expected -= prob * prob.ln() + (1.0 - prob) * (1.0 - prob).ln();
        }
        assert_abs_diff_eq!(out.value, expected / 4.0, epsilon = 1e-12);
    }
}
