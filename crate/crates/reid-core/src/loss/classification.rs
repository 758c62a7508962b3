//! Classification-style losses: cross entropy, two-branch identity loss,
//! and KL distillation against a teacher.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::loss::{roles, LossOutput, PerSampleLoss};
use crate::softlabel::SoftLabelMatrix;

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad as i64, classes });
    }
    Ok(())
}

/// Mean softmax cross entropy; gradient is `(softmax − onehot)/N` on the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<LossOutput> {
    Ok(cross_entropy_per_sample(logits, labels)?.mean())
}

/// Cross entropy kept per sample, for quality-weighted aggregation.
pub fn cross_entropy_per_sample(logits: &Array2<f64>, labels: &[usize]) -> Result<PerSampleLoss> {
    let (n, c) = (logits.nrows(), logits.ncols());
    check_labels(labels, n, c)?;
    let probs = softmax_rows(logits);
    let mut values = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let p = probs[(i, labels[i])].max(f64::MIN_POSITIVE);
        values.push(-p.ln());
        let mut g = Array2::zeros((n, c));
        for k in 0..c {
            g[(i, k)] = probs[(i, k)];
        }
        g[(i, labels[i])] -= 1.0;
        grads.push(g);
    }
    Ok(PerSampleLoss {
        values,
        grads: std::collections::BTreeMap::from([(roles::LOGITS.to_string(), grads)]),
    })
}

/// Target supplied to the identity loss: hard class ids or soft label rows.
#[derive(Debug, Clone, Copy)]
pub enum IdentityTarget<'a> {
    Hard(&'a [usize]),
    Soft(&'a SoftLabelMatrix),
}

fn soft_cross_entropy(
    logits: &Array2<f64>,
    target: &IdentityTarget<'_>,
    role: &str,
) -> Result<LossOutput> {
    let (n, c) = (logits.nrows(), logits.ncols());
    let probs = softmax_rows(logits);
    let mut value = 0.0;
    let mut grad = probs.clone();
    match target {
        IdentityTarget::Hard(labels) => {
            check_labels(labels, n, c)?;
            for i in 0..n {
                value -= probs[(i, labels[i])].max(f64::MIN_POSITIVE).ln();
                grad[(i, labels[i])] -= 1.0;
            }
        }
        IdentityTarget::Soft(soft) => {
            if soft.n() != n || soft.clusters() != c {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n}x{c} soft labels"),
                    got: format!("{}x{}", soft.n(), soft.clusters()),
                });
            }
            for i in 0..n {
                for k in 0..c {
                    let y = soft.values()[(i, k)];
                    if y > 0.0 {
                        value -= y * probs[(i, k)].max(f64::MIN_POSITIVE).ln();
                    }
                    grad[(i, k)] -= y;
                }
            }
        }
    }
    let n_f = n as f64;
    Ok(LossOutput::new(value / n_f).with_grad(role, grad / n_f))
}

/// Two-branch identity loss: cross entropy of the global and local logits
/// against the same (possibly soft) pseudo-labels, summed.
pub fn identity_two_branch(
    global_logits: &Array2<f64>,
    local_logits: &Array2<f64>,
    target: IdentityTarget<'_>,
) -> Result<LossOutput> {
    if global_logits.dim() != local_logits.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", global_logits.dim()),
            got: format!("{:?}", local_logits.dim()),
        });
    }
    let g = soft_cross_entropy(global_logits, &target, roles::GLOBAL_LOGITS)?;
    let l = soft_cross_entropy(local_logits, &target, roles::LOCAL_LOGITS)?;
    let mut out = LossOutput::new(0.0);
    out.add_scaled(&g, 1.0);
    out.add_scaled(&l, 1.0);
    Ok(out)
}

/// Mean KL(teacher ‖ student) over samples; the teacher is a constant, so the
/// only gradient is `(softmax(student) − softmax(teacher))/N` on the student
/// logits.
pub fn kl_distill(student_logits: &Array2<f64>, teacher_logits: &Array2<f64>) -> Result<LossOutput> {
    if student_logits.dim() != teacher_logits.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", teacher_logits.dim()),
            got: format!("{:?}", student_logits.dim()),
        });
    }
    let n = student_logits.nrows();
    let s = softmax_rows(student_logits);
    let t = softmax_rows(teacher_logits);
    let mut value = 0.0;
    for i in 0..n {
        for k in 0..student_logits.ncols() {
            let tv = t[(i, k)];
            if tv > 0.0 {
                value += tv * (tv.ln() - s[(i, k)].max(f64::MIN_POSITIVE).ln());
            }
        }
    }
    let n_f = n as f64;
    let grad = (&s - &t) / n_f;
    Ok(LossOutput::new(value / n_f).with_grad(roles::STUDENT_LOGITS, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Array2::zeros((3, 4));
        let labels = vec![0, 1, 2];
        let out = cross_entropy(&logits, &labels).unwrap();
        assert_abs_diff_eq!(out.value, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn saturated_correct_logit_drives_loss_to_zero() {
        let mut logits = Array2::zeros((1, 5));
        logits[(0, 2)] = 50.0;
        let out = cross_entropy(&logits, &[2]).unwrap();
        assert!(out.value < 1e-9);
    }

    #[test]
    fn two_class_hand_value() {
        let logits = array![[1.0, 0.0]];
        let out = cross_entropy(&logits, &[0]).unwrap();
        assert_abs_diff_eq!(out.value, (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.value, 0.31326, epsilon = 1e-5);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn per_sample_mean_equals_batch_value() {
        let logits = array![[1.0, -0.5, 0.2], [0.0, 2.0, -1.0]];
        let labels = vec![2, 1];
        let batch = cross_entropy(&logits, &labels).unwrap();
        let per = cross_entropy_per_sample(&logits, &labels).unwrap();
        assert_abs_diff_eq!(per.mean().value, batch.value, epsilon = 1e-15);
    }

    #[test]
    fn duplicated_branches_double_cross_entropy() {
        let logits = array![[0.3, -0.7, 1.1], [0.9, 0.0, -0.4]];
        let labels = vec![0, 2];
        let single = cross_entropy(&logits, &labels).unwrap();
        let both = identity_two_branch(&logits, &logits, IdentityTarget::Hard(&labels)).unwrap();
        assert_abs_diff_eq!(both.value, 2.0 * single.value, epsilon = 1e-12);
    }

    #[test]
    fn one_hot_soft_label_equals_hard_label() {
        let logits = array![[0.3, -0.7, 1.1], [0.9, 0.0, -0.4]];
        let labels = vec![0, 2];
        let mut one_hot = Array2::zeros((2, 3));
        one_hot[(0, 0)] = 1.0;
        one_hot[(1, 2)] = 1.0;
        let soft = SoftLabelMatrix::new(one_hot).unwrap();
        let hard = identity_two_branch(&logits, &logits, IdentityTarget::Hard(&labels)).unwrap();
        let softed = identity_two_branch(&logits, &logits, IdentityTarget::Soft(&soft)).unwrap();
        assert_abs_diff_eq!(hard.value, softed.value, epsilon = 1e-12);
        assert_eq!(
            hard.grad(roles::GLOBAL_LOGITS).unwrap(),
            softed.grad(roles::GLOBAL_LOGITS).unwrap()
        );
    }

    #[test]
    fn uniform_soft_labels_uniform_logits_give_two_ln_c() {
        let c = 5;
        let logits = Array2::zeros((3, c));
        let soft = SoftLabelMatrix::new(Array2::from_elem((3, c), 1.0 / c as f64)).unwrap();
        let out = identity_two_branch(&logits, &logits, IdentityTarget::Soft(&soft)).unwrap();
        assert_abs_diff_eq!(out.value, 2.0 * (c as f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_when_student_matches_teacher() {
        let logits = array![[0.5, -1.0, 2.0], [0.0, 0.1, -0.2]];
        let out = kl_distill(&logits, &logits).unwrap();
        assert_abs_diff_eq!(out.value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_one_hot_teacher_uniform_student_is_ln_two() {
        let teacher = array![[50.0, 0.0]];
        let student = array![[0.0, 0.0]];
        let out = kl_distill(&student, &teacher).unwrap();
        assert_abs_diff_eq!(out.value, 2.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn kl_non_negative_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let s = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-3.0..3.0));
            let t = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-3.0..3.0));
            assert!(kl_distill(&s, &t).unwrap().value >= 0.0);
        }
    }
}
