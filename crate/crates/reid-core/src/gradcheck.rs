//! Central finite-difference verification of every analytic loss gradient.
//!
//! Each check draws random instances, evaluates the loss as a black-box
//! scalar function of its differentiable inputs, and compares the hand-coded
//! gradients against `(f(x+h) − f(x−h)) / 2h` entry by entry. Instances that
//! land near a hinge or a mining tie are resampled, since the losses are not
//! differentiable there.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{camera_subclusters, centroids, ClusterAssignment};
use crate::embedding::{EmbeddingMatrix, SampleMeta};
use crate::loss::{self, roles, LossConfig, LossOutput};
use crate::memory::init_memory;
use crate::softlabel::SoftLabelMatrix;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum allowed scaled error.
pub const REL_TOL: f64 = 1e-4;
/// Instances checked per op.
pub const INSTANCES: usize = 20;

/// Outcome of one op's finite-difference suite.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(op: &str, max_rel_err: f64) -> Self {
        Self {
            op: op.to_string(),
            instances: INSTANCES,
            max_rel_err,
            tolerance: REL_TOL,
            passed: max_rel_err < REL_TOL,
        }
    }
}

type NamedInputs = Vec<(String, Array2<f64>)>;

/// One gradient-check instance: named differentiable inputs plus a scalar
/// re-evaluation function over them.
struct Instance<'a> {
    inputs: NamedInputs,
    eval: Box<dyn Fn(&NamedInputs) -> f64 + 'a>,
}

fn scaled_error(analytic: &Array2<f64>, fd: &Array2<f64>) -> f64 {
    let mut num: f64 = 0.0;
    let mut den: f64 = 1.0;
    for (a, f) in analytic.iter().zip(fd.iter()) {
        num = num.max((a - f).abs());
        den = den.max(a.abs()).max(f.abs());
    }
    num / den
}

fn check_instance(instance: &Instance<'_>, analytic: &LossOutput) -> f64 {
    let mut worst: f64 = 0.0;
    for (slot, (role, input)) in instance.inputs.iter().enumerate() {
        let grad = analytic
            .grad(role)
            .unwrap_or_else(|| panic!("missing gradient for role {role}"));
        assert_eq!(grad.dim(), input.dim(), "gradient shape mismatch for {role}");
        let mut fd = Array2::zeros(input.raw_dim());
        let mut work: Vec<(String, Array2<f64>)> = instance.inputs.clone();
        for ((r, c), slot_fd) in fd.indexed_iter_mut() {
            let original = input[(r, c)];
            work[slot].1[(r, c)] = original + FD_STEP;
            let plus = (instance.eval)(&work);
            work[slot].1[(r, c)] = original - FD_STEP;
            let minus = (instance.eval)(&work);
            work[slot].1[(r, c)] = original;
            *slot_fd = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(scaled_error(grad, &fd));
    }
    worst
}

fn matrix<R: Rng>(rng: &mut R, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-scale..scale))
}

fn unit_matrix<R: Rng>(rng: &mut R, n: usize, d: usize) -> Array2<f64> {
    let mut m = matrix(rng, n, d, 1.0);
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        row.mapv_inplace(|v| v / norm);
    }
    m
}

fn two_class_labels(n: usize) -> Vec<i64> {
    (0..n as i64).map(|i| i % 2).collect()
}

/// Hinge arguments and mining gaps must clear this slack for an instance to
/// count; anything closer to the kink is resampled.
const KINK_SLACK: f64 = 1e-3;

fn triplet_instance_is_smooth(e: &EmbeddingMatrix, labels: &[i64], cfg: &LossConfig) -> bool {
    let n = e.n();
    let sq = |i: usize, j: usize| -> f64 {
        e.row(i)
            .iter()
            .zip(e.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    for i in 0..n {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                pos.push(sq(i, j));
            } else {
                neg.push(sq(i, j));
            }
        }
        pos.sort_by(|a, b| b.partial_cmp(a).unwrap());
        neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if pos.len() > 1 && pos[0] - pos[1] < KINK_SLACK {
            return false;
        }
        if neg.len() > 1 && neg[1] - neg[0] < KINK_SLACK {
            return false;
        }
        let arg = 0.5 * pos[0] - 0.5 * neg[0] + cfg.margin;
        if arg.abs() < KINK_SLACK {
            return false;
        }
        // soft-triplet shares the mining; its distances must stay away from 0
        if pos[0].sqrt() < KINK_SLACK || neg[0].sqrt() < KINK_SLACK {
            return false;
        }
    }
    true
}

fn sample_triplet_batch(rng: &mut ChaCha8Rng, cfg: &LossConfig) -> (EmbeddingMatrix, Vec<i64>) {
    for _ in 0..500 {
        let e = EmbeddingMatrix::new(matrix(rng, 8, 5, 1.0)).unwrap();
        let labels = two_class_labels(8);
        if triplet_instance_is_smooth(&e, &labels, cfg) {
            return (e, labels);
        }
    }
    panic!("could not sample a smooth triplet batch");
}

fn centroid_instance_is_smooth(e: &EmbeddingMatrix, labels: &[i64], cfg: &LossConfig) -> bool {
    use std::collections::BTreeMap;
    let n = e.n();
    let d = e.dim();
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let centroid = |idx: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for &i in idx {
            for k in 0..d {
                c[k] += e.values()[(i, k)];
            }
        }
        c.iter().map(|v| v / idx.len() as f64).collect()
    };
    for anchor in 0..n {
        let own = labels[anchor];
        let own_members: Vec<usize> = members[&own]
            .iter()
            .copied()
            .filter(|&j| j != anchor)
            .collect();
        let c_p = centroid(&own_members);
        let d_ap: f64 = (0..d)
            .map(|k| (e.values()[(anchor, k)] - c_p[k]).powi(2))
            .sum();
        let mut dists: Vec<f64> = members
            .iter()
            .filter(|(l, _)| **l != own)
            .map(|(_, idx)| {
                let c = centroid(idx);
                (0..d).map(|k| (e.values()[(anchor, k)] - c[k]).powi(2)).sum()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if dists.len() > 1 && dists[1] - dists[0] < KINK_SLACK {
            return false;
        }
        if (d_ap - dists[0] + cfg.margin).abs() < KINK_SLACK {
            return false;
        }
    }
    true
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let logits = matrix(rng, 7, 4, 2.0);
        let labels: Vec<usize> = (0..7).map(|_| rng.gen_range(0..4)).collect();
        let out = loss::cross_entropy(&logits, &labels).unwrap();
        let labels2 = labels.clone();
        let instance = Instance {
            inputs: vec![(roles::LOGITS.into(), logits)],
            eval: Box::new(move |inputs| {
                loss::cross_entropy(&inputs[0].1, &labels2).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("cross_entropy", worst)
}

fn check_batch_hard_triplet(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig { margin: 0.5, ..Default::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (e, labels) = sample_triplet_batch(rng, &cfg);
        let out = loss::batch_hard_triplet(&e, &labels, &cfg).unwrap();
        let cfg2 = cfg.clone();
        let labels2 = labels.clone();
        let instance = Instance {
            inputs: vec![(roles::EMBEDDINGS.into(), e.values().clone())],
            eval: Box::new(move |inputs| {
                let e = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                loss::batch_hard_triplet(&e, &labels2, &cfg2).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("batch_hard_triplet", worst)
}

fn check_center_loss(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let e = EmbeddingMatrix::new(matrix(rng, 6, 4, 1.0)).unwrap();
        let centers = loss::CenterTable::new(matrix(rng, 3, 4, 1.0), 0.5);
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        let out = loss::center_loss(&e, &labels, &centers).unwrap();
        let labels2 = labels.clone();
        let instance = Instance {
            inputs: vec![
                (roles::EMBEDDINGS.into(), e.values().clone()),
                (roles::CENTERS.into(), centers.centers().clone()),
            ],
            eval: Box::new(move |inputs| {
                let e = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                let c = loss::CenterTable::new(inputs[1].1.clone(), 0.5);
                loss::center_loss(&e, &labels2, &c).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("center_loss", worst)
}

fn check_centroid_triplet(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig { margin: 0.4, ..Default::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (e, labels) = loop {
            let e = EmbeddingMatrix::new(matrix(rng, 9, 4, 1.0)).unwrap();
            let labels: Vec<i64> = (0..9).map(|i| (i % 3) as i64).collect();
            if centroid_instance_is_smooth(&e, &labels, &cfg) {
                break (e, labels);
            }
        };
        let out = loss::centroid_triplet(&e, &labels, &cfg).unwrap();
        let cfg2 = cfg.clone();
        let labels2 = labels.clone();
        let instance = Instance {
            inputs: vec![(roles::EMBEDDINGS.into(), e.values().clone())],
            eval: Box::new(move |inputs| {
                let e = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                loss::centroid_triplet(&e, &labels2, &cfg2).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("centroid_triplet", worst)
}

fn check_supcon(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let z = EmbeddingMatrix::new(unit_matrix(rng, 8, 5)).unwrap();
        let labels: Vec<i64> = two_class_labels(8);
        let out = loss::supcon_unchecked(&z, &labels, &cfg).unwrap();
        let cfg2 = cfg.clone();
        let labels2 = labels.clone();
        let instance = Instance {
            inputs: vec![(roles::PROJECTIONS.into(), z.values().clone())],
            eval: Box::new(move |inputs| {
                let z = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                loss::supcon_unchecked(&z, &labels2, &cfg2).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("supcon", worst)
}

fn check_ssl_contrastive(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let z1 = EmbeddingMatrix::new(unit_matrix(rng, 5, 4)).unwrap();
        let z2 = EmbeddingMatrix::new(unit_matrix(rng, 5, 4)).unwrap();
        let out = loss::ssl_contrastive_unchecked(&z1, &z2, &cfg).unwrap();
        let cfg2 = cfg.clone();
        let instance = Instance {
            inputs: vec![
                ("view1".into(), z1.values().clone()),
                ("view2".into(), z2.values().clone()),
            ],
            eval: Box::new(move |inputs| {
                let z1 = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                let z2 = EmbeddingMatrix::new(inputs[1].1.clone()).unwrap();
                loss::ssl_contrastive_unchecked(&z1, &z2, &cfg2).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("ssl_contrastive", worst)
}

fn check_kl_distill(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let student = matrix(rng, 6, 5, 2.0);
        let teacher = matrix(rng, 6, 5, 2.0);
        let out = loss::kl_distill(&student, &teacher).unwrap();
        let teacher2 = teacher.clone();
        let instance = Instance {
            inputs: vec![(roles::STUDENT_LOGITS.into(), student)],
            eval: Box::new(move |inputs| {
                loss::kl_distill(&inputs[0].1, &teacher2).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("kl_distill", worst)
}

fn random_soft_labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> SoftLabelMatrix {
    let mut m = Array2::zeros((n, c));
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..c {
            let v: f64 = rng.gen_range(0.01..1.0);
            m[(i, j)] = v;
            sum += v;
        }
        for j in 0..c {
            m[(i, j)] /= sum;
        }
    }
    SoftLabelMatrix::new(m).unwrap()
}

fn check_identity_two_branch(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let global = matrix(rng, 6, 4, 2.0);
        let local = matrix(rng, 6, 4, 2.0);
        let soft = random_soft_labels(rng, 6, 4);
        let out =
            loss::identity_two_branch(&global, &local, loss::IdentityTarget::Soft(&soft)).unwrap();
        let soft2 = soft.clone();
        let instance = Instance {
            inputs: vec![
                (roles::GLOBAL_LOGITS.into(), global),
                (roles::LOCAL_LOGITS.into(), local),
            ],
            eval: Box::new(move |inputs| {
                loss::identity_two_branch(
                    &inputs[0].1,
                    &inputs[1].1,
                    loss::IdentityTarget::Soft(&soft2),
                )
                .unwrap()
                .value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("identity_two_branch", worst)
}

fn check_soft_triplet_distill(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (student, labels) = sample_triplet_batch(rng, &cfg);
        let teacher = EmbeddingMatrix::new(matrix(rng, 8, 5, 1.0)).unwrap();
        let out = loss::soft_triplet_distill(&student, &teacher, &labels).unwrap();
        let labels2 = labels.clone();
        let teacher2 = teacher.clone();
        let instance = Instance {
            inputs: vec![(roles::STUDENT.into(), student.values().clone())],
            eval: Box::new(move |inputs| {
                let s = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                loss::soft_triplet_distill(&s, &teacher2, &labels2).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("soft_triplet_distill", worst)
}

fn check_dnet_loss(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let src = Array2::from_shape_fn((5, 1), |_| rng.gen_range(0.05..0.95));
        let tgt = Array2::from_shape_fn((4, 1), |_| rng.gen_range(0.05..0.95));
        let out = loss::dnet_loss(
            src.as_slice().unwrap(),
            tgt.as_slice().unwrap(),
        );
        let instance = Instance {
            inputs: vec![
                (roles::SOURCE_SCORES.into(), src.clone()),
                (roles::TARGET_SCORES.into(), tgt.clone()),
            ],
            eval: Box::new(|inputs| {
                loss::dnet_loss(
                    inputs[0].1.as_slice().unwrap(),
                    inputs[1].1.as_slice().unwrap(),
                )
                .value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("dnet_loss", worst)
}

fn check_dim_through_dnet(rng: &mut ChaCha8Rng) -> GradCheckReport {
    // composite: dim_loss(dnet(src_emb), dnet(tgt_emb)) w.r.t. embeddings
    // and scorer parameters, covering dnet_forward's gradient support
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let src_e = EmbeddingMatrix::new(matrix(rng, 5, 4, 1.0)).unwrap();
        let tgt_e = EmbeddingMatrix::new(matrix(rng, 4, 4, 1.0)).unwrap();
        let scorer = loss::DnetScorer {
            weight: ndarray::Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0)),
            bias: rng.gen_range(-0.5..0.5),
        };
        let s_scores = loss::dnet_forward(&src_e, &scorer).unwrap();
        let t_scores = loss::dnet_forward(&tgt_e, &scorer).unwrap();
        let dim = loss::dim_loss(&s_scores, &t_scores);
        let ds: Vec<f64> = dim.grad(roles::SOURCE_SCORES).unwrap().iter().copied().collect();
        let dt: Vec<f64> = dim.grad(roles::TARGET_SCORES).unwrap().iter().copied().collect();
        let gs = loss::dnet_backward(&src_e, &scorer, &s_scores, &ds);
        let gt = loss::dnet_backward(&tgt_e, &scorer, &t_scores, &dt);
        let mut analytic = LossOutput::new(dim.value);
        analytic
            .grads
            .insert("src_emb".into(), gs.embeddings.clone());
        analytic
            .grads
            .insert("tgt_emb".into(), gt.embeddings.clone());
        analytic.grads.insert(
            "scorer_w".into(),
            Array2::from_shape_vec((1, 4), (&gs.weight + &gt.weight).to_vec()).unwrap(),
        );
        analytic.grads.insert(
            "scorer_b".into(),
            Array2::from_elem((1, 1), gs.bias + gt.bias),
        );
        let weight_row =
            Array2::from_shape_vec((1, 4), scorer.weight.to_vec()).unwrap();
        let bias_cell = Array2::from_elem((1, 1), scorer.bias);
        let instance = Instance {
            inputs: vec![
                ("src_emb".into(), src_e.values().clone()),
                ("tgt_emb".into(), tgt_e.values().clone()),
                ("scorer_w".into(), weight_row),
                ("scorer_b".into(), bias_cell),
            ],
            eval: Box::new(|inputs| {
                let src = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                let tgt = EmbeddingMatrix::new(inputs[1].1.clone()).unwrap();
                let scorer = loss::DnetScorer {
                    weight: ndarray::Array1::from_vec(inputs[2].1.iter().copied().collect()),
                    bias: inputs[3].1[(0, 0)],
                };
                let s = loss::dnet_forward(&src, &scorer).unwrap();
                let t = loss::dnet_forward(&tgt, &scorer).unwrap();
                loss::dim_loss(&s, &t).value
            }),
        };
        worst = worst.max(check_instance(&instance, &analytic));
    }
    GradCheckReport::new("dim_loss_through_dnet", worst)
}

fn check_quality_weighted(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (e, labels) = sample_triplet_batch(rng, &cfg);
        let logits = matrix(rng, 8, 3, 2.0);
        let class_ids: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lambda_z = 0.8;
        let ce = loss::cross_entropy_per_sample(&logits, &class_ids).unwrap();
        let tri = loss::batch_hard_triplet_per_sample(&e, &labels, &cfg).unwrap();
        let out = loss::quality_weighted(&ce.add(&tri), &z, lambda_z);
        let cfg2 = cfg.clone();
        let labels2 = labels.clone();
        let class_ids2 = class_ids.clone();
        let z2 = z.clone();
        let instance = Instance {
            inputs: vec![
                (roles::LOGITS.into(), logits),
                (roles::EMBEDDINGS.into(), e.values().clone()),
            ],
            eval: Box::new(move |inputs| {
                let ce = loss::cross_entropy_per_sample(&inputs[0].1, &class_ids2).unwrap();
                let em = EmbeddingMatrix::new(inputs[1].1.clone()).unwrap();
                let tri = loss::batch_hard_triplet_per_sample(&em, &labels2, &cfg2).unwrap();
                loss::quality_weighted(&ce.add(&tri), &z2, lambda_z).value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("quality_weighted", worst)
}

fn cluster_fixture(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    clusters: usize,
) -> (EmbeddingMatrix, Vec<Option<usize>>, SampleMeta) {
    let q = EmbeddingMatrix::new(unit_matrix(rng, n, d)).unwrap();
    let ids: Vec<Option<usize>> = (0..n).map(|i| Some(i % clusters)).collect();
    let cameras: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
    let meta = SampleMeta::new(vec![0; n], cameras).unwrap();
    (q, ids, meta)
}

fn check_cluster_nce(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig { tau_nce: 0.2, ..Default::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (q, ids, _) = cluster_fixture(rng, 6, 5, 3);
        let bank_rows = EmbeddingMatrix::new(unit_matrix(rng, 3, 5)).unwrap();
        let all = ClusterAssignment::new((0..3).map(Some).collect(), 3).unwrap();
        let bank = init_memory(&centroids(&bank_rows, &all).unwrap(), 0.2, true).unwrap();
        let out = loss::cluster_nce_unchecked(&q, &ids, &bank, &cfg).unwrap();
        let cfg2 = cfg.clone();
        let ids2 = ids.clone();
        let bank2 = bank.clone();
        let instance = Instance {
            inputs: vec![(roles::QUERIES.into(), q.values().clone())],
            eval: Box::new(move |inputs| {
                let q = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                loss::cluster_nce_unchecked(&q, &ids2, &bank2, &cfg2).unwrap().value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("cluster_nce", worst)
}

fn cap_selection_is_smooth(
    q: &EmbeddingMatrix,
    ids: &[Option<usize>],
    proxies: &crate::memory::CameraProxyBank,
    cfg: &LossConfig,
) -> bool {
    for i in 0..q.n() {
        let own = ids[i].unwrap();
        let positives = proxies.cluster_proxies(own);
        let mut sims: Vec<f64> = (0..proxies.len())
            .filter(|r| !positives.contains(r))
            .map(|r| {
                q.row(i)
                    .iter()
                    .zip(proxies.proxy_row(r).iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if sims.len() <= cfg.cap_negatives {
            continue;
        }
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sims[cfg.cap_negatives - 1] - sims[cfg.cap_negatives] < KINK_SLACK {
            return false;
        }
    }
    true
}

fn check_cap_loss(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig { tau_cap: 0.2, cap_negatives: 3, ..Default::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (q, ids, meta, proxies) = loop {
            let (q, ids, meta) = cluster_fixture(rng, 6, 5, 3);
            let pool = EmbeddingMatrix::new(unit_matrix(rng, 12, 5)).unwrap();
            let pool_ids: Vec<Option<usize>> = (0..12).map(|i| Some(i % 3)).collect();
            let pool_meta = SampleMeta::new(
                vec![0; 12],
                (0..12).map(|i| (i % 2) as u32).collect(),
            )
            .unwrap();
            let assignment = ClusterAssignment::new(pool_ids, 3).unwrap();
            let proxies = camera_subclusters(&pool, &assignment, &pool_meta)
                .unwrap()
                .normalized();
            if cap_selection_is_smooth(&q, &ids, &proxies, &cfg) {
                break (q, ids, meta, proxies);
            }
        };
        let out = loss::cap_loss_unchecked(&q, &meta, &ids, &proxies, &cfg).unwrap();
        let cfg2 = cfg.clone();
        let ids2 = ids.clone();
        let meta2 = meta.clone();
        let proxies2 = proxies.clone();
        let instance = Instance {
            inputs: vec![(roles::QUERIES.into(), q.values().clone())],
            eval: Box::new(move |inputs| {
                let q = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                loss::cap_loss_unchecked(&q, &meta2, &ids2, &proxies2, &cfg2)
                    .unwrap()
                    .value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("cap_loss", worst)
}

fn check_scm_total(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig { margin: 0.5, ..Default::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (e, labels) = loop {
            let (e, labels) = sample_triplet_batch(rng, &cfg);
            if centroid_instance_is_smooth(&e, &labels, &cfg) {
                break (e, labels);
            }
        };
        let class_ids: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let logits = matrix(rng, 8, 2, 2.0);
        let centers = loss::CenterTable::new(matrix(rng, 2, 5, 1.0), 0.5);
        let z = EmbeddingMatrix::new(unit_matrix(rng, 16, 4)).unwrap();
        let z_labels: Vec<i64> = labels.iter().chain(labels.iter()).copied().collect();

        let compute = |logits: &Array2<f64>,
                       e: &EmbeddingMatrix,
                       centers: &loss::CenterTable,
                       z: &EmbeddingMatrix|
         -> LossOutput {
            let ce = loss::cross_entropy(logits, &class_ids).unwrap();
            let tri = loss::batch_hard_triplet(e, &labels, &cfg).unwrap();
            let ct = loss::center_loss(e, &class_ids, centers).unwrap();
            let ctl = loss::centroid_triplet(e, &labels, &cfg).unwrap();
            let sup = loss::supcon_unchecked(z, &z_labels, &cfg).unwrap();
            loss::scm_total(&ce, &tri, &ct, &ctl, &sup, &cfg)
        };
        let out = compute(&logits, &e, &centers, &z);
        let instance = Instance {
            inputs: vec![
                (roles::LOGITS.into(), logits.clone()),
                (roles::EMBEDDINGS.into(), e.values().clone()),
                (roles::CENTERS.into(), centers.centers().clone()),
                (roles::PROJECTIONS.into(), z.values().clone()),
            ],
            eval: Box::new(move |inputs| {
                let e = EmbeddingMatrix::new(inputs[1].1.clone()).unwrap();
                let centers = loss::CenterTable::new(inputs[2].1.clone(), 0.5);
                let z = EmbeddingMatrix::new(inputs[3].1.clone()).unwrap();
                compute(&inputs[0].1, &e, &centers, &z).value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("scm_total", worst)
}

fn check_usl_total(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (student, labels) = sample_triplet_batch(rng, &cfg);
        let teacher_feats = EmbeddingMatrix::new(matrix(rng, 8, 5, 1.0)).unwrap();
        let global = matrix(rng, 8, 3, 2.0);
        let local = matrix(rng, 8, 3, 2.0);
        let teacher_logits = matrix(rng, 8, 3, 2.0);
        let soft = random_soft_labels(rng, 8, 3);

        let compute = |global: &Array2<f64>,
                       local: &Array2<f64>,
                       student: &EmbeddingMatrix|
         -> LossOutput {
            let id =
                loss::identity_two_branch(global, local, loss::IdentityTarget::Soft(&soft))
                    .unwrap();
            let kl = loss::kl_distill(global, &teacher_logits).unwrap();
            // kl consumes the global logits: merge its student gradient into
            // the global-logits role before combining
            let kl = LossOutput {
                value: kl.value,
                grads: kl
                    .grads
                    .into_iter()
                    .map(|(_, g)| (roles::GLOBAL_LOGITS.to_string(), g))
                    .collect(),
            };
            let tri = loss::batch_hard_triplet(student, &labels, &cfg).unwrap();
            let stri = loss::soft_triplet_distill(student, &teacher_feats, &labels).unwrap();
            let stri = LossOutput {
                value: stri.value,
                grads: stri
                    .grads
                    .into_iter()
                    .map(|(_, g)| (roles::EMBEDDINGS.to_string(), g))
                    .collect(),
            };
            loss::usl_total(&id, &kl, &tri, &stri, &cfg)
        };
        let out = compute(&global, &local, &student);
        let instance = Instance {
            inputs: vec![
                (roles::GLOBAL_LOGITS.into(), global.clone()),
                (roles::LOCAL_LOGITS.into(), local.clone()),
                (roles::EMBEDDINGS.into(), student.values().clone()),
            ],
            eval: Box::new(move |inputs| {
                let s = EmbeddingMatrix::new(inputs[2].1.clone()).unwrap();
                compute(&inputs[0].1, &inputs[1].1, &s).value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("usl_total", worst)
}

fn check_vitc_total(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let cfg = LossConfig { tau_nce: 0.2, tau_cap: 0.2, cap_negatives: 50, ..Default::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (q, ids, meta) = cluster_fixture(rng, 6, 5, 2);
        let pool = EmbeddingMatrix::new(unit_matrix(rng, 8, 5)).unwrap();
        let pool_ids: Vec<Option<usize>> = (0..8).map(|i| Some(i % 2)).collect();
        let pool_meta =
            SampleMeta::new(vec![0; 8], (0..8).map(|i| (i % 2) as u32).collect()).unwrap();
        let assignment = ClusterAssignment::new(pool_ids, 2).unwrap();
        let bank = init_memory(&centroids(&pool, &assignment).unwrap(), 0.2, true).unwrap();
        let proxies = camera_subclusters(&pool, &assignment, &pool_meta).unwrap().normalized();

        let compute = |q: &EmbeddingMatrix| -> LossOutput {
            let nce = loss::cluster_nce_unchecked(q, &ids, &bank, &cfg).unwrap();
            let cap = loss::cap_loss_unchecked(q, &meta, &ids, &proxies, &cfg).unwrap();
            loss::vitc_total(&nce, &cap, &cfg)
        };
        let out = compute(&q);
        let instance = Instance {
            inputs: vec![(roles::QUERIES.into(), q.values().clone())],
            eval: Box::new(move |inputs| {
                let q = EmbeddingMatrix::new(inputs[0].1.clone()).unwrap();
                compute(&q).value
            }),
        };
        worst = worst.max(check_instance(&instance, &out));
    }
    GradCheckReport::new("vitc_total", worst)
}

type CheckFn = fn(&mut ChaCha8Rng) -> GradCheckReport;

/// Every check, in suite order.
const REGISTRY: &[(&str, CheckFn)] = &[
    ("cross_entropy", check_cross_entropy),
    ("batch_hard_triplet", check_batch_hard_triplet),
    ("center_loss", check_center_loss),
    ("centroid_triplet", check_centroid_triplet),
    ("supcon", check_supcon),
    ("ssl_contrastive", check_ssl_contrastive),
    ("kl_distill", check_kl_distill),
    ("identity_two_branch", check_identity_two_branch),
    ("soft_triplet_distill", check_soft_triplet_distill),
    ("dnet_loss", check_dnet_loss),
    ("dim_loss_through_dnet", check_dim_through_dnet),
    ("quality_weighted", check_quality_weighted),
    ("cluster_nce", check_cluster_nce),
    ("cap_loss", check_cap_loss),
    ("scm_total", check_scm_total),
    ("usl_total", check_usl_total),
    ("vitc_total", check_vitc_total),
];

/// Names of every checked op, in suite order.
pub fn op_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(name, _)| *name).collect()
}

fn op_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Runs the full finite-difference suite. Deterministic per seed.
pub fn run_all(seed: u64) -> Vec<GradCheckReport> {
    REGISTRY
        .iter()
        .enumerate()
        .map(|(i, (_, check))| check(&mut op_rng(seed, i)))
        .collect()
}

/// Runs only the named op's check. Returns `None` for unknown names.
pub fn run_one(name: &str, seed: u64) -> Option<GradCheckReport> {
    REGISTRY
        .iter()
        .enumerate()
        .find(|(_, (n, _))| *n == name)
        .map(|(i, (_, check))| check(&mut op_rng(seed, i)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_error_behaves() {
        let a = ndarray::array![[1.0, 2.0]];
        let close = ndarray::array![[1.0 + 1e-7, 2.0]];
        assert!(scaled_error(&a, &close) < 1e-6);
        let far = ndarray::array![[1.5, 2.0]];
        assert!(scaled_error(&a, &far) > 0.1);
    }
}
