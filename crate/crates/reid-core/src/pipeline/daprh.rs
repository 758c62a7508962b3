//! Teacher-student self-training on unlabeled target data: the teacher
//! clusters its features each epoch, pseudo-labels are refined through
//! silhouette-filtered centroids and soft assignment, and the two-branch
//! student learns from both the labels and the teacher's predictions. An
//! optional source domain adds supervised, quality-weighted losses and the
//! domain-invariance pair.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::{centroids, confident_centroids, CentroidSet, ClusterAssignment};
use crate::embedding::{
    l2_normalize, pairwise_distances, pk_sample, EmbeddingMatrix, Metric, SampleMeta,
};
use crate::encoder::{LinearEncoder, Sgd};
use crate::error::{Error, Result};
use crate::eval::{
    adjusted_rand_index, assignment_labels_with_noise_singletons, rank_gallery, MetricSummary,
};
use crate::loss::{self, roles, DnetScorer, IdentityTarget, LossOutput};
use crate::memory::{teacher_update, TeacherState};
use crate::parts::{concat_backward, part_pool, part_pool_backward, PartFeatures, PoolMode};
use crate::pipeline::{class_table, RunConfig, TrainLog};
use crate::silhouette::silhouette;
use crate::softlabel::{refine_labels, soft_assignment_matrix, SoftAssignSign, SoftLabelMatrix};
use crate::synth::SyntheticDataset;

/// Two-branch feature extractor: one linear map into K part vectors, pooled
/// into GAP/GMP globals and a concatenated local feature.
#[derive(Debug, Clone)]
struct PartNet {
    encoder: LinearEncoder,
    parts: usize,
    part_dim: usize,
}

struct PartForward {
    parts: PartFeatures,
    gap: EmbeddingMatrix,
    gmp: EmbeddingMatrix,
    local: EmbeddingMatrix,
}

impl PartNet {
    fn init(d_in: usize, parts: usize, part_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { encoder: LinearEncoder::init(d_in, parts * part_dim, rng), parts, part_dim }
    }

    fn rebuilt_from(&self, flat: &[f64]) -> Self {
        Self {
            encoder: LinearEncoder::from_flat(
                self.encoder.d_in(),
                self.parts * self.part_dim,
                flat,
            ),
            parts: self.parts,
            part_dim: self.part_dim,
        }
    }

    fn forward(&self, x: &EmbeddingMatrix) -> PartForward {
        let flat = self.encoder.forward(x);
        let parts = PartFeatures::from_flat(
            flat.n(),
            self.parts,
            self.part_dim,
            flat.values().iter().copied().collect(),
        )
        .expect("finite encoder output");
        let (gap, _) = part_pool(&parts, PoolMode::Gap, false);
        let (gmp, local) = part_pool(&parts, PoolMode::Gmp, true);
        PartForward { parts, gap, gmp, local }
    }

    /// Folds branch gradients back into encoder parameter gradients.
    fn backward(
        &self,
        x: &EmbeddingMatrix,
        fwd: &PartForward,
        d_gap: Option<&Array2<f64>>,
        d_gmp: Option<&Array2<f64>>,
        d_local: Option<&Array2<f64>>,
    ) -> (Array2<f64>, ndarray::Array1<f64>) {
        let (n, k, d) = (fwd.parts.n(), self.parts, self.part_dim);
        let mut d_parts = ndarray::Array3::zeros((n, k, d));
        if let Some(g) = d_gap {
            d_parts = d_parts + part_pool_backward(&fwd.parts, PoolMode::Gap, g);
        }
        if let Some(g) = d_gmp {
            d_parts = d_parts + part_pool_backward(&fwd.parts, PoolMode::Gmp, g);
        }
        if let Some(g) = d_local {
            d_parts = d_parts + concat_backward(n, k, d, g);
        }
        let d_flat =
            Array2::from_shape_vec((n, k * d), d_parts.iter().copied().collect()).unwrap();
        let (d_w, d_b, _) = self.encoder.backward(x, &d_flat);
        (d_w, d_b)
    }
}

/// Classifier head whose rows start at the (normalized) cluster centroids.
fn head_from_centroids(cents: &CentroidSet) -> LinearEncoder {
    let l = cents.len();
    let d = cents.means().ncols();
    let mut weight = Array2::zeros((d, l));
    for c in 0..l {
        let row = cents.means().row(c);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for k in 0..d {
            weight[(k, c)] = row[k] / norm;
        }
    }
    LinearEncoder { weight, bias: ndarray::Array1::zeros(l) }
}

/// Output of a self-training run.
#[derive(Debug, Clone)]
pub struct DaprhResult {
    pub student: LinearEncoder,
    pub teacher_params: Vec<f64>,
    pub log: TrainLog,
    pub final_metrics: MetricSummary,
}

fn gmp_metrics(net: &PartNet, data: &SyntheticDataset) -> Result<MetricSummary> {
    // training never sees labels; ground truth scores the final features
    let meta = SampleMeta::new(data.ground_truth.clone(), data.meta.cameras().to_vec())?;
    let fwd = net.forward(&data.features);
    let f = l2_normalize(&fwd.gmp)?;
    let ranking = rank_gallery(
        (&f, &meta),
        (&f, &meta),
        Metric::Euclidean,
        &crate::pipeline::eval_options(&meta),
    )?;
    MetricSummary::from_ranking(&ranking)
}

/// Stage-II self-training on the unlabeled target; supplying `source` turns
/// on the two-domain extras (quality-weighted supervised losses and the
/// domain scorer pair).
pub fn train_daprh_stage2(
    target: &SyntheticDataset,
    source: Option<&SyntheticDataset>,
    cfg: &RunConfig,
) -> Result<DaprhResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_raw = target.features.dim();
    let mut student = PartNet::init(d_raw, cfg.parts, cfg.embed_dim, &mut rng);
    let mut opt = Sgd::new(&student.encoder, cfg.learning_rate, cfg.sgd_momentum);
    let mut teacher = TeacherState::from_student(&student.encoder.flat_params(), cfg.teacher_weight);

    // source-side machinery is fixed across epochs
    let (src_classes, num_src_classes) = match source {
        Some(s) => class_table(&s.meta),
        None => (BTreeMap::new(), 0),
    };
    let mut src_head = if source.is_some() {
        Some(LinearEncoder::init(cfg.embed_dim, num_src_classes, &mut rng))
    } else {
        None
    };
    let mut src_head_opt = src_head
        .as_ref()
        .map(|h| Sgd::new(h, cfg.learning_rate, cfg.sgd_momentum));
    let mut dnet = DnetScorer::zeros(cfg.embed_dim);

    let mut log = TrainLog::default();
    let sign = if cfg.paper_literal_sign {
        SoftAssignSign::PaperLiteral
    } else {
        SoftAssignSign::NegatedDistance
    };

    for epoch in 0..cfg.epochs {
        // the teacher produces the epoch's pseudo-labels
        let teacher_net = student.rebuilt_from(teacher.params());
        let t_fwd = teacher_net.forward(&target.features);
        let t_gmp = l2_normalize(&t_fwd.gmp)?;
        let assignment = crate::pipeline::epoch_clustering(&t_gmp, cfg)?;
        let ari = adjusted_rand_index(
            &assignment_labels_with_noise_singletons(&assignment),
            &target.ground_truth,
        );
        if assignment.num_clusters() == 0 {
            log.push_epoch(
                epoch,
                BTreeMap::from([
                    ("ari".to_string(), ari),
                    ("clusters".to_string(), 0.0),
                    ("skipped".to_string(), 1.0),
                ]),
            );
            continue;
        }
        let num_clusters = assignment.num_clusters();
        let keep = assignment.non_noise_indices();
        let kept_features = t_gmp.select_rows(&keep);
        let kept_assignment = ClusterAssignment::new(
            keep.iter().map(|&i| assignment.get(i)).collect(),
            num_clusters,
        )?;

        // silhouette-filtered centroids; a single cluster falls back to the
        // plain means (silhouette undefined there)
        let cents = match silhouette(
            &pairwise_distances(&kept_features, &kept_features, Metric::Euclidean)?,
            &kept_assignment,
        ) {
            Ok(s) => confident_centroids(&kept_features, &kept_assignment, &s, cfg.sigma_threshold)?,
            Err(Error::FewerThanTwoClusters) => centroids(&kept_features, &kept_assignment)?,
            Err(e) => return Err(e),
        };
        let g = soft_assignment_matrix(&kept_features, &cents, cfg.tau_refine, sign);
        let hard = SoftLabelMatrix::one_hot_from_assignment(&kept_assignment)?;
        let refined = refine_labels(&hard, &g, cfg.refine_alpha)?;

        // classifier heads restart from the epoch's centroids on both branches
        let t_gap_kept = t_fwd.gap.select_rows(&keep);
        let t_local_kept = t_fwd.local.select_rows(&keep);
        let gap_cents = centroids(&t_gap_kept, &kept_assignment)?;
        let local_cents = centroids(&t_local_kept, &kept_assignment)?;
        let mut head_g = head_from_centroids(&gap_cents);
        let mut head_l = head_from_centroids(&local_cents);
        let mut head_g_opt = Sgd::new(&head_g, cfg.learning_rate, cfg.sgd_momentum);
        let mut head_l_opt = Sgd::new(&head_l, cfg.learning_rate, cfg.sgd_momentum);
        // the teacher's heads shadow the student's within the epoch
        let mut teacher_head_g = TeacherState::from_student(&head_g.flat_params(), cfg.teacher_weight);
        let mut teacher_head_l = TeacherState::from_student(&head_l.flat_params(), cfg.teacher_weight);

        let pseudo_meta = SampleMeta::new(
            keep.iter()
                .map(|&i| assignment.get(i).unwrap() as i64)
                .collect(),
            keep.iter().map(|&i| target.meta.camera(i)).collect(),
        )?;
        let p_eff = cfg.batch_p.min(num_clusters);
        let batches = (keep.len() / (p_eff * cfg.batch_k)).max(1);
        for batch in 0..batches {
            let pk = pk_sample(&pseudo_meta, p_eff, cfg.batch_k, &mut rng)?;
            let kept_rows: Vec<usize> = pk.indices().to_vec();
            let rows: Vec<usize> = kept_rows.iter().map(|&i| keep[i]).collect();
            let x = target.features.select_rows(&rows);
            let pseudo: Vec<i64> = kept_rows
                .iter()
                .map(|&i| pseudo_meta.label(i))
                .collect();
            let refined_batch = SoftLabelMatrix::new(
                ndarray::Array2::from_shape_fn((rows.len(), num_clusters), |(r, c)| {
                    refined.values()[(kept_rows[r], c)]
                }),
            )?;

            // student forward, both branches
            let s_fwd = student.forward(&x);
            let p_global = head_g.forward(&s_fwd.gap);
            let p_local = head_l.forward(&s_fwd.local);

            // teacher forward with its current parameters
            let teacher_net = student.rebuilt_from(teacher.params());
            let t_fwd_b = teacher_net.forward(&x);
            let teacher_head = LinearEncoder::from_flat(
                cfg.embed_dim,
                num_clusters,
                teacher_head_g.params(),
            );
            let q_global = teacher_head.forward(&t_fwd_b.gap);

            let id = loss::identity_two_branch(
                p_global.values(),
                p_local.values(),
                IdentityTarget::Soft(&refined_batch),
            )?;
            let kl = remap(
                loss::kl_distill(p_global.values(), q_global.values())?,
                roles::STUDENT_LOGITS,
                roles::GLOBAL_LOGITS,
            );
            let tri = loss::batch_hard_triplet(&s_fwd.gmp, &pseudo, &cfg.loss)?;
            let stri = remap(
                loss::soft_triplet_distill(&s_fwd.gmp, &t_fwd_b.gmp, &pseudo)?,
                roles::STUDENT,
                roles::EMBEDDINGS,
            );
            let total = loss::usl_total(&id, &kl, &tri, &stri, &cfg.loss);

            // backward: heads, then branches, then the shared encoder
            let d_pg = total.grad(roles::GLOBAL_LOGITS).expect("global logits");
            let d_pl = total.grad(roles::LOCAL_LOGITS).expect("local logits");
            let (d_wg, d_bg, d_gap) = head_g.backward(&s_fwd.gap, d_pg);
            let (d_wl, d_bl, d_local) = head_l.backward(&s_fwd.local, d_pl);
            let d_gmp = total.grad(roles::EMBEDDINGS).expect("gmp gradient").clone();
            let (mut d_w, mut d_b) =
                student.backward(&x, &s_fwd, Some(&d_gap), Some(&d_gmp), Some(&d_local));

            let mut batch_losses = BTreeMap::from([
                ("id".to_string(), id.value),
                ("kl".to_string(), kl.value),
                ("tri".to_string(), tri.value),
                ("stri".to_string(), stri.value),
                ("total".to_string(), total.value),
            ]);

            // optional two-domain extras
            if let (Some(src), Some(head)) = (source, src_head.as_mut()) {
                let src_pk = pk_sample(&src.meta, cfg.batch_p.min(num_src_classes), cfg.batch_k, &mut rng)?;
                let src_x = src.features.select_rows(src_pk.indices());
                let src_labels: Vec<i64> =
                    src_pk.indices().iter().map(|&i| src.meta.label(i)).collect();
                let src_ids: Vec<usize> = src_labels.iter().map(|l| src_classes[l]).collect();
                let src_fwd = student.forward(&src_x);
                let src_logits = head.forward(&src_fwd.gap);

                // quality-weighted supervised pair on the source batch
                let z = loss::quality_scores(&src_fwd.gmp, cfg.loss.quality_h);
                let ce_ps = loss::cross_entropy_per_sample(src_logits.values(), &src_ids)?;
                let tri_ps = loss::batch_hard_triplet_per_sample(&src_fwd.gmp, &src_labels, &cfg.loss)?;
                let weighted = loss::quality_weighted(&ce_ps.add(&tri_ps), &z, cfg.loss.lambda_z);

                // the domain scorer trains first, on the current features
                let src_scores = loss::dnet_forward(&src_fwd.gmp, &dnet)?;
                let tgt_scores = loss::dnet_forward(&s_fwd.gmp, &dnet)?;
                let dl = loss::dnet_loss(&src_scores, &tgt_scores);
                let ds: Vec<f64> = dl.grad(roles::SOURCE_SCORES).unwrap().iter().copied().collect();
                let dt: Vec<f64> = dl.grad(roles::TARGET_SCORES).unwrap().iter().copied().collect();
                let gs = loss::dnet_backward(&src_fwd.gmp, &dnet, &src_scores, &ds);
                let gt = loss::dnet_backward(&s_fwd.gmp, &dnet, &tgt_scores, &dt);
                dnet.weight = &dnet.weight - &((&gs.weight + &gt.weight) * cfg.dnet_learning_rate);
                dnet.bias -= (gs.bias + gt.bias) * cfg.dnet_learning_rate;

                // then the model sees the confusion objective
                let src_scores = loss::dnet_forward(&src_fwd.gmp, &dnet)?;
                let tgt_scores = loss::dnet_forward(&s_fwd.gmp, &dnet)?;
                let dim = loss::dim_loss(&src_scores, &tgt_scores);
                let ds: Vec<f64> = dim.grad(roles::SOURCE_SCORES).unwrap().iter().copied().collect();
                let dt: Vec<f64> = dim.grad(roles::TARGET_SCORES).unwrap().iter().copied().collect();
                let dim_src = loss::dnet_backward(&src_fwd.gmp, &dnet, &src_scores, &ds);
                let dim_tgt = loss::dnet_backward(&s_fwd.gmp, &dnet, &tgt_scores, &dt);

                // source batch backward through the student
                let d_src_logits = weighted.grad(roles::LOGITS).expect("source ce");
                let (d_wh, d_bh, d_src_gap) = head.backward(&src_fwd.gap, d_src_logits);
                let d_src_gmp = weighted.grad(roles::EMBEDDINGS).expect("source tri").clone()
                    + &(&dim_src.embeddings * cfg.loss.lambda_dim);
                let (sw, sb) = student.backward(
                    &src_x,
                    &src_fwd,
                    Some(&d_src_gap),
                    Some(&d_src_gmp),
                    None,
                );
                d_w = d_w + sw;
                d_b = d_b + sb;
                // the target batch's confusion gradient joins the main pass
                let (tw, tb) = student.backward(
                    &x,
                    &s_fwd,
                    None,
                    Some(&(&dim_tgt.embeddings * cfg.loss.lambda_dim)),
                    None,
                );
                d_w = d_w + tw;
                d_b = d_b + tb;
                src_head_opt.as_mut().unwrap().step(head, &d_wh, &d_bh);

                batch_losses.insert("src_supervised".to_string(), weighted.value);
                batch_losses.insert("dnet".to_string(), dl.value);
                batch_losses.insert("dim".to_string(), dim.value);
            }

            opt.step(&mut student.encoder, &d_w, &d_b);
            head_g_opt.step(&mut head_g, &d_wg, &d_bg);
            head_l_opt.step(&mut head_l, &d_wl, &d_bl);

            // EMA follows every student step
            teacher_update(&mut teacher, &student.encoder.flat_params())?;
            teacher_update(&mut teacher_head_g, &head_g.flat_params())?;
            teacher_update(&mut teacher_head_l, &head_l.flat_params())?;

            log.push_batch(epoch, batch, batch_losses);
        }
        log.push_epoch(
            epoch,
            BTreeMap::from([
                ("ari".to_string(), ari),
                ("clusters".to_string(), num_clusters as f64),
                ("noise".to_string(), assignment.noise_count() as f64),
            ]),
        );
    }

    let final_metrics = gmp_metrics(&student, target)?;
    Ok(DaprhResult {
        student: student.encoder.clone(),
        teacher_params: teacher.params().to_vec(),
        log,
        final_metrics,
    })
}

fn remap(out: LossOutput, from: &str, to: &str) -> LossOutput {
    let mut grads = out.grads;
    if let Some(g) = grads.remove(from) {
        grads.insert(to.to_string(), g);
    }
    LossOutput { value: out.value, grads }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SyntheticSpec};

    fn quick_cfg() -> RunConfig {
        RunConfig {
            epochs: 2,
            batch_p: 4,
            batch_k: 4,
            cluster: crate::cluster::ClusterConfig {
                epsilon: 0.5,
                min_pts: 4,
                metric: Metric::Euclidean,
            },
            ..Default::default()
        }
    }

    #[test]
    fn reduces_to_hard_self_training_at_zero_weights() {
        let data = synth_dataset(&SyntheticSpec::two_domain_target(11)).blinded();
        let mut cfg = quick_cfg();
        cfg.refine_alpha = 0.0;
        cfg.loss.w1 = 0.0;
        cfg.loss.w2 = 0.0;
        let result = train_daprh_stage2(&data, None, &cfg).unwrap();
        for b in &result.log.batches {
            let expected = b.losses["id"] + b.losses["tri"];
            assert!(
                (b.losses["total"] - expected).abs() < 1e-12,
                "total {} vs id+tri {}",
                b.losses["total"],
                expected
            );
        }
    }

    #[test]
    fn frozen_teacher_with_unit_weight() {
        let data = synth_dataset(&SyntheticSpec::two_domain_target(12)).blinded();
        let mut cfg = quick_cfg();
        cfg.teacher_weight = 1.0;
        cfg.epochs = 1;
        let result = train_daprh_stage2(&data, None, &cfg).unwrap();
        // the teacher never moved: it still equals the initial student params
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = PartNet::init(data.features.dim(), cfg.parts, cfg.embed_dim, &mut rng);
        assert_eq!(result.teacher_params, init.encoder.flat_params());
    }

    #[test]
    fn two_domain_mode_logs_domain_losses() {
        let target = synth_dataset(&SyntheticSpec::two_domain_target(13)).blinded();
        let source = synth_dataset(&SyntheticSpec::easy(14));
        let cfg = RunConfig { epochs: 1, ..quick_cfg() };
        let result = train_daprh_stage2(&target, Some(&source), &cfg).unwrap();
        let b = &result.log.batches[0];
        assert!(b.losses.contains_key("dnet"));
        assert!(b.losses.contains_key("dim"));
        assert!(b.losses.contains_key("src_supervised"));
    }

    #[test]
    fn deterministic_per_seed() {
        let data = synth_dataset(&SyntheticSpec::two_domain_target(15)).blinded();
        let cfg = quick_cfg();
        let a = train_daprh_stage2(&data, None, &cfg).unwrap();
        let b = train_daprh_stage2(&data, None, &cfg).unwrap();
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    }
}
