//! Camera-aware unsupervised training loop: per-epoch DBSCAN pseudo-labels,
//! cluster and camera-proxy memories, and the combined contrastive objective.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::{camera_subclusters, centroids};
use crate::embedding::{
    l2_normalize, l2_normalize_backward, pk_sample, EmbeddingMatrix, Metric, SampleMeta,
};
use crate::encoder::{LinearEncoder, Sgd};
use crate::error::Result;
use crate::eval::{
    adjusted_rand_index, assignment_labels_with_noise_singletons, rank_gallery, MetricSummary,
};
use crate::loss::{self, roles};
use crate::memory::{init_memory, memory_update, proxy_update};
use crate::parts::{eir_fuse, PartFeatures, TokenProjection};
use crate::pipeline::{RunConfig, TrainLog};
use crate::synth::SyntheticDataset;

/// Precomputed token features with their attention scores, for the optional
/// fused-feature input path.
#[derive(Debug, Clone)]
pub struct TokenData {
    pub tokens: PartFeatures,
    pub attention: Vec<f64>,
}

/// Output of a camera-aware unsupervised run.
#[derive(Debug, Clone)]
pub struct VitcResult {
    pub encoder: LinearEncoder,
    pub log: TrainLog,
    pub final_metrics: MetricSummary,
}

fn encoded_metrics(
    encoder: &LinearEncoder,
    raw: &EmbeddingMatrix,
    data: &SyntheticDataset,
) -> Result<MetricSummary> {
    // training never sees labels; ground truth scores the final features
    let meta = SampleMeta::new(data.ground_truth.clone(), data.meta.cameras().to_vec())?;
    let f = l2_normalize(&encoder.forward(raw))?;
    let ranking = rank_gallery(
        (&f, &meta),
        (&f, &meta),
        Metric::Euclidean,
        &crate::pipeline::eval_options(&meta),
    )?;
    MetricSummary::from_ranking(&ranking)
}

/// Trains on unlabeled multi-camera data. Identity labels in `data.meta` are
/// ignored; `data.ground_truth` is used only to score the epoch clusterings.
pub fn train_vitc(
    data: &SyntheticDataset,
    tokens: Option<&TokenData>,
    cfg: &RunConfig,
) -> Result<VitcResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // with token features the encoder consumes the fused representation
    let raw = match tokens {
        Some(t) => eir_fuse(
            &t.tokens,
            &t.attention,
            cfg.eir_fraction,
            &TokenProjection::identity(),
            &data.features,
        )?,
        None => data.features.clone(),
    };
    let mut encoder = LinearEncoder::init(raw.dim(), cfg.embed_dim, &mut rng);
    let mut opt = Sgd::new(&encoder, cfg.learning_rate, cfg.sgd_momentum);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let features = l2_normalize(&encoder.forward(&raw))?;
        let assignment = crate::pipeline::epoch_clustering(&features, cfg)?;
        let ari = adjusted_rand_index(
            &assignment_labels_with_noise_singletons(&assignment),
            &data.ground_truth,
        );
        if assignment.num_clusters() == 0 {
            // nothing to contrast against: skip the epoch, keep the record
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

        let cents = centroids(&features, &assignment)?;
        let mut bank = init_memory(&cents, cfg.memory_momentum, true)?;
        let mut proxies = camera_subclusters(&features, &assignment, &data.meta)?
            .with_momentum(cfg.memory_momentum)
            .normalized();

        // batches are drawn from the clustered samples under pseudo-labels
        let keep = assignment.non_noise_indices();
        let pseudo_meta = SampleMeta::new(
            keep.iter()
                .map(|&i| assignment.get(i).unwrap() as i64)
                .collect(),
            keep.iter().map(|&i| data.meta.camera(i)).collect(),
        )?;
        let p_eff = cfg.batch_p.min(assignment.num_clusters());
        let batches = (keep.len() / (p_eff * cfg.batch_k)).max(1);
        for batch in 0..batches {
            let pk = pk_sample(&pseudo_meta, p_eff, cfg.batch_k, &mut rng)?;
            let rows: Vec<usize> = pk.indices().iter().map(|&i| keep[i]).collect();
            let x = raw.select_rows(&rows);
            let pre = encoder.forward(&x);
            let q = l2_normalize(&pre)?;
            let batch_assignment: Vec<Option<usize>> =
                rows.iter().map(|&i| assignment.get(i)).collect();
            let batch_meta = data.meta.select(&rows);

            let nce = loss::cluster_nce(&q, &batch_assignment, &bank, &cfg.loss)?;
            let cap = loss::cap_loss(&q, &batch_meta, &batch_assignment, &proxies, &cfg.loss)?;
            let total = loss::vitc_total(&nce, &cap, &cfg.loss);

            let d_q = total.grad(roles::QUERIES).expect("queries gradient");
            let d_pre = l2_normalize_backward(&pre, d_q);
            let (d_w, d_b, _) = encoder.backward(&x, &d_pre);
            opt.step(&mut encoder, &d_w, &d_b);

            // memory maintenance with the batch's features
            for (slot, &row) in rows.iter().enumerate() {
                let cluster = assignment.get(row).unwrap();
                memory_update(&mut bank, q.row(slot), cluster)?;
                proxy_update(&mut proxies, q.row(slot), cluster, data.meta.camera(row))?;
            }

            log.push_batch(
                epoch,
                batch,
                BTreeMap::from([
                    ("nce".to_string(), nce.value),
                    ("cap".to_string(), cap.value),
                    ("total".to_string(), total.value),
                ]),
            );
        }
        log.push_epoch(
            epoch,
            BTreeMap::from([
                ("ari".to_string(), ari),
                ("clusters".to_string(), assignment.num_clusters() as f64),
                ("noise".to_string(), assignment.noise_count() as f64),
            ]),
        );
    }

    let final_metrics = encoded_metrics(&encoder, &raw, data)?;
    Ok(VitcResult { encoder, log, final_metrics })
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
    fn lambda_zero_runs_pure_cluster_nce() {
        let data = synth_dataset(&SyntheticSpec::camera_offset(3)).blinded();
        let mut cfg = quick_cfg();
        cfg.loss.lambda_cap = 0.0;
        let result = train_vitc(&data, None, &cfg).unwrap();
        for b in &result.log.batches {
            assert!((b.losses["total"] - b.losses["nce"]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_camera_data_still_trains() {
        let spec = SyntheticSpec {
            cameras: 1,
            samples_per_pair: 16,
            camera_offset: 0.0,
            ..SyntheticSpec::camera_offset(4)
        };
        let data = synth_dataset(&spec).blinded();
        let cfg = quick_cfg();
        let result = train_vitc(&data, None, &cfg).unwrap();
        assert!(!result.log.epochs.is_empty());
    }

    #[test]
    fn token_fusion_path_runs() {
        use rand::{Rng, SeedableRng};
        let data = synth_dataset(&SyntheticSpec::camera_offset(5)).blinded();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let m = 4;
        let d = data.features.dim();
        let flat: Vec<f64> = (0..data.len() * m * d)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let tokens = TokenData {
            tokens: PartFeatures::from_flat(data.len(), m, d, flat).unwrap(),
            attention: (0..m).map(|i| 1.0 / (i + 1) as f64).collect(),
        };
        let cfg = RunConfig { epochs: 1, ..quick_cfg() };
        let result = train_vitc(&data, Some(&tokens), &cfg).unwrap();
        assert_eq!(result.encoder.d_in(), 2 * d);
    }

    #[test]
    fn deterministic_per_seed() {
        let data = synth_dataset(&SyntheticSpec::camera_offset(6)).blinded();
        let cfg = quick_cfg();
        let a = train_vitc(&data, None, &cfg).unwrap();
        let b = train_vitc(&data, None, &cfg).unwrap();
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        assert_eq!(a.final_metrics, b.final_metrics);
    }
}
